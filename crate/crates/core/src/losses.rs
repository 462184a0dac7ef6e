//! Reconstruction, debiased contrastive and combined objectives.
//!
//! Each loss exposes a plain value function and, where the trainer needs it,
//! a variant returning the gradient with respect to its matrix input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Temperature, class prior and loss weight of the contrastive term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub rho: f64,
    pub alpha: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.5,
            rho: 0.1,
            alpha: 1.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::arg(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::arg(format!("rho must be in [0, 1), got {}", self.rho)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::arg(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Mean squared error over the masked frames of each video, normalized by
/// `d` times the total number of masked frames.
pub fn recon_loss(originals: &[&Mat], reconstructions: &[&Mat], masked_sets: &[&[usize]]) -> Result<f64> {
    if originals.len() != reconstructions.len() || originals.len() != masked_sets.len() {
        return Err(Error::arg("recon_loss: per-video inputs have different lengths"));
    }
    if originals.is_empty() {
        return Err(Error::arg("recon_loss: no videos"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut dim = None;
    for ((orig, rec), masked) in originals.iter().zip(reconstructions).zip(masked_sets) {
        if orig.shape() != rec.shape() {
            return Err(Error::arg(format!(
                "recon_loss: original {:?} vs reconstruction {:?}",
                orig.shape(),
                rec.shape()
            )));
        }
        if *dim.get_or_insert(orig.cols()) != orig.cols() {
            return Err(Error::arg("recon_loss: feature dims differ across videos"));
        }
        if masked.is_empty() {
            return Err(Error::arg("recon_loss: empty masked set"));
        }
        for &m in *masked {
            if m >= orig.rows() {
                return Err(Error::arg(format!("recon_loss: masked index {m} out of range")));
            }
            sum += orig
                .row(m)
                .iter()
                .zip(rec.row(m))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        count += masked.len();
    }
    Ok(sum / (dim.unwrap_or(1) * count) as f64)
}

/// [`recon_loss`] over stacked matrices: rows `rows` of `pred` against the
/// same rows of `target`. Returns the value and `d(loss)/d(pred)`.
pub fn masked_mse_with_grad(pred: &Mat, target: &Mat, rows: &[usize]) -> Result<(f64, Mat)> {
    if pred.shape() != target.shape() {
        return Err(Error::arg("masked_mse: shape mismatch"));
    }
    if rows.is_empty() {
        return Err(Error::arg("masked_mse: empty masked set"));
    }
    let denom = (rows.len() * pred.cols()) as f64;
    let mut grad = Mat::zeros(pred.rows(), pred.cols());
    let mut sum = 0.0;
    for &r in rows {
        let g = grad.row_mut(r);
        for ((gv, p), t) in g.iter_mut().zip(pred.row(r)).zip(target.row(r)) {
            let diff = p - t;
            sum += diff * diff;
            *gv += 2.0 * diff / denom;
        }
    }
    Ok((sum / denom, grad))
}

/// Cosine similarity.
pub fn similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::arg("similarity: length mismatch"));
    }
    let nx = norm(x);
    let ny = norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::arg("similarity: zero vector"));
    }
    Ok(dot(x, y) / (nx * ny))
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Intermediate quantities of one anchor/positive term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairTerms {
    /// `exp(sim(i, j) / tau)`.
    pub positive: f64,
    /// Bias-corrected negative mass before the clamp.
    pub negative: f64,
    /// `max(exp(-1/tau), negative / (1 - rho))`.
    pub negative_debiased: f64,
    /// True when the lower clamp `exp(-1/tau)` was selected.
    pub clamped: bool,
    pub loss: f64,
}

fn check_codes(codes: &Mat) -> Result<()> {
    if codes.rows() < 4 {
        return Err(Error::arg(format!(
            "contrastive loss needs at least 2 videos (4 rows), got {} rows",
            codes.rows()
        )));
    }
    if !codes.rows().is_multiple_of(2) {
        return Err(Error::arg(format!("contrastive loss needs an even row count, got {}", codes.rows())));
    }
    Ok(())
}

/// Cosine similarity matrix and row norms.
fn similarity_matrix(codes: &Mat) -> Result<(Mat, Vec<f64>)> {
    let n = codes.rows();
    let norms: Vec<f64> = (0..n).map(|r| norm(codes.row(r))).collect();
    if let Some(r) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::arg(format!("similarity: code row {r} is the zero vector")));
    }
    let mut sims = Mat::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let s = dot(codes.row(a), codes.row(b)) / (norms[a] * norms[b]);
            sims.set(a, b, s);
            sims.set(b, a, s);
        }
    }
    Ok((sims, norms))
}

fn pair_terms_from_sims(i: usize, j: usize, sims: &Mat, cfg: &ContrastiveConfig) -> PairTerms {
    let two_n = sims.rows();
    let positive = (sims.get(i, j) / cfg.tau).exp();
    let neg_sum: f64 = (0..two_n)
        .filter(|&k| k != i && k != j)
        .map(|k| (sims.get(i, k) / cfg.tau).exp())
        .sum();
    let negative = neg_sum / (two_n - 2) as f64 - cfg.rho * positive;
    let floor = (-1.0 / cfg.tau).exp();
    let corrected = negative / (1.0 - cfg.rho);
    let clamped = floor >= corrected;
    let negative_debiased = if clamped { floor } else { corrected };
    let loss = -(positive / (positive + (two_n - 2) as f64 * negative_debiased)).ln();
    PairTerms {
        positive,
        negative,
        negative_debiased,
        clamped,
        loss,
    }
}

/// Debiased contrastive term for anchor `i` and positive `j` (0-based rows).
pub fn debiased_pair_terms(i: usize, j: usize, codes: &Mat, cfg: &ContrastiveConfig) -> Result<PairTerms> {
    cfg.validate()?;
    check_codes(codes)?;
    if i == j || i >= codes.rows() || j >= codes.rows() {
        return Err(Error::arg(format!("invalid pair ({i}, {j}) for {} rows", codes.rows())));
    }
    let (sims, _) = similarity_matrix(codes)?;
    Ok(pair_terms_from_sims(i, j, &sims, cfg))
}

pub fn debiased_pair_loss(i: usize, j: usize, codes: &Mat, cfg: &ContrastiveConfig) -> Result<f64> {
    Ok(debiased_pair_terms(i, j, codes, cfg)?.loss)
}

/// Symmetric batch loss; rows `2v` and `2v + 1` are the two views of video `v`.
pub fn contrastive_loss(codes: &Mat, cfg: &ContrastiveConfig) -> Result<f64> {
    cfg.validate()?;
    check_codes(codes)?;
    let (sims, _) = similarity_matrix(codes)?;
    let two_n = codes.rows();
    let total: f64 = (0..two_n).map(|a| pair_terms_from_sims(a, a ^ 1, &sims, cfg).loss).sum();
    Ok(total / two_n as f64)
}

/// [`contrastive_loss`] together with its gradient w.r.t. `codes`.
pub fn contrastive_loss_with_grad(codes: &Mat, cfg: &ContrastiveConfig) -> Result<(f64, Mat)> {
    cfg.validate()?;
    check_codes(codes)?;
    let (sims, norms) = similarity_matrix(codes)?;
    let two_n = codes.rows();
    let k = codes.cols();
    let inv_tau = 1.0 / cfg.tau;
    let scale = 1.0 / two_n as f64;

    // dL/dS for ordered (anchor, other) pairs.
    let mut d_sims = Mat::zeros(two_n, two_n);
    let mut total = 0.0;
    for i in 0..two_n {
        let j = i ^ 1;
        let t = pair_terms_from_sims(i, j, &sims, cfg);
        total += t.loss;
        let denom = t.positive + (two_n - 2) as f64 * t.negative_debiased;
        // loss = -S_ij / tau + ln(denom)
        let mut d_pos = -inv_tau + t.positive * inv_tau / denom;
        if !t.clamped {
            let c = (two_n - 2) as f64 / (1.0 - cfg.rho);
            d_pos += -c * cfg.rho * t.positive * inv_tau / denom;
            for kk in 0..two_n {
                if kk == i || kk == j {
                    continue;
                }
                let e = (sims.get(i, kk) * inv_tau).exp();
                let d = e * inv_tau / ((1.0 - cfg.rho) * denom);
                d_sims.set(i, kk, d_sims.get(i, kk) + scale * d);
            }
        }
        d_sims.set(i, j, d_sims.get(i, j) + scale * d_pos);
    }

    // S_ab = <x_a, x_b> / (|a| |b|); dS_ab/dx_a = x_b/(|a||b|) - S_ab x_a/|a|^2.
    let mut grad = Mat::zeros(two_n, k);
    for a in 0..two_n {
        for b in 0..two_n {
            if a == b {
                continue;
            }
            let h = d_sims.get(a, b) + d_sims.get(b, a);
            if h == 0.0 {
                continue;
            }
            let s = sims.get(a, b);
            let (na, nb) = (norms[a], norms[b]);
            for c in 0..k {
                let xa = codes.get(a, c);
                let xb = codes.get(b, c);
                let g = grad.get(a, c) + h * (xb / (na * nb) - s * xa / (na * na));
                grad.set(a, c, g);
            }
        }
    }
    Ok((total * scale, grad))
}

/// `recon + alpha * contra`.
pub fn total_loss(recon: f64, contra: f64, alpha: f64) -> f64 {
    recon + alpha * contra
}
