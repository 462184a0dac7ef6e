//! Optimization loop: two-view batches, loss assembly, Adam, the stepped
//! learning-rate schedule, and ablation switches.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureDataset, FrameFeatureSequence};
use crate::error::{Error, Result};
use crate::losses::{contrastive_loss_with_grad, masked_mse_with_grad, ContrastiveConfig};
use crate::masking::{keep_count, make_mask_plan, MaskPlan, SamplingStrategy};
use crate::model::{EncodeMode, Model, ModelConfig};
use crate::tensor::Mat;

/// Which pretext tasks are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Reconstruction only.
    NoContrastive,
    /// Contrastive only; the decoder is never run.
    NoRecon,
    /// All frames in one view, reconstruct all frames, no contrastive term.
    NoMask,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoContrastive,
        Ablation::NoRecon,
        Ablation::NoMask,
    ];

    pub fn uses_contrastive(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoRecon)
    }

    pub fn uses_recon(self) -> bool {
        !matches!(self, Ablation::NoRecon)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoContrastive => "no_contrastive",
            Ablation::NoRecon => "no_recon",
            Ablation::NoMask => "no_mask",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| {
                Error::arg(format!(
                    "unknown ablation {s:?} (full | no_contrastive | no_recon | no_mask)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_videos: usize,
    pub mask_ratio: f64,
    pub sampling_strategy: SamplingStrategy,
    pub contrastive: ContrastiveConfig,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub min_lr: f64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Write an intermediate checkpoint every this many epochs.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_videos: 64,
            mask_ratio: 0.75,
            sampling_strategy: SamplingStrategy::NonOverlapped,
            contrastive: ContrastiveConfig::default(),
            epochs: 50,
            base_lr: 1e-4,
            lr_decay: 0.9,
            decay_every: 20,
            min_lr: 1e-5,
            seed: 0,
            ablation: Ablation::Full,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    /// Large-batch settings of the original full-scale recipe.
    pub fn paper_scale() -> Self {
        TrainConfig {
            batch_videos: 512,
            epochs: 800,
            ..TrainConfig::default()
        }
    }

    /// Settings for the small desk-scale presets.
    pub fn desk() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.contrastive.validate()?;
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::arg(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::arg("base_lr must be positive"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::arg(format!(
                "min_lr {} must be within [0, base_lr {}]",
                self.min_lr, self.base_lr
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::arg("decay_every must be positive"));
        }
        if self.batch_videos == 0 {
            return Err(Error::arg("batch_videos must be positive"));
        }
        if self.ablation.uses_contrastive() && self.batch_videos < 2 {
            return Err(Error::arg("contrastive loss needs batch_videos >= 2"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::arg(format!("mask_ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::arg("checkpoint_every must be positive"));
        }
        Ok(())
    }

    /// Checks that masking is feasible for videos of `num_frames` frames.
    pub fn validate_for_frames(&self, num_frames: usize) -> Result<()> {
        if self.ablation == Ablation::NoMask {
            return Ok(());
        }
        let keep = keep_count(num_frames, self.mask_ratio)?;
        if self.sampling_strategy == SamplingStrategy::NonOverlapped && 2 * keep > num_frames {
            return Err(Error::arg(format!(
                "mask_ratio {} keeps {keep} of {num_frames} frames per view; two disjoint views do not fit",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

/// `max(min_lr, base_lr * lr_decay^floor(epoch / decay_every))`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = (epoch / cfg.decay_every.max(1)).min(i32::MAX as usize) as i32;
    (cfg.base_lr * cfg.lr_decay.powi(steps)).max(cfg.min_lr)
}

/// Adam with `(0.9, 0.999)` moments and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &[Mat]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect(),
        }
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn update(&mut self, params: &mut [Mat], grads: &[Option<Mat>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (p, m, v) = (&mut params[i], &mut self.m[i], &mut self.v[i]);
            for (((pv, mv), vv), gv) in p
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub recon: f64,
    pub contra: f64,
    pub total: f64,
    /// Number of reconstructed frame rows in the loss denominator, per view.
    pub recon_frames_per_view: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon: f64,
    pub contra: f64,
    pub total: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// One record per completed epoch, plus every step's losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepLosses>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,recon,contra,total,lr,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                r.epoch, r.recon, r.contra, r.total, r.lr, r.seconds
            ));
        }
        out
    }
}

/// Random streams keyed by (seed, epoch, purpose) so that runs are
/// reproducible and can be resumed at an epoch boundary.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Shuffle = 0,
    Mask = 1,
}

pub fn stream_rng(seed: u64, epoch: usize, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch as u64) << 4 | purpose as u64);
    rng
}

/// One optimization step on `batch`. Returns the step's losses.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&FrameFeatureSequence],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<StepLosses> {
    let (grads, losses) = step_gradients(model, batch, cfg, EncodeMode::Train, rng)?;
    adam.update(model.params_mut(), &grads, lr);
    if !model.all_finite() {
        return Err(Error::Numerical("non-finite parameter after update".into()));
    }
    Ok(losses)
}

/// Losses and parameter gradients of one batch, without updating.
pub fn step_gradients<R: Rng + ?Sized>(
    model: &Model,
    batch: &[&FrameFeatureSequence],
    cfg: &TrainConfig,
    mode: EncodeMode,
    rng: &mut R,
) -> Result<(Vec<Option<Mat>>, StepLosses)> {
    let first = batch.first().ok_or_else(|| Error::arg("empty batch"))?;
    let m = first.num_frames();
    let d = first.dim();
    if batch.iter().any(|s| s.frames.shape() != (m, d)) {
        return Err(Error::arg("batch mixes frame shapes"));
    }
    if d != model.config().feature_dim {
        return Err(Error::Config(format!(
            "data dim {d} does not match model feature_dim {}",
            model.config().feature_dim
        )));
    }
    if m > model.config().max_frames {
        return Err(Error::Config(format!(
            "videos have {m} frames, model max_frames is {}",
            model.config().max_frames
        )));
    }
    let ablation = cfg.ablation;
    if ablation.uses_contrastive() && batch.len() < 2 {
        return Err(Error::arg("contrastive loss needs at least 2 videos per batch"));
    }

    // Views in (2v, 2v + 1) order; the no-mask ablation uses one full view.
    let plans: Vec<MaskPlan> = if ablation == Ablation::NoMask {
        vec![MaskPlan::full(m); batch.len()]
    } else {
        batch
            .iter()
            .map(|_| make_mask_plan(m, cfg.mask_ratio, cfg.sampling_strategy, rng))
            .collect::<Result<_>>()?
    };
    let mut views: Vec<(usize, &[usize], &[usize])> = Vec::with_capacity(2 * batch.len());
    for (v, p) in plans.iter().enumerate() {
        views.push((v, &p.view_a, &p.masked_a));
        if ablation != Ablation::NoMask {
            views.push((v, &p.view_b, &p.masked_b));
        }
    }
    let keep = views[0].1.len();

    let mut rows = Vec::with_capacity(views.len() * keep);
    let mut positions = Vec::with_capacity(views.len() * keep);
    for &(v, kept, _) in &views {
        for &t in kept {
            rows.push(batch[v].frames.row(t).to_vec());
            positions.push(t);
        }
    }
    let input = Mat::from_rows(&rows);

    let mut fw = model.forward();
    let x = fw.graph.input(input);
    let enc = fw.encode(x, positions, keep, mode);

    let mut losses = StepLosses::default();
    let mut terms = Vec::new();

    if ablation.uses_contrastive() {
        let codes = fw.graph.value(enc.codes).clone();
        let (value, grad) = contrastive_loss_with_grad(&codes, &cfg.contrastive)?;
        losses.contra = value;
        let node = fw.graph.precomputed(enc.codes, value, grad);
        terms.push(fw.graph.scale(node, cfg.contrastive.alpha));
    }

    if ablation.uses_recon() {
        let kept: Vec<&[usize]> = views.iter().map(|v| v.1).collect();
        let recon = fw.decode(enc.tokens, &kept, m);
        let targets: Vec<&Mat> = views.iter().map(|&(v, _, _)| &batch[v].frames).collect();
        let target = Mat::vstack(&targets);
        let masked_rows: Vec<usize> = views
            .iter()
            .enumerate()
            .flat_map(|(s, &(_, _, masked))| masked.iter().map(move |&t| s * m + t))
            .collect();
        // Equal masked counts per view make this the mean of the per-view
        // reconstruction losses.
        let (value, grad) = masked_mse_with_grad(fw.graph.value(recon), &target, &masked_rows)?;
        losses.recon = value;
        losses.recon_frames_per_view = views[0].2.len();
        terms.push(fw.graph.precomputed(recon, value, grad));
    }

    losses.total = losses.recon + cfg.contrastive.alpha * losses.contra;
    if !losses.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {:?}", losses)));
    }
    let loss = match terms.as_slice() {
        [] => return Err(Error::arg("ablation leaves no active loss")),
        [one] => *one,
        [a, b] => fw.graph.add(*a, *b),
        _ => unreachable!("at most two loss terms"),
    };
    let grads = fw.backward(loss).grads;
    Ok((grads, losses))
}

/// Options for [`fit`] that do not affect the optimization itself.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory for `checkpoint_every` snapshots (`epoch_<n>.cmhm`).
    pub checkpoint_dir: Option<PathBuf>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

/// Initializes a model from `model_cfg` (seeded by `train_cfg.seed`) and
/// trains it for `train_cfg.epochs` full passes over `train_set`.
pub fn fit(
    train_set: &FeatureDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<(Model, TrainLog)> {
    let model = Model::new(model_cfg.clone(), train_cfg.seed)?;
    fit_from(model, train_set, train_cfg, opts)
}

pub fn fit_from(
    mut model: Model,
    train_set: &FeatureDataset,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    cfg.validate_for_frames(train_set.num_frames)?;
    if train_set.dim != model.config().feature_dim {
        return Err(Error::Config(format!(
            "dataset dim {} does not match model feature_dim {}",
            train_set.dim,
            model.config().feature_dim
        )));
    }
    let min_batch = if cfg.ablation.uses_contrastive() { 2 } else { 1 };
    if train_set.len() < min_batch {
        return Err(Error::arg("training set smaller than the minimum batch"));
    }

    let mut adam = Adam::new(model.params());
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, epoch, Stream::Shuffle));
        let mut mask_rng = stream_rng(cfg.seed, epoch, Stream::Mask);

        let (mut recon, mut contra, mut total, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_videos) {
            if chunk.len() < min_batch {
                continue;
            }
            let batch: Vec<&FrameFeatureSequence> = chunk.iter().map(|&i| &train_set.sequences[i]).collect();
            let losses = train_step(&mut model, &mut adam, &batch, cfg, lr, &mut mask_rng)?;
            recon += losses.recon;
            contra += losses.contra;
            total += losses.total;
            steps += 1;
            log.steps.push(losses);
        }
        let n = steps.max(1) as f64;
        let record = EpochRecord {
            epoch,
            recon: recon / n,
            contra: contra / n,
            total: total / n,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>4}  recon {:.5}  contra {:.5}  total {:.5}  lr {:.2e}  {:.1}s",
                record.epoch, record.recon, record.contra, record.total, record.lr, record.seconds
            );
        }
        log.epochs.push(record);

        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &opts.checkpoint_dir) {
            if (epoch + 1) % every == 0 {
                model.save(dir.join(format!("epoch_{}.cmhm", epoch + 1)))?;
            }
        }
    }
    Ok((model, log))
}
