//! Train, encode and evaluate in one call, plus baselines and sweeps.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureDataset;
use crate::error::{Error, Result};
use crate::model::{HashCode, Model, ModelConfig};
use crate::retrieval::{encode_dataset, evaluate_codes, CodeDatabase, EvalConfig, RetrievalReport};
use crate::trainer::{fit, Ablation, FitOptions, TrainConfig, TrainLog};

pub struct RunResult {
    pub model: Model,
    pub log: TrainLog,
    pub codes: CodeDatabase,
    pub report: RetrievalReport,
}

/// Trains on `data`, then encodes and evaluates the same videos.
pub fn train_and_evaluate(
    data: &FeatureDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    opts: &FitOptions,
) -> Result<RunResult> {
    eval_cfg.validate()?;
    let (model, log) = fit(data, model_cfg, train_cfg, opts)?;
    let codes = encode_dataset(&model, data)?;
    let report = evaluate_codes(&codes, eval_cfg)?;
    Ok(RunResult {
        model,
        log,
        codes,
        report,
    })
}

/// The same evaluation for a freshly initialized model.
pub fn untrained_report(
    data: &FeatureDataset,
    model_cfg: &ModelConfig,
    seed: u64,
    eval_cfg: &EvalConfig,
) -> Result<RetrievalReport> {
    let model = Model::new(model_cfg.clone(), seed)?;
    evaluate_codes(&encode_dataset(&model, data)?, eval_cfg)
}

/// Uniform random codes carrying the ids and labels of `like`.
pub fn random_codes(like: &CodeDatabase, seed: u64) -> Result<CodeDatabase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = like.code_length();
    let codes: Vec<HashCode> = (0..like.len())
        .map(|_| HashCode::from_bits((0..k).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()))
        .collect::<Result<_>>()?;
    let labels: Vec<Vec<u32>> = (0..like.len()).map(|i| like.labels(i)).collect();
    CodeDatabase::new(&codes, like.ids().to_vec(), &labels)
}

/// What a sweep varies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    MaskRatio(Vec<f64>),
    Ablation(Vec<Ablation>),
}

impl SweepAxis {
    pub fn len(&self) -> usize {
        match self {
            SweepAxis::MaskRatio(v) => v.len(),
            SweepAxis::Ablation(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::MaskRatio(_) => "mask_ratio",
            SweepAxis::Ablation(_) => "ablation",
        }
    }

    /// Settings as (label, training config derived from `base`).
    pub fn settings(&self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        match self {
            SweepAxis::MaskRatio(ratios) => ratios
                .iter()
                .map(|&r| (r.to_string(), TrainConfig { mask_ratio: r, ..base.clone() }))
                .collect(),
            SweepAxis::Ablation(list) => list
                .iter()
                .map(|&a| (a.to_string(), TrainConfig { ablation: a, ..base.clone() }))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub seed: u64,
    pub map_at_k: BTreeMap<usize, f64>,
}

impl fmt::Display for SweepRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} seed {}:", self.setting, self.seed)?;
        for (k, v) in &self.map_at_k {
            write!(f, " mAP@{k} {v:.4}")?;
        }
        Ok(())
    }
}

/// Runs every (setting, seed) pair in order. Each finished row is handed to
/// `on_row` before the next run starts, so a failure keeps earlier rows.
pub fn sweep(
    data: &FeatureDataset,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    eval_cfg: &EvalConfig,
    axis: &SweepAxis,
    seeds: &[u64],
    mut on_row: impl FnMut(&SweepRow) -> Result<()>,
) -> Result<Vec<SweepRow>> {
    if axis.is_empty() {
        return Err(Error::Config("sweep has no settings".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("sweep has no seeds".into()));
    }
    let settings = axis.settings(base);
    for (label, cfg) in &settings {
        cfg.validate()
            .and_then(|_| cfg.validate_for_frames(data.num_frames))
            .map_err(|e| Error::Config(format!("setting {label}: {e}")))?;
    }
    let mut rows = Vec::with_capacity(settings.len() * seeds.len());
    for (label, cfg) in settings {
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let run = train_and_evaluate(data, model_cfg, &cfg, eval_cfg, &FitOptions::default())?;
            let row = SweepRow {
                setting: label.clone(),
                seed,
                map_at_k: run.report.map_at_k,
            };
            on_row(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Header for [`sweep_csv_row`] lines.
pub fn sweep_csv_header(axis_name: &str, ks: &[usize]) -> String {
    let mut out = format!("{axis_name},seed");
    for k in ks {
        out.push_str(&format!(",map@{k}"));
    }
    out
}

pub fn sweep_csv_row(row: &SweepRow, ks: &[usize]) -> String {
    let mut out = format!("{},{}", row.setting, row.seed);
    for k in ks {
        match row.map_at_k.get(k) {
            Some(v) => out.push_str(&format!(",{v}")),
            None => out.push(','),
        }
    }
    out
}

/// Mean mAP@`k` per setting, in first-seen order.
pub fn mean_by_setting(rows: &[SweepRow], k: usize) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for row in rows {
        let v = row.map_at_k.get(&k).copied().unwrap_or(f64::NAN);
        match out.iter_mut().find(|(s, _, _)| *s == row.setting) {
            Some(entry) => {
                entry.1 += v;
                entry.2 += 1;
            }
            None => out.push((row.setting.clone(), v, 1)),
        }
    }
    out.into_iter().map(|(s, sum, n)| (s, sum / n as f64)).collect()
}
