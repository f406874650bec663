//! Batched training, evaluation, ablations and factor-count sweeps.

mod config;
mod metrics;
mod model;

pub use config::{TrainConfig, Variant};
pub use metrics::{metric_at, metric_rows, metrics_csv, rank_of, Metric, MetricRow, RankSet, Stratum};
pub use model::{parameter_layout, DrlSite, Forward, LossVars, Model, ITEM_EMBEDDING};

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Example;
use crate::diffcore::{adam_step, grad_check, AdamConfig, AdamState, DiffError, GradCheckReport, Graph};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{component}: {source}")]
    Forward {
        component: &'static str,
        #[source]
        source: DiffError,
    },
    #[error("non-finite {component} loss")]
    NonFiniteLoss { component: &'static str },
    #[error("example references an item outside the model vocabulary")]
    VocabularyMismatch,
    #[error("no training examples")]
    NoExamples,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Losses of one epoch, each averaged over training examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub prediction: f64,
    pub disentangle: f64,
    pub contrastive: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("report serializes") + "\n")
            .collect()
    }
}

fn finite(component: &'static str, v: f64) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFiniteLoss { component })
    }
}

/// One optimizer step on `batch`; returns `(L, L_p, L_d, L_c)`.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &[Example],
    contrastive_seed: u64,
) -> Result<[f64; 4], TrainError> {
    let mut g = Graph::new();
    let b = model.params.bind(&mut g)?;
    let fwd = model.forward(&mut g, &b, batch, Some(contrastive_seed))?;
    let l = fwd.losses.expect("loss terms requested");
    let value = |v: Option<_>| v.map_or(0.0, |v| g.value(v).item());
    let parts = [
        finite("total", g.value(l.total).item())?,
        finite("prediction", g.value(l.prediction).item())?,
        finite("disentangle", value(l.disentangle))?,
        finite("contrastive", value(l.contrastive))?,
    ];
    let mut grads = g.backward(l.total)?;
    let grads = b.gradients(&mut grads, &model.params)?;
    adam_step(&mut model.params, &grads, adam)?;
    Ok(parts)
}

/// Central-difference check of the total loss gradient on one batch.
pub fn loss_gradcheck(
    model: &Model,
    batch: &[Example],
    contrastive_seed: u64,
    epsilon: f64,
) -> Result<GradCheckReport, TrainError> {
    grad_check(
        |g, b| {
            let fwd = model.forward(g, b, batch, Some(contrastive_seed))?;
            Ok(fwd.losses.expect("loss terms requested").total)
        },
        &model.params,
        epsilon,
    )
}

/// Train a fresh model, calling `on_epoch` after every epoch.
pub fn train_with(
    train: &[Example],
    num_items: usize,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<(Model, TrainReport), TrainError> {
    if train.is_empty() {
        return Err(TrainError::NoExamples);
    }
    let mut model = Model::init(cfg, num_items)?;
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f0b_a7c4);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| train[i].clone()).collect();
            let parts = train_step(&mut model, &mut adam, &batch, rng.next_u64())?;
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p * batch.len() as f64;
            }
        }
        let n = train.len() as f64;
        let e = EpochReport {
            epoch,
            loss: sums[0] / n,
            prediction: sums[1] / n,
            disentangle: sums[2] / n,
            contrastive: sums[3] / n,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&e);
        report.epochs.push(e);
    }
    Ok((model, report))
}

pub fn train(train: &[Example], num_items: usize, cfg: &TrainConfig) -> Result<(Model, TrainReport), TrainError> {
    train_with(train, num_items, cfg, |_| {})
}

/// Score `examples` in corpus order, `batch_size` at a time, and rank each
/// target among all items.
pub fn rank_examples(model: &Model, examples: &[Example]) -> Result<RankSet, TrainError> {
    let mut ranks = RankSet::default();
    for chunk in examples.chunks(model.config.batch_size) {
        let mut g = Graph::new();
        let b = model.params.bind(&mut g)?;
        let fwd = model.forward(&mut g, &b, chunk, None)?;
        let logits = g.value(fwd.logits);
        for (r, e) in chunk.iter().enumerate() {
            ranks.push(rank_of(logits.row_slice(r), e.target), e.prefix.len());
        }
    }
    Ok(ranks)
}

/// Metrics per cutoff and per length stratum.
pub fn evaluate(model: &Model, test: &[Example], cutoffs: &[usize]) -> Result<Vec<MetricRow>, TrainError> {
    let ranks = rank_examples(model, test)?;
    Ok(metric_rows(model.config.variant.name(), model.config.k, &ranks, cutoffs))
}

/// Frequency of each item as a training target.
pub fn popularity_scores(train: &[Example], num_items: usize) -> Vec<f64> {
    let mut counts = vec![0.0; num_items];
    for e in train {
        counts[e.target] += 1.0;
    }
    counts
}

/// Rank test targets by training popularity alone.
pub fn popularity_ranks(train: &[Example], test: &[Example], num_items: usize) -> RankSet {
    let scores = popularity_scores(train, num_items);
    let mut ranks = RankSet::default();
    for e in test {
        ranks.push(rank_of(&scores, e.target), e.prefix.len());
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    #[serde(rename = "P@20")]
    pub precision: f64,
    #[serde(rename = "M@20")]
    pub mrr: f64,
}

pub const DEFAULT_SWEEP: [usize; 4] = [2, 5, 8, 10];

/// Train one model per factor count with a shared seed; held-out P@20/M@20.
pub fn sweep_k(
    train: &[Example],
    test: &[Example],
    num_items: usize,
    base: &TrainConfig,
    k_values: &[usize],
) -> Result<Vec<SweepRow>, TrainError> {
    if let Some(&k) = k_values.iter().find(|&&k| k > base.d) {
        return Err(TrainError::Config(format!("k = {k} exceeds d = {}", base.d)));
    }
    k_values
        .par_iter()
        .map(|&k| {
            let cfg = TrainConfig { k, ..base.clone() };
            let (model, _) = self::train(train, num_items, &cfg)?;
            let m = rank_examples(&model, test)?.metric(Stratum::All, 20);
            Ok(SweepRow {
                k,
                precision: m.precision,
                mrr: m.mrr,
            })
        })
        .collect()
}

/// Held-out metrics of each variant at every cutoff.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cutoffs: Vec<usize>,
    pub results: BTreeMap<String, Vec<Metric>>,
}

pub fn ablate(
    train: &[Example],
    test: &[Example],
    num_items: usize,
    base: &TrainConfig,
    cutoffs: &[usize],
) -> Result<AblationReport, TrainError> {
    let results: Vec<(String, Vec<Metric>)> = Variant::ALL
        .par_iter()
        .map(|&variant| {
            let cfg = TrainConfig { variant, ..base.clone() };
            let (model, _) = self::train(train, num_items, &cfg)?;
            let ranks = rank_examples(&model, test)?;
            Ok((
                variant.name().to_string(),
                cutoffs.iter().map(|&c| ranks.metric(Stratum::All, c)).collect(),
            ))
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(AblationReport {
        cutoffs: cutoffs.to_vec(),
        results: results.into_iter().collect(),
    })
}

/// Relative change in percent, formatted like `(-4.7%)`.
pub fn percent_delta(value: f64, reference: f64) -> String {
    if reference == 0.0 {
        return "(n/a)".to_string();
    }
    format!("({:+.1}%)", 100.0 * (value - reference) / reference)
}

impl AblationReport {
    /// One line per variant and metric, with deltas against the full model.
    pub fn table(&self) -> String {
        let full = &self.results[Variant::Full.name()];
        let mut out = String::new();
        for v in Variant::ALL {
            let Some(ms) = self.results.get(v.name()) else { continue };
            let mut line = format!("{:<13}", v.name());
            for (m, f) in ms.iter().zip(full) {
                let (dp, dm) = if v == Variant::Full {
                    (String::new(), String::new())
                } else {
                    (
                        format!(" {}", percent_delta(m.precision, f.precision)),
                        format!(" {}", percent_delta(m.mrr, f.mrr)),
                    )
                };
                line += &format!(
                    "  P@{c} {:.4}{dp}  M@{c} {:.4}{dm}",
                    m.precision,
                    m.mrr,
                    c = m.cutoff
                );
            }
            out += line.trim_end();
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_formatting() {
        assert_eq!(percent_delta(0.953, 1.0), "(-4.7%)");
        assert_eq!(percent_delta(1.1, 1.0), "(+10.0%)");
        assert_eq!(percent_delta(0.5, 0.0), "(n/a)");
    }

    #[test]
    fn popularity_ranks_by_target_frequency() {
        use crate::corpus::Session;
        let ex = |t: usize| Example {
            prefix: Session::new(vec![0]),
            target: t,
            origin: 0,
        };
        let train = [ex(2), ex(2), ex(1)];
        let ranks = popularity_ranks(&train, &[ex(2), ex(1), ex(0)], 3);
        assert_eq!(ranks.ranks, vec![1, 2, 3]);
    }
}
