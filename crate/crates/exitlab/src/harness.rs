//! The evaluation engine: threshold sweeps, speed-up ratios, FLOPs
//! accounting, correctness-estimation accuracy, and rank-correlation
//! diagnostics between the two confidence indicators.
//!
//! Cost accounting is per-component and additive. Executing layer `m`
//! costs one backbone block and one head; every executed layer below the
//! top also pays for the prototype projection and the fused-indicator
//! arithmetic, because the exit decision machinery runs there. Absolute
//! constants are coarse by design; only proportionality is ever asserted.

use crate::exiting::{infer_batch, ExitError, ExitPolicy};
use crate::metrics::{
    cosine_distance, distance_ratio, edr, normalized_entropy, DistancePair, MetricsError, ProbDist,
};
use crate::model::{Model, ModelConfig, ModelError, ProtoSpace};
use crate::parallel::map_slice;
use crate::prototypes::{ProtoError, PrototypeBank};
use crate::training::LabeledSet;
use serde::Serialize;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("empty exit histogram")]
    EmptyHistogram,
    #[error("no sweep row within {tol} of speed-up {target}")]
    NoMatch { target: f64, tol: f64 },
    #[error("layer {layer} is not an early-exit layer (valid: 1..{layers})")]
    BadLayer { layer: usize, layers: usize },
    #[error("layer {layer} is missing prototypes; train or adjust the bank first")]
    MissingPrototypes { layer: usize },
    #[error("no thresholds given")]
    EmptyTaus,
    #[error("evaluation set is empty")]
    EmptySet,
    #[error(transparent)]
    Exit(#[from] ExitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Additive per-component inference costs, in FLOPs. Affine maps count
/// two FLOPs per multiply-accumulate plus the bias adds; the indicator
/// operations get small fixed constants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsModel {
    blocks: Vec<f64>,
    pub classifier: f64,
    pub prototype: f64,
    pub edr_calc: f64,
}

impl FlopsModel {
    pub fn new(config: &ModelConfig) -> Self {
        let affine = |i: usize, o: usize| (2 * i * o + o) as f64;
        let blocks = (0..config.layers)
            .map(|i| {
                let d_in = if i == 0 { config.d_in } else { config.d_hidden };
                affine(d_in, config.d_hidden) + config.d_hidden as f64
            })
            .collect();
        let k = config.classes as f64;
        let classifier = affine(config.d_hidden, config.classes) + 5.0 * k;
        let prototype = match config.proto_space {
            ProtoSpace::Projected => affine(config.d_hidden, config.d_proto),
            ProtoSpace::Hidden => 0.0,
        };
        let pd = config.proto_dim() as f64;
        let entropy = 4.0 * k + 2.0;
        let cosine = 6.0 * pd + 3.0;
        let edr_calc = entropy + 2.0 * cosine + 6.0 + 8.0;
        Self { blocks, classifier, prototype, edr_calc }
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Cost of backbone block `m` (the first block reads the raw input).
    pub fn block(&self, m: usize) -> f64 {
        self.blocks[m - 1]
    }

    /// Total cost of a sample that exits at `exit_layer`.
    pub fn for_exit_layer(&self, exit_layer: usize) -> f64 {
        let top = self.layers();
        let decision_layers = exit_layer.min(top.saturating_sub(1)) as f64;
        self.blocks[..exit_layer].iter().sum::<f64>()
            + exit_layer as f64 * self.classifier
            + decision_layers * (self.prototype + self.edr_calc)
    }
}

/// Eq.-style speed-up: layers of the always-full model over layers
/// actually executed. `histogram[m-1]` counts samples exiting at layer m.
pub fn speedup_ratio(histogram: &[usize]) -> Result<f64, HarnessError> {
    let total: usize = histogram.iter().sum();
    if histogram.is_empty() || total == 0 {
        return Err(HarnessError::EmptyHistogram);
    }
    let m_top = histogram.len();
    let executed: usize = histogram.iter().enumerate().map(|(i, &n)| (i + 1) * n).sum();
    Ok((m_top * total) as f64 / executed as f64)
}

/// Aggregate outcome of running one policy over a labeled set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyEval {
    pub samples: usize,
    pub accuracy: f64,
    pub mean_exit_layer: f64,
    pub speedup: f64,
    /// `exit_histogram[m-1]` samples exited at layer m; sums to `samples`.
    pub exit_histogram: Vec<usize>,
    pub executed_layers_total: usize,
    pub flops_total: f64,
}

pub fn evaluate_policy(
    model: &Model,
    bank: &PrototypeBank,
    policy: &ExitPolicy,
    set: &LabeledSet,
) -> Result<PolicyEval, HarnessError> {
    if set.is_empty() {
        return Err(HarnessError::EmptySet);
    }
    let flops = FlopsModel::new(&model.config);
    let results = infer_batch(model, bank, policy, &set.xs, Some(&set.ys))?;
    let mut hits = 0usize;
    let mut histogram = vec![0usize; model.config.layers];
    let mut flops_total = 0.0;
    for r in &results {
        if r.correct == Some(true) {
            hits += 1;
        }
        histogram[r.exit_layer - 1] += 1;
        flops_total += flops.for_exit_layer(r.exit_layer);
    }
    let executed_layers_total: usize =
        histogram.iter().enumerate().map(|(i, &n)| (i + 1) * n).sum();
    Ok(PolicyEval {
        samples: set.len(),
        accuracy: hits as f64 / set.len() as f64,
        mean_exit_layer: executed_layers_total as f64 / set.len() as f64,
        speedup: speedup_ratio(&histogram)?,
        exit_histogram: histogram,
        executed_layers_total,
        flops_total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    #[serde(flatten)]
    pub eval: PolicyEval,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// One row per τ, histogram columns flattened.
    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        let layers = self.rows.first().map_or(0, |r| r.eval.exit_histogram.len());
        let mut header =
            String::from("tau,samples,accuracy,mean_exit_layer,speedup,executed_layers_total,flops_total");
        for m in 1..=layers {
            header.push_str(&format!(",exit_{m}"));
        }
        writeln!(w, "{header}")?;
        for row in &self.rows {
            let e = &row.eval;
            let mut line = format!(
                "{},{},{},{},{},{},{}",
                row.tau,
                e.samples,
                e.accuracy,
                e.mean_exit_layer,
                e.speedup,
                e.executed_layers_total,
                e.flops_total
            );
            for n in &e.exit_histogram {
                line.push_str(&format!(",{n}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// The default threshold grid: 33 evenly spaced points on [0, 1] plus a
/// handful of fine low-end values where exit behavior changes fastest.
pub fn default_tau_grid() -> Vec<f64> {
    let mut taus: Vec<f64> = (0..33).map(|i| i as f64 / 32.0).collect();
    taus.extend([0.001, 0.007, 0.01, 0.07, 0.14]);
    taus.sort_by(f64::total_cmp);
    taus
}

/// Evaluate one threshold-family policy at every τ, rows ordered by τ.
/// Duplicate thresholds produce identical duplicate rows.
pub fn sweep(
    model: &Model,
    bank: &PrototypeBank,
    set: &LabeledSet,
    taus: &[f64],
    make_policy: impl Fn(f64) -> ExitPolicy,
) -> Result<SweepResult, HarnessError> {
    if taus.is_empty() {
        return Err(HarnessError::EmptyTaus);
    }
    let mut sorted = taus.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(sorted.len());
    for tau in sorted {
        let eval = evaluate_policy(model, bank, &make_policy(tau), set)?;
        rows.push(SweepRow { tau, eval });
    }
    Ok(SweepResult { rows })
}

/// The row whose speed-up lands closest to `target`, ties going to the
/// lower τ. Errors when nothing lands within `tol`.
pub fn match_speedup(
    result: &SweepResult,
    target: f64,
    tol: f64,
) -> Result<&SweepRow, HarnessError> {
    let mut best: Option<(&SweepRow, f64)> = None;
    for row in &result.rows {
        let diff = (row.eval.speedup - target).abs();
        if diff <= tol {
            let better = match best {
                None => true,
                Some((b, bd)) => diff < bd || (diff == bd && row.tau < b.tau),
            };
            if better {
                best = Some((row, diff));
            }
        }
    }
    best.map(|(row, _)| row).ok_or(HarnessError::NoMatch { target, tol })
}

/// How well each indicator predicts its own layer's correctness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimationAccuracy {
    pub entropy: f64,
    pub edr: f64,
    pub samples: usize,
}

fn check_early_layer(model: &Model, layer: usize) -> Result<(), HarnessError> {
    if layer == 0 || layer >= model.config.layers {
        return Err(HarnessError::BadLayer { layer, layers: model.config.layers });
    }
    Ok(())
}

/// Per-sample confidence indicators at one early-exit layer: normalized
/// entropy, distance ratio, and whether the layer's argmax was correct.
fn layer_indicators(
    model: &Model,
    bank: &PrototypeBank,
    set: &LabeledSet,
    layer: usize,
) -> Result<Vec<(f64, f64, bool)>, HarnessError> {
    check_early_layer(model, layer)?;
    if set.is_empty() {
        return Err(HarnessError::EmptySet);
    }
    if !model.accepts_bank(bank) {
        return Err(HarnessError::Exit(ExitError::BankMismatch));
    }
    if !bank.all_initialized(layer)? {
        return Err(HarnessError::MissingPrototypes { layer });
    }
    let indexed: Vec<usize> = (0..set.len()).collect();
    let rows = map_slice(&indexed, |&i| -> Result<(f64, f64, bool), HarnessError> {
        let mut input = set.xs[i].clone();
        for m in 1..layer {
            input = model.block(m, &input);
        }
        let hidden = model.block(layer, &input);
        let probs = ProbDist::new(crate::model::softmax(&model.logits(layer, &hidden)))?;
        let entropy = normalized_entropy(&probs);
        let (first, second) = probs.top2();
        let rep = model.proto_rep(layer, &hidden);
        let r1 = cosine_distance(&rep, bank.get(layer, first)?)?;
        let r2 = cosine_distance(&rep, bank.get(layer, second)?)?;
        let ratio = distance_ratio(DistancePair::new(r1, r2)?);
        Ok((entropy, ratio, probs.argmax() == set.ys[i]))
    });
    rows.into_iter().collect()
}

/// Estimate "the early prediction is correct" as `indicator < tau`, for
/// both the entropy and the fused indicator, and score the estimates
/// against the layer's actual correctness.
pub fn correctness_estimation(
    model: &Model,
    bank: &PrototypeBank,
    set: &LabeledSet,
    layer: usize,
    tau: f64,
    lambda: f64,
) -> Result<EstimationAccuracy, HarnessError> {
    let rows = layer_indicators(model, bank, set, layer)?;
    let mut entropy_hits = 0usize;
    let mut edr_hits = 0usize;
    for (entropy, ratio, correct) in &rows {
        let fused = edr(*entropy, *ratio, lambda)?;
        if (*entropy < tau) == *correct {
            entropy_hits += 1;
        }
        if (fused < tau) == *correct {
            edr_hits += 1;
        }
    }
    Ok(EstimationAccuracy {
        entropy: entropy_hits as f64 / rows.len() as f64,
        edr: edr_hits as f64 / rows.len() as f64,
        samples: rows.len(),
    })
}

/// Ranks with ties averaged, 1-based.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either series is constant or too
/// short for a correlation to exist.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (average ranks, then Pearson).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Rank correlation between per-sample entropy and distance ratio at one
/// layer; `None` when an indicator is constant over the set.
pub fn indicator_spearman(
    model: &Model,
    bank: &PrototypeBank,
    set: &LabeledSet,
    layer: usize,
) -> Result<Option<f64>, HarnessError> {
    let rows = layer_indicators(model, bank, set, layer)?;
    let entropies: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let ratios: Vec<f64> = rows.iter().map(|r| r.1).collect();
    Ok(spearman(&entropies, &ratios))
}

/// The same diagnostic for a model pair: one with the learned metric
/// space, one working on raw hidden states.
pub fn spearman_homogeneity(
    with_projection: (&Model, &PrototypeBank),
    without_projection: (&Model, &PrototypeBank),
    set: &LabeledSet,
    layer: usize,
) -> Result<(Option<f64>, Option<f64>), HarnessError> {
    let rho_with = indicator_spearman(with_projection.0, with_projection.1, set, layer)?;
    let rho_without = indicator_spearman(without_projection.0, without_projection.1, set, layer)?;
    Ok((rho_with, rho_without))
}
