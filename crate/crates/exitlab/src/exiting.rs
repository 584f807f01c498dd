//! Exit policies: the rules that decide, layer by layer, when a sample
//! has been classified confidently enough to stop.
//!
//! A sample walks up the stack one block at a time; layers above the exit
//! are never computed. Every evaluated layer is recorded in the trace, so
//! downstream tooling can plot how confidence indicators evolve with
//! depth. The top layer always exits.

use crate::metrics::{
    cosine_distance, distance_ratio, edr, normalized_entropy, DistancePair, MetricsError,
};
use crate::model::{Model, ModelError};
use crate::parallel::map_slice;
use crate::prototypes::{ProtoError, PrototypeBank};
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExitError {
    #[error("policy: {0}")]
    BadPolicy(&'static str),
    #[error("oracle policy needs labels")]
    OracleNeedsLabel,
    #[error("batch has {xs} inputs vs {labels} labels")]
    CountMismatch { xs: usize, labels: usize },
    #[error("prototype bank does not fit the model")]
    BankMismatch,
    #[error("layer {layer} has no prototype for class {class}; distance-based exiting needs a fully fitted bank")]
    MissingPrototype { layer: usize, class: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// When to stop climbing the stack.
///
/// `Edr` fuses normalized entropy with the prototype distance ratio
/// through a weighted harmonic mean and exits when the fused score drops
/// below `tau`. `Entropy` uses the head's normalized entropy alone.
/// `Patience` exits after `patience` consecutive layers agree on the
/// predicted class; `ConfidencePatience` after `patience` consecutive
/// layers are each confident on their own. `Oracle` peeks at the label
/// and exits at the shallowest correct layer, bounding what any policy
/// could achieve. `FixedLayer` ignores the sample entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExitPolicy {
    Edr { tau: f64, lambda: f64 },
    Entropy { tau: f64 },
    Patience { patience: usize },
    ConfidencePatience { tau: f64, patience: usize },
    Oracle,
    FixedLayer { layer: usize },
}

impl ExitPolicy {
    pub fn validate(&self, layers: usize) -> Result<(), ExitError> {
        let check_tau = |tau: f64| {
            if !tau.is_finite() || !(0.0..=1.0).contains(&tau) {
                Err(ExitError::BadPolicy("tau must lie in [0, 1]"))
            } else {
                Ok(())
            }
        };
        match *self {
            ExitPolicy::Edr { tau, lambda } => {
                check_tau(tau)?;
                if !lambda.is_finite() || lambda <= 0.0 {
                    return Err(ExitError::BadPolicy("lambda must be positive"));
                }
            }
            ExitPolicy::Entropy { tau } => check_tau(tau)?,
            ExitPolicy::Patience { patience } => {
                if patience == 0 {
                    return Err(ExitError::BadPolicy("patience must be at least 1"));
                }
            }
            ExitPolicy::ConfidencePatience { tau, patience } => {
                check_tau(tau)?;
                if patience == 0 {
                    return Err(ExitError::BadPolicy("patience must be at least 1"));
                }
            }
            ExitPolicy::Oracle => {}
            ExitPolicy::FixedLayer { layer } => {
                if layer == 0 || layer > layers {
                    return Err(ExitError::BadPolicy("fixed layer outside the stack"));
                }
            }
        }
        Ok(())
    }

    /// Does this policy read prototype distances?
    pub fn needs_bank(&self) -> bool {
        matches!(self, ExitPolicy::Edr { .. })
    }

    /// Does this policy read labels?
    pub fn needs_labels(&self) -> bool {
        matches!(self, ExitPolicy::Oracle)
    }
}

/// Confidence indicators of one evaluated layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEval {
    pub layer: usize,
    pub entropy: f64,
    /// Prototype distance ratio; absent at the top layer and wherever the
    /// bank has no prototypes for the two likeliest classes.
    pub distance_ratio: Option<f64>,
    /// Fused score; recorded by the distance-enhanced policy only.
    pub edr: Option<f64>,
    pub predicted: usize,
}

/// Where one sample stopped and what every layer on the way said.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub exit_layer: usize,
    pub predicted: usize,
    pub label: Option<usize>,
    pub correct: Option<bool>,
    pub per_layer: Vec<LayerEval>,
}

fn layer_distance_ratio(
    bank: &PrototypeBank,
    layer: usize,
    rep: &[f64],
    top2: (usize, usize),
) -> Result<Option<f64>, ExitError> {
    let (first, second) = top2;
    if !(bank.is_initialized(layer, first)? && bank.is_initialized(layer, second)?) {
        return Ok(None);
    }
    let r1 = cosine_distance(rep, bank.get(layer, first)?)?;
    let r2 = cosine_distance(rep, bank.get(layer, second)?)?;
    Ok(Some(distance_ratio(DistancePair::new(r1, r2)?)))
}

/// Classify one sample under a policy, computing only the layers the
/// policy actually visits. `label` is required by the oracle and is
/// otherwise only echoed into the result.
pub fn infer_one(
    model: &Model,
    bank: &PrototypeBank,
    policy: &ExitPolicy,
    x: &[f64],
    label: Option<usize>,
) -> Result<InferenceResult, ExitError> {
    let m_top = model.config.layers;
    policy.validate(m_top)?;
    if !model.accepts_bank(bank) {
        return Err(ExitError::BankMismatch);
    }
    let oracle_label = match (policy, label) {
        (ExitPolicy::Oracle, None) => return Err(ExitError::OracleNeedsLabel),
        (ExitPolicy::Oracle, Some(y)) => Some(y),
        _ => None,
    };

    let mut per_layer = Vec::new();
    let mut input = x.to_vec();
    let mut patience_counter = 0usize;
    let mut prev_pred: Option<usize> = None;
    let mut exit_layer = m_top;
    for m in 1..=m_top {
        let hidden = model.block(m, &input);
        let probs = crate::model::softmax(&model.logits(m, &hidden));
        let dist = crate::metrics::ProbDist::new(probs)?;
        let entropy = normalized_entropy(&dist);
        let predicted = dist.argmax();

        let mut ratio = None;
        let mut fused = None;
        if m < m_top {
            match policy {
                ExitPolicy::Edr { tau: _, lambda } => {
                    let rep = model.proto_rep(m, &hidden);
                    let (first, second) = dist.top2();
                    for class in [first, second] {
                        if !bank.is_initialized(m, class)? {
                            return Err(ExitError::MissingPrototype { layer: m, class });
                        }
                    }
                    ratio = layer_distance_ratio(bank, m, &rep, (first, second))?;
                    let r = ratio.expect("both prototypes checked");
                    fused = Some(edr(entropy, r, *lambda)?);
                }
                _ => {
                    let rep = model.proto_rep(m, &hidden);
                    ratio = layer_distance_ratio(bank, m, &rep, dist.top2())?;
                }
            }
        }
        per_layer.push(LayerEval { layer: m, entropy, distance_ratio: ratio, edr: fused, predicted });

        let stop = if m == m_top {
            true
        } else {
            match *policy {
                ExitPolicy::Edr { tau, .. } => fused.expect("set above") < tau,
                ExitPolicy::Entropy { tau } => entropy < tau,
                ExitPolicy::Patience { patience } => {
                    if prev_pred == Some(predicted) {
                        patience_counter += 1;
                    } else {
                        patience_counter = 0;
                    }
                    patience_counter >= patience
                }
                ExitPolicy::ConfidencePatience { tau, patience } => {
                    if entropy < tau {
                        patience_counter += 1;
                    } else {
                        patience_counter = 0;
                    }
                    patience_counter >= patience
                }
                ExitPolicy::Oracle => predicted == oracle_label.expect("checked above"),
                ExitPolicy::FixedLayer { layer } => m == layer,
            }
        };
        prev_pred = Some(predicted);
        if stop {
            exit_layer = m;
            break;
        }
        input = hidden;
    }

    let predicted = per_layer.last().expect("at least one layer").predicted;
    Ok(InferenceResult {
        exit_layer,
        predicted,
        label,
        correct: label.map(|y| y == predicted),
        per_layer,
    })
}

/// Classify a batch, in parallel when the `parallel` feature is on. The
/// first sample error, if any, is returned.
pub fn infer_batch(
    model: &Model,
    bank: &PrototypeBank,
    policy: &ExitPolicy,
    xs: &[Vec<f64>],
    labels: Option<&[usize]>,
) -> Result<Vec<InferenceResult>, ExitError> {
    if let Some(ys) = labels {
        if ys.len() != xs.len() {
            return Err(ExitError::CountMismatch { xs: xs.len(), labels: ys.len() });
        }
    }
    let indexed: Vec<(usize, &Vec<f64>)> = xs.iter().enumerate().collect();
    let results = map_slice(&indexed, |&(i, x)| {
        infer_one(model, bank, policy, x, labels.map(|ys| ys[i]))
    });
    results.into_iter().collect()
}

/// One JSON object per sample, one line each.
pub fn write_traces_jsonl(
    mut w: impl Write,
    results: &[InferenceResult],
) -> Result<(), io::Error> {
    for r in results {
        let line = serde_json::to_string(r)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}
