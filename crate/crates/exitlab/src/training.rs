//! Joint training of all exit heads with decoupled weight decay.
//!
//! Each step draws a batch without replacement from an epoch-shuffled
//! order (the last batch of an epoch may be short), folds the batch's
//! representations into the prototype bank, backpropagates the
//! depth-weighted loss, and applies one AdamW update under a linearly
//! decaying learning rate. The dev set is scored every `eval_every` steps
//! and at the final step; the best-scoring state is kept alongside the
//! final one. The whole loop is deterministic: a fixed seed reproduces
//! every batch, every update, and every report bit for bit.

use crate::model::{Model, ModelConfig, ModelError, ParameterSet, TensorKind};
use crate::parallel::map_slice;
use crate::prototypes::{DarConfig, ProtoError, PrototypeBank};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    BadConfig(&'static str),
    #[error("training set is empty")]
    EmptyTrain,
    #[error("dev set is empty")]
    EmptyDev,
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
}

/// A plain feature/label container, the shape the trainer consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Base learning rate; decays linearly to (almost) zero.
    pub lr: f64,
    pub total_steps: usize,
    /// Decoupled decay factor, applied to weight matrices only.
    pub weight_decay: f64,
    pub dar: DarConfig,
    /// Dev evaluation cadence in steps.
    pub eval_every: usize,
    /// Seed for batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-2,
            total_steps: 2000,
            weight_decay: 0.01,
            dar: DarConfig::default(),
            eval_every: 200,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(TrainError::BadConfig("lr must be positive and finite"));
        }
        if self.total_steps == 0 {
            return Err(TrainError::BadConfig("total_steps must be positive"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(TrainError::BadConfig("weight_decay must be non-negative"));
        }
        if self.eval_every == 0 {
            return Err(TrainError::BadConfig("eval_every must be positive"));
        }
        self.dar.validate()?;
        Ok(())
    }
}

/// Loss of one layer: cross-entropy plus the weighted regularizer, except
/// at the top layer which trains on cross-entropy alone.
pub fn layer_loss(ce: f64, dar_value: f64, alpha: f64, is_top: bool) -> f64 {
    if is_top {
        ce
    } else {
        ce + alpha * dar_value
    }
}

/// Depth-weighted combination: layer `m` (1-based) enters with weight
/// `m / (1 + 2 + ... + M)`, so later layers dominate.
pub fn total_loss(per_layer: &[f64]) -> f64 {
    let sum: f64 = per_layer.iter().enumerate().map(|(i, &l)| (i + 1) as f64 * l).sum();
    let weight_sum = (per_layer.len() * (per_layer.len() + 1) / 2) as f64;
    sum / weight_sum
}

/// Linearly decaying learning rate: full at step 0, approaching zero as
/// `step` (completed updates) nears `total_steps`.
pub fn linear_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    base * (1.0 - step as f64 / total_steps as f64)
}

/// AdamW with decoupled weight decay. Moment buffers line up with the
/// model's declared tensor order; biases are exempt from decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParameterSet, weight_decay: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(t, _)| t.len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update with the given learning rate. Decay multiplies the
    /// pre-step value, matching the decoupled formulation
    /// `theta -= lr * (adam_term + wd * theta)`.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let grad_tensors = grads.tensors();
        for (idx, (tensor, kind)) in params.tensors_mut().into_iter().enumerate() {
            let g = grad_tensors[idx].0;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..tensor.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                if kind == TensorKind::Weight {
                    tensor[i] *= 1.0 - lr * self.weight_decay;
                }
                tensor[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Final-layer argmax accuracy over a labeled set.
pub fn accuracy(model: &Model, set: &LabeledSet) -> Result<f64, ModelError> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let preds: Vec<Result<usize, ModelError>> = map_slice(&set.xs, |x| {
        let out = model.forward(x)?;
        Ok(out.last().expect("at least one layer").probs.argmax())
    });
    let mut hits = 0usize;
    for (pred, &y) in preds.into_iter().zip(&set.ys) {
        if pred? == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.len() as f64)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub per_layer_ce: Vec<f64>,
    pub per_layer_dar: Vec<f64>,
    /// Present on evaluation steps only.
    pub dev_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub best_step: usize,
    pub best_dev_accuracy: f64,
    pub final_dev_accuracy: f64,
}

impl TrainReport {
    /// Write the log as CSV with one column per layer loss. Accuracy
    /// cells are blank on non-evaluation steps.
    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        let layers = self.records.first().map_or(0, |r| r.per_layer_ce.len());
        let mut header = String::from("step,lr,loss");
        for m in 1..=layers {
            header.push_str(&format!(",ce_{m}"));
        }
        for m in 1..layers {
            header.push_str(&format!(",dar_{m}"));
        }
        header.push_str(",dev_accuracy");
        writeln!(w, "{header}")?;
        for r in &self.records {
            let mut row = format!("{},{},{}", r.step, r.lr, r.loss);
            for ce in &r.per_layer_ce {
                row.push_str(&format!(",{ce}"));
            }
            for dar in &r.per_layer_dar {
                row.push_str(&format!(",{dar}"));
            }
            match r.dev_accuracy {
                Some(acc) => row.push_str(&format!(",{acc}")),
                None => row.push(','),
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let loss = match self.records.last() {
            Some(record) => format!("final loss {:.6}", record.loss),
            None => "no new steps".to_string(),
        };
        format!(
            "{} steps, {loss}, dev accuracy {:.4} (best {:.4} at step {})",
            self.records.len(),
            self.final_dev_accuracy,
            self.best_dev_accuracy,
            self.best_step
        )
    }
}

/// Final and best states plus the full log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub bank: PrototypeBank,
    pub best_model: Model,
    pub best_bank: PrototypeBank,
    pub report: TrainReport,
}

/// Drives the optimization step by step, so callers can pause, snapshot,
/// or resume mid-run.
pub struct Trainer {
    model: Model,
    bank: PrototypeBank,
    opt: AdamW,
    cfg: TrainConfig,
    train: LabeledSet,
    dev: LabeledSet,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
    records: Vec<StepRecord>,
    best: Option<(f64, usize, Model, PrototypeBank)>,
}

impl Trainer {
    pub fn new(
        model: Model,
        bank: PrototypeBank,
        cfg: TrainConfig,
        train: LabeledSet,
        dev: LabeledSet,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(TrainError::EmptyTrain);
        }
        if dev.is_empty() {
            return Err(TrainError::EmptyDev);
        }
        if !model.accepts_bank(&bank) {
            return Err(TrainError::BadConfig("prototype bank does not fit the model"));
        }
        for set in [&train, &dev] {
            if set.xs.len() != set.ys.len() {
                return Err(TrainError::Model(ModelError::CountMismatch {
                    xs: set.xs.len(),
                    ys: set.ys.len(),
                }));
            }
            for x in &set.xs {
                if x.len() != model.config.d_in {
                    return Err(TrainError::Model(ModelError::BadInput {
                        got: x.len(),
                        want: model.config.d_in,
                    }));
                }
            }
            for &y in &set.ys {
                if y >= model.config.classes {
                    return Err(TrainError::Model(ModelError::BadLabel {
                        label: y,
                        classes: model.config.classes,
                    }));
                }
            }
        }
        let opt = AdamW::new(&model.params, cfg.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let order: Vec<usize> = (0..train.len()).collect();
        let cursor = order.len();
        Ok(Self {
            model,
            bank,
            opt,
            cfg,
            train,
            dev,
            rng,
            order,
            cursor,
            step: 0,
            records: Vec::new(),
            best: None,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Continue counting from a checkpointed step. The learning-rate
    /// schedule and the stopping point still follow the configured
    /// total, so a resumed run finishes the remaining steps.
    pub fn starting_at(mut self, step: usize) -> Self {
        self.step = step;
        self
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    fn next_batch(&mut self) -> (Vec<Vec<f64>>, Vec<usize>) {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.cfg.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        let xs = idx.iter().map(|&i| self.train.xs[i].clone()).collect();
        let ys = idx.iter().map(|&i| self.train.ys[i]).collect();
        self.cursor = end;
        (xs, ys)
    }

    /// Take one step. Returns `Ok(false)` once the run is complete.
    pub fn step(&mut self) -> Result<bool, TrainError> {
        if self.is_done() {
            return Ok(false);
        }
        let (xs, ys) = self.next_batch();
        let trace = self.model.forward_trace(&xs);
        for m in 1..self.model.config.layers {
            self.bank.update(m, &trace.protos[m - 1], &ys)?;
        }
        let bp = self.model.backward_from_trace(&trace, &xs, &ys, &self.bank, &self.cfg.dar)?;
        if !bp.loss.is_finite() {
            return Err(TrainError::Diverged { step: self.step + 1 });
        }
        let lr = linear_lr(self.cfg.lr, self.step, self.cfg.total_steps);
        self.opt.step(&mut self.model.params, &bp.grads, lr);
        self.step += 1;

        let eval_now = self.step % self.cfg.eval_every == 0 || self.step == self.cfg.total_steps;
        let dev_accuracy = if eval_now {
            let acc = accuracy(&self.model, &self.dev)?;
            let improved = self.best.as_ref().map_or(true, |(b, ..)| acc > *b);
            if improved {
                self.best = Some((acc, self.step, self.model.clone(), self.bank.clone()));
            }
            Some(acc)
        } else {
            None
        };
        self.records.push(StepRecord {
            step: self.step,
            lr,
            loss: bp.loss,
            per_layer_ce: bp.per_layer_ce,
            per_layer_dar: bp.per_layer_dar,
            dev_accuracy,
        });
        Ok(true)
    }

    /// Run the remaining steps to completion.
    pub fn run(&mut self) -> Result<(), TrainError> {
        while self.step()? {}
        Ok(())
    }

    pub fn into_outcome(self) -> TrainOutcome {
        let final_dev_accuracy =
            self.records.iter().rev().find_map(|r| r.dev_accuracy).unwrap_or(f64::NAN);
        let (best_acc, best_step, best_model, best_bank) = match self.best {
            Some((acc, step, model, bank)) => (acc, step, model, bank),
            None => (f64::NAN, self.step, self.model.clone(), self.bank.clone()),
        };
        TrainOutcome {
            model: self.model,
            bank: self.bank,
            best_model,
            best_bank,
            report: TrainReport {
                records: self.records,
                best_step,
                best_dev_accuracy: best_acc,
                final_dev_accuracy,
            },
        }
    }
}

/// Build a fresh model and bank from the configs and train to completion.
pub fn train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_set: LabeledSet,
    dev_set: LabeledSet,
) -> Result<TrainOutcome, TrainError> {
    let model = Model::new(model_config)?;
    let bank = model.config.new_bank(train_config.dar.gamma)?;
    let mut trainer = Trainer::new(model, bank, train_config, train_set, dev_set)?;
    trainer.run()?;
    Ok(trainer.into_outcome())
}
