//! The multi-exit backbone: a stack of dense blocks where every layer
//! carries its own softmax head and (below the top) a projection into the
//! prototype metric space.
//!
//! Layer `m` computes `h_m = act(W_m h_{m-1} + b_m)` with `h_0` the input.
//! Head `m` produces logits `C_m h_m + d_m`; the projection produces
//! `P_m h_m + q_m`. Gradients are derived by hand in [`Model::backward`]:
//! the total training loss weights layer `m`'s loss by `m / (1 + ... + M)`,
//! so deeper layers count more. Prototypes enter the loss as constants;
//! no gradient flows into the bank.

use crate::linalg::{axpy, matvec, matvec_t, outer_acc};
use crate::metrics::{MetricsError, ProbDist};
use crate::prototypes::{dar_loss, DarConfig, ProtoError, PrototypeBank};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("config: {0}")]
    BadConfig(&'static str),
    #[error("input has length {got}, expected {want}")]
    BadInput { got: usize, want: usize },
    #[error("label {label} out of range 0..{classes}")]
    BadLabel { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch has {xs} inputs vs {ys} labels")]
    CountMismatch { xs: usize, ys: usize },
    #[error("prototype bank shape ({layers} layers, {classes} classes, dim {dim}) does not fit the model")]
    BankMismatch { layers: usize, classes: usize, dim: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
}

/// Elementwise nonlinearity applied after every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output value.
    /// For relu the kink at zero takes the zero branch.
    pub fn grad_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Where the prototype-space representation comes from.
///
/// `Projected` is the full architecture: a learned affine map per exit
/// layer. `Hidden` is the ablation that drops the projections and runs all
/// prototype machinery directly on the hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtoSpace {
    Projected,
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of backbone layers `M`; every layer is a possible exit.
    pub layers: usize,
    /// Number of classes `K`.
    pub classes: usize,
    pub d_in: usize,
    pub d_hidden: usize,
    /// Dimension of the projected metric space (ignored when
    /// `proto_space` is `Hidden`).
    pub d_proto: usize,
    pub activation: Activation,
    pub proto_space: ProtoSpace,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            classes: 2,
            d_in: 8,
            d_hidden: 32,
            d_proto: 16,
            activation: Activation::Tanh,
            proto_space: ProtoSpace::Projected,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 {
            return Err(ModelError::BadConfig("layers must be at least 1"));
        }
        if self.classes < 2 {
            return Err(ModelError::BadConfig("classes must be at least 2"));
        }
        if self.d_in == 0 || self.d_hidden == 0 || self.d_proto == 0 {
            return Err(ModelError::BadConfig("all dimensions must be positive"));
        }
        Ok(())
    }

    /// Dimension of the space the prototype bank lives in.
    pub fn proto_dim(&self) -> usize {
        match self.proto_space {
            ProtoSpace::Projected => self.d_proto,
            ProtoSpace::Hidden => self.d_hidden,
        }
    }

    /// A bank shaped for this model: one row of prototypes per exit layer.
    pub fn new_bank(&self, gamma: f64) -> Result<PrototypeBank, ProtoError> {
        PrototypeBank::new(self.layers.saturating_sub(1), self.classes, self.proto_dim(), gamma)
    }
}

/// A dense affine map `y = W x + b`, `W` row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Affine {
    fn init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        let w = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { w, b: vec![0.0; rows], rows, cols }
    }

    fn zeros(rows: usize, cols: usize) -> Self {
        Self { w: vec![0.0; rows * cols], b: vec![0.0; rows], rows, cols }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = matvec(&self.w, x, self.rows, self.cols);
        axpy(1.0, &self.b, &mut y);
        y
    }
}

/// Tells the optimizer whether a tensor takes weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
}

/// Every trainable tensor of a model, in a fixed declared order:
/// backbone blocks, then heads, then projections; within each affine the
/// weight precedes the bias. Checkpoints and the optimizer both walk
/// tensors in exactly this order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub blocks: Vec<Affine>,
    pub classifiers: Vec<Affine>,
    pub projections: Vec<Affine>,
}

impl ParameterSet {
    pub fn tensors(&self) -> Vec<(&Vec<f64>, TensorKind)> {
        self.blocks
            .iter()
            .chain(&self.classifiers)
            .chain(&self.projections)
            .flat_map(|a| [(&a.w, TensorKind::Weight), (&a.b, TensorKind::Bias)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&mut Vec<f64>, TensorKind)> {
        self.blocks
            .iter_mut()
            .chain(self.classifiers.iter_mut())
            .chain(self.projections.iter_mut())
            .flat_map(|a| {
                let Affine { w, b, .. } = a;
                [(w, TensorKind::Weight), (b, TensorKind::Bias)]
            })
            .collect()
    }

    pub fn zeros_like(&self) -> ParameterSet {
        let z = |v: &Vec<Affine>| v.iter().map(|a| Affine::zeros(a.rows, a.cols)).collect();
        ParameterSet {
            blocks: z(&self.blocks),
            classifiers: z(&self.classifiers),
            projections: z(&self.projections),
        }
    }

    /// All-zero parameters with the shapes the config dictates.
    pub fn zeros(config: &ModelConfig) -> Self {
        let blocks = (0..config.layers)
            .map(|i| {
                Affine::zeros(config.d_hidden, if i == 0 { config.d_in } else { config.d_hidden })
            })
            .collect();
        let classifiers =
            (0..config.layers).map(|_| Affine::zeros(config.classes, config.d_hidden)).collect();
        let projections = match config.proto_space {
            ProtoSpace::Projected => (1..config.layers)
                .map(|_| Affine::zeros(config.d_proto, config.d_hidden))
                .collect(),
            ProtoSpace::Hidden => Vec::new(),
        };
        Self { blocks, classifiers, projections }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(t, _)| t.len()).sum()
    }
}

/// Everything one layer exposes to the exit machinery.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub hidden: Vec<f64>,
    /// Prototype-space representation; `None` at the top layer, which has
    /// no prototypes. Equal to `hidden` when the model skips projections.
    pub projected: Option<Vec<f64>>,
    pub probs: ProbDist,
}

/// Numerically stable `log(sum(exp(z)))`.
pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per-sample activations cached by the batch forward pass.
pub(crate) struct ForwardTrace {
    /// `hiddens[m-1][n]`: hidden state of sample `n` at layer `m`.
    pub hiddens: Vec<Vec<Vec<f64>>>,
    /// `logits[m-1][n]`: head logits.
    pub logits: Vec<Vec<Vec<f64>>>,
    /// `protos[m-1][n]`: prototype-space representation (layers `1..M`).
    pub protos: Vec<Vec<Vec<f64>>>,
}

/// Total loss, its per-layer decomposition, and parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Backprop {
    pub loss: f64,
    /// Mean cross-entropy per layer (`layers` entries).
    pub per_layer_ce: Vec<f64>,
    /// Regularizer value per exit layer (`layers - 1` entries); zero where
    /// the layer was skipped (no usable prototypes or `alpha = 0`).
    pub per_layer_dar: Vec<f64>,
    pub grads: ParameterSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl Model {
    /// Fresh model with uniform `±1/sqrt(fan_in)` weights and zero biases,
    /// drawn from a generator seeded with `config.seed`. Tensors are drawn
    /// in declared order, so the same config always yields the same bits.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut blocks = Vec::with_capacity(config.layers);
        for m in 1..=config.layers {
            let cols = if m == 1 { config.d_in } else { config.d_hidden };
            blocks.push(Affine::init(&mut rng, config.d_hidden, cols));
        }
        let classifiers = (0..config.layers)
            .map(|_| Affine::init(&mut rng, config.classes, config.d_hidden))
            .collect();
        let projections = match config.proto_space {
            ProtoSpace::Projected => (1..config.layers)
                .map(|_| Affine::init(&mut rng, config.d_proto, config.d_hidden))
                .collect(),
            ProtoSpace::Hidden => Vec::new(),
        };
        Ok(Self { config, params: ParameterSet { blocks, classifiers, projections } })
    }

    /// Rebuild a model from existing parts, checking every shape.
    pub fn from_parts(config: ModelConfig, params: ParameterSet) -> Result<Self, ModelError> {
        config.validate()?;
        let shape_ok = |a: &Affine, rows: usize, cols: usize| {
            a.rows == rows && a.cols == cols && a.w.len() == rows * cols && a.b.len() == rows
        };
        if params.blocks.len() != config.layers
            || !params.blocks.iter().enumerate().all(|(i, a)| {
                shape_ok(a, config.d_hidden, if i == 0 { config.d_in } else { config.d_hidden })
            })
        {
            return Err(ModelError::BadConfig("block shapes do not match the config"));
        }
        if params.classifiers.len() != config.layers
            || !params.classifiers.iter().all(|a| shape_ok(a, config.classes, config.d_hidden))
        {
            return Err(ModelError::BadConfig("head shapes do not match the config"));
        }
        let want_proj = match config.proto_space {
            ProtoSpace::Projected => config.layers - 1,
            ProtoSpace::Hidden => 0,
        };
        if params.projections.len() != want_proj
            || !params.projections.iter().all(|a| shape_ok(a, config.d_proto, config.d_hidden))
        {
            return Err(ModelError::BadConfig("projection shapes do not match the config"));
        }
        Ok(Self { config, params })
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.config.d_in {
            return Err(ModelError::BadInput { got: x.len(), want: self.config.d_in });
        }
        Ok(())
    }

    /// Bank shape compatible with this model's prototype space?
    pub fn accepts_bank(&self, bank: &PrototypeBank) -> bool {
        bank.layers() == self.config.layers - 1
            && bank.classes() == self.config.classes
            && bank.dim() == self.config.proto_dim()
    }

    /// Hidden state of layer `m` given the previous layer's output.
    pub(crate) fn block(&self, m: usize, input: &[f64]) -> Vec<f64> {
        let mut h = self.params.blocks[m - 1].apply(input);
        for v in &mut h {
            *v = self.config.activation.apply(*v);
        }
        h
    }

    pub(crate) fn logits(&self, m: usize, hidden: &[f64]) -> Vec<f64> {
        self.params.classifiers[m - 1].apply(hidden)
    }

    /// Prototype-space representation at layer `m < M`.
    pub(crate) fn proto_rep(&self, m: usize, hidden: &[f64]) -> Vec<f64> {
        match self.config.proto_space {
            ProtoSpace::Projected => self.params.projections[m - 1].apply(hidden),
            ProtoSpace::Hidden => hidden.to_vec(),
        }
    }

    /// Run all `M` layers for one sample.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<LayerOutput>, ModelError> {
        self.check_input(x)?;
        let m_top = self.config.layers;
        let mut outputs = Vec::with_capacity(m_top);
        let mut input = x.to_vec();
        for m in 1..=m_top {
            let hidden = self.block(m, &input);
            let probs = ProbDist::new(softmax(&self.logits(m, &hidden)))?;
            let projected = (m < m_top).then(|| self.proto_rep(m, &hidden));
            input = hidden.clone();
            outputs.push(LayerOutput { hidden, projected, probs });
        }
        Ok(outputs)
    }

    fn check_batch(&self, xs: &[Vec<f64>], ys: &[usize]) -> Result<(), ModelError> {
        if xs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if xs.len() != ys.len() {
            return Err(ModelError::CountMismatch { xs: xs.len(), ys: ys.len() });
        }
        for x in xs {
            self.check_input(x)?;
        }
        for &y in ys {
            if y >= self.config.classes {
                return Err(ModelError::BadLabel { label: y, classes: self.config.classes });
            }
        }
        Ok(())
    }

    /// Batch forward pass caching everything backward needs.
    pub(crate) fn forward_trace(&self, xs: &[Vec<f64>]) -> ForwardTrace {
        let m_top = self.config.layers;
        let n = xs.len();
        let mut hiddens = Vec::with_capacity(m_top);
        let mut logits = Vec::with_capacity(m_top);
        let mut protos = Vec::with_capacity(m_top.saturating_sub(1));
        let mut prev: Vec<Vec<f64>> = xs.to_vec();
        for m in 1..=m_top {
            let h: Vec<Vec<f64>> = (0..n).map(|i| self.block(m, &prev[i])).collect();
            logits.push(h.iter().map(|hi| self.logits(m, hi)).collect());
            if m < m_top {
                protos.push(h.iter().map(|hi| self.proto_rep(m, hi)).collect());
            }
            prev = h.clone();
            hiddens.push(h);
        }
        ForwardTrace { hiddens, logits, protos }
    }

    /// Gradients of the depth-weighted training loss for one batch.
    ///
    /// Layer `m`'s loss is its mean cross-entropy plus
    /// `alpha * regularizer` (top layer: cross-entropy only), all combined
    /// as `sum(m * L_m) / sum(m)`. The bank is read-only: regularizer
    /// gradients stop at the representations. Samples whose class has no
    /// prototype at a layer are left out of that layer's regularizer mean,
    /// and a layer with fewer than two initialized classes contributes no
    /// regularizer at all.
    pub fn backward(
        &self,
        xs: &[Vec<f64>],
        ys: &[usize],
        bank: &PrototypeBank,
        dar: &DarConfig,
    ) -> Result<Backprop, ModelError> {
        self.check_batch(xs, ys)?;
        let trace = self.forward_trace(xs);
        self.backward_from_trace(&trace, xs, ys, bank, dar)
    }

    pub(crate) fn backward_from_trace(
        &self,
        trace: &ForwardTrace,
        xs: &[Vec<f64>],
        ys: &[usize],
        bank: &PrototypeBank,
        dar: &DarConfig,
    ) -> Result<Backprop, ModelError> {
        let m_top = self.config.layers;
        let n = xs.len();
        let nf = n as f64;
        let weight_sum = (m_top * (m_top + 1) / 2) as f64;

        let mut per_layer_ce = Vec::with_capacity(m_top);
        for m in 1..=m_top {
            let ce = (0..n)
                .map(|i| {
                    let z = &trace.logits[m - 1][i];
                    log_sum_exp(z) - z[ys[i]]
                })
                .sum::<f64>()
                / nf;
            per_layer_ce.push(ce);
        }

        // Regularizer per exit layer, with per-sample gradients scattered
        // back to batch positions (excluded samples keep a zero gradient).
        let mut per_layer_dar = vec![0.0; m_top.saturating_sub(1)];
        let mut dar_grads: Vec<Option<Vec<Vec<f64>>>> = vec![None; m_top.saturating_sub(1)];
        if dar.alpha > 0.0 && m_top > 1 {
            if !self.accepts_bank(bank) {
                return Err(ModelError::BankMismatch {
                    layers: bank.layers(),
                    classes: bank.classes(),
                    dim: bank.dim(),
                });
            }
            for m in 1..m_top {
                let included: Vec<usize> = (0..n)
                    .filter(|&i| bank.is_initialized(m, ys[i]).unwrap_or(false))
                    .collect();
                if included.is_empty() {
                    continue;
                }
                let reps: Vec<Vec<f64>> =
                    included.iter().map(|&i| trace.protos[m - 1][i].clone()).collect();
                let labels: Vec<usize> = included.iter().map(|&i| ys[i]).collect();
                if matches!(dar.variant, crate::prototypes::DarVariant::Alienation | crate::prototypes::DarVariant::Combined)
                    && (0..self.config.classes)
                        .filter(|&c| bank.is_initialized(m, c).unwrap_or(false))
                        .count()
                        < 2
                {
                    continue;
                }
                let out = dar_loss(dar.variant, &reps, &labels, bank, m, dar.beta)?;
                per_layer_dar[m - 1] = out.loss;
                let mut scattered = vec![vec![0.0; bank.dim()]; n];
                for (slot, &i) in included.iter().enumerate() {
                    scattered[i] = out.grads[slot].clone();
                }
                dar_grads[m - 1] = Some(scattered);
            }
        }

        let mut loss = 0.0;
        for m in 1..=m_top {
            let mut lm = per_layer_ce[m - 1];
            if m < m_top {
                lm += dar.alpha * per_layer_dar[m - 1];
            }
            loss += (m as f64) * lm / weight_sum;
        }

        let mut grads = self.params.zeros_like();
        // delta of the hidden state at the layer currently being processed
        let mut carry: Vec<Vec<f64>> = vec![vec![0.0; self.config.d_hidden]; n];
        for m in (1..=m_top).rev() {
            let lw = (m as f64) / weight_sum;
            for i in 0..n {
                // head path: d(ce)/d(logits) = softmax - onehot, batch-averaged
                let p = softmax(&trace.logits[m - 1][i]);
                let mut dz = p;
                dz[ys[i]] -= 1.0;
                for v in &mut dz {
                    *v *= lw / nf;
                }
                let head = &self.params.classifiers[m - 1];
                outer_acc(&mut grads.classifiers[m - 1].w, &dz, &trace.hiddens[m - 1][i]);
                axpy(1.0, &dz, &mut grads.classifiers[m - 1].b);
                axpy(1.0, &matvec_t(&head.w, &dz, head.rows, head.cols), &mut carry[i]);

                // regularizer path through the prototype representation
                if m < m_top {
                    if let Some(g) = &dar_grads[m - 1] {
                        let mut dp = g[i].clone();
                        for v in &mut dp {
                            *v *= lw * dar.alpha;
                        }
                        match self.config.proto_space {
                            ProtoSpace::Projected => {
                                let proj = &self.params.projections[m - 1];
                                outer_acc(
                                    &mut grads.projections[m - 1].w,
                                    &dp,
                                    &trace.hiddens[m - 1][i],
                                );
                                axpy(1.0, &dp, &mut grads.projections[m - 1].b);
                                axpy(
                                    1.0,
                                    &matvec_t(&proj.w, &dp, proj.rows, proj.cols),
                                    &mut carry[i],
                                );
                            }
                            ProtoSpace::Hidden => axpy(1.0, &dp, &mut carry[i]),
                        }
                    }
                }
            }

            // through the activation and the block's affine map
            let block = &self.params.blocks[m - 1];
            let mut next_carry = vec![vec![0.0; self.config.d_hidden]; n];
            for i in 0..n {
                let da: Vec<f64> = carry[i]
                    .iter()
                    .zip(&trace.hiddens[m - 1][i])
                    .map(|(&d, &h)| d * self.config.activation.grad_from_output(h))
                    .collect();
                let input: &[f64] = if m == 1 { &xs[i] } else { &trace.hiddens[m - 2][i] };
                outer_acc(&mut grads.blocks[m - 1].w, &da, input);
                axpy(1.0, &da, &mut grads.blocks[m - 1].b);
                if m > 1 {
                    next_carry[i] = matvec_t(&block.w, &da, block.rows, block.cols);
                }
            }
            carry = next_carry;
        }

        Ok(Backprop { loss, per_layer_ce, per_layer_dar, grads })
    }
}
