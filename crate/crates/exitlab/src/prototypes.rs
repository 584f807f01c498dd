//! Per-layer class prototypes and the losses computed against them.
//!
//! Each early-exit layer keeps one prototype vector per class, updated
//! during training as a sliding average of the class's batch centroids:
//!
//! ```text
//! cp <- (1 - gamma) * cp + gamma * centroid      (first update: cp = centroid)
//! ```
//!
//! Prototypes are pure statistics: nothing differentiates through them, and
//! the optimizer never sees them. The regularizers below treat them as
//! constants and return gradients with respect to the representations only.
//!
//! Three regularizer variants are provided. `center` pulls each sample
//! toward its own class prototype (mean cosine distance). `alienation`
//! pushes the own-class distance below the nearest other class's distance
//! through the same bounded ratio used at inference time. `combined` is
//! `center + beta * alienation`.
//!
//! [`adjust_prototypes_kmeans`] re-centers a layer's prototypes on
//! unlabeled representations (e.g. a drifted test set): plain k-means with
//! cosine assignment, seeded at the current prototypes so cluster identity
//! is preserved.

use crate::linalg::{axpy, norm};
use crate::metrics::{cosine_distance, cosine_distance_grad, MetricsError, NORM_EPS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ProtoError {
    #[error("gamma must be in (0, 1], got {0}")]
    BadGamma(f64),
    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("prototype dimension must be positive")]
    ZeroDim,
    #[error("layer {layer} out of range 1..={layers}")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("class {class} out of range 0..{classes}")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("prototype for class {class} at layer {layer} is uninitialized")]
    Uninitialized { layer: usize, class: usize },
    #[error("representation has length {got}, bank dimension is {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("{reps} representations vs {labels} labels")]
    CountMismatch { reps: usize, labels: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("alienation needs at least two initialized classes at layer {layer}")]
    NeedTwoClasses { layer: usize },
    #[error("alpha must be finite and non-negative, got {0}")]
    BadAlpha(f64),
    #[error("beta must be finite and non-negative, got {0}")]
    BadBeta(f64),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Which regularizer a training run applies at the early-exit layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DarVariant {
    Center,
    Alienation,
    Combined,
}

/// Regularizer settings carried by a training config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DarConfig {
    pub variant: DarVariant,
    /// Weight of the regularizer inside each early-exit layer's loss.
    pub alpha: f64,
    /// Weight of the alienation term inside the `combined` variant.
    pub beta: f64,
    /// Sliding-average momentum for prototype updates.
    pub gamma: f64,
}

impl Default for DarConfig {
    fn default() -> Self {
        Self { variant: DarVariant::Combined, alpha: 1e-2, beta: 1.0, gamma: 0.5 }
    }
}

impl DarConfig {
    pub fn validate(&self) -> Result<(), ProtoError> {
        if !self.gamma.is_finite() || self.gamma <= 0.0 || self.gamma > 1.0 {
            return Err(ProtoError::BadGamma(self.gamma));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(ProtoError::BadAlpha(self.alpha));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(ProtoError::BadBeta(self.beta));
        }
        Ok(())
    }
}

/// Sliding-average class prototypes for layers `1..=layers`.
///
/// `layers` counts the early-exit layers only (the top layer of an M-layer
/// model has no prototypes, so a model hands `M - 1` here). A prototype is
/// unreadable until its class has appeared in at least one update batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    layers: usize,
    classes: usize,
    dim: usize,
    gamma: f64,
    vecs: Vec<f64>,
    init: Vec<bool>,
}

impl PrototypeBank {
    pub fn new(layers: usize, classes: usize, dim: usize, gamma: f64) -> Result<Self, ProtoError> {
        if classes < 2 {
            return Err(ProtoError::TooFewClasses(classes));
        }
        if dim == 0 {
            return Err(ProtoError::ZeroDim);
        }
        if !gamma.is_finite() || gamma <= 0.0 || gamma > 1.0 {
            return Err(ProtoError::BadGamma(gamma));
        }
        Ok(Self {
            layers,
            classes,
            dim,
            gamma,
            vecs: vec![0.0; layers * classes * dim],
            init: vec![false; layers * classes],
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Raw storage (all prototype vectors, then all init flags), used by
    /// the checkpoint format.
    pub(crate) fn raw_parts(&self) -> (&[f64], &[bool]) {
        (&self.vecs, &self.init)
    }

    /// Rebuild a bank from raw storage. The caller guarantees the slice
    /// lengths; constructor invariants are re-checked here.
    pub(crate) fn from_raw(
        layers: usize,
        classes: usize,
        dim: usize,
        gamma: f64,
        vecs: Vec<f64>,
        init: Vec<bool>,
    ) -> Result<Self, ProtoError> {
        let mut bank = Self::new(layers, classes, dim, gamma)?;
        debug_assert_eq!(vecs.len(), bank.vecs.len());
        debug_assert_eq!(init.len(), bank.init.len());
        bank.vecs = vecs;
        bank.init = init;
        Ok(bank)
    }

    fn check_layer(&self, layer: usize) -> Result<(), ProtoError> {
        if layer == 0 || layer > self.layers {
            return Err(ProtoError::LayerOutOfRange { layer, layers: self.layers });
        }
        Ok(())
    }

    fn check_class(&self, class: usize) -> Result<(), ProtoError> {
        if class >= self.classes {
            return Err(ProtoError::ClassOutOfRange { class, classes: self.classes });
        }
        Ok(())
    }

    fn slot(&self, layer: usize, class: usize) -> usize {
        (layer - 1) * self.classes + class
    }

    pub fn is_initialized(&self, layer: usize, class: usize) -> Result<bool, ProtoError> {
        self.check_layer(layer)?;
        self.check_class(class)?;
        Ok(self.init[self.slot(layer, class)])
    }

    /// True when every class has a prototype at this layer.
    pub fn all_initialized(&self, layer: usize) -> Result<bool, ProtoError> {
        self.check_layer(layer)?;
        Ok((0..self.classes).all(|c| self.init[self.slot(layer, c)]))
    }

    /// Read one prototype; uninitialized prototypes are never handed out.
    pub fn get(&self, layer: usize, class: usize) -> Result<&[f64], ProtoError> {
        if !self.is_initialized(layer, class)? {
            return Err(ProtoError::Uninitialized { layer, class });
        }
        let s = self.slot(layer, class) * self.dim;
        Ok(&self.vecs[s..s + self.dim])
    }

    fn write(&mut self, layer: usize, class: usize, v: &[f64]) {
        let slot = self.slot(layer, class);
        let s = slot * self.dim;
        self.vecs[s..s + self.dim].copy_from_slice(v);
        self.init[slot] = true;
    }

    /// Fold one batch of representations into the prototypes at `layer`.
    ///
    /// For every class present in `labels` the batch centroid is computed
    /// and blended in with momentum `gamma`; a class's first appearance
    /// initializes its prototype to the centroid directly. Classes absent
    /// from the batch are untouched.
    pub fn update(
        &mut self,
        layer: usize,
        reps: &[Vec<f64>],
        labels: &[usize],
    ) -> Result<(), ProtoError> {
        self.check_layer(layer)?;
        if reps.len() != labels.len() {
            return Err(ProtoError::CountMismatch { reps: reps.len(), labels: labels.len() });
        }
        for &y in labels {
            self.check_class(y)?;
        }
        for r in reps {
            if r.len() != self.dim {
                return Err(ProtoError::DimMismatch { got: r.len(), want: self.dim });
            }
        }
        for class in 0..self.classes {
            let members: Vec<&Vec<f64>> = labels
                .iter()
                .zip(reps)
                .filter(|(&y, _)| y == class)
                .map(|(_, r)| r)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut centroid = vec![0.0; self.dim];
            for r in &members {
                axpy(1.0 / members.len() as f64, r, &mut centroid);
            }
            if self.init[self.slot(layer, class)] {
                let g = self.gamma;
                let s = self.slot(layer, class) * self.dim;
                for (old, c) in self.vecs[s..s + self.dim].iter_mut().zip(&centroid) {
                    *old = (1.0 - g) * *old + g * c;
                }
            } else {
                self.write(layer, class, &centroid);
            }
        }
        Ok(())
    }
}

/// Loss value plus gradients with respect to each input representation.
#[derive(Debug, Clone, PartialEq)]
pub struct DarOutput {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

fn check_batch(
    reps: &[Vec<f64>],
    labels: &[usize],
    bank: &PrototypeBank,
    layer: usize,
) -> Result<(), ProtoError> {
    bank.check_layer(layer)?;
    if reps.is_empty() {
        return Err(ProtoError::EmptyBatch);
    }
    if reps.len() != labels.len() {
        return Err(ProtoError::CountMismatch { reps: reps.len(), labels: labels.len() });
    }
    for r in reps {
        if r.len() != bank.dim {
            return Err(ProtoError::DimMismatch { got: r.len(), want: bank.dim });
        }
    }
    for &y in labels {
        if !bank.is_initialized(layer, y)? {
            return Err(ProtoError::Uninitialized { layer, class: y });
        }
    }
    Ok(())
}

/// Mean cosine distance from each representation to its own class
/// prototype. Gradients flow into the representations only.
pub fn dar_center(
    reps: &[Vec<f64>],
    labels: &[usize],
    bank: &PrototypeBank,
    layer: usize,
) -> Result<DarOutput, ProtoError> {
    check_batch(reps, labels, bank, layer)?;
    let n = reps.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(reps.len());
    for (rep, &y) in reps.iter().zip(labels) {
        let (d, mut g) = cosine_distance_grad(rep, bank.get(layer, y)?)?;
        loss += d / n;
        for gi in &mut g {
            *gi /= n;
        }
        grads.push(g);
    }
    Ok(DarOutput { loss, grads })
}

/// Mean ratio signal between the own-class distance `r_y` and the distance
/// to the nearest other initialized class `r_z`:
/// `0.5 * (1 + (r_y - r_z) / max(r_y, r_z))`, averaged over the batch.
///
/// Driving this down rewards `r_y < r_z`, i.e. the sample sitting closer
/// to its own prototype than to any rival. Ties in the max take the `r_z`
/// branch; when both distances vanish the sample contributes the neutral
/// 0.5 with zero gradient.
pub fn dar_alienation(
    reps: &[Vec<f64>],
    labels: &[usize],
    bank: &PrototypeBank,
    layer: usize,
) -> Result<DarOutput, ProtoError> {
    check_batch(reps, labels, bank, layer)?;
    let initialized: Vec<usize> =
        (0..bank.classes).filter(|&c| bank.init[bank.slot(layer, c)]).collect();
    if initialized.len() < 2 {
        return Err(ProtoError::NeedTwoClasses { layer });
    }
    let n = reps.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(reps.len());
    for (rep, &y) in reps.iter().zip(labels) {
        let (ry, gy) = cosine_distance_grad(rep, bank.get(layer, y)?)?;
        let mut nearest: Option<(f64, Vec<f64>)> = None;
        for &c in &initialized {
            if c == y {
                continue;
            }
            let (d, g) = cosine_distance_grad(rep, bank.get(layer, c)?)?;
            if nearest.as_ref().is_none_or(|(best, _)| d < *best) {
                nearest = Some((d, g));
            }
        }
        let (rz, gz) = nearest.expect("at least one other initialized class");
        let mut grad = vec![0.0; rep.len()];
        if ry.max(rz) < NORM_EPS {
            loss += 0.5 / n;
        } else {
            let (term, dt_dry, dt_drz) = if ry > rz {
                (0.5 * (1.0 + (ry - rz) / ry), 0.5 * rz / (ry * ry), -0.5 / ry)
            } else {
                (0.5 * (1.0 + (ry - rz) / rz), 0.5 / rz, -0.5 * ry / (rz * rz))
            };
            loss += term / n;
            axpy(dt_dry / n, &gy, &mut grad);
            axpy(dt_drz / n, &gz, &mut grad);
        }
        grads.push(grad);
    }
    Ok(DarOutput { loss, grads })
}

/// `center + beta * alienation` over the same batch.
pub fn dar_combined(
    reps: &[Vec<f64>],
    labels: &[usize],
    bank: &PrototypeBank,
    layer: usize,
    beta: f64,
) -> Result<DarOutput, ProtoError> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(ProtoError::BadBeta(beta));
    }
    let center = dar_center(reps, labels, bank, layer)?;
    let alien = dar_alienation(reps, labels, bank, layer)?;
    let mut grads = center.grads;
    for (g, ga) in grads.iter_mut().zip(&alien.grads) {
        axpy(beta, ga, g);
    }
    Ok(DarOutput { loss: center.loss + beta * alien.loss, grads })
}

/// Evaluate the given variant. `beta` is only read by `combined`.
pub fn dar_loss(
    variant: DarVariant,
    reps: &[Vec<f64>],
    labels: &[usize],
    bank: &PrototypeBank,
    layer: usize,
    beta: f64,
) -> Result<DarOutput, ProtoError> {
    match variant {
        DarVariant::Center => dar_center(reps, labels, bank, layer),
        DarVariant::Alienation => dar_alienation(reps, labels, bank, layer),
        DarVariant::Combined => dar_combined(reps, labels, bank, layer, beta),
    }
}

/// One k-means iteration: assign every representation to the nearest
/// center by cosine distance (ties to the lower index), then replace each
/// center with the arithmetic mean of its members. Empty clusters and
/// degenerate means keep the previous center. Returns the largest
/// Euclidean movement over all centers.
pub(crate) fn kmeans_step(centers: &mut [Vec<f64>], reps: &[Vec<f64>]) -> Result<f64, ProtoError> {
    let k = centers.len();
    let dim = centers[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for rep in reps {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let d = cosine_distance(rep, center)?;
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        axpy(1.0, rep, &mut sums[best]);
        counts[best] += 1;
    }
    let mut movement: f64 = 0.0;
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        if norm(&mean) <= NORM_EPS {
            continue;
        }
        let moved = mean
            .iter()
            .zip(&centers[c])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        movement = movement.max(moved);
        centers[c] = mean;
    }
    Ok(movement)
}

/// Total within-cluster cosine distance under nearest-center assignment.
#[cfg(test)]
pub(crate) fn kmeans_objective(centers: &[Vec<f64>], reps: &[Vec<f64>]) -> Result<f64, ProtoError> {
    let mut total = 0.0;
    for rep in reps {
        let mut best = f64::INFINITY;
        for center in centers {
            best = best.min(cosine_distance(rep, center)?);
        }
        total += best;
    }
    Ok(total)
}

/// Re-center one layer's prototypes on unlabeled representations.
///
/// Runs k-means seeded at the current prototypes, stopping after
/// `max_iters` iterations or once every center moves less than `tol`.
/// `max_iters = 0` leaves the bank untouched. Requires every class at the
/// layer to be initialized, since the seeding is what ties each cluster
/// back to its class identity.
pub fn adjust_prototypes_kmeans(
    bank: &mut PrototypeBank,
    layer: usize,
    reps: &[Vec<f64>],
    max_iters: usize,
    tol: f64,
) -> Result<(), ProtoError> {
    bank.check_layer(layer)?;
    if !bank.all_initialized(layer)? {
        let missing = (0..bank.classes)
            .find(|&c| !bank.init[bank.slot(layer, c)])
            .expect("some class is uninitialized");
        return Err(ProtoError::Uninitialized { layer, class: missing });
    }
    for r in reps {
        if r.len() != bank.dim {
            return Err(ProtoError::DimMismatch { got: r.len(), want: bank.dim });
        }
    }
    let mut centers: Vec<Vec<f64>> =
        (0..bank.classes).map(|c| bank.get(layer, c).map(<[f64]>::to_vec)).collect::<Result<_, _>>()?;
    for _ in 0..max_iters {
        if kmeans_step(&mut centers, reps)? < tol {
            break;
        }
    }
    for (c, center) in centers.iter().enumerate() {
        bank.write(layer, c, center);
    }
    Ok(())
}
