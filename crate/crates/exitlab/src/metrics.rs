//! Per-layer exit signals: normalized entropy, cosine distances, and the
//! fused entropy/distance indicator.
//!
//! All three signals live in `[0, 1]` so a single threshold convention
//! ("exit when the indicator drops below tau") works across policies.
//! Degenerate inputs are guarded rather than propagated: probabilities are
//! clamped away from zero before logarithms, and distance computations on
//! vectors with vanishing norm are reported as errors instead of NaN.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability entries below this are clamped before taking a logarithm.
pub const PROB_EPS: f64 = 1e-12;

/// Vector norms and distance denominators at or below this are degenerate.
pub const NORM_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("probability vector needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("probability entry {value} at index {index} is outside [0, 1]")]
    EntryOutOfRange { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1 within 1e-6")]
    NotNormalized(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero-norm vector in cosine distance")]
    ZeroNorm,
    #[error("distance {0} is outside [0, 2]")]
    DistanceOutOfRange(f64),
    #[error("lambda must be positive and finite, got {0}")]
    BadLambda(f64),
    #[error("{name} {value} is outside [0, 1]")]
    IndicatorOutOfRange { name: &'static str, value: f64 },
}

/// A validated categorical distribution over `K >= 2` classes.
///
/// Construction checks length, entry range and normalization once, so the
/// signal functions below can stay total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(p: Vec<f64>) -> Result<Self, MetricsError> {
        if p.len() < 2 {
            return Err(MetricsError::TooFewClasses(p.len()));
        }
        for (index, &value) in p.iter().enumerate() {
            if !value.is_finite() {
                return Err(MetricsError::NonFinite("probability entry"));
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(MetricsError::EntryOutOfRange { index, value });
            }
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MetricsError::NotNormalized(sum));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest entry; ties go to the lower class index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Indices of the two largest entries, most probable first.
    /// Ties go to the lower class index.
    pub fn top2(&self) -> (usize, usize) {
        let first = self.argmax();
        let mut second = usize::MAX;
        for (i, &v) in self.0.iter().enumerate() {
            if i == first {
                continue;
            }
            if second == usize::MAX || v > self.0[second] {
                second = i;
            }
        }
        (first, second)
    }
}

impl TryFrom<Vec<f64>> for ProbDist {
    type Error = MetricsError;
    fn try_from(p: Vec<f64>) -> Result<Self, MetricsError> {
        ProbDist::new(p)
    }
}

impl From<ProbDist> for Vec<f64> {
    fn from(p: ProbDist) -> Vec<f64> {
        p.0
    }
}

/// Cosine distances from one representation to the prototypes of the two
/// most probable classes: `r1` for the top class, `r2` for the runner-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistancePair {
    pub r1: f64,
    pub r2: f64,
}

impl DistancePair {
    pub fn new(r1: f64, r2: f64) -> Result<Self, MetricsError> {
        for d in [r1, r2] {
            if !d.is_finite() {
                return Err(MetricsError::NonFinite("distance"));
            }
            if !(0.0..=2.0).contains(&d) {
                return Err(MetricsError::DistanceOutOfRange(d));
            }
        }
        Ok(Self { r1, r2 })
    }
}

/// Shannon entropy of `p` divided by `log(1/K)`, mapped into `[0, 1]`.
///
/// Natural logarithms; 1 means uniform, 0 means one-hot. Entries below
/// [`PROB_EPS`] are clamped inside the logarithm so exact zeros contribute
/// exactly zero instead of NaN.
pub fn normalized_entropy(p: &ProbDist) -> f64 {
    let k = p.classes() as f64;
    let raw: f64 = p.as_slice().iter().map(|&x| x * x.max(PROB_EPS).ln()).sum();
    (raw / (1.0 / k).ln()).clamp(0.0, 1.0)
}

/// `1 - cos(u, v)`, in `[0, 2]`.
///
/// Errors when either vector has norm at or below [`NORM_EPS`]; a vanishing
/// norm signals an uninitialized prototype or a degenerate representation.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, MetricsError> {
    Ok(cosine_distance_grad(u, v)?.0.clamp(0.0, 2.0))
}

/// Cosine distance together with its gradient with respect to `u`.
///
/// The returned distance is unclamped so the value stays consistent with
/// the gradient; callers that only need the value should use
/// [`cosine_distance`].
pub(crate) fn cosine_distance_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>), MetricsError> {
    if u.len() != v.len() {
        return Err(MetricsError::LengthMismatch(u.len(), v.len()));
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite("vector entry"));
    }
    let nu = crate::linalg::norm(u);
    let nv = crate::linalg::norm(v);
    if nu <= NORM_EPS || nv <= NORM_EPS {
        return Err(MetricsError::ZeroNorm);
    }
    let uv = crate::linalg::dot(u, v);
    let d = 1.0 - uv / (nu * nv);
    // d(u) = 1 - u.v / (|u||v|)  =>  dd/du = -v/(|u||v|) + (u.v) u / (|u|^3 |v|)
    let a = -1.0 / (nu * nv);
    let b = uv / (nu.powi(3) * nv);
    let grad = u.iter().zip(v).map(|(&ui, &vi)| a * vi + b * ui).collect();
    Ok((d, grad))
}

/// Ratio signal `0.5 * (1 + (r1 - r2) / max(r1, r2))`, in `[0, 1]`.
///
/// Below 0.5 the top class is also the metrically nearest one; above 0.5
/// the runner-up's prototype is closer. When both distances vanish
/// (`max < NORM_EPS`) the signal is uninformative and 0.5 is returned.
pub fn distance_ratio(d: DistancePair) -> f64 {
    let m = d.r1.max(d.r2);
    if m < NORM_EPS {
        return 0.5;
    }
    (0.5 * (1.0 + (d.r1 - d.r2) / m)).clamp(0.0, 1.0)
}

/// Weighted harmonic fusion of entropy and distance ratio:
/// `(lambda + 1) / (lambda / ratio + 1 / entropy)`.
///
/// Larger `lambda` leans on the distance ratio; `lambda -> 0` recovers the
/// entropy alone. The result lies between the two inputs. If either input
/// is below [`PROB_EPS`] the sample is taken as certain and 0 is returned.
pub fn edr(entropy: f64, ratio: f64, lambda: f64) -> Result<f64, MetricsError> {
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(MetricsError::BadLambda(lambda));
    }
    let entropy = checked_indicator("entropy", entropy)?;
    let ratio = checked_indicator("distance ratio", ratio)?;
    if entropy < PROB_EPS || ratio < PROB_EPS {
        return Ok(0.0);
    }
    Ok(((lambda + 1.0) / (lambda / ratio + 1.0 / entropy)).clamp(0.0, 1.0))
}

/// Clamp floating-point spill just outside `[0, 1]`; reject anything worse.
fn checked_indicator(name: &'static str, value: f64) -> Result<f64, MetricsError> {
    if !value.is_finite() || !(-1e-9..=1.0 + 1e-9).contains(&value) {
        return Err(MetricsError::IndicatorOutOfRange { name, value });
    }
    Ok(value.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> ProbDist {
        ProbDist::new(p.to_vec()).unwrap()
    }

    // Reference values computed independently at 30 decimal digits.
    const ENT_09_01: f64 = 0.468995593589281221253589330383;
    const ENT_06_04: f64 = 0.970950594454668638998076063121;
    const ENT_08_02: f64 = 0.721928094887362347870319429489;
    const ENT_099_001: f64 = 0.0807931358959111728248663337036;

    #[test]
    fn entropy_frozen_values() {
        assert_abs_diff_eq!(
            normalized_entropy(&dist(&[0.9, 0.1])),
            ENT_09_01,
            epsilon = 1e-12
        );
        // published working tolerance for the same value
        assert_abs_diff_eq!(normalized_entropy(&dist(&[0.9, 0.1])), 0.46900, epsilon = 1e-4);
        assert_abs_diff_eq!(normalized_entropy(&dist(&[0.6, 0.4])), ENT_06_04, epsilon = 1e-12);
        assert_abs_diff_eq!(normalized_entropy(&dist(&[0.8, 0.2])), ENT_08_02, epsilon = 1e-12);
        assert_abs_diff_eq!(
            normalized_entropy(&dist(&[0.99, 0.01])),
            ENT_099_001,
            epsilon = 1e-12
        );
    }

    #[test]
    fn entropy_uniform_is_one_onehot_is_zero() {
        assert_abs_diff_eq!(normalized_entropy(&dist(&[0.5, 0.5])), 1.0, epsilon = 1e-9);
        let third = 1.0 / 3.0;
        assert_abs_diff_eq!(
            normalized_entropy(&dist(&[third, third, third])),
            1.0,
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(normalized_entropy(&dist(&[1.0, 0.0, 0.0])), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(normalized_entropy(&dist(&[0.0, 1.0])), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn probdist_rejects_bad_input() {
        assert_eq!(ProbDist::new(vec![1.0]), Err(MetricsError::TooFewClasses(1)));
        assert!(matches!(
            ProbDist::new(vec![0.5, 0.6]),
            Err(MetricsError::NotNormalized(_))
        ));
        assert!(matches!(
            ProbDist::new(vec![-0.1, 1.1]),
            Err(MetricsError::EntryOutOfRange { .. })
        ));
        assert!(matches!(
            ProbDist::new(vec![f64::NAN, 1.0]),
            Err(MetricsError::NonFinite(_))
        ));
    }

    #[test]
    fn top2_breaks_ties_by_lower_index() {
        let p = dist(&[0.25, 0.25, 0.25, 0.25]);
        assert_eq!(p.argmax(), 0);
        assert_eq!(p.top2(), (0, 1));
        let p = dist(&[0.1, 0.4, 0.4, 0.1]);
        assert_eq!(p.top2(), (1, 2));
    }

    #[test]
    fn distance_ratio_frozen_value() {
        let d = DistancePair::new(0.2, 0.6).unwrap();
        assert_abs_diff_eq!(distance_ratio(d), 1.0 / 6.0, epsilon = 1e-12);
        // 0.16667 is the same value rounded to five decimals
        assert_abs_diff_eq!(distance_ratio(d), 0.16667, epsilon = 5e-6);
    }

    #[test]
    fn distance_ratio_degenerate_pair_is_half() {
        let d = DistancePair::new(0.0, 0.0).unwrap();
        assert_eq!(distance_ratio(d), 0.5);
        let d = DistancePair::new(1e-10, 2e-10).unwrap();
        assert_eq!(distance_ratio(d), 0.5);
    }

    #[test]
    fn cosine_distance_basics() {
        let u = [1.0, 0.0];
        assert_abs_diff_eq!(cosine_distance(&u, &[2.0, 0.0]).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine_distance(&u, &[-3.0, 0.0]).unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine_distance(&u, &[0.0, 1.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(cosine_distance(&u, &[0.0, 0.0]), Err(MetricsError::ZeroNorm));
        assert_eq!(
            cosine_distance(&u, &[1.0, 0.0, 0.0]),
            Err(MetricsError::LengthMismatch(2, 3))
        );
    }

    #[test]
    fn edr_frozen_values() {
        assert_abs_diff_eq!(edr(0.25, 0.5, 1.0).unwrap(), 1.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(edr(0.3, 0.6, 2.0).unwrap(), 0.45, epsilon = 1e-9);
    }

    #[test]
    fn edr_guards() {
        // degenerate certainty on either side collapses to 0
        assert_eq!(edr(0.0, 0.7, 1.0).unwrap(), 0.0);
        assert_eq!(edr(0.7, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(edr(0.5, 0.5, 0.0), Err(MetricsError::BadLambda(0.0)));
        assert_eq!(edr(0.5, 0.5, -1.0), Err(MetricsError::BadLambda(-1.0)));
        assert!(matches!(
            edr(1.5, 0.5, 1.0),
            Err(MetricsError::IndicatorOutOfRange { .. })
        ));
    }

    #[test]
    fn edr_lambda_limits() {
        // tiny lambda ~ entropy, huge lambda ~ ratio
        assert_abs_diff_eq!(edr(0.62, 0.31, 1e-9).unwrap(), 0.62, epsilon = 1e-6);
        assert_abs_diff_eq!(edr(0.62, 0.31, 1e9).unwrap(), 0.31, epsilon = 1e-6);
    }

    proptest! {
        #[test]
        fn entropy_stays_in_unit_interval(raw in proptest::collection::vec(1e-6..1.0f64, 2..6)) {
            let sum: f64 = raw.iter().sum();
            let p = dist(&raw.iter().map(|x| x / sum).collect::<Vec<_>>());
            let h = normalized_entropy(&p);
            prop_assert!((0.0..=1.0).contains(&h));
        }

        #[test]
        fn entropy_is_permutation_invariant(raw in proptest::collection::vec(1e-6..1.0f64, 2..6)) {
            let sum: f64 = raw.iter().sum();
            let norm: Vec<f64> = raw.iter().map(|x| x / sum).collect();
            let mut rev = norm.clone();
            rev.reverse();
            let a = normalized_entropy(&dist(&norm));
            let b = normalized_entropy(&dist(&rev));
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn ratio_order_swap_is_complementary(r1 in 1e-6..2.0f64, r2 in 1e-6..2.0f64) {
            let a = distance_ratio(DistancePair::new(r1, r2).unwrap());
            let b = distance_ratio(DistancePair::new(r2, r1).unwrap());
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ratio_is_scale_invariant(r1 in 1e-3..2.0f64, r2 in 1e-3..2.0f64, s in 0.01..0.9f64) {
            // scale both distances; keep them inside the valid [0, 2] range
            let a = distance_ratio(DistancePair::new(r1, r2).unwrap());
            let b = distance_ratio(DistancePair::new(r1 * s, r2 * s).unwrap());
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn cosine_distance_is_symmetric_and_bounded(
            u in proptest::collection::vec(-5.0..5.0f64, 3),
            v in proptest::collection::vec(-5.0..5.0f64, 3),
        ) {
            prop_assume!(crate::linalg::norm(&u) > 1e-3 && crate::linalg::norm(&v) > 1e-3);
            let a = cosine_distance(&u, &v).unwrap();
            let b = cosine_distance(&v, &u).unwrap();
            prop_assert!((0.0..=2.0).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn edr_lies_between_its_inputs(e in 1e-3..1.0f64, r in 1e-3..1.0f64, lam in 0.1..10.0f64) {
            let f = edr(e, r, lam).unwrap();
            let (lo, hi) = if e < r { (e, r) } else { (r, e) };
            prop_assert!(f >= lo - 1e-12 && f <= hi + 1e-12);
        }

        #[test]
        fn edr_is_monotone_in_each_argument(
            e in 1e-3..0.9f64, r in 1e-3..0.9f64, lam in 0.1..10.0f64, bump in 1e-4..0.1f64,
        ) {
            let base = edr(e, r, lam).unwrap();
            prop_assert!(edr(e + bump, r, lam).unwrap() >= base - 1e-12);
            prop_assert!(edr(e, r + bump, lam).unwrap() >= base - 1e-12);
        }
    }
}
