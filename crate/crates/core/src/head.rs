//! Bias-free classification head and the angular-penalty loss family.
//!
//! Logits are `y = h W^T` with `W: M x d`. A class subset `R` selects the
//! rows `W* = W[R]` (ascending id order) and the masked logits `h W*^T`.
//!
//! Angular kinds work on `cos_j = <h/|h|, w_j/|w_j|>` and replace the target
//! logit with `s * psi(cos_y)`:
//!
//! | kind       | psi(cos)                                   |
//! |------------|--------------------------------------------|
//! | cosface    | `cos - m`                                  |
//! | arcface    | `cos(acos(cos) + m)`                       |
//! | sphereface | `(-1)^k cos(m t) - 2k`, `t = acos(cos)`, `k = floor(m t / pi)` |
//! | adacos     | `cos`, with a per-batch dynamic scale      |
//!
//! Non-target logits are `s * cos_j`. The plain softmax kind uses raw logits.

use std::f64::consts::{FRAC_PI_4, PI};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedder::xavier_matrix;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{self, stream_rng};

/// Clamp applied to cosines before `acos`.
pub const ACOS_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadMatrix<T> {
    pub weight: Array2<T>,
    pub grad: Array2<T>,
}

impl<T: Real> HeadMatrix<T> {
    pub fn init(n_classes: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::validation("n_classes", "head needs at least 2 classes"));
        }
        let mut rng = stream_rng(seed, rng::INIT ^ 0x4845_4144);
        Self::from_weight(xavier_matrix(n_classes, embed_dim, &mut rng))
    }

    pub fn from_weight(weight: Array2<T>) -> Result<Self> {
        if weight.nrows() < 2 {
            return Err(Error::validation("n_classes", "head needs at least 2 classes"));
        }
        let grad = Array2::zeros(weight.dim());
        Ok(HeadMatrix { weight, grad })
    }

    pub fn n_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.ncols()
    }
}

pub fn logits<T: Real>(h: ArrayView1<'_, T>, weight: ArrayView2<'_, T>) -> Result<Array1<T>> {
    if h.len() != weight.ncols() {
        return Err(Error::Shape(format!(
            "embedding has dimension {}, head expects {}",
            h.len(),
            weight.ncols()
        )));
    }
    Ok(weight.dot(&h))
}

/// Checks that `subset` is a non-empty, strictly increasing list of ids
/// below `n_classes`.
pub fn validate_subset(subset: &[usize], n_classes: usize) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::Mask("class subset is empty".into()));
    }
    if let Some(&bad) = subset.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Mask(format!(
            "class id {bad} out of range for {n_classes} classes"
        )));
    }
    if subset.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Mask("class subset must be strictly increasing".into()));
    }
    Ok(())
}

/// Copies rows `subset` of `weight`, in the order given.
pub fn select_rows<T: Real>(weight: ArrayView2<'_, T>, subset: &[usize]) -> Result<Array2<T>> {
    validate_subset(subset, weight.nrows())?;
    Ok(weight.select(Axis(0), subset))
}

pub fn masked_logits<T: Real>(h: ArrayView1<'_, T>, weight: ArrayView2<'_, T>, subset: &[usize]) -> Result<Array1<T>> {
    let rows = select_rows(weight, subset)?;
    logits(h, rows.view())
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(z: ArrayView1<'_, T>) -> Array1<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut e = z.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e.mapv_inplace(|v| v / sum);
    e
}

/// `logsumexp(z) - z[label]`, written as `(max - z_y) + ln_1p(sum_{k != argmax}
/// exp(z_k - max))` so small losses keep their relative precision.
pub fn cross_entropy<T: Real>(z: ArrayView1<'_, T>, label: usize) -> T {
    let (arg, max) = z.iter().copied().enumerate().fold(
        (0, T::neg_infinity()),
        |best, (i, v)| if v > best.1 { (i, v) } else { best },
    );
    let rest: T = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    (max - z[label]) + rest.ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Softmax,
    CosFace,
    SphereFace,
    ArcFace,
    AdaCos,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Softmax,
        LossKind::CosFace,
        LossKind::ArcFace,
        LossKind::SphereFace,
        LossKind::AdaCos,
    ];

    pub fn is_angular(self) -> bool {
        self != LossKind::Softmax
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            LossKind::Softmax => "softmax",
            LossKind::CosFace => "cosface",
            LossKind::SphereFace => "sphereface",
            LossKind::ArcFace => "arcface",
            LossKind::AdaCos => "adacos",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(LossKind::Softmax),
            "cosface" => Ok(LossKind::CosFace),
            "sphereface" => Ok(LossKind::SphereFace),
            "arcface" => Ok(LossKind::ArcFace),
            "adacos" => Ok(LossKind::AdaCos),
            other => Err(Error::validation("loss.kind", format!("unknown loss `{other}`"))),
        }
    }
}

/// Initial AdaCos scale for `n_classes` active classes, clamped.
pub fn adacos_initial_scale(n_classes: usize) -> f64 {
    let raw = std::f64::consts::SQRT_2 * ((n_classes as f64) - 1.0).ln();
    raw.clamp(ADACOS_MIN_SCALE, ADACOS_MAX_SCALE)
}

pub const ADACOS_MIN_SCALE: f64 = 1.0;
pub const ADACOS_MAX_SCALE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Fixed scale `s`; for AdaCos, the current dynamic scale.
    pub scale: f64,
    pub margin: f64,
    /// AdaCos: reset the scale to its initial value whenever the active
    /// class set changes.
    pub adacos_reset_on_refresh: bool,
}

impl LossSpec {
    /// Conventional settings: cosface s=30 m=0.35, arcface s=30 m=0.2,
    /// sphereface s=30 m=4, adacos s=sqrt(2) ln(M-1).
    pub fn default_for(kind: LossKind, n_classes: usize) -> Self {
        let (scale, margin) = match kind {
            LossKind::Softmax => (1.0, 0.0),
            LossKind::CosFace => (30.0, 0.35),
            LossKind::ArcFace => (30.0, 0.2),
            LossKind::SphereFace => (30.0, 4.0),
            LossKind::AdaCos => (adacos_initial_scale(n_classes), 0.0),
        };
        LossSpec {
            kind,
            scale,
            margin,
            adacos_reset_on_refresh: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::validation(
                "loss.scale",
                format!("must be > 0, got {}", self.scale),
            ));
        }
        match self.kind {
            LossKind::CosFace | LossKind::ArcFace if !(0.0..1.0).contains(&self.margin) => Err(Error::validation(
                "loss.margin",
                format!("{} margin must lie in [0, 1), got {}", self.kind, self.margin),
            )),
            LossKind::SphereFace if ![1.0, 2.0, 3.0, 4.0].contains(&self.margin) => Err(Error::validation(
                "loss.margin",
                format!("sphereface margin must be one of 1, 2, 3, 4, got {}", self.margin),
            )),
            _ => Ok(()),
        }
    }

    /// Called when the active class count changes.
    pub fn on_active_classes_changed(&mut self, n_active: usize) {
        if self.kind == LossKind::AdaCos && self.adacos_reset_on_refresh {
            self.scale = adacos_initial_scale(n_active);
        }
    }

    /// AdaCos scale update from one batch: `s <- ln(B_avg) / cos(min(pi/4,
    /// theta_med))`, where `B_avg` is the mean non-target mass
    /// `sum_{j != y} exp(s cos_j)` and `theta_med` the median target angle.
    pub fn adacos_update(&mut self, batch: &[(Array1<f64>, usize)]) {
        if self.kind != LossKind::AdaCos || batch.is_empty() {
            return;
        }
        let s = self.scale;
        let mut mass = 0.0;
        let mut angles: Vec<f64> = Vec::with_capacity(batch.len());
        for (cos, label) in batch {
            mass += cos
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != *label)
                .map(|(_, &c)| (s * c).exp())
                .sum::<f64>();
            angles.push(cos[*label].clamp(-1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP).acos());
        }
        let b_avg = mass / batch.len() as f64;
        angles.sort_by(f64::total_cmp);
        let n = angles.len();
        let median = if n % 2 == 1 {
            angles[n / 2]
        } else {
            0.5 * (angles[n / 2 - 1] + angles[n / 2])
        };
        let updated = b_avg.ln() / median.min(FRAC_PI_4).cos();
        if updated.is_finite() {
            self.scale = updated.clamp(ADACOS_MIN_SCALE, ADACOS_MAX_SCALE);
        } else {
            self.scale = self.scale.clamp(ADACOS_MIN_SCALE, ADACOS_MAX_SCALE);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad_h: Array1<T>,
    /// Gradient for the rows passed in, same shape.
    pub grad_w: Array2<T>,
    /// Softmax over the (modified) logits.
    pub probs: Array1<T>,
    /// Cosines to every row; `None` for the softmax kind.
    pub cosines: Option<Array1<T>>,
}

/// Target-logit transform: returns `(psi(cos), d psi / d cos)`.
fn target_transform<T: Real>(kind: LossKind, margin: f64, cos: T) -> (T, T) {
    let one = T::one();
    match kind {
        LossKind::Softmax | LossKind::AdaCos => (cos, one),
        LossKind::CosFace => (cos - T::lit(margin), one),
        LossKind::ArcFace | LossKind::SphereFace => {
            let lo = T::lit(-1.0 + ACOS_CLAMP);
            let hi = T::lit(1.0 - ACOS_CLAMP);
            let clamped = cos < lo || cos > hi;
            let c = cos.max(lo).min(hi);
            let theta = c.acos();
            let sin_theta = theta.sin();
            let (value, dtheta) = if kind == LossKind::ArcFace {
                let m = T::lit(margin);
                // d/dc cos(theta + m) = sin(theta + m) / sin(theta)
                ((theta + m).cos(), (theta + m).sin() / sin_theta)
            } else {
                let m = T::lit(margin);
                let k = (m * theta / T::lit(PI)).floor().max(T::zero()).min(m - one);
                let sign = if k.to_i64().unwrap_or(0) % 2 == 0 { one } else { -one };
                let mt = m * theta;
                (sign * mt.cos() - T::lit(2.0) * k, sign * m * mt.sin() / sin_theta)
            };
            (value, if clamped { T::zero() } else { dtheta })
        }
    }
}

/// Cross-entropy of `label` over the rows `weight` (the active head), with
/// exact gradients for `h` and for every row.
pub fn loss_and_grads<T: Real>(
    h: ArrayView1<'_, T>,
    weight: ArrayView2<'_, T>,
    label: usize,
    spec: &LossSpec,
) -> Result<LossOutput<T>> {
    let n = weight.nrows();
    if label >= n {
        return Err(Error::Label { label, classes: n });
    }
    if h.len() != weight.ncols() {
        return Err(Error::Shape(format!(
            "embedding has dimension {}, head expects {}",
            h.len(),
            weight.ncols()
        )));
    }

    let out = if spec.kind == LossKind::Softmax {
        let z = weight.dot(&h);
        let loss = cross_entropy(z.view(), label);
        let probs = softmax(z.view());
        let mut grad_z = probs.clone();
        grad_z[label] -= T::one();
        let grad_h = weight.t().dot(&grad_z);
        let grad_w = outer(grad_z.view(), h);
        LossOutput {
            loss,
            grad_h,
            grad_w,
            probs,
            cosines: None,
        }
    } else {
        let h_norm = h.dot(&h).sqrt();
        if !(h_norm > T::zero()) || !h_norm.is_finite() {
            return Err(Error::Numeric(format!("embedding norm is {h_norm}")));
        }
        let h_hat = h.mapv(|v| v / h_norm);
        let w_norms = weight.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if let Some(bad) = w_norms.iter().position(|&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::Numeric(format!("head row {bad} has norm {}", w_norms[bad])));
        }
        let w_hat = &weight / &w_norms.view().insert_axis(Axis(1));
        let cos = w_hat.dot(&h_hat);

        let s = T::lit(spec.scale);
        let (psi, dpsi) = target_transform(spec.kind, spec.margin, cos[label]);
        let mut z = cos.mapv(|c| s * c);
        z[label] = s * psi;
        let loss = cross_entropy(z.view(), label);
        let probs = softmax(z.view());

        let mut grad_cos = probs.mapv(|p| s * p);
        grad_cos[label] = s * (probs[label] - T::one()) * dpsi;

        // d cos_j / d h   = (w_hat_j - cos_j h_hat) / |h|
        // d cos_j / d w_j = (h_hat - cos_j w_hat_j) / |w_j|
        let weighted = grad_cos.dot(&cos);
        let mut grad_h = w_hat.t().dot(&grad_cos);
        grad_h.scaled_add(-weighted, &h_hat);
        grad_h.mapv_inplace(|v| v / h_norm);

        let mut grad_w = Array2::zeros(weight.dim());
        for (j, mut row) in grad_w.outer_iter_mut().enumerate() {
            let coef = grad_cos[j] / w_norms[j];
            row.assign(&h_hat);
            row.scaled_add(-cos[j], &w_hat.row(j));
            row.mapv_inplace(|v| v * coef);
        }
        LossOutput {
            loss,
            grad_h,
            grad_w,
            probs,
            cosines: Some(cos),
        }
    };

    if !out.loss.is_finite() || out.grad_h.iter().any(|v| !v.is_finite()) || out.grad_w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "{} loss produced a non-finite value",
            spec.kind
        )));
    }
    Ok(out)
}

fn outer<T: Real>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Array2<T> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        row.assign(&b);
        row.mapv_inplace(|v| v * a[i]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream_rng(seed, 77);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    fn random_vector(n: usize, seed: u64) -> Array1<f64> {
        let mut rng = stream_rng(seed, 78);
        Array1::from_shape_simple_fn(n, || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let w = Array2::<f64>::zeros((4, 3));
        let y = logits(random_vector(3, 0).view(), w.view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn basis_vector_reads_first_column() {
        let w = random_matrix(5, 3, 1);
        let e1 = Array1::from(vec![1.0, 0.0, 0.0]);
        let y = logits(e1.view(), w.view()).unwrap();
        for j in 0..5 {
            assert_eq!(y[j], w[[j, 0]]);
        }
    }

    #[test]
    fn logits_match_naive_loops() {
        let w = random_matrix(7, 6, 2);
        let h = random_vector(6, 3);
        let y = logits(h.view(), w.view()).unwrap();
        for j in 0..7 {
            let mut acc = 0.0;
            for k in 0..6 {
                acc += h[k] * w[[j, k]];
            }
            assert!((y[j] - acc).abs() <= 1e-6);
        }
        assert!(matches!(
            logits(random_vector(5, 0).view(), w.view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn masked_logits_select_rows() {
        let w = random_matrix(5, 4, 4);
        let h = random_vector(4, 5);
        let full = logits(h.view(), w.view()).unwrap();
        assert_eq!(masked_logits(h.view(), w.view(), &[0, 1, 2, 3, 4]).unwrap(), full);
        let part = masked_logits(h.view(), w.view(), &[0, 2, 4]).unwrap();
        assert_eq!(part.len(), 3);
        assert_eq!(part[0], full[0]);
        assert_eq!(part[1], full[2]);
        assert_eq!(part[2], full[4]);
    }

    #[test]
    fn mask_errors() {
        let w = random_matrix(5, 2, 0);
        let h = random_vector(2, 0);
        assert!(matches!(masked_logits(h.view(), w.view(), &[]), Err(Error::Mask(_))));
        assert!(matches!(
            masked_logits(h.view(), w.view(), &[1, 5]),
            Err(Error::Mask(_))
        ));
        assert!(matches!(
            masked_logits(h.view(), w.view(), &[2, 1]),
            Err(Error::Mask(_))
        ));
    }

    #[test]
    fn single_class_loss_is_zero() {
        let w = random_matrix(5, 4, 6);
        let h = random_vector(4, 7);
        let rows = select_rows(w.view(), &[3]).unwrap();
        for kind in [LossKind::Softmax, LossKind::AdaCos] {
            let spec = LossSpec::default_for(kind, 5);
            let out = loss_and_grads(h.view(), rows.view(), 0, &spec).unwrap();
            assert_eq!(out.probs[0], 1.0);
            assert_eq!(out.loss, 0.0);
        }
    }

    #[test]
    fn margin_free_cosface_is_cosine_softmax() {
        let w = random_matrix(6, 5, 8);
        let h = random_vector(5, 9);
        let spec = LossSpec {
            kind: LossKind::CosFace,
            scale: 1.0,
            margin: 0.0,
            adacos_reset_on_refresh: true,
        };
        let out = loss_and_grads(h.view(), w.view(), 2, &spec).unwrap();
        let hn = h.dot(&h).sqrt();
        let cos: Vec<f64> = w.outer_iter().map(|r| r.dot(&h) / (r.dot(&r).sqrt() * hn)).collect();
        let denom: f64 = cos.iter().map(|c| c.exp()).sum();
        let expected = -(cos[2].exp() / denom).ln();
        assert!((out.loss - expected).abs() <= 1e-9);
    }

    #[test]
    fn cosface_two_class_closed_form() {
        // h along w_0, w_1 orthogonal: logits 30 (1 - 0.35) and 0.
        let w = Array2::from_shape_vec((2, 3), vec![2.0, 0.0, 0.0, 0.0, 0.5, 0.0]).unwrap();
        let h = Array1::from(vec![3.0, 0.0, 0.0]);
        let spec = LossSpec::default_for(LossKind::CosFace, 2);
        let out = loss_and_grads(h.view(), w.view(), 0, &spec).unwrap();
        let expected = (1.0f64 + (-19.5f64).exp()).ln();
        assert!((out.loss - expected).abs() <= 1e-15, "{} vs {expected}", out.loss);
    }

    #[test]
    fn label_out_of_range() {
        let w = random_matrix(3, 2, 0);
        let h = random_vector(2, 0);
        let spec = LossSpec::default_for(LossKind::CosFace, 3);
        assert!(matches!(
            loss_and_grads(h.view(), w.view(), 3, &spec),
            Err(Error::Label { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn zero_embedding_is_numeric_error() {
        let w = random_matrix(3, 2, 0);
        let spec = LossSpec::default_for(LossKind::ArcFace, 3);
        assert!(matches!(
            loss_and_grads(Array1::zeros(2).view(), w.view(), 0, &spec),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn spec_validation() {
        let mut s = LossSpec::default_for(LossKind::SphereFace, 10);
        s.margin = 2.5;
        assert!(s.validate().is_err());
        let mut s = LossSpec::default_for(LossKind::CosFace, 10);
        s.margin = 1.0;
        assert!(s.validate().is_err());
        s.margin = 0.3;
        s.scale = 0.0;
        assert!(s.validate().is_err());
        for kind in LossKind::ALL {
            LossSpec::default_for(kind, 10).validate().unwrap();
        }
    }

    #[test]
    fn sphereface_target_is_monotone_in_angle() {
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let theta = PI * i as f64 / 1000.0;
            let (v, _) = target_transform::<f64>(LossKind::SphereFace, 4.0, theta.cos());
            assert!(v <= prev + 1e-12, "not monotone at {theta}");
            prev = v;
        }
    }

    fn loss_value(h: &Array1<f64>, w: &Array2<f64>, label: usize, spec: &LossSpec) -> f64 {
        loss_and_grads(h.view(), w.view(), label, spec).unwrap().loss
    }

    #[test]
    fn every_kind_matches_finite_differences() {
        for kind in LossKind::ALL {
            let spec = LossSpec::default_for(kind, 6);
            for seed in 0..10 {
                let w = random_matrix(6, 5, 100 + seed);
                let h = random_vector(5, 200 + seed);
                let report =
                    crate::gradcheck::head_check(h.view(), w.view(), (seed as usize) % 6, &spec, 1e-5).unwrap();
                assert_eq!(report.checked, 5 + 6 * 5);
                assert!(report.max_relative_error <= 1e-4, "{kind} seed {seed}: {report:?}");
            }
        }
    }

    #[test]
    fn masking_matches_reduced_problem() {
        let w = random_matrix(8, 4, 30);
        let h = random_vector(4, 31);
        let subset = [1, 4, 6];
        let masked = select_rows(w.view(), &subset).unwrap();
        let mut reduced = Array2::zeros((3, 4));
        for (i, &c) in subset.iter().enumerate() {
            for k in 0..4 {
                reduced[[i, k]] = w[[c, k]];
            }
        }
        for kind in LossKind::ALL {
            let spec = LossSpec::default_for(kind, 3);
            let a = loss_and_grads(h.view(), masked.view(), 1, &spec).unwrap();
            let b = loss_and_grads(h.view(), reduced.view(), 1, &spec).unwrap();
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.grad_h, b.grad_h);
            assert_eq!(a.grad_w, b.grad_w);
        }
    }

    #[test]
    fn adacos_update_follows_rule() {
        let mut spec = LossSpec::default_for(LossKind::AdaCos, 11);
        assert!((spec.scale - std::f64::consts::SQRT_2 * 10f64.ln()).abs() < 1e-12);
        let s0 = spec.scale;
        let batch = vec![
            (Array1::from(vec![0.9, 0.1, -0.2]), 0),
            (Array1::from(vec![0.0, 0.5, 0.3]), 1),
            (Array1::from(vec![0.2, 0.2, 0.8]), 2),
        ];
        let mass: f64 = [0.1f64, -0.2, 0.0, 0.3, 0.2, 0.2]
            .iter()
            .map(|c| (s0 * c).exp())
            .sum::<f64>()
            / 3.0;
        let median = 0.8f64.acos();
        let expected = (mass.ln() / median.min(FRAC_PI_4).cos()).clamp(1.0, 100.0);
        spec.adacos_update(&batch);
        assert!((spec.scale - expected).abs() < 1e-12);
        spec.on_active_classes_changed(5);
        assert!((spec.scale - std::f64::consts::SQRT_2 * 4f64.ln()).abs() < 1e-12);
        // sqrt(2) ln 2 < 1 falls under the clamp.
        spec.on_active_classes_changed(3);
        assert_eq!(spec.scale, 1.0);
    }

    fn kind_strategy() -> impl Strategy<Value = LossKind> {
        prop::sample::select(LossKind::ALL.to_vec())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn probabilities_sum_to_one(kind in kind_strategy(), seed in 0u64..10_000, label in 0usize..7) {
            let w = random_matrix(7, 5, seed);
            let h = random_vector(5, seed + 1);
            let out = loss_and_grads(h.view(), w.view(), label, &LossSpec::default_for(kind, 7)).unwrap();
            prop_assert!((out.probs.sum() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn angular_kinds_ignore_embedding_scale(kind in kind_strategy(), seed in 0u64..10_000, c in 0.01f64..100.0) {
            prop_assume!(kind.is_angular());
            let w = random_matrix(6, 4, seed);
            let h = random_vector(4, seed + 7);
            let spec = LossSpec::default_for(kind, 6);
            let a = loss_value(&h, &w, 0, &spec);
            let b = loss_value(&h.mapv(|v| v * c), &w, 0, &spec);
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-12));
        }

        #[test]
        fn larger_margin_never_lowers_loss(
            arc in any::<bool>(),
            seed in 0u64..10_000,
            theta in 0.2f64..(PI - 0.2),
            m1 in 0.0f64..0.5,
            dm in 0.0f64..0.45,
        ) {
            let kind = if arc { LossKind::ArcFace } else { LossKind::CosFace };
            let m2 = m1 + dm;
            // Keep theta + m inside [0, pi] where cos(theta + m) is monotone.
            prop_assume!(!arc || theta + m2 <= PI);
            let mut w = random_matrix(5, 3, seed);
            let h = Array1::from(vec![1.0, 0.0, 0.0]);
            w.row_mut(0).assign(&Array1::from(vec![theta.cos(), theta.sin(), 0.0]));
            let spec = |m| LossSpec { kind, scale: 30.0, margin: m, adacos_reset_on_refresh: true };
            prop_assert!(loss_value(&h, &w, 0, &spec(m2)) >= loss_value(&h, &w, 0, &spec(m1)) - 1e-12);
        }

        #[test]
        fn small_gradient_step_lowers_loss(kind in kind_strategy(), seed in 0u64..10_000) {
            let w = random_matrix(6, 5, seed);
            let h = random_vector(5, seed + 3);
            let spec = LossSpec::default_for(kind, 6);
            let out = loss_and_grads(h.view(), w.view(), 1, &spec).unwrap();
            prop_assume!(out.loss > 1e-9);
            let step = 1e-3;
            let h2 = &h - &(out.grad_h.mapv(|g| g * step));
            let w2 = &w - &(out.grad_w.mapv(|g| g * step));
            prop_assert!(loss_value(&h2, &w2, 1, &spec) < out.loss);
        }
    }
}
