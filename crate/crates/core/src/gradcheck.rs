//! Central finite-difference checks for the head losses and for the full
//! embedder + head composition.
//!
//! Analytic gradients are computed in `f64`. The central differences
//! `(f(p + eps) - f(p - eps)) / 2 eps` evaluate `f` in double-double: in plain
//! `f64` the difference carries roundoff of about `1e-16 |f| / eps`, which for
//! scaled angular losses (s = 30) exceeds the gradients of rows whose softmax
//! probability is tiny, and would swamp the comparison.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng as _;

use crate::dd::Dd;
use crate::embedder::{relative_error, EmbedderParams, GradCheckOptions};
use crate::error::{Error, Result};
use crate::head::{loss_and_grads, LossSpec};
use crate::real::Real;
use crate::rng::{self, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coordinate {
    Embedding(usize),
    Embedder(usize),
    Head(usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub max_relative_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a rectifier kink.
    pub skipped: usize,
}

impl CheckReport {
    fn new() -> Self {
        CheckReport {
            max_relative_error: 0.0,
            worst: None,
            checked: 0,
            skipped: 0,
        }
    }

    fn record(&mut self, coord: Coordinate, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        if err > self.max_relative_error || self.worst.is_none() {
            self.max_relative_error = self.max_relative_error.max(err);
            self.worst = Some(coord);
        }
        self.checked += 1;
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Parameter(format!("epsilon must lie in (0, 1e-2], got {eps}")));
    }
    Ok(())
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("loss is {value} {what}")))
    }
}

/// Checks the loss gradients w.r.t. every coordinate of `h` and of `weight`.
pub fn head_check(
    h: ArrayView1<'_, f64>,
    weight: ArrayView2<'_, f64>,
    label: usize,
    spec: &LossSpec,
    epsilon: f64,
) -> Result<CheckReport> {
    check_eps(epsilon)?;
    let out = loss_and_grads(h, weight, label, spec)?;
    let loss = |h: &Array1<Dd>, w: &Array2<Dd>| -> Result<Dd> {
        let l = loss_and_grads(h.view(), w.view(), label, spec)?.loss;
        finite(l.as_f64(), "at a perturbed point")?;
        Ok(l)
    };
    let eps = Dd::of(epsilon);
    let central = |plus: Dd, minus: Dd| ((plus - minus) / (eps + eps)).as_f64();
    let mut report = CheckReport::new();
    let mut hp = h.mapv(Dd::of);
    let w0 = weight.mapv(Dd::of);
    for i in 0..h.len() {
        let x = hp[i];
        hp[i] = x + eps;
        let plus = loss(&hp, &w0)?;
        hp[i] = x - eps;
        let minus = loss(&hp, &w0)?;
        hp[i] = x;
        report.record(Coordinate::Embedding(i), out.grad_h[i], central(plus, minus));
    }
    let h0 = hp;
    let mut wp = w0;
    for r in 0..wp.nrows() {
        for c in 0..wp.ncols() {
            let x = wp[[r, c]];
            wp[[r, c]] = x + eps;
            let plus = loss(&h0, &wp)?;
            wp[[r, c]] = x - eps;
            let minus = loss(&h0, &wp)?;
            wp[[r, c]] = x;
            report.record(Coordinate::Head(r, c), out.grad_w[[r, c]], central(plus, minus));
        }
    }
    Ok(report)
}

/// Checks `options.coords` coordinates drawn uniformly from the embedder
/// parameters and the head entries, for the loss of one labelled sequence.
pub fn model_check(
    embedder: &EmbedderParams<f64>,
    head: ArrayView2<'_, f64>,
    features: ArrayView2<'_, f64>,
    label: usize,
    spec: &LossSpec,
    options: &GradCheckOptions,
) -> Result<CheckReport> {
    check_eps(options.epsilon)?;
    let mut analytic = embedder.clone();
    analytic.zero_grads();
    let (h, cache) = analytic.forward(features)?;
    let out = loss_and_grads(h.view(), head, label, spec)?;
    analytic.backward(&cache, out.grad_h.view())?;

    let mut work = embedder.cast::<Dd>();
    let mut head_work = head.mapv(Dd::of);
    let features = features.mapv(Dd::of);
    let base_pattern = work.forward(features.view())?.1.activation_pattern();
    let eval = |work: &EmbedderParams<Dd>, head: &Array2<Dd>| -> Result<(Dd, bool)> {
        let (h, cache) = work.forward(features.view())?;
        let l = loss_and_grads(h.view(), head.view(), label, spec)?.loss;
        finite(l.as_f64(), "at a perturbed point")?;
        Ok((l, cache.activation_pattern() == base_pattern))
    };
    let eps = Dd::of(options.epsilon);
    let central = |plus: Dd, minus: Dd| ((plus - minus) / (eps + eps)).as_f64();

    let n_embed = work.num_params();
    let total = n_embed + head_work.len();
    let d = head_work.ncols();
    let mut rng = stream_rng(options.seed, rng::INIT);
    let mut report = CheckReport::new();
    let mut attempts = 0;
    while report.checked < options.coords.min(total) && attempts < 20 * options.coords.max(1) {
        attempts += 1;
        let index = rng.random_range(0..total);
        if index < n_embed {
            let x = work.param(index);
            work.set_param(index, x + eps);
            let (plus, same_plus) = eval(&work, &head_work)?;
            work.set_param(index, x - eps);
            let (minus, same_minus) = eval(&work, &head_work)?;
            work.set_param(index, x);
            // A perturbation that flips a rectifier straddles a kink, where
            // the derivative is undefined; draw another coordinate instead.
            if !(same_plus && same_minus) {
                report.skipped += 1;
                continue;
            }
            report.record(Coordinate::Embedder(index), analytic.grad(index), central(plus, minus));
        } else {
            let (r, c) = ((index - n_embed) / d, (index - n_embed) % d);
            let x = head_work[[r, c]];
            head_work[[r, c]] = x + eps;
            let (plus, _) = eval(&work, &head_work)?;
            head_work[[r, c]] = x - eps;
            let (minus, _) = eval(&work, &head_work)?;
            head_work[[r, c]] = x;
            report.record(Coordinate::Head(r, c), out.grad_w[[r, c]], central(plus, minus));
        }
    }
    Ok(report)
}
