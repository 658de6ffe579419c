//! Frame-level feature extractor with statistics pooling.
//!
//! `x (T x F) -> [leaky(x W1^T + b1) -> ... ] -> [mean_t ; std_t] -> P s + c`
//!
//! Standard deviation pooling uses `sqrt(var + eps_std^2)`; a frame block
//! with zero variance pools to exactly `eps_std`. Variance is computed on
//! frames shifted by the first frame so that identical frames give an exact
//! zero.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{self, stream_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub feat_dim: usize,
    /// Widths of the frame-level layers, in order.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub leaky_slope: f64,
    pub eps_std: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            feat_dim: 20,
            hidden: vec![64, 64],
            embed_dim: 32,
            leaky_slope: 0.01,
            eps_std: 1e-6,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 {
            return Err(Error::validation("feat_dim", "must be at least 1"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::validation("hidden", "need at least one layer, all widths >= 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::validation("embed_dim", "must be at least 1"));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::validation("leaky_slope", "must be finite and >= 0"));
        }
        if !(self.eps_std.is_finite() && self.eps_std > 0.0) {
            return Err(Error::validation("eps_std", "must be > 0"));
        }
        Ok(())
    }

    pub fn pooled_dim(&self) -> usize {
        2 * self.hidden.last().copied().unwrap_or(0)
    }
}

/// Affine layer `y = W x + b` with `W: out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Affine<T> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    fn xavier(out_dim: usize, in_dim: usize, rng: &mut rng::Rng) -> Self {
        let mut layer = Self::zeros(out_dim, in_dim);
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        layer.weight.mapv_inplace(|_| T::lit(rng.random_range(-bound..bound)));
        layer
    }
}

/// Uniform Glorot initialisation of an `rows x cols` matrix.
pub fn xavier_matrix<T: Real>(rows: usize, cols: usize, rng: &mut rng::Rng) -> Array2<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || T::lit(rng.random_range(-bound..bound)))
}

/// Gradient storage mirroring the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderGrads<T> {
    pub layers: Vec<Affine<T>>,
    pub proj: Affine<T>,
}

impl<T: Real> EmbedderGrads<T> {
    pub fn zeros_like(config: &EmbedderConfig) -> Self {
        let mut layers = Vec::with_capacity(config.hidden.len());
        let mut in_dim = config.feat_dim;
        for &h in &config.hidden {
            layers.push(Affine::zeros(h, in_dim));
            in_dim = h;
        }
        EmbedderGrads {
            layers,
            proj: Affine::zeros(config.embed_dim, config.pooled_dim()),
        }
    }

    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in self.layers.iter().chain(std::iter::once(&self.proj)) {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in self.layers.iter_mut().chain(std::iter::once(&mut self.proj)) {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn fill_zero(&mut self) {
        for s in self.slices_mut() {
            s.fill(T::zero());
        }
    }

    /// `self += other`, element by element in declaration order.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for s in self.slices_mut() {
            for x in s.iter_mut() {
                *x *= factor;
            }
        }
    }
}

/// Weights of the extractor, each slot paired with a gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderParams<T> {
    config: EmbedderConfig,
    pub layers: Vec<Affine<T>>,
    pub proj: Affine<T>,
    pub grads: EmbedderGrads<T>,
    version: u64,
}

/// Intermediates of one forward pass, consumed by `backward`.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    version: u64,
    /// Layer inputs; `inputs[0]` is the feature block.
    inputs: Vec<Array2<T>>,
    pre_activations: Vec<Array2<T>>,
    centered: Array2<T>,
    std: Array1<T>,
    pooled: Array1<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn pooled(&self) -> ArrayView1<'_, T> {
        self.pooled.view()
    }

    /// Sign pattern of every leaky-rectifier input. Two forward passes with
    /// equal patterns lie on the same linear piece of the network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.pre_activations
            .iter()
            .flat_map(|a| a.iter().map(|&v| v > T::zero()))
            .collect()
    }
}

impl<T: Real> EmbedderParams<T> {
    pub fn init(config: EmbedderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, rng::INIT);
        let mut layers = Vec::with_capacity(config.hidden.len());
        let mut in_dim = config.feat_dim;
        for &h in &config.hidden {
            layers.push(Affine::xavier(h, in_dim, &mut rng));
            in_dim = h;
        }
        let proj = Affine::xavier(config.embed_dim, config.pooled_dim(), &mut rng);
        let grads = EmbedderGrads::zeros_like(&config);
        Ok(EmbedderParams {
            config,
            layers,
            proj,
            grads,
            version: 0,
        })
    }

    /// Builds parameters from explicit tensors (checkpoint loading).
    pub fn from_parts(config: EmbedderConfig, layers: Vec<Affine<T>>, proj: Affine<T>) -> Result<Self> {
        config.validate()?;
        let expected = EmbedderGrads::<T>::zeros_like(&config);
        let shapes_match = layers.len() == expected.layers.len()
            && layers
                .iter()
                .zip(&expected.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim())
            && proj.weight.dim() == expected.proj.weight.dim()
            && proj.bias.dim() == expected.proj.bias.dim();
        if !shapes_match {
            return Err(Error::Shape("parameter tensors do not match the architecture".into()));
        }
        Ok(EmbedderParams {
            config,
            layers,
            proj,
            grads: expected,
            version: 0,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn cast<U: Real>(&self) -> EmbedderParams<U> {
        let conv = |a: &Affine<T>| Affine {
            weight: a.weight.mapv(|v| U::lit(v.as_f64())),
            bias: a.bias.mapv(|v| U::lit(v.as_f64())),
        };
        EmbedderParams {
            config: self.config.clone(),
            layers: self.layers.iter().map(conv).collect(),
            proj: conv(&self.proj),
            grads: EmbedderGrads::zeros_like(&self.config),
            version: 0,
        }
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in self.layers.iter().chain(std::iter::once(&self.proj)) {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    /// Mutable parameter slices paired with their gradient slices, in
    /// declaration order. Marks any outstanding forward caches stale.
    pub fn params_and_grads_mut(&mut self) -> Vec<(&mut [T], &[T])> {
        self.version += 1;
        let grads = self.grads.slices();
        let mut params: Vec<&mut [T]> = Vec::with_capacity(grads.len());
        for l in self.layers.iter_mut().chain(std::iter::once(&mut self.proj)) {
            params.push(l.weight.as_slice_mut().expect("standard layout"));
            params.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        params.into_iter().zip(grads).collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn locate(&self, index: usize) -> (usize, usize) {
        let mut rest = index;
        for (slot, s) in self.param_slices().iter().enumerate() {
            if rest < s.len() {
                return (slot, rest);
            }
            rest -= s.len();
        }
        panic!("parameter index {index} out of range");
    }

    /// Flat parameter access across all slots in declaration order.
    pub fn param(&self, index: usize) -> T {
        let (slot, i) = self.locate(index);
        self.param_slices()[slot][i]
    }

    pub fn set_param(&mut self, index: usize, value: T) {
        let (slot, i) = self.locate(index);
        self.version += 1;
        let layer = &mut if slot / 2 < self.layers.len() {
            &mut self.layers[slot / 2]
        } else {
            &mut self.proj
        };
        if slot % 2 == 0 {
            layer.weight.as_slice_mut().expect("standard layout")[i] = value;
        } else {
            layer.bias.as_slice_mut().expect("standard layout")[i] = value;
        }
    }

    pub fn grad(&self, index: usize) -> T {
        let (slot, i) = self.locate(index);
        self.grads.slices()[slot][i]
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill_zero();
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn leaky(&self) -> T {
        T::lit(self.config.leaky_slope)
    }

    pub fn forward(&self, features: ArrayView2<'_, T>) -> Result<(Array1<T>, ForwardCache<T>)> {
        let (frames, dim) = features.dim();
        if dim != self.config.feat_dim {
            return Err(Error::Shape(format!(
                "features have dimension {dim}, extractor expects {}",
                self.config.feat_dim
            )));
        }
        if frames == 0 {
            return Err(Error::EmptyInput("feature sequence has no frames".into()));
        }
        let slope = self.leaky();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = features.to_owned();
        for layer in &self.layers {
            let mut a = current.dot(&layer.weight.t());
            a += &layer.bias;
            let z = a.mapv(|v| if v > T::zero() { v } else { slope * v });
            inputs.push(current);
            pre_activations.push(a);
            current = z;
        }

        let n = T::from_usize(frames).expect("frame count");
        let shifted = &current - &current.row(0);
        let shift_mean = shifted.sum_axis(Axis(0)) / n;
        let centered = &shifted - &shift_mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let eps = T::lit(self.config.eps_std);
        let std = var.mapv(|v| if v == T::zero() { eps } else { (v + eps * eps).sqrt() });
        let mean = &current.row(0) + &shift_mean;

        let width = mean.len();
        let mut pooled = Array1::zeros(2 * width);
        pooled.slice_mut(ndarray::s![..width]).assign(&mean);
        pooled.slice_mut(ndarray::s![width..]).assign(&std);

        let mut embedding = self.proj.weight.dot(&pooled);
        embedding += &self.proj.bias;

        Ok((
            embedding,
            ForwardCache {
                version: self.version,
                inputs,
                pre_activations,
                centered,
                std,
                pooled,
            },
        ))
    }

    pub fn embed(&self, features: &FeatureSequence) -> Result<Array1<T>> {
        let x = features.mapv(|v| T::lit(v as f64));
        self.forward(x.view()).map(|(h, _)| h)
    }

    /// Accumulates `d loss / d params` for the pass in `cache` into `grads`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache<T>,
        grad_embedding: ArrayView1<'_, T>,
        grads: &mut EmbedderGrads<T>,
    ) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::Cache(format!(
                "cache from parameter version {}, parameters are at {}",
                cache.version, self.version
            )));
        }
        if grad_embedding.len() != self.config.embed_dim
            || cache.pre_activations.len() != self.layers.len()
            || cache.pooled.len() != self.config.pooled_dim()
        {
            return Err(Error::Cache("cache shape does not match parameters".into()));
        }

        let width = self.config.pooled_dim() / 2;
        for (i, &g) in grad_embedding.iter().enumerate() {
            grads.proj.weight.row_mut(i).scaled_add(g, &cache.pooled);
        }
        grads.proj.bias += &grad_embedding;
        let grad_pooled = self.proj.weight.t().dot(&grad_embedding);

        let frames = cache.centered.nrows();
        let n = T::from_usize(frames).expect("frame count");
        let grad_mean = grad_pooled.slice(ndarray::s![..width]).mapv(|g| g / n);
        let grad_std = grad_pooled.slice(ndarray::s![width..]).to_owned();
        // d std_k / d z_tk = (z_tk - mean_k) / (T std_k)
        let coef = &grad_std / &cache.std.mapv(|s| s * n);
        let mut grad_out = &cache.centered * &coef;
        grad_out += &grad_mean;

        let slope = self.leaky();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a = &cache.pre_activations[l];
            let mut grad_pre = grad_out;
            grad_pre.zip_mut_with(a, |g, &v| {
                if v <= T::zero() {
                    *g *= slope
                }
            });
            general_mat_mul(
                T::one(),
                &grad_pre.t(),
                &cache.inputs[l],
                T::one(),
                &mut grads.layers[l].weight,
            );
            grads.layers[l].bias += &grad_pre.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            grad_out = grad_pre.dot(&layer.weight);
        }
        Ok(())
    }

    /// Accumulates into the parameters' own gradient slots.
    pub fn backward(&mut self, cache: &ForwardCache<T>, grad_embedding: ArrayView1<'_, T>) -> Result<()> {
        let mut grads = std::mem::replace(&mut self.grads, EmbedderGrads::zeros_like(&self.config));
        let result = self.backward_into(cache, grad_embedding, &mut grads);
        self.grads = grads;
        result
    }
}

/// Options for [`finite_diff_check_with`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Number of parameter coordinates compared.
    pub coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            coords: 128,
            seed: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic parameter gradients with central differences for a
/// loss defined on the embedding. `loss` returns the loss value and its
/// gradient with respect to the embedding. Returns the largest relative
/// error over the sampled coordinates.
pub fn finite_diff_check<L>(
    params: &EmbedderParams<f64>,
    features: ArrayView2<'_, f64>,
    loss: L,
    epsilon: f64,
) -> Result<f64>
where
    L: Fn(ArrayView1<'_, f64>) -> (f64, Array1<f64>),
{
    finite_diff_check_with(
        params,
        features,
        loss,
        &GradCheckOptions {
            epsilon,
            ..GradCheckOptions::default()
        },
    )
}

pub fn finite_diff_check_with<L>(
    params: &EmbedderParams<f64>,
    features: ArrayView2<'_, f64>,
    loss: L,
    options: &GradCheckOptions,
) -> Result<f64>
where
    L: Fn(ArrayView1<'_, f64>) -> (f64, Array1<f64>),
{
    let eps = options.epsilon;
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Parameter(format!("epsilon must lie in (0, 1e-2], got {eps}")));
    }
    let mut work = params.clone();
    work.zero_grads();
    let (h, cache) = work.forward(features)?;
    let (value, grad_h) = loss(h.view());
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    work.backward(&cache, grad_h.view())?;
    let base_pattern = cache.activation_pattern();

    let probe = |work: &mut EmbedderParams<f64>, index: usize, value: f64| -> Result<(f64, bool)> {
        work.set_param(index, value);
        let (h, cache) = work.forward(features)?;
        let (l, _) = loss(h.view());
        if !l.is_finite() {
            return Err(Error::Numeric(format!("loss is {l} at perturbed coordinate {index}")));
        }
        Ok((l, cache.activation_pattern() == base_pattern))
    };

    let total = work.num_params();
    let mut rng = stream_rng(options.seed, rng::INIT);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < options.coords.min(total) && attempts < 20 * options.coords.max(1) {
        attempts += 1;
        let index = rng.random_range(0..total);
        let original = work.param(index);
        let (plus, same_plus) = probe(&mut work, index, original + eps)?;
        let (minus, same_minus) = probe(&mut work, index, original - eps)?;
        work.set_param(index, original);
        // A perturbation that flips a rectifier straddles a kink, where the
        // derivative is undefined; draw another coordinate instead.
        if !(same_plus && same_minus) {
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(work.grad(index), numeric));
        checked += 1;
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand_distr::{Distribution, StandardNormal};

    fn random_features(frames: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream_rng(seed, 99);
        Array2::from_shape_simple_fn((frames, dim), || StandardNormal.sample(&mut rng))
    }

    fn small_config() -> EmbedderConfig {
        EmbedderConfig {
            feat_dim: 5,
            hidden: vec![7, 6],
            embed_dim: 4,
            ..EmbedderConfig::default()
        }
    }

    #[test]
    fn constant_frames_pool_to_variance_floor() {
        let p = EmbedderParams::<f32>::init(EmbedderConfig::default(), 1).unwrap();
        let row: Vec<f32> = (0..20).map(|i| i as f32 * 0.37 - 2.0).collect();
        let x = Array2::from_shape_fn((9, 20), |(_, j)| row[j]);
        let (_, cache) = p.forward(x.view()).unwrap();
        let width = 64;
        for k in 0..width {
            assert_eq!(cache.pooled()[width + k], 1e-6f32);
        }
    }

    #[test]
    fn single_frame_mean_is_layer_output() {
        let p = EmbedderParams::<f64>::init(small_config(), 2).unwrap();
        let x = random_features(1, 5, 3);
        let (_, cache) = p.forward(x.view()).unwrap();
        let mut z = x.clone();
        for layer in &p.layers {
            z = z.dot(&layer.weight.t()) + &layer.bias;
            z.mapv_inplace(|v| if v > 0.0 { v } else { 0.01 * v });
        }
        for k in 0..6 {
            assert_eq!(cache.pooled()[k], z[[0, k]]);
            assert_eq!(cache.pooled()[6 + k], 1e-6);
        }
    }

    #[test]
    fn forward_is_pure() {
        let p = EmbedderParams::<f32>::init(EmbedderConfig::default(), 4).unwrap();
        let x = random_features(30, 20, 5).mapv(|v| v as f32);
        let (a, _) = p.forward(x.view()).unwrap();
        let (b, _) = p.forward(x.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_errors() {
        let p = EmbedderParams::<f64>::init(small_config(), 0).unwrap();
        assert!(matches!(
            p.forward(random_features(3, 4, 0).view()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            p.forward(Array2::<f64>::zeros((0, 5)).view()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn permuted_frames_pool_alike() {
        let p = EmbedderParams::<f64>::init(small_config(), 6).unwrap();
        let x = random_features(12, 5, 7);
        let mut y = x.clone();
        for t in 0..12 {
            y.row_mut(t).assign(&x.row((t * 5) % 12));
        }
        let (_, a) = p.forward(x.view()).unwrap();
        let (_, b) = p.forward(y.view()).unwrap();
        for (u, v) in a.pooled().iter().zip(b.pooled().iter()) {
            assert!((u - v).abs() <= 1e-6 * u.abs().max(v.abs()).max(1e-12));
        }
    }

    #[test]
    fn zero_upstream_gradient_changes_nothing() {
        let mut p = EmbedderParams::<f64>::init(small_config(), 8).unwrap();
        let x = random_features(10, 5, 9);
        let (_, cache) = p.forward(x.view()).unwrap();
        p.backward(&cache, Array1::zeros(4).view()).unwrap();
        assert!(p.grads.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn opposite_gradients_cancel() {
        let mut p = EmbedderParams::<f64>::init(small_config(), 10).unwrap();
        let x = random_features(10, 5, 11);
        let (_, cache) = p.forward(x.view()).unwrap();
        let g = Array1::from(vec![0.5, -1.0, 2.0, 0.25]);
        p.backward(&cache, g.view()).unwrap();
        p.backward(&cache, (-&g).view()).unwrap();
        for s in p.grads.slices() {
            for &v in s {
                assert!(v.abs() < 1e-12, "{v}");
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = EmbedderParams::<f64>::init(small_config(), 12).unwrap();
        let x = random_features(4, 5, 13);
        let (_, cache) = p.forward(x.view()).unwrap();
        let v = p.param(0);
        p.set_param(0, v + 1.0);
        assert!(matches!(
            p.backward(&cache, Array1::ones(4).view()),
            Err(Error::Cache(_))
        ));
    }

    fn linear_loss(weights: Array1<f64>) -> impl Fn(ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
        move |h| (h.dot(&weights), weights.clone())
    }

    fn quadratic_loss(h: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
        (0.5 * h.dot(&h) + h.sum(), h.mapv(|v| v + 1.0))
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let p = EmbedderParams::<f64>::init(EmbedderConfig::default(), seed).unwrap();
            let x = random_features(15, 20, 100 + seed);
            let err = finite_diff_check(&p, x.view(), quadratic_loss, 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn linear_network_is_exact() {
        let config = EmbedderConfig {
            leaky_slope: 1.0,
            eps_std: 1.0,
            ..small_config()
        };
        let p = EmbedderParams::<f64>::init(config, 3).unwrap();
        // One frame pins the std branch to the variance floor, leaving a map
        // that is linear in every single coordinate, so central differences
        // carry rounding error only.
        let x = random_features(1, 5, 4);
        let w = Array1::from(vec![0.3, -0.2, 0.5, 0.1]);
        let err = finite_diff_check(&p, x.view(), linear_loss(w), 1e-3).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn epsilon_must_be_positive() {
        let p = EmbedderParams::<f64>::init(small_config(), 0).unwrap();
        let x = random_features(3, 5, 0);
        assert!(matches!(
            finite_diff_check(&p, x.view(), quadratic_loss, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn bounded_inputs_stay_finite() {
        let p = EmbedderParams::<f32>::init(EmbedderConfig::default(), 5).unwrap();
        let x = Array2::from_shape_fn((40, 20), |(t, j)| if (t + j) % 2 == 0 { 100.0 } else { -100.0 });
        let h = p.forward(x.view()).unwrap().0;
        assert!(h.iter().all(|v| v.is_finite()));
    }
}
