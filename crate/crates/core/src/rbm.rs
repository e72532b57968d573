//! Restricted Boltzmann machine parameters and the statistics used to train them.
//!
//! Energy convention: `E(v, h) = -b·v - c·h - vᵀ W h` with `P(v, h) ∝ exp(-E)`.
//! Visible inputs may be real-valued in `[0, 1]`; they are used directly as
//! probabilities wherever a data vector enters a statistic.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default ceiling on `n + m` for exact enumeration.
pub const DEFAULT_ENUMERATION_LIMIT: usize = 26;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Weights and biases of one RBM.
///
/// `mask[[i, j]] == true` marks a connection that does not exist (for example
/// a coupler lost to a faulty qubit). Masked weights are held at exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbmParams {
    pub weights: Array2<f64>,
    pub visible_bias: Array1<f64>,
    pub hidden_bias: Array1<f64>,
    pub mask: Array2<bool>,
}

impl RbmParams {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            weights: Array2::zeros((n_visible, n_hidden)),
            visible_bias: Array1::zeros(n_visible),
            hidden_bias: Array1::zeros(n_hidden),
            mask: Array2::from_elem((n_visible, n_hidden), false),
        }
    }

    pub fn new(weights: Array2<f64>, visible_bias: Array1<f64>, hidden_bias: Array1<f64>) -> Result<Self> {
        let (n, m) = weights.dim();
        if visible_bias.len() != n || hidden_bias.len() != m {
            return Err(Error::Dimension(format!(
                "weights are {n}x{m} but biases have lengths {} and {}",
                visible_bias.len(),
                hidden_bias.len()
            )));
        }
        if n == 0 || m == 0 {
            return Err(Error::InvalidArgument("RBM layers must be non-empty".into()));
        }
        let params = Self {
            weights,
            visible_bias,
            hidden_bias,
            mask: Array2::from_elem((n, m), false),
        };
        params.check_finite()?;
        Ok(params)
    }

    /// Pretraining initialization: weights ~ N(0, sd²), biases zero.
    pub fn random_gaussian<R: Rng + ?Sized>(n_visible: usize, n_hidden: usize, sd: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, sd).expect("standard deviation must be finite and non-negative");
        let mut params = Self::zeros(n_visible, n_hidden);
        params.weights.mapv_inplace(|_| normal.sample(rng));
        params
    }

    /// Weights and biases drawn uniformly from `[-spread, spread]`.
    pub fn random_uniform<R: Rng + ?Sized>(n_visible: usize, n_hidden: usize, spread: f64, rng: &mut R) -> Self {
        let mut draw = || rng.random_range(-spread..=spread);
        let weights = Array2::from_shape_simple_fn((n_visible, n_hidden), &mut draw);
        let visible_bias = Array1::from_shape_simple_fn(n_visible, &mut draw);
        let hidden_bias = Array1::from_shape_simple_fn(n_hidden, &mut draw);
        Self {
            weights,
            visible_bias,
            hidden_bias,
            mask: Array2::from_elem((n_visible, n_hidden), false),
        }
    }

    pub fn n_visible(&self) -> usize {
        self.visible_bias.len()
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden_bias.len()
    }

    /// Installs a connection mask and zeroes the masked weights.
    pub fn with_mask(mut self, mask: Array2<bool>) -> Result<Self> {
        if mask.dim() != self.weights.dim() {
            return Err(Error::Dimension(format!(
                "mask is {:?} but weights are {:?}",
                mask.dim(),
                self.weights.dim()
            )));
        }
        self.mask = mask;
        self.enforce_mask();
        Ok(self)
    }

    pub fn enforce_mask(&mut self) {
        ndarray::Zip::from(&mut self.weights)
            .and(&self.mask)
            .for_each(|w, &masked| {
                if masked {
                    *w = 0.0;
                }
            });
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The same machine with the roles of the two layers swapped.
    pub fn transpose(&self) -> Self {
        Self {
            weights: self.weights.t().to_owned(),
            visible_bias: self.hidden_bias.clone(),
            hidden_bias: self.visible_bias.clone(),
            mask: self.mask.t().to_owned(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if !self.weights.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("RBM weights".into()));
        }
        if !self
            .visible_bias
            .iter()
            .chain(self.hidden_bias.iter())
            .all(|x| x.is_finite())
        {
            return Err(Error::NonFinite("RBM biases".into()));
        }
        Ok(())
    }

    pub fn energy(&self, v: ArrayView1<f64>, h: ArrayView1<f64>) -> Result<f64> {
        self.check_visible_len(v.len())?;
        self.check_hidden_len(h.len())?;
        Ok(-self.visible_bias.dot(&v) - self.hidden_bias.dot(&h) - v.dot(&self.weights.dot(&h)))
    }

    /// `P(h_j = 1 | v) = sigm(c_j + Σ_i W_ij v_i)`.
    pub fn hidden_probs(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_visible_len(v.len())?;
        Ok((v.dot(&self.weights) + &self.hidden_bias).mapv(sigmoid))
    }

    /// `P(v_i = 1 | h) = sigm(b_i + Σ_j W_ij h_j)`.
    pub fn visible_probs(&self, h: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_hidden_len(h.len())?;
        Ok((self.weights.dot(&h) + &self.visible_bias).mapv(sigmoid))
    }

    /// Row-wise [`Self::hidden_probs`] for a data matrix.
    pub fn hidden_probs_batch(&self, data: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_visible_len(data.ncols())?;
        Ok((data.dot(&self.weights) + &self.hidden_bias).mapv(sigmoid))
    }

    pub fn visible_probs_batch(&self, hidden: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_hidden_len(hidden.ncols())?;
        Ok((hidden.dot(&self.weights.t()) + &self.visible_bias).mapv(sigmoid))
    }

    /// `log Z`, computed exactly. The smaller layer is enumerated and the other
    /// is summed out analytically.
    pub fn log_partition(&self) -> Result<f64> {
        self.log_partition_with_limit(DEFAULT_ENUMERATION_LIMIT)
    }

    pub fn log_partition_with_limit(&self, limit: usize) -> Result<f64> {
        Ok(enumerate(self, limit)?.0)
    }

    fn check_visible_len(&self, len: usize) -> Result<()> {
        if len != self.n_visible() {
            return Err(Error::Dimension(format!(
                "visible vector has length {len}, expected {}",
                self.n_visible()
            )));
        }
        Ok(())
    }

    fn check_hidden_len(&self, len: usize) -> Result<()> {
        if len != self.n_hidden() {
            return Err(Error::Dimension(format!(
                "hidden vector has length {len}, expected {}",
                self.n_hidden()
            )));
        }
        Ok(())
    }
}

/// The sufficient statistics `⟨v_i h_j⟩`, `⟨v_i⟩`, `⟨h_j⟩` under some distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationSet {
    pub vh: Array2<f64>,
    pub v: Array1<f64>,
    pub h: Array1<f64>,
}

impl ExpectationSet {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            vh: Array2::zeros((n_visible, n_hidden)),
            v: Array1::zeros(n_visible),
            h: Array1::zeros(n_hidden),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.vh.dim()
    }

    pub fn transpose(&self) -> Self {
        Self {
            vh: self.vh.t().to_owned(),
            v: self.h.clone(),
            h: self.v.clone(),
        }
    }

    /// `‖vh − other.vh‖₁`, the figure of merit used for sampler calibration.
    pub fn l1_vh(&self, other: &ExpectationSet) -> f64 {
        (&self.vh - &other.vh).mapv(f64::abs).sum()
    }

    /// L1 distance over all three statistics.
    pub fn l1(&self, other: &ExpectationSet) -> f64 {
        self.l1_vh(other) + (&self.v - &other.v).mapv(f64::abs).sum() + (&self.h - &other.h).mapv(f64::abs).sum()
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        let ok = self
            .vh
            .iter()
            .chain(self.v.iter())
            .chain(self.h.iter())
            .all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} expectations")))
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.vh
            .iter()
            .chain(self.v.iter())
            .chain(self.h.iter())
            .all(|&x| (0.0..=1.0).contains(&x))
    }
}

/// Enumerates the smaller layer, marginalizing the other; returns `log Z`
/// and the exact expectations.
fn enumerate(params: &RbmParams, limit: usize) -> Result<(f64, ExpectationSet)> {
    let (n, m) = (params.n_visible(), params.n_hidden());
    if n + m > limit {
        return Err(Error::TooLargeForEnumeration { size: n + m, limit });
    }
    if m < n {
        let (log_z, stats) = enumerate_visible(&params.transpose());
        return Ok((log_z, stats.transpose()));
    }
    Ok(enumerate_visible(params))
}

fn enumerate_visible(params: &RbmParams) -> (f64, ExpectationSet) {
    let (n, m) = (params.n_visible(), params.n_hidden());
    let states = 1usize << n;
    let mut log_weights = Vec::with_capacity(states);
    let mut activations = Array2::<f64>::zeros((states, m));
    let mut v = Array1::<f64>::zeros(n);
    for s in 0..states {
        for i in 0..n {
            v[i] = ((s >> i) & 1) as f64;
        }
        let a = v.dot(&params.weights) + &params.hidden_bias;
        let lw = params.visible_bias.dot(&v) + a.iter().map(|&x| softplus(x)).sum::<f64>();
        log_weights.push(lw);
        activations.row_mut(s).assign(&a.mapv(sigmoid));
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|&lw| (lw - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let log_z = max + total.ln();

    let mut stats = ExpectationSet::zeros(n, m);
    for (s, &w) in weights.iter().enumerate() {
        let p = w / total;
        let ph = activations.row(s);
        stats.h.scaled_add(p, &ph);
        for i in 0..n {
            if (s >> i) & 1 == 1 {
                stats.v[i] += p;
                stats.vh.row_mut(i).scaled_add(p, &ph);
            }
        }
    }
    (log_z, stats)
}

/// Exact model expectations `⟨·⟩_model` under the joint distribution.
pub fn exact_expectations(params: &RbmParams) -> Result<ExpectationSet> {
    exact_expectations_with_limit(params, DEFAULT_ENUMERATION_LIMIT)
}

pub fn exact_expectations_with_limit(params: &RbmParams, limit: usize) -> Result<ExpectationSet> {
    Ok(enumerate(params, limit)?.1)
}

fn check_batch(params: &RbmParams, batch: ArrayView2<f64>) -> Result<()> {
    if batch.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if batch.ncols() != params.n_visible() {
        return Err(Error::Dimension(format!(
            "batch has {} columns, RBM has {} visible units",
            batch.ncols(),
            params.n_visible()
        )));
    }
    if !batch.iter().all(|x| (0.0..=1.0).contains(x)) {
        return Err(Error::InvalidArgument("batch entries must lie in [0, 1]".into()));
    }
    Ok(())
}

fn statistics(visible: ArrayView2<f64>, hidden: ArrayView2<f64>) -> ExpectationSet {
    let rows = visible.nrows() as f64;
    ExpectationSet {
        vh: visible.t().dot(&hidden) / rows,
        v: visible.mean_axis(Axis(0)).expect("non-empty batch"),
        h: hidden.mean_axis(Axis(0)).expect("non-empty batch"),
    }
}

/// Data-side statistics with the visible layer clamped to each row; hidden
/// units enter through their conditional probabilities.
pub fn clamped_expectations(params: &RbmParams, batch: ArrayView2<f64>) -> Result<ExpectationSet> {
    check_batch(params, batch)?;
    let hidden = params.hidden_probs_batch(batch)?;
    Ok(statistics(batch, hidden.view()))
}

/// Reconstruction statistics of one CD step: `V⁰ → H⁰ (sampled) → V¹ → H¹`.
/// `V¹` and `H¹` are probabilities.
pub fn cd_expectations<R: Rng + ?Sized>(
    params: &RbmParams,
    batch: ArrayView2<f64>,
    rng: &mut R,
) -> Result<ExpectationSet> {
    check_batch(params, batch)?;
    let mut h0 = params.hidden_probs_batch(batch)?;
    h0.mapv_inplace(|p| if rng.random::<f64>() < p { 1.0 } else { 0.0 });
    let v1 = params.visible_probs_batch(h0.view())?;
    let h1 = params.hidden_probs_batch(v1.view())?;
    Ok(statistics(v1.view(), h1.view()))
}

/// Momentum buffers for the parameter updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateState {
    pub weights_velocity: Array2<f64>,
    pub visible_velocity: Array1<f64>,
    pub hidden_velocity: Array1<f64>,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl UpdateState {
    pub fn new(params: &RbmParams, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {learning_rate} must be positive"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {momentum} must lie in [0, 1)"
            )));
        }
        Ok(Self {
            weights_velocity: Array2::zeros(params.weights.dim()),
            visible_velocity: Array1::zeros(params.n_visible()),
            hidden_velocity: Array1::zeros(params.n_hidden()),
            learning_rate,
            momentum,
        })
    }
}

/// `buffer ← α·buffer + ε·(data − model)`, then `params ← params + buffer`.
/// Masked weights and their buffer entries are forced back to zero.
pub fn apply_update(
    params: &mut RbmParams,
    state: &mut UpdateState,
    data: &ExpectationSet,
    model: &ExpectationSet,
) -> Result<()> {
    data.check_finite("data")?;
    model.check_finite("model")?;
    let dim = params.weights.dim();
    for (what, d) in [
        ("data", data.dim()),
        ("model", model.dim()),
        ("momentum buffer", state.weights_velocity.dim()),
    ] {
        if d != dim {
            return Err(Error::Dimension(format!("{what} statistics are {d:?}, RBM is {dim:?}")));
        }
    }
    if data.v.len() != dim.0 || model.v.len() != dim.0 || data.h.len() != dim.1 || model.h.len() != dim.1 {
        return Err(Error::Dimension("bias statistics do not match the RBM".into()));
    }

    let (alpha, eps) = (state.momentum, state.learning_rate);
    state.weights_velocity.mapv_inplace(|x| alpha * x);
    state.weights_velocity.scaled_add(eps, &(&data.vh - &model.vh));
    state.visible_velocity.mapv_inplace(|x| alpha * x);
    state.visible_velocity.scaled_add(eps, &(&data.v - &model.v));
    state.hidden_velocity.mapv_inplace(|x| alpha * x);
    state.hidden_velocity.scaled_add(eps, &(&data.h - &model.h));

    ndarray::Zip::from(&mut state.weights_velocity)
        .and(&params.mask)
        .for_each(|x, &masked| {
            if masked {
                *x = 0.0;
            }
        });

    params.weights += &state.weights_velocity;
    params.visible_bias += &state.visible_velocity;
    params.hidden_bias += &state.hidden_velocity;
    params.enforce_mask();
    Ok(())
}

/// Mean log-probability of the rows under the visible marginal.
pub fn log_likelihood(params: &RbmParams, batch: ArrayView2<f64>) -> Result<f64> {
    log_likelihood_with_limit(params, batch, DEFAULT_ENUMERATION_LIMIT)
}

pub fn log_likelihood_with_limit(params: &RbmParams, batch: ArrayView2<f64>, limit: usize) -> Result<f64> {
    check_batch(params, batch)?;
    let log_z = params.log_partition_with_limit(limit)?;
    let activations = batch.dot(&params.weights) + &params.hidden_bias;
    let unnormalized: f64 = batch
        .outer_iter()
        .zip(activations.outer_iter())
        .map(|(v, a)| params.visible_bias.dot(&v) + a.iter().map(|&x| softplus(x)).sum::<f64>())
        .sum();
    Ok(unnormalized / batch.nrows() as f64 - log_z)
}
