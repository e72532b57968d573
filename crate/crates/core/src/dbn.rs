//! Deep belief networks: greedy layerwise pretraining, a least-squares output
//! head, and backpropagation fine-tuning of the whole stack.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rbm::{apply_update, clamped_expectations, RbmParams, UpdateState};
use crate::sampler::{stream, Estimator};

/// Stream tags under the schedule seed.
const INIT_STREAM: u64 = 1;
const ESTIMATOR_STREAM: u64 = 2;
const FINETUNE_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub pretrain_iters: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iterations `1..=momentum_switch` use `initial_momentum`.
    pub momentum_switch: usize,
    /// Standard deviation of the initial Gaussian weights.
    pub init_sd: f64,
    pub backprop_iters: usize,
    pub minibatch_size: usize,
    pub backprop_learning_rate: f64,
    /// Ridge term of the least-squares output head.
    pub ridge: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            pretrain_iters: 10,
            learning_rate: 0.1,
            initial_momentum: 0.5,
            final_momentum: 0.9,
            momentum_switch: 5,
            init_sd: 0.1,
            backprop_iters: 1000,
            minibatch_size: 100,
            backprop_learning_rate: 0.01,
            ridge: 0.01,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    /// Momentum for 1-based iteration `iter`.
    pub fn momentum_at(&self, iter: usize) -> f64 {
        if iter <= self.momentum_switch {
            self.initial_momentum
        } else {
            self.final_momentum
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        for m in [self.initial_momentum, self.final_momentum] {
            if !(0.0..1.0).contains(&m) {
                return bad("momentum must lie in [0, 1)");
            }
        }
        if !(self.init_sd >= 0.0 && self.init_sd.is_finite()) {
            return bad("init_sd must be non-negative");
        }
        if self.minibatch_size == 0 {
            return bad("minibatch_size must be at least 1");
        }
        if !(self.backprop_learning_rate >= 0.0 && self.backprop_learning_rate.is_finite()) {
            return bad("backprop_learning_rate must be non-negative");
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad("ridge must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbnModel {
    pub layers: Vec<RbmParams>,
    /// `(last hidden size + 1) × classes`; the last row is the bias.
    pub output_weights: Array2<f64>,
}

impl DbnModel {
    pub fn new(layers: Vec<RbmParams>, output_weights: Array2<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a DBN needs at least one layer".into()));
        }
        for (t, pair) in layers.windows(2).enumerate() {
            if pair[0].n_hidden() != pair[1].n_visible() {
                return Err(Error::Dimension(format!(
                    "layer {t} has {} hidden units but layer {} has {} visible units",
                    pair[0].n_hidden(),
                    t + 1,
                    pair[1].n_visible()
                )));
            }
        }
        let top = layers.last().expect("non-empty").n_hidden();
        if output_weights.nrows() != top + 1 || output_weights.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "output weights are {:?}, expected ({}, classes)",
                output_weights.dim(),
                top + 1
            )));
        }
        if !output_weights.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("output weights".into()));
        }
        Ok(Self { layers, output_weights })
    }

    /// Input size, hidden sizes, then the number of classes.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].n_visible()];
        sizes.extend(self.layers.iter().map(|l| l.n_hidden()));
        sizes.push(self.output_weights.ncols());
        sizes
    }

    pub fn n_classes(&self) -> usize {
        self.output_weights.ncols()
    }

    /// The least-squares head fitted to the top-layer activations of `data`.
    pub fn with_least_squares_head(
        layers: Vec<RbmParams>,
        data: ArrayView2<f64>,
        labels: &[usize],
        classes: usize,
        ridge: f64,
    ) -> Result<Self> {
        let top = propagate(&layers, data)?;
        let head = pseudoinverse_init(top.view(), one_hot(labels, classes)?.view(), ridge)?;
        Self::new(layers, head)
    }

    pub fn save(&self, path: &Path, metadata: BTreeMap<String, serde_json::Value>) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            layer_sizes: self.layer_sizes(),
            layers: self.layers.clone(),
            output_weights: self.output_weights.clone(),
            metadata,
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, serde_json::Value>)> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: ModelFile =
            serde_json::from_str(&text).map_err(|e| Error::DatasetFormat(format!("{}: {e}", path.display())))?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::DatasetFormat(format!(
                "{}: unsupported model format {} v{}",
                path.display(),
                file.format,
                file.version
            )));
        }
        for layer in &file.layers {
            if layer.mask.dim() != layer.weights.dim() {
                return Err(Error::DatasetFormat(format!(
                    "{}: mask shape does not match weights",
                    path.display()
                )));
            }
            layer.check_finite()?;
        }
        let model = Self::new(file.layers, file.output_weights)?;
        if model.layer_sizes() != file.layer_sizes {
            return Err(Error::DatasetFormat(format!(
                "{}: layer_sizes disagree with the arrays",
                path.display()
            )));
        }
        Ok((model, file.metadata))
    }
}

const MODEL_FORMAT: &str = "annealdbn-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    layers: Vec<RbmParams>,
    output_weights: Array2<f64>,
    metadata: BTreeMap<String, serde_json::Value>,
}

/// Random starting layers for `sizes = [input, hidden1, hidden2, ...]`.
/// Depends only on the schedule seed and `init_sd`.
pub fn initial_layers(sizes: &[usize], schedule: &TrainSchedule) -> Result<Vec<RbmParams>> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!("invalid layer sizes {sizes:?}")));
    }
    Ok(sizes
        .windows(2)
        .enumerate()
        .map(|(t, w)| {
            RbmParams::random_gaussian(
                w[0],
                w[1],
                schedule.init_sd,
                &mut stream(schedule.seed, &[INIT_STREAM, t as u64]),
            )
        })
        .collect())
}

/// Progress report from [`pretrain`], after each update.
#[derive(Debug, Clone, Copy)]
pub struct PretrainStep<'a> {
    pub layer: usize,
    /// 1-based.
    pub iteration: usize,
    pub momentum: f64,
    pub params: &'a RbmParams,
    /// Input the layer was trained on.
    pub input: ArrayView2<'a, f64>,
}

/// Greedy layerwise training; each layer sees the full data set every
/// iteration, and the next layer is fed the hidden probabilities.
pub fn pretrain(
    sizes: &[usize],
    data: ArrayView2<f64>,
    estimator: &dyn Estimator,
    schedule: &TrainSchedule,
    observer: &mut dyn FnMut(PretrainStep<'_>),
) -> Result<Vec<RbmParams>> {
    schedule.validate()?;
    if data.ncols() != sizes.first().copied().unwrap_or(0) {
        return Err(Error::Dimension(format!(
            "data has {} columns, first layer expects {:?}",
            data.ncols(),
            sizes.first()
        )));
    }
    pretrain_from(initial_layers(sizes, schedule)?, data, estimator, schedule, observer)
}

/// [`pretrain`] starting from given layers instead of a fresh
/// initialization. Momentum buffers start at zero.
pub fn pretrain_from(
    mut layers: Vec<RbmParams>,
    data: ArrayView2<f64>,
    estimator: &dyn Estimator,
    schedule: &TrainSchedule,
    observer: &mut dyn FnMut(PretrainStep<'_>),
) -> Result<Vec<RbmParams>> {
    schedule.validate()?;
    for (t, pair) in layers.windows(2).enumerate() {
        if pair[0].n_hidden() != pair[1].n_visible() {
            return Err(Error::Dimension(format!(
                "layer {t} has {} hidden units but layer {} has {} visible units",
                pair[0].n_hidden(),
                t + 1,
                pair[1].n_visible()
            )));
        }
    }
    match layers.first() {
        Some(first) if first.n_visible() == data.ncols() => {}
        _ => {
            return Err(Error::Dimension(format!(
                "data has {} columns, first layer expects {:?}",
                data.ncols(),
                layers.first().map(RbmParams::n_visible)
            )))
        }
    }
    let mut input = data.to_owned();
    for (t, params) in layers.iter_mut().enumerate() {
        if let Some(mask) = estimator.mask(params.n_visible(), params.n_hidden())? {
            *params = params.clone().with_mask(mask)?;
        }
        let mut rng = stream(schedule.seed, &[ESTIMATOR_STREAM, t as u64]);
        let mut state = UpdateState::new(params, schedule.learning_rate, schedule.initial_momentum)?;
        for k in 1..=schedule.pretrain_iters {
            let context = || format!("layer {t}, pretraining iteration {k}");
            let positive = clamped_expectations(params, input.view()).map_err(|e| e.context(context()))?;
            let negative = estimator
                .model_expectations(params, input.view(), &mut rng)
                .map_err(|e| e.context(format!("{} estimator, {}", estimator.name(), context())))?;
            state.momentum = schedule.momentum_at(k);
            apply_update(params, &mut state, &positive, &negative).map_err(|e| e.context(context()))?;
            observer(PretrainStep {
                layer: t,
                iteration: k,
                momentum: state.momentum,
                params,
                input: input.view(),
            });
        }
        input = params.hidden_probs_batch(input.view())?;
    }
    Ok(layers)
}

/// Hidden probabilities of the top layer for every row.
pub fn propagate(layers: &[RbmParams], data: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut x = data.to_owned();
    for layer in layers {
        x = layer.hidden_probs_batch(x.view())?;
    }
    Ok(x)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Array2<f64>> {
    let mut y = Array2::zeros((labels.len(), classes));
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        y[[r, l]] = 1.0;
    }
    Ok(y)
}

/// Appends a constant-1 column.
fn augment(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::ones((a.nrows(), a.ncols() + 1));
    out.slice_mut(s![.., ..a.ncols()]).assign(&a);
    out
}

/// Ridge least squares `argmin ‖[A, 1]·W − Y‖² + λ‖W‖²` via the SVD. With
/// `λ = 0` this is the minimum-norm pseudoinverse solution.
pub fn pseudoinverse_init(activations: ArrayView2<f64>, targets: ArrayView2<f64>, ridge: f64) -> Result<Array2<f64>> {
    let (rows, cols) = activations.dim();
    if rows == 0 || cols == 0 || targets.ncols() == 0 {
        return Err(Error::Dimension(
            "least squares needs non-empty activations and targets".into(),
        ));
    }
    if targets.nrows() != rows {
        return Err(Error::Dimension(format!(
            "{rows} activation rows but {} target rows",
            targets.nrows()
        )));
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge {ridge} must be non-negative")));
    }
    let a = augment(activations);
    let a = DMatrix::from_row_iterator(rows, cols + 1, a.iter().copied());
    let y = DMatrix::from_row_iterator(rows, targets.ncols(), targets.iter().copied());
    let svd = a.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V^T"));
    let largest = svd.singular_values.max();
    let cutoff = largest * f64::EPSILON * rows.max(cols + 1) as f64;
    let shrink = svd
        .singular_values
        .map(|sv| if sv > cutoff { sv / (sv * sv + ridge) } else { 0.0 });
    let uty = u.transpose() * y;
    let w = v_t.transpose() * DMatrix::from_diagonal(&shrink) * uty;
    let out = Array2::from_shape_fn((w.nrows(), w.ncols()), |(i, j)| w[(i, j)]);
    if !out.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("least-squares output weights".into()));
    }
    Ok(out)
}

/// Per-layer activations of one input and the output scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub activations: Vec<Array1<f64>>,
    pub scores: Array1<f64>,
}

pub fn forward(model: &DbnModel, v: &[f64]) -> Result<Forward> {
    let mut activations = Vec::with_capacity(model.layers.len());
    let mut x = Array1::from(v.to_vec());
    for layer in &model.layers {
        x = layer.hidden_probs(x.view())?;
        activations.push(x.clone());
    }
    let scores = augment(x.view().insert_axis(Axis(0))).row(0).dot(&model.output_weights);
    Ok(Forward { activations, scores })
}

/// Output scores for every row.
pub fn forward_batch(model: &DbnModel, data: ArrayView2<f64>) -> Result<Array2<f64>> {
    let top = propagate(&model.layers, data)?;
    Ok(augment(top.view()).dot(&model.output_weights))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = k;
        }
    }
    best
}

pub fn predict(model: &DbnModel, data: ArrayView2<f64>) -> Result<Vec<usize>> {
    Ok(forward_batch(model, data)?.outer_iter().map(argmax).collect())
}

/// Fraction of rows whose top-scoring class equals the label.
pub fn evaluate(model: &DbnModel, data: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if data.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != data.nrows() {
        return Err(Error::Dimension(format!(
            "{} rows but {} labels",
            data.nrows(),
            labels.len()
        )));
    }
    let hits = predict(model, data)?.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `½·mean over rows of ‖scores − targets‖²`.
pub fn mse_loss(model: &DbnModel, data: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    let scores = forward_batch(model, data)?;
    if scores.dim() != targets.dim() {
        return Err(Error::Dimension(format!(
            "scores {:?} vs targets {:?}",
            scores.dim(),
            targets.dim()
        )));
    }
    Ok(0.5 * (&scores - &targets).mapv(|d| d * d).sum() / data.nrows() as f64)
}

/// Gradient of [`mse_loss`]: per hidden layer `(dW, dc)`, then the output
/// weights. Visible biases do not enter the feed-forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
    pub output: Array2<f64>,
}

pub fn mse_gradients(model: &DbnModel, data: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Gradients> {
    let b = data.nrows() as f64;
    let mut acts = vec![data.to_owned()];
    for layer in &model.layers {
        let next = layer.hidden_probs_batch(acts.last().expect("input present").view())?;
        acts.push(next);
    }
    let top = augment(acts.last().expect("non-empty").view());
    let scores = top.dot(&model.output_weights);
    if scores.dim() != targets.dim() {
        return Err(Error::Dimension(format!(
            "scores {:?} vs targets {:?}",
            scores.dim(),
            targets.dim()
        )));
    }
    let delta_out = (&scores - &targets) / b;
    let output = top.t().dot(&delta_out);

    let hidden = model.output_weights.nrows() - 1;
    let mut upstream = delta_out.dot(&model.output_weights.slice(s![..hidden, ..]).t());
    let mut layers = Vec::with_capacity(model.layers.len());
    for t in (0..model.layers.len()).rev() {
        let a = &acts[t + 1];
        let delta = &upstream * &a.mapv(|x| x * (1.0 - x));
        let mut dw = acts[t].t().dot(&delta);
        ndarray::Zip::from(&mut dw)
            .and(&model.layers[t].mask)
            .for_each(|g, &m| {
                if m {
                    *g = 0.0;
                }
            });
        let dc = delta.sum_axis(Axis(0));
        upstream = delta.dot(&model.layers[t].weights.t());
        layers.push((dw, dc));
    }
    layers.reverse();
    Ok(Gradients { layers, output })
}

/// Minibatch gradient descent on [`mse_loss`] over all layers.
///
/// `on_checkpoint(iter, model)` fires after `iter` updates for every
/// `iter` in `checkpoints` (0 = before the first update).
pub fn finetune(
    model: &DbnModel,
    data: ArrayView2<f64>,
    labels: &[usize],
    schedule: &TrainSchedule,
    checkpoints: &[usize],
    on_checkpoint: &mut dyn FnMut(usize, &DbnModel) -> Result<()>,
) -> Result<DbnModel> {
    schedule.validate()?;
    let rows = data.nrows();
    if rows == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != rows {
        return Err(Error::Dimension(format!("{rows} rows but {} labels", labels.len())));
    }
    let targets = one_hot(labels, model.n_classes())?;
    let mut model = model.clone();
    let mut rng = stream(schedule.seed, &[FINETUNE_STREAM]);
    let batch = schedule.minibatch_size.min(rows);
    let mut order: Vec<usize> = (0..rows).collect();
    let mut cursor = rows;
    let lr = schedule.backprop_learning_rate;

    if checkpoints.contains(&0) {
        on_checkpoint(0, &model)?;
    }
    for iter in 1..=schedule.backprop_iters {
        if cursor + batch > rows {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let x = data.select(Axis(0), idx);
        let y = targets.select(Axis(0), idx);
        let grads = mse_gradients(&model, x.view(), y.view())?;
        let finite = grads.output.iter().all(|g| g.is_finite())
            && grads
                .layers
                .iter()
                .all(|(w, c)| w.iter().chain(c.iter()).all(|g| g.is_finite()));
        if !finite {
            let loss = mse_loss(&model, x.view(), y.view()).unwrap_or(f64::NAN);
            return Err(Error::NonFinite(format!(
                "backprop gradients at iteration {iter} (minibatch loss {loss})"
            )));
        }
        if lr > 0.0 {
            model.output_weights.scaled_add(-lr, &grads.output);
            for (layer, (dw, dc)) in model.layers.iter_mut().zip(&grads.layers) {
                layer.weights.scaled_add(-lr, dw);
                layer.hidden_bias.scaled_add(-lr, dc);
                layer.enforce_mask();
            }
        }
        if checkpoints.contains(&iter) {
            on_checkpoint(iter, &model)?;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rbm::{exact_expectations, log_likelihood};
    use crate::sampler::{Cd1Estimator, ExactEstimator};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn schedule(iters: usize, seed: u64) -> TrainSchedule {
        TrainSchedule {
            pretrain_iters: iters,
            seed,
            ..TrainSchedule::default()
        }
    }

    fn binary_data(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = rng(seed);
        // Two noisy prototypes give the data some structure to learn.
        let protos: Vec<Vec<bool>> = (0..2).map(|_| (0..cols).map(|_| r.random()).collect()).collect();
        Array2::from_shape_fn((rows, cols), |(i, j)| {
            let bit = protos[i % 2][j] ^ (r.random::<f64>() < 0.1);
            f64::from(u8::from(bit))
        })
    }

    fn blobs(rows: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut r = rng(seed);
        let noise = Normal::new(0.0, 0.08).unwrap();
        let labels: Vec<usize> = (0..rows).map(|i| i % 2).collect();
        let data = Array2::from_shape_fn((rows, 2), |(i, _)| {
            let centre: f64 = if labels[i] == 0 { 0.25 } else { 0.75 };
            (centre + noise.sample(&mut r)).clamp(0.0, 1.0)
        });
        (data, labels)
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let data = binary_data(20, 4, 1);
        let s = schedule(0, 3);
        let layers = pretrain(&[4, 3, 2], data.view(), &ExactEstimator, &s, &mut |_| {}).unwrap();
        assert_eq!(layers, initial_layers(&[4, 3, 2], &s).unwrap());
        let top = propagate(&layers, data.view()).unwrap();
        assert!(top.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn one_iteration_is_one_plain_gradient_step() {
        let data = binary_data(10, 3, 2);
        let s = schedule(1, 4);
        let init = initial_layers(&[3, 3], &s).unwrap();
        let layers = pretrain(&[3, 3], data.view(), &ExactEstimator, &s, &mut |_| {}).unwrap();
        let pos = clamped_expectations(&init[0], data.view()).unwrap();
        let neg = exact_expectations(&init[0]).unwrap();
        let expected = &init[0].weights + &((&pos.vh - &neg.vh) * 0.1);
        assert_abs_diff_eq!(layers[0].weights, expected, epsilon = 1e-15);
    }

    #[test]
    fn exact_pretraining_raises_likelihood() {
        let mut improved = 0;
        for seed in 0..10 {
            let data = binary_data(60, 12, 100 + seed);
            let before = initial_layers(&[12, 12], &schedule(0, seed)).unwrap();
            let after = pretrain(
                &[12, 12],
                data.view(),
                &ExactEstimator,
                &schedule(50, seed),
                &mut |_| {},
            )
            .unwrap();
            if log_likelihood(&after[0], data.view()).unwrap() > log_likelihood(&before[0], data.view()).unwrap() {
                improved += 1;
            }
        }
        assert!(improved >= 9, "{improved}/10");
    }

    #[test]
    fn momentum_switches_after_five_iterations() {
        let data = binary_data(10, 3, 5);
        let mut seen = Vec::new();
        pretrain(&[3, 2], data.view(), &Cd1Estimator, &schedule(8, 0), &mut |step| {
            seen.push((step.iteration, step.momentum))
        })
        .unwrap();
        let expected: Vec<(usize, f64)> = (1..=8).map(|k| (k, if k <= 5 { 0.5 } else { 0.9 })).collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn next_layer_trains_on_hidden_probabilities() {
        let data = binary_data(12, 4, 6);
        let mut inputs: Vec<(usize, Array2<f64>)> = Vec::new();
        let mut params: Vec<RbmParams> = Vec::new();
        pretrain(&[4, 3, 2], data.view(), &Cd1Estimator, &schedule(2, 1), &mut |step| {
            inputs.push((step.layer, step.input.to_owned()));
            params.push(step.params.clone());
        })
        .unwrap();
        assert_eq!(inputs[0].1, data);
        let expected = params[1].hidden_probs_batch(data.view()).unwrap();
        assert_eq!(inputs[2].0, 1);
        assert_eq!(inputs[2].1, expected);
    }

    fn tiny_model(seed: u64) -> DbnModel {
        let mut r = rng(seed);
        let layers = vec![RbmParams::random_uniform(4, 3, 1.0, &mut r)];
        let head = Array2::from_shape_fn((4, 2), |_| r.random_range(-1.0..1.0));
        DbnModel::new(layers, head).unwrap()
    }

    #[test]
    fn forward_with_zero_weights() {
        let model = DbnModel::new(
            vec![RbmParams::zeros(3, 2), RbmParams::zeros(2, 2)],
            array![[1.0, 2.0], [3.0, 4.0], [0.5, -0.5]],
        )
        .unwrap();
        let f = forward(&model, &[1.0, 0.0, 1.0]).unwrap();
        assert!(f.activations.iter().all(|a| a.iter().all(|&x| x == 0.5)));
        assert_abs_diff_eq!(f.scores, array![0.5 * 4.0 + 0.5, 0.5 * 6.0 - 0.5], epsilon = 1e-15);
    }

    #[test]
    fn saturated_identity_layer() {
        let mut layer = RbmParams::zeros(3, 3);
        for i in 0..3 {
            layer.weights[[i, i]] = 40.0;
            layer.hidden_bias[i] = -20.0;
        }
        let model = DbnModel::new(vec![layer], Array2::zeros((4, 1))).unwrap();
        let f = forward(&model, &[1.0, 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(f.activations[0], array![1.0, 0.0, 1.0], epsilon = 1e-4);
    }

    #[test]
    fn scores_are_linear_in_head() {
        let model = tiny_model(7);
        let mut doubled = model.clone();
        doubled.output_weights *= 2.0;
        let x = [0.1, 0.9, 0.4, 0.0];
        let (a, b) = (
            forward(&model, &x).unwrap().scores,
            forward(&doubled, &x).unwrap().scores,
        );
        assert_abs_diff_eq!(b, a * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn pseudoinverse_interpolates_identity() {
        let a = Array2::<f64>::eye(4);
        let y = array![[1.0, -2.0], [0.5, 3.0], [7.0, 0.0], [-1.0, 1.0]];
        let w = pseudoinverse_init(a.view(), y.view(), 0.0).unwrap();
        assert_abs_diff_eq!(augment(a.view()).dot(&w), y, epsilon = 1e-10);
    }

    #[test]
    fn pseudoinverse_recovers_planted_weights() {
        let mut r = rng(8);
        let a = Array2::from_shape_fn((50, 5), |_| r.random::<f64>());
        let planted = Array2::from_shape_fn((6, 3), |_| r.random_range(-2.0..2.0));
        let y = augment(a.view()).dot(&planted);
        let w = pseudoinverse_init(a.view(), y.view(), 1e-8).unwrap();
        let residual = (augment(a.view()).dot(&w) - &y)
            .mapv(f64::abs)
            .fold(0.0f64, |a, &b| a.max(b));
        assert!(residual < 1e-8, "{residual}");
    }

    #[test]
    fn pseudoinverse_averages_conflicts() {
        let a = array![[1.0], [1.0], [0.0]];
        let y = array![[1.0], [0.0], [5.0]];
        let w = pseudoinverse_init(a.view(), y.view(), 0.0).unwrap();
        let fit = augment(a.view()).dot(&w);
        assert_abs_diff_eq!(fit, array![[0.5], [0.5], [5.0]], epsilon = 1e-10);
    }

    #[test]
    fn pseudoinverse_is_optimal() {
        let mut r = rng(9);
        let a = Array2::from_shape_fn((30, 4), |_| r.random::<f64>());
        let y = one_hot(&(0..30).map(|i| i % 3).collect::<Vec<_>>(), 3).unwrap();
        let lambda = 1e-3;
        let w = pseudoinverse_init(a.view(), y.view(), lambda).unwrap();
        let aug = augment(a.view());
        let loss = |w: &Array2<f64>| (aug.dot(w) - &y).mapv(|d| d * d).sum() + lambda * w.mapv(|x| x * x).sum();
        let base = loss(&w);
        for _ in 0..100 {
            let dir = Array2::from_shape_fn(w.dim(), |_| r.random_range(-1e-4..1e-4));
            assert!(loss(&(&w + &dir)) >= base - 1e-12);
        }
        assert!(pseudoinverse_init(a.view(), y.slice(s![..10, ..]), 0.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(10);
        let layers = vec![RbmParams::random_uniform(4, 3, 1.0, &mut r)];
        let head = Array2::from_shape_fn((4, 2), |_| r.random_range(-1.0..1.0));
        let model = DbnModel::new(layers, head).unwrap();
        let x = Array2::from_shape_fn((5, 4), |_| r.random::<f64>());
        let y = one_hot(&[0, 1, 1, 0, 1], 2).unwrap();
        let g = mse_gradients(&model, x.view(), y.view()).unwrap();
        let h = 1e-6;
        let check = |analytic: f64, perturb: &dyn Fn(&mut DbnModel, f64)| {
            let mut plus = model.clone();
            perturb(&mut plus, h);
            let mut minus = model.clone();
            perturb(&mut minus, -h);
            let numeric = (mse_loss(&plus, x.view(), y.view()).unwrap()
                - mse_loss(&minus, x.view(), y.view()).unwrap())
                / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-5, "analytic {analytic} numeric {numeric}");
        };
        for i in 0..4 {
            for j in 0..3 {
                check(g.layers[0].0[[i, j]], &|m, d| m.layers[0].weights[[i, j]] += d);
            }
        }
        for j in 0..3 {
            check(g.layers[0].1[j], &|m, d| m.layers[0].hidden_bias[j] += d);
        }
        for i in 0..4 {
            for k in 0..2 {
                check(g.output[[i, k]], &|m, d| m.output_weights[[i, k]] += d);
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let model = tiny_model(11);
        let (data, _) = blobs(20, 0);
        let data = ndarray::concatenate![Axis(1), data, data];
        let s = TrainSchedule {
            backprop_learning_rate: 0.0,
            backprop_iters: 20,
            ..TrainSchedule::default()
        };
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let tuned = finetune(&model, data.view(), &labels, &s, &[], &mut |_, _| Ok(())).unwrap();
        assert_eq!(tuned, model);
    }

    #[test]
    fn separable_blobs_are_learned() {
        for seed in 0..5 {
            let (data, labels) = blobs(200, seed);
            let s = TrainSchedule {
                backprop_iters: 500,
                seed,
                ..TrainSchedule::default()
            };
            let layers = initial_layers(&[2, 8], &s).unwrap();
            let model = DbnModel::with_least_squares_head(layers, data.view(), &labels, 2, s.ridge).unwrap();
            let targets = one_hot(&labels, 2).unwrap();
            let mut losses = Vec::new();
            let tuned = finetune(&model, data.view(), &labels, &s, &[0, 50], &mut |_, m| {
                losses.push(mse_loss(m, data.view(), targets.view())?);
                Ok(())
            })
            .unwrap();
            assert!(losses[1] < losses[0], "seed {seed}: {losses:?}");
            assert_eq!(evaluate(&tuned, data.view(), &labels).unwrap(), 1.0, "seed {seed}");
        }
    }

    #[test]
    fn checkpoints_fire_in_order() {
        let (data, labels) = blobs(30, 1);
        let model = DbnModel::with_least_squares_head(
            initial_layers(&[2, 3], &TrainSchedule::default()).unwrap(),
            data.view(),
            &labels,
            2,
            1e-6,
        )
        .unwrap();
        let s = TrainSchedule {
            backprop_iters: 10,
            minibatch_size: 7,
            ..TrainSchedule::default()
        };
        let mut fired = Vec::new();
        finetune(&model, data.view(), &labels, &s, &[0, 3, 10, 99], &mut |k, _| {
            fired.push(k);
            Ok(())
        })
        .unwrap();
        assert_eq!(fired, vec![0, 3, 10]);
    }

    #[test]
    fn evaluation_cases() {
        let model = tiny_model(12);
        let mut r = rng(13);
        let x = Array2::from_shape_fn((50, 4), |_| r.random::<f64>());
        let preds = predict(&model, x.view()).unwrap();
        assert_eq!(evaluate(&model, x.view(), &preds).unwrap(), 1.0);
        let one = evaluate(&model, x.slice(s![..1, ..]), &[0]).unwrap();
        assert!(one == 0.0 || one == 1.0);
        assert!(evaluate(&model, x.slice(s![..0, ..]), &[]).is_err());

        let mut scaled = model.clone();
        scaled.output_weights *= 3.5;
        assert_eq!(predict(&scaled, x.view()).unwrap(), preds);

        // A constant predictor against random labels scores at chance.
        let constant = DbnModel::new(vec![RbmParams::zeros(4, 3)], Array2::zeros((4, 10))).unwrap();
        let x = Array2::zeros((10_000, 4));
        let labels: Vec<usize> = (0..10_000).map(|_| r.random_range(0..10)).collect();
        let acc = evaluate(&constant, x.view(), &labels).unwrap();
        assert!((acc - 0.1).abs() < 0.02);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(array![1.0, 3.0, 3.0].view()), 1);
        assert_eq!(argmax(array![0.0, 0.0].view()), 0);
    }

    #[test]
    fn masks_survive_training() {
        let (data, labels) = blobs(40, 2);
        let mut layers = initial_layers(&[2, 3], &TrainSchedule::default()).unwrap();
        let mut mask = Array2::from_elem((2, 3), false);
        mask[[1, 2]] = true;
        layers[0] = layers[0].clone().with_mask(mask).unwrap();
        let model = DbnModel::with_least_squares_head(layers, data.view(), &labels, 2, 1e-6).unwrap();
        let tuned = finetune(
            &model,
            data.view(),
            &labels,
            &TrainSchedule {
                backprop_iters: 50,
                ..TrainSchedule::default()
            },
            &[],
            &mut |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(tuned.layers[0].weights[[1, 2]], 0.0);
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model = tiny_model(14);
        model.layers[0] = model.layers[0]
            .clone()
            .with_mask(Array2::from_shape_fn((4, 3), |(i, j)| i == j))
            .unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("pretrain_iters".to_string(), serde_json::json!(5));
        model.save(&path, meta.clone()).unwrap();
        let (back, back_meta) = DbnModel::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back_meta, meta);

        std::fs::write(&path, "{\"format\": \"something-else\"}").unwrap();
        assert!(DbnModel::load(&path).unwrap_err().is_data_error());
    }
}
