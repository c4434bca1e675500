//! Small dense feed-forward networks trained with mean squared error and
//! SGD with Nesterov momentum.
//!
//! Everything is `f64`. Weight matrices are stored row-major with shape
//! `(fan_out, fan_in)`, so `z = W a + b` reads row `o` of `W` for output `o`.
//! The canonical flat layout used for aggregation and transport is
//! layer 0 weights, layer 0 biases, layer 1 weights, ... in that order.

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden layer count bound of the model search space.
pub const MAX_HIDDEN_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x` for `x > 0`, `e^x - 1` otherwise.
    Elu,
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Linear => x,
        }
    }

    /// Derivative with respect to the pre-activation. ReLU uses 0 at exactly 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub units: usize,
    pub activation: Activation,
}

impl HiddenLayer {
    pub fn elu(units: usize) -> Self {
        Self {
            units,
            activation: Activation::Elu,
        }
    }
}

/// Shape of one trainable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// A single-output MLP: `input_dim` inputs, up to three hidden layers, one output unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_layers: Vec<HiddenLayer>,
    pub output_activation: Activation,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        hidden_layers: Vec<HiddenLayer>,
        output_activation: Activation,
    ) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_layers,
            output_activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Wind speed -> 12 ELU -> 8 ELU -> 1 ReLU (power in MW).
    pub fn power_curve() -> Self {
        Self {
            input_dim: 1,
            hidden_layers: vec![HiddenLayer::elu(12), HiddenLayer::elu(8)],
            output_activation: Activation::Relu,
        }
    }

    /// (rotor speed, power) -> 8 ELU -> 16 ELU -> 1 linear (bearing temperature in °C).
    pub fn bearing_temperature() -> Self {
        Self {
            input_dim: 2,
            hidden_layers: vec![HiddenLayer::elu(8), HiddenLayer::elu(16)],
            output_activation: Activation::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if self.hidden_layers.len() > MAX_HIDDEN_LAYERS {
            return Err(Error::Config(format!(
                "at most {MAX_HIDDEN_LAYERS} hidden layers, got {}",
                self.hidden_layers.len()
            )));
        }
        if let Some(i) = self.hidden_layers.iter().position(|l| l.units == 0) {
            return Err(Error::Config(format!("hidden layer {i} has zero units")));
        }
        if self.output_activation == Activation::Elu {
            return Err(Error::Config(
                "output activation must be relu or linear".into(),
            ));
        }
        Ok(())
    }

    /// Number of layers with trainable weights (hidden layers plus the output layer).
    pub fn num_layers(&self) -> usize {
        self.hidden_layers.len() + 1
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut shapes = Vec::with_capacity(self.num_layers());
        let mut fan_in = self.input_dim;
        for h in &self.hidden_layers {
            shapes.push(LayerShape {
                fan_in,
                fan_out: h.units,
                activation: h.activation,
            });
            fan_in = h.units;
        }
        shapes.push(LayerShape {
            fan_in,
            fan_out: 1,
            activation: self.output_activation,
        });
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(LayerShape::param_count)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub shape: LayerShape,
    /// Row-major `(fan_out, fan_in)`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LayerParams {
    fn zeros(shape: LayerShape) -> Self {
        Self {
            shape,
            weights: vec![0.0; shape.fan_in * shape.fan_out],
            biases: vec![0.0; shape.fan_out],
        }
    }
}

/// Weights and biases of one network. Gradients and optimizer velocities use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            arch: arch.clone(),
            layers: arch
                .layer_shapes()
                .into_iter()
                .map(LayerParams::zeros)
                .collect(),
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.shape.param_count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// Canonical flat order: layer 0 weights (row-major), layer 0 biases, layer 1 weights, ...
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn unflatten(arch: &Architecture, flat: &[f64]) -> Result<Self> {
        let expected = arch.param_count();
        if flat.len() != expected {
            return Err(Error::Shape(format!(
                "flat vector has {} values, architecture needs {expected}",
                flat.len()
            )));
        }
        let mut params = Self::zeros(arch);
        let mut offset = 0;
        for l in &mut params.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(params)
    }

    fn check_same_shape(&self, other: &ModelParams, what: &str) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::Shape(format!(
                "{what}: architectures differ ({:?} vs {:?})",
                self.arch, other.arch
            )));
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_weights(arch: &Architecture, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(arch);
    for l in &mut params.layers {
        let limit = (6.0 / (l.shape.fan_in + l.shape.fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite Glorot limit");
        for w in &mut l.weights {
            *w = dist.sample(&mut rng);
        }
    }
    params
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Normalized inputs paired with raw-unit targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Matrix,
    targets: Vec<f64>,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Vec<f64>) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        if !inputs
            .as_slice()
            .iter()
            .chain(&targets)
            .all(|v| v.is_finite())
        {
            return Err(Error::Domain("batch contains non-finite values".into()));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

/// Per-row activations reused across rows and batches.
struct Tape {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Tape {
    fn new(arch: &Architecture) -> Self {
        let shapes = arch.layer_shapes();
        let sized = |s: &LayerShape| vec![0.0; s.fan_out];
        Self {
            pre: shapes.iter().map(sized).collect(),
            post: shapes.iter().map(sized).collect(),
            delta: shapes.iter().map(sized).collect(),
        }
    }
}

fn check_input_dim(params: &ModelParams, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != params.arch.input_dim {
        return Err(Error::Shape(format!(
            "inputs have {} columns, architecture expects {}",
            inputs.cols(),
            params.arch.input_dim
        )));
    }
    Ok(())
}

/// Runs one row through the network, filling `tape`. Returns the scalar output.
#[inline]
fn forward_row(params: &ModelParams, x: &[f64], tape: &mut Tape) -> Result<f64> {
    for (li, layer) in params.layers.iter().enumerate() {
        let (before, rest) = tape.post.split_at_mut(li);
        let input: &[f64] = if li == 0 { x } else { &before[li - 1] };
        let post = &mut rest[0];
        let pre = &mut tape.pre[li];
        let fan_in = layer.shape.fan_in;
        for o in 0..layer.shape.fan_out {
            let row = &layer.weights[o * fan_in..(o + 1) * fan_in];
            let mut z = layer.biases[o];
            for (w, a) in row.iter().zip(input) {
                z += w * a;
            }
            pre[o] = z;
            let a = layer.shape.activation.apply(z);
            if !a.is_finite() {
                return Err(Error::NonFinite { layer: li });
            }
            post[o] = a;
        }
    }
    Ok(tape.post[params.layers.len() - 1][0])
}

/// One prediction per input row.
pub fn forward(params: &ModelParams, inputs: &Matrix) -> Result<Vec<f64>> {
    check_input_dim(params, inputs)?;
    let mut tape = Tape::new(&params.arch);
    (0..inputs.rows())
        .map(|i| forward_row(params, inputs.row(i), &mut tape))
        .collect()
}

pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Domain("mse of empty vectors".into()));
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / predictions.len() as f64)
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    mse_loss(predictions, targets).map(f64::sqrt)
}

/// Mean squared error of `params` on `batch`.
pub fn evaluate_mse(params: &ModelParams, batch: &Batch) -> Result<f64> {
    let preds = forward(params, batch.inputs())?;
    mse_loss(&preds, batch.targets())
}

/// Accumulates d(mean loss over `rows`)/d(params) into `grads` (which must start zeroed)
/// and returns the mean loss over those rows.
fn accumulate_gradients(
    params: &ModelParams,
    batch: &Batch,
    rows: &[usize],
    grads: &mut ModelParams,
    tape: &mut Tape,
) -> Result<f64> {
    let scale = 1.0 / rows.len() as f64;
    let n_layers = params.layers.len();
    let mut loss = 0.0;
    for &r in rows {
        let x = batch.inputs.row(r);
        let y = forward_row(params, x, tape)?;
        let err = y - batch.targets[r];
        loss += err * err;

        // Output delta: dL/dz = 2 (y - t) / B * act'(z).
        let out_shape = params.layers[n_layers - 1].shape;
        tape.delta[n_layers - 1][0] =
            2.0 * err * scale * out_shape.activation.derivative(tape.pre[n_layers - 1][0]);

        for li in (0..n_layers).rev() {
            let layer = &params.layers[li];
            let fan_in = layer.shape.fan_in;
            let input: &[f64] = if li == 0 { x } else { &tape.post[li - 1] };
            let g = &mut grads.layers[li];
            for o in 0..layer.shape.fan_out {
                let d = tape.delta[li][o];
                g.biases[o] += d;
                let grow = &mut g.weights[o * fan_in..(o + 1) * fan_in];
                for (gw, a) in grow.iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            if li > 0 {
                let (lower, upper) = tape.delta.split_at_mut(li);
                let below = &mut lower[li - 1];
                let here = &upper[0];
                let act = params.layers[li - 1].shape.activation;
                for (i, slot) in below.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (o, d) in here.iter().enumerate() {
                        s += layer.weights[o * fan_in + i] * d;
                    }
                    *slot = s * act.derivative(tape.pre[li - 1][i]);
                }
                if !below.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { layer: li - 1 });
                }
            }
        }
    }
    Ok(loss * scale)
}

/// Exact gradients of `mse_loss(forward(params, batch.inputs), batch.targets)`.
pub fn backward(params: &ModelParams, batch: &Batch) -> Result<ModelParams> {
    check_input_dim(params, batch.inputs())?;
    if batch.is_empty() {
        return Err(Error::Domain("backward on an empty batch".into()));
    }
    let mut grads = ModelParams::zeros(&params.arch);
    let mut tape = Tape::new(&params.arch);
    let rows: Vec<usize> = (0..batch.len()).collect();
    accumulate_gradients(params, batch, &rows, &mut grads, &mut tape)?;
    Ok(grads)
}

/// SGD state: Nesterov velocity plus hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: ModelParams,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl OptimizerState {
    pub fn new(
        arch: &Architecture,
        learning_rate: f64,
        momentum: f64,
        batch_size: usize,
    ) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "invalid learning rate {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} not in [0, 1)")));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(Self {
            velocity: ModelParams::zeros(arch),
            learning_rate,
            momentum,
            batch_size,
        })
    }

    pub fn reset_velocity(&mut self) {
        self.velocity = ModelParams::zeros(&self.velocity.arch);
    }
}

/// `v' = μv − ηg`, `w' = w + μv' − ηg` for layers `first_trainable..`; earlier layers are untouched.
fn nesterov_update(
    params: &mut ModelParams,
    grads: &ModelParams,
    opt: &mut OptimizerState,
    first_trainable: usize,
) {
    let (mu, lr) = (opt.momentum, opt.learning_rate);
    let layers = params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut opt.velocity.layers)
        .skip(first_trainable);
    for ((p, g), v) in layers {
        let pairs = p
            .weights
            .iter_mut()
            .chain(p.biases.iter_mut())
            .zip(g.weights.iter().chain(&g.biases))
            .zip(v.weights.iter_mut().chain(v.biases.iter_mut()));
        for ((w, &gi), vi) in pairs {
            let step = lr * gi;
            *vi = mu * *vi - step;
            *w += mu * *vi - step;
        }
    }
}

pub fn sgd_nesterov_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    opt: &mut OptimizerState,
) -> Result<()> {
    params.check_same_shape(grads, "gradients")?;
    params.check_same_shape(&opt.velocity, "velocity")?;
    if !(opt.learning_rate >= 0.0) {
        return Err(Error::Config("learning rate must be non-negative".into()));
    }
    nesterov_update(params, grads, opt, 0);
    Ok(())
}

/// Trains for one epoch: seeded shuffle, mini-batches of `opt.batch_size` (last partial
/// batch kept), one Nesterov step per batch. Layers before `first_trainable` stay frozen.
/// Returns the sample-weighted mean batch loss seen during the epoch.
pub fn train_epoch<R: Rng + ?Sized>(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    train: &Batch,
    rng: &mut R,
    first_trainable: usize,
) -> Result<f64> {
    check_input_dim(params, train.inputs())?;
    params.check_same_shape(&opt.velocity, "velocity")?;
    if train.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    if first_trainable >= params.layers.len() {
        return Err(Error::Config(format!(
            "first trainable layer {first_trainable} out of range"
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);

    let mut grads = ModelParams::zeros(&params.arch);
    let mut tape = Tape::new(&params.arch);
    let mut loss_sum = 0.0;
    for chunk in order.chunks(opt.batch_size) {
        for l in &mut grads.layers {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
        let loss = accumulate_gradients(params, train, chunk, &mut grads, &mut tape)?;
        loss_sum += loss * chunk.len() as f64;
        nesterov_update(params, &grads, opt, first_trainable);
    }
    Ok(loss_sum / train.len() as f64)
}

/// `epochs` calls of [`train_epoch`] with every layer trainable.
pub fn train_epochs<R: Rng + ?Sized>(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    train: &Batch,
    epochs: usize,
    rng: &mut R,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    for _ in 0..epochs {
        train_epoch(params, opt, train, rng, 0)?;
    }
    Ok(())
}
