//! MLP encoder with a normalized projection head and a scalar regression head.
//!
//! ```text
//! x ──► encoder (dense + activation)* ──► h ──► dense ► act ► dense ► v ► v/‖v‖ = z
//!                                          └──► dense ► prediction
//! ```
//!
//! Backpropagation is written out by hand and checked against central finite
//! differences in the tests. Training uses SGD with momentum and weight decay
//! applied to weights only.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Below this pre-normalization norm the projection emits `e_1`.
pub const MIN_PROJECTION_NORM: f64 = 1e-12;

/// Paper-default projection width.
pub const DEFAULT_PROJECTION_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            other => Err(Error::Checkpoint(format!("unknown activation code {other}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::InvalidParameter(format!("unknown activation '{other}'"))),
        }
    }
}

/// Network shape. The projection hidden layer has the encoder output width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub activation: Activation,
    pub projection_dim: usize,
    pub projection_activation: Activation,
}

impl ModelSpec {
    /// Two hidden layers of width 64 with ReLU, 128-d projection.
    pub fn mlp(input_dim: usize) -> Self {
        Self {
            input_dim,
            encoder_widths: vec![64, 64],
            activation: Activation::Relu,
            projection_dim: DEFAULT_PROJECTION_DIM,
            projection_activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.projection_dim == 0 {
            return Err(Error::InvalidParameter("zero-width layer".into()));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::InvalidParameter(
                "encoder needs at least one layer and no zero widths".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder_widths.last().expect("validated spec")
    }

    /// `(fan_in, fan_out)` for every dense layer in parameter order:
    /// encoder layers, projection hidden, projection output, regression.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim;
        for &w in &self.encoder_widths {
            shapes.push((fan_in, w));
            fan_in = w;
        }
        let h = self.feature_dim();
        shapes.push((h, h));
        shapes.push((h, self.projection_dim));
        shapes.push((h, 1));
        shapes
    }
}

/// One dense layer, `y = x·Wᵀ + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// All trainable parameters, or a gradient of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    layers: Vec<Dense>,
}

impl ModelParams {
    /// Uniform fan-in initialization `U(−1/√fan_in, 1/√fan_in)` for weights
    /// and biases, fully determined by `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = || rng.random_range(-bound..=bound);
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), &mut draw);
                let bias = Array1::from_shape_simple_fn(fan_out, &mut draw);
                Dense { weight, bias }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &[Dense] {
        &self.layers[..self.spec.encoder_widths.len()]
    }

    pub fn encoder_mut(&mut self) -> &mut [Dense] {
        let k = self.spec.encoder_widths.len();
        &mut self.layers[..k]
    }

    pub fn projection_hidden(&self) -> &Dense {
        &self.layers[self.spec.encoder_widths.len()]
    }

    pub fn projection_hidden_mut(&mut self) -> &mut Dense {
        let k = self.spec.encoder_widths.len();
        &mut self.layers[k]
    }

    pub fn projection_out(&self) -> &Dense {
        &self.layers[self.spec.encoder_widths.len() + 1]
    }

    pub fn projection_out_mut(&mut self) -> &mut Dense {
        let k = self.spec.encoder_widths.len();
        &mut self.layers[k + 1]
    }

    pub fn regression(&self) -> &Dense {
        &self.layers[self.spec.encoder_widths.len() + 2]
    }

    pub fn regression_mut(&mut self) -> &mut Dense {
        let k = self.spec.encoder_widths.len();
        &mut self.layers[k + 2]
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters in canonical order: per layer, weights row-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| {
                *v = it.next().expect("length checked");
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.ncols(), l.weight.nrows()))
                .collect(),
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Array2<f64>,
    /// Pre-activations and activations of each encoder layer.
    encoder_pre: Vec<Array2<f64>>,
    encoder_out: Vec<Array2<f64>>,
    proj_pre: Array2<f64>,
    proj_hidden: Array2<f64>,
    /// Row norms of the pre-normalization projection; zero marks the fallback.
    proj_norms: Vec<f64>,
    embeddings: Array2<f64>,
}

impl ForwardCache {
    pub fn features(&self) -> &Array2<f64> {
        self.encoder_out.last().expect("at least one encoder layer")
    }
}

/// Result of [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Unit-norm projections, `B × projection_dim`.
    pub embeddings: Array2<f64>,
    pub predictions: Vec<f64>,
    pub cache: ForwardCache,
}

pub fn forward(params: &ModelParams, inputs: &Array2<f64>) -> Result<ForwardOutput> {
    let spec = &params.spec;
    if inputs.ncols() != spec.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "input width {} but model expects {}",
            inputs.ncols(),
            spec.input_dim
        )));
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model input".into()));
    }

    let mut encoder_pre = Vec::with_capacity(spec.encoder_widths.len());
    let mut encoder_out = Vec::with_capacity(spec.encoder_widths.len());
    let mut h = inputs.clone();
    for layer in params.encoder() {
        let pre = layer.forward(&h);
        h = pre.mapv(|x| spec.activation.apply(x));
        encoder_pre.push(pre);
        encoder_out.push(h.clone());
    }

    let proj_pre = params.projection_hidden().forward(&h);
    let proj_hidden = proj_pre.mapv(|x| spec.projection_activation.apply(x));
    let mut embeddings = params.projection_out().forward(&proj_hidden);
    let mut proj_norms = Vec::with_capacity(embeddings.nrows());
    for mut row in embeddings.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm < MIN_PROJECTION_NORM {
            row.fill(0.0);
            row[0] = 1.0;
            proj_norms.push(0.0);
        } else {
            row /= norm;
            proj_norms.push(norm);
        }
    }

    let predictions = params
        .regression()
        .forward(&h)
        .index_axis(Axis(1), 0)
        .to_vec();

    Ok(ForwardOutput {
        embeddings: embeddings.clone(),
        predictions,
        cache: ForwardCache {
            inputs: inputs.clone(),
            encoder_pre,
            encoder_out,
            proj_pre,
            proj_hidden,
            proj_norms,
            embeddings,
        },
    })
}

/// Parameter gradient of `Σ grad_embeddings·z + Σ grad_predictions·ŷ`.
///
/// `grad_embeddings = None` leaves the projection branch out entirely, so its
/// parameter gradients are exact zeros and the encoder sees only the
/// regression signal. Likewise for `grad_predictions = None`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_embeddings: Option<&Array2<f64>>,
    grad_predictions: Option<&[f64]>,
) -> Result<ModelParams> {
    let spec = &params.spec;
    let b = cache.inputs.nrows();
    if let Some(g) = grad_embeddings {
        if g.dim() != (b, spec.projection_dim) {
            return Err(Error::DimensionMismatch(format!(
                "embedding gradient {:?}, expected ({b}, {})",
                g.dim(),
                spec.projection_dim
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding gradient".into()));
        }
    }
    if let Some(g) = grad_predictions {
        if g.len() != b {
            return Err(Error::DimensionMismatch(format!(
                "{} prediction gradients for batch of {b}",
                g.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prediction gradient".into()));
        }
    }

    let mut grads = params.zeros_like();
    let k = spec.encoder_widths.len();
    let features = cache.features();
    let mut grad_h = Array2::<f64>::zeros(features.dim());

    if let Some(gz) = grad_embeddings {
        // d(v/‖v‖)/dv = (I − z zᵀ)/‖v‖; the fallback direction is constant.
        let mut grad_v = gz.clone();
        for (i, mut row) in grad_v.rows_mut().into_iter().enumerate() {
            let norm = cache.proj_norms[i];
            if norm == 0.0 {
                row.fill(0.0);
                continue;
            }
            let z = cache.embeddings.row(i);
            let along = z.dot(&row);
            row.scaled_add(-along, &z);
            row /= norm;
        }
        let out = &mut grads.layers[k + 1];
        out.weight = grad_v.t().dot(&cache.proj_hidden);
        out.bias = grad_v.sum_axis(Axis(0));

        let mut grad_u = grad_v.dot(&params.projection_out().weight);
        Zip::from(&mut grad_u)
            .and(&cache.proj_pre)
            .and(&cache.proj_hidden)
            .for_each(|g, &x, &y| *g *= spec.projection_activation.derivative(x, y));
        let hidden = &mut grads.layers[k];
        hidden.weight = grad_u.t().dot(features);
        hidden.bias = grad_u.sum_axis(Axis(0));
        grad_h += &grad_u.dot(&params.projection_hidden().weight);
    }

    if let Some(gp) = grad_predictions {
        let gp = Array2::from_shape_vec((b, 1), gp.to_vec()).expect("column shape");
        let reg = &mut grads.layers[k + 2];
        reg.weight = gp.t().dot(features);
        reg.bias = gp.sum_axis(Axis(0));
        grad_h += &gp.dot(&params.regression().weight);
    }

    let mut grad = grad_h;
    for l in (0..k).rev() {
        Zip::from(&mut grad)
            .and(&cache.encoder_pre[l])
            .and(&cache.encoder_out[l])
            .for_each(|g, &x, &y| *g *= spec.activation.derivative(x, y));
        let input = if l == 0 {
            &cache.inputs
        } else {
            &cache.encoder_out[l - 1]
        };
        grads.layers[l].weight = grad.t().dot(input);
        grads.layers[l].bias = grad.sum_axis(Axis(0));
        if l > 0 {
            grad = grad.dot(&params.layers[l].weight);
        }
    }
    Ok(grads)
}

/// SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum buffers plus step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: SgdConfig,
    buffers: Option<ModelParams>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            buffers: None,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One SGD step at learning rate `lr`:
    /// `g ← g + wd·w` (weights only), `m ← μ·m + g`, `w ← w − lr·m`.
    ///
    /// Nothing is modified if the gradient or the resulting parameters are
    /// non-finite.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        if grads.spec != params.spec {
            return Err(Error::DimensionMismatch("gradient shape differs from model".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient; step rejected".into()));
        }
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;

        let mut buffers = self
            .buffers
            .clone()
            .unwrap_or_else(|| params.zeros_like());
        let mut next = params.clone();
        for ((p, g), m) in next
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut buffers.layers)
        {
            Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .for_each(|w, &g, m| {
                    *m = momentum * *m + (g + weight_decay * *w);
                    *w -= lr * *m;
                });
            Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .for_each(|w, &g, m| {
                    *m = momentum * *m + g;
                    *w -= lr * *m;
                });
        }
        if !next.is_finite() {
            return Err(Error::NonFinite("parameters after step; step rejected".into()));
        }
        *params = next;
        self.buffers = Some(buffers);
        self.steps += 1;
        Ok(())
    }
}

/// Forward/backward through the network followed by one optimizer step.
pub fn backward_and_step(
    params: &mut ModelParams,
    cache: &ForwardCache,
    grad_embeddings: Option<&Array2<f64>>,
    grad_predictions: Option<&[f64]>,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let grads = backward(params, cache, grad_embeddings, grad_predictions)?;
    opt.step(params, &grads, lr)
}

/// Piecewise-constant learning rate: `base · factor^(#milestones ≤ step)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn new(base: f64, milestones: Vec<usize>, factor: f64) -> Result<Self> {
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "milestones must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            base,
            milestones,
            factor,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= step).count();
        self.base * self.factor.powi(passed as i32)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ADACONPM";
const CHECKPOINT_VERSION: u32 = 1;

impl ModelParams {
    /// Writes the checkpoint: magic, version, spec header, parameter count,
    /// then every parameter as a little-endian `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in spec_header(&self.spec) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.num_params() as u64).to_le_bytes())?;
        for v in self.to_flat() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    /// Reads a checkpoint, taking the network shape from its header.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let input_dim = read_u64(&mut r)? as usize;
        let depth = read_u64(&mut r)? as usize;
        if depth > 1024 {
            return Err(Error::Checkpoint(format!("implausible depth {depth}")));
        }
        let encoder_widths = (0..depth)
            .map(|_| read_u64(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let activation = Activation::from_code(read_u64(&mut r)? as u8)?;
        let projection_dim = read_u64(&mut r)? as usize;
        let projection_activation = Activation::from_code(read_u64(&mut r)? as u8)?;
        let spec = ModelSpec {
            input_dim,
            encoder_widths,
            activation,
            projection_dim,
            projection_activation,
        };
        let mut params =
            ModelParams::zeros(&spec).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let count = read_u64(&mut r)? as usize;
        if count != params.num_params() {
            return Err(Error::Checkpoint(format!(
                "header declares {count} parameters, spec implies {}",
                params.num_params()
            )));
        }
        let flat = (0..count)
            .map(|_| read_array(&mut r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        params.set_flat(&flat)?;
        Ok(params)
    }

    /// Reads a checkpoint and rejects it unless its header matches `expected`.
    pub fn read_expecting<R: Read>(r: R, expected: &ModelSpec) -> Result<Self> {
        let params = Self::read_from(r)?;
        if &params.spec != expected {
            return Err(Error::Checkpoint(format!(
                "spec mismatch: checkpoint has {:?}, expected {:?}",
                params.spec, expected
            )));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn spec_header(spec: &ModelSpec) -> Vec<u64> {
    let mut h = vec![spec.input_dim as u64, spec.encoder_widths.len() as u64];
    h.extend(spec.encoder_widths.iter().map(|&w| w as u64));
    h.push(spec.activation.code() as u64);
    h.push(spec.projection_dim as u64);
    h.push(spec.projection_activation.code() as u64);
    h
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}
