//! Layered toy tasks with exact gradients and per-worker data shards.
//!
//! Two task families are provided:
//!
//! * a diagonal quadratic `½ (θ − θ*)ᵀ A (θ − θ*)` whose Hessian spectrum is
//!   log-spaced in `[1, cond]`. It satisfies the smoothness / bounded-gradient
//!   assumptions in closed form and is used for bound checking.
//! * a small tanh MLP regressing a fixed random teacher network. It is used
//!   for the loss-spike and learning-rate experiments.
//!
//! Both are split into layers so the engine can shard and synchronize them
//! layer by layer. For the quadratic the layers pass their activation through
//! unchanged and the loss is read off the concatenated parameter view.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::{Rng, Vector};

const TAG_OPTIMUM: u64 = 0x0F;
const TAG_INIT: u64 = 0x11;
const TAG_TEACHER: u64 = 0x7E;
const TAG_DATA: u64 = 0xDA;
const TAG_VALIDATION: u64 = 0x5A;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("matrix", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Quadratic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationFn {
    Tanh,
    Identity,
}

impl ActivationFn {
    fn apply(self, z: f64) -> f64 {
        match self {
            ActivationFn::Tanh => z.tanh(),
            ActivationFn::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            ActivationFn::Tanh => 1.0 - a * a,
            ActivationFn::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: ActivationFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    /// 1-based layer index.
    pub index: usize,
    pub param_count: usize,
    /// Offset of the layer inside the flat parameter vector.
    pub offset: usize,
    /// Present for MLP layers: weights are `out_dim x in_dim`, row-major,
    /// followed by `out_dim` biases.
    pub shape: Option<DenseShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticConfig {
    pub dim: usize,
    pub cond: f64,
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Std of the per-coordinate observation noise on the optimum.
    #[serde(default)]
    pub noise_std: f64,
    /// Truncation radius of that noise.
    #[serde(default = "default_clip")]
    pub noise_clip: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// Layer widths `[in, h1, ..., out]`; `dims.len() - 1` layers.
    pub dims: Vec<usize>,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default = "default_clip")]
    pub noise_clip: f64,
    #[serde(default)]
    pub seed: u64,
    /// Number of held-out validation samples.
    #[serde(default = "default_validation_size")]
    pub validation_size: usize,
    /// Std of the student initialisation relative to `1/sqrt(in_dim)`.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_layers() -> usize {
    4
}
fn default_clip() -> f64 {
    3.0
}
fn default_validation_size() -> usize {
    256
}
fn default_init_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Quadratic(QuadraticConfig),
    Mlp(MlpConfig),
}

impl TaskConfig {
    pub fn build(&self) -> Result<LayeredTask> {
        match self {
            TaskConfig::Quadratic(c) => LayeredTask::quadratic(c),
            TaskConfig::Mlp(c) => LayeredTask::mlp(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct QuadraticModel {
    eigenvalues: Vec<f64>,
    optimum: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct MlpModel {
    dims: Vec<usize>,
    teacher: Vec<Vector>,
    validation: Batch,
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    Quadratic(QuadraticModel),
    Mlp(MlpModel),
}

/// Immutable task description shared by all workers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredTask {
    pub kind: TaskKind,
    pub layers: Vec<LayerSpec>,
    pub param_dim: usize,
    /// Exact for the quadratic, an estimate for the MLP.
    pub smoothness_l: f64,
    /// Per-coordinate gradient bound; `None` for the MLP, where the engine
    /// reports the empirical running maximum instead.
    pub grad_bound_ginf: Option<f64>,
    noise_std: f64,
    noise_clip: f64,
    seed: u64,
    initial: Vec<Vector>,
    model: Model,
}

/// Saved forward state of one layer for one worker.
#[derive(Debug, Clone)]
pub struct LayerCtx {
    input: Matrix,
    output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub worker_id: usize,
    pub t: u64,
    pub p: u64,
}

/// Rounds in which a worker's targets get scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSchedule {
    pub workers: Vec<usize>,
    /// First corrupted outer round.
    pub start_round: u64,
    /// Period in outer rounds.
    pub every_rounds: u64,
    pub factor: f64,
}

impl CorruptionSchedule {
    pub fn marks(&self, worker: usize, t: u64, _p: u64) -> bool {
        self.workers.contains(&worker)
            && t >= self.start_round
            && (t - self.start_round) % self.every_rounds.max(1) == 0
    }
}

/// Per-worker data source.
#[derive(Debug, Clone, PartialEq)]
pub struct DataShard {
    pub worker_id: usize,
    pub seed: u64,
    pub corruption: Option<CorruptionSchedule>,
}

impl DataShard {
    pub fn new(worker_id: usize, seed: u64) -> Self {
        Self {
            worker_id,
            seed,
            corruption: None,
        }
    }

    pub fn with_corruption(mut self, schedule: CorruptionSchedule) -> Self {
        self.corruption = Some(schedule);
        self
    }

    pub fn corruption_factor(&self, t: u64, p: u64) -> f64 {
        match &self.corruption {
            Some(c) if c.marks(self.worker_id, t, p) => c.factor,
            _ => 1.0,
        }
    }
}

/// Splits `n` into chunks of `ceil(n / layers)`; the last chunk takes the rest.
fn chunk_sizes(n: usize, layers: usize) -> Vec<usize> {
    let chunk = n.div_ceil(layers.max(1));
    let mut sizes = Vec::new();
    let mut left = n;
    while left > 0 {
        let s = chunk.min(left);
        sizes.push(s);
        left -= s;
    }
    sizes
}

/// Builds a quadratic with default layering (4 layers) and no noise.
pub fn quadratic_make(n: usize, cond: f64, seed: u64) -> Result<LayeredTask> {
    LayeredTask::quadratic(&QuadraticConfig {
        dim: n,
        cond,
        layers: default_layers(),
        noise_std: 0.0,
        noise_clip: default_clip(),
        seed,
    })
}

impl LayeredTask {
    pub fn quadratic(cfg: &QuadraticConfig) -> Result<Self> {
        if cfg.dim < 2 {
            return Err(Error::Config(format!("quadratic dim must be >= 2, got {}", cfg.dim)));
        }
        if !(cfg.cond >= 1.0) || !cfg.cond.is_finite() {
            return Err(Error::Config(format!("quadratic cond must be >= 1, got {}", cfg.cond)));
        }
        if cfg.layers == 0 {
            return Err(Error::Config("quadratic layers must be >= 1".into()));
        }
        if cfg.noise_std < 0.0 || !(cfg.noise_clip > 0.0) {
            return Err(Error::Config("noise_std must be >= 0 and noise_clip > 0".into()));
        }
        let n = cfg.dim;
        let eigenvalues: Vec<f64> = (0..n)
            .map(|k| cfg.cond.powf(k as f64 / (n - 1) as f64))
            .collect();
        let mut rng = Rng::derived(cfg.seed, &[TAG_OPTIMUM]);
        let optimum: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();

        let mut layers = Vec::new();
        let mut offset = 0;
        for (i, size) in chunk_sizes(n, cfg.layers).into_iter().enumerate() {
            layers.push(LayerSpec {
                index: i + 1,
                param_count: size,
                offset,
                shape: None,
            });
            offset += size;
        }
        let initial = layers.iter().map(|l| Vector::zeros(l.param_count)).collect();
        Ok(Self {
            kind: TaskKind::Quadratic,
            layers,
            param_dim: n,
            smoothness_l: eigenvalues[n - 1],
            grad_bound_ginf: None,
            noise_std: cfg.noise_std,
            noise_clip: cfg.noise_clip,
            seed: cfg.seed,
            initial,
            model: Model::Quadratic(QuadraticModel {
                eigenvalues,
                optimum,
            }),
        })
    }

    pub fn mlp(cfg: &MlpConfig) -> Result<Self> {
        if cfg.dims.len() < 2 || cfg.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("mlp dims need >= 2 positive widths".into()));
        }
        if cfg.noise_std < 0.0 || !(cfg.noise_clip > 0.0) {
            return Err(Error::Config("noise_std must be >= 0 and noise_clip > 0".into()));
        }
        let n_layers = cfg.dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for l in 0..n_layers {
            let (in_dim, out_dim) = (cfg.dims[l], cfg.dims[l + 1]);
            let activation = if l + 1 == n_layers {
                ActivationFn::Identity
            } else {
                ActivationFn::Tanh
            };
            let count = out_dim * in_dim + out_dim;
            layers.push(LayerSpec {
                index: l + 1,
                param_count: count,
                offset,
                shape: Some(DenseShape {
                    in_dim,
                    out_dim,
                    activation,
                }),
            });
            offset += count;
        }

        let random_layers = |tag: u64, scale: f64| -> Vec<Vector> {
            let mut rng = Rng::derived(cfg.seed, &[tag]);
            layers
                .iter()
                .map(|l| {
                    let shape = l.shape.expect("mlp layer");
                    let std = scale / (shape.in_dim as f64).sqrt();
                    let mut v: Vec<f64> = (0..shape.out_dim * shape.in_dim)
                        .map(|_| std * rng.standard_normal())
                        .collect();
                    v.extend((0..shape.out_dim).map(|_| 0.1 * scale * rng.standard_normal()));
                    Vector::from_vec(v)
                })
                .collect()
        };
        let teacher = random_layers(TAG_TEACHER, 1.5);
        let initial = random_layers(TAG_INIT, cfg.init_scale);

        let mut task = Self {
            kind: TaskKind::Mlp,
            layers,
            param_dim: offset,
            smoothness_l: 0.0,
            grad_bound_ginf: None,
            noise_std: cfg.noise_std,
            noise_clip: cfg.noise_clip,
            seed: cfg.seed,
            initial,
            model: Model::Mlp(MlpModel {
                dims: cfg.dims.clone(),
                teacher,
                validation: Batch {
                    inputs: Matrix::zeros(0, cfg.dims[0]),
                    targets: Matrix::zeros(0, cfg.dims[n_layers]),
                    worker_id: usize::MAX,
                    t: 0,
                    p: 0,
                },
            }),
        };
        let mut rng = Rng::derived(cfg.seed, &[TAG_VALIDATION]);
        let validation = task.mlp_batch(&mut rng, cfg.validation_size.max(1), 1.0, usize::MAX, 0, 0);
        if let Model::Mlp(m) = &mut task.model {
            m.validation = validation;
        }
        task.smoothness_l = task.estimate_smoothness()?;
        Ok(task)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Initial parameters `θ_0`, one vector per layer.
    pub fn initial_params(&self) -> Vec<Vector> {
        self.initial.clone()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Diagonal of `A` (quadratic only).
    pub fn eigenvalues(&self) -> Option<&[f64]> {
        match &self.model {
            Model::Quadratic(q) => Some(&q.eigenvalues),
            Model::Mlp(_) => None,
        }
    }

    /// `θ*` split by layer (quadratic only).
    pub fn optimum(&self) -> Option<Vec<Vector>> {
        match &self.model {
            Model::Quadratic(q) => Some(self.split(&q.optimum)),
            Model::Mlp(_) => None,
        }
    }

    /// Bound on `|∇L|_∞` for noisy quadratic gradients when every iterate
    /// stays within `radius` of `θ*` in the max-norm.
    pub fn quadratic_ginf(&self, radius: f64) -> Option<f64> {
        match &self.model {
            Model::Quadratic(_) => Some(self.smoothness_l * (radius + self.noise_clip_effective())),
            Model::Mlp(_) => None,
        }
    }

    fn noise_clip_effective(&self) -> f64 {
        if self.noise_std == 0.0 {
            0.0
        } else {
            self.noise_clip
        }
    }

    /// Splits a flat vector into per-layer pieces.
    pub fn split(&self, flat: &[f64]) -> Vec<Vector> {
        self.layers
            .iter()
            .map(|l| Vector::from_vec(flat[l.offset..l.offset + l.param_count].to_vec()))
            .collect()
    }

    pub fn concat(params: &[Vector]) -> Vec<f64> {
        params.iter().flat_map(|v| v.iter().copied()).collect()
    }

    fn layer(&self, l: usize) -> Result<&LayerSpec> {
        self.layers
            .get(l)
            .ok_or_else(|| Error::Domain(format!("layer {l} out of range")))
    }

    /// Batch fed into layer 0. For the quadratic this is the noisy optimum
    /// observations, carried through the layers unchanged.
    pub fn input_activation(&self, batch: &Batch) -> Matrix {
        match self.kind {
            TaskKind::Quadratic => batch.targets.clone(),
            TaskKind::Mlp => batch.inputs.clone(),
        }
    }

    /// Forward pass of layer `l` (0-based) on the full, unsharded layer
    /// parameters.
    pub fn forward_layer(&self, l: usize, params: &[f64], input: &Matrix) -> Result<(Matrix, LayerCtx)> {
        let spec = self.layer(l)?;
        check_len("forward_layer", spec.param_count, params.len())?;
        match spec.shape {
            None => {
                check_len("forward_layer input", self.param_dim, input.cols())?;
                Ok((
                    input.clone(),
                    LayerCtx {
                        input: input.clone(),
                        output: input.clone(),
                    },
                ))
            }
            Some(shape) => {
                check_len("forward_layer input", shape.in_dim, input.cols())?;
                let (w, b) = params.split_at(shape.out_dim * shape.in_dim);
                let rows = input.rows();
                let mut out = Matrix::zeros(rows, shape.out_dim);
                for r in 0..rows {
                    let x = input.row(r);
                    for o in 0..shape.out_dim {
                        let wrow = &w[o * shape.in_dim..(o + 1) * shape.in_dim];
                        let z = wrow.iter().zip(x).fold(b[o], |acc, (wi, xi)| acc + wi * xi);
                        out.data[r * shape.out_dim + o] = shape.activation.apply(z);
                    }
                }
                Ok((
                    out.clone(),
                    LayerCtx {
                        input: input.clone(),
                        output: out,
                    },
                ))
            }
        }
    }

    /// Loss on the final activation and its gradient with respect to it.
    ///
    /// The quadratic loss depends only on the parameters, so `full_params`
    /// is consulted and the returned activation gradient is zero.
    pub fn head_loss(&self, output: &Matrix, batch: &Batch, full_params: &[Vector]) -> Result<(f64, Matrix)> {
        match &self.model {
            Model::Quadratic(q) => {
                let theta = Self::concat(full_params);
                check_len("head_loss", self.param_dim, theta.len())?;
                let rows = output.rows().max(1);
                let mut loss = 0.0;
                for r in 0..output.rows() {
                    let obs = output.row(r);
                    loss += q
                        .eigenvalues
                        .iter()
                        .zip(&theta)
                        .zip(obs)
                        .fold(0.0, |acc, ((a, th), o)| acc + a * (th - o) * (th - o));
                }
                Ok((0.5 * loss / rows as f64, Matrix::zeros(output.rows(), output.cols())))
            }
            Model::Mlp(_) => {
                check_len("head_loss targets", batch.targets.cols(), output.cols())?;
                check_len("head_loss rows", batch.targets.rows(), output.rows())?;
                let b = output.rows().max(1) as f64;
                let mut grad = Matrix::zeros(output.rows(), output.cols());
                let mut loss = 0.0;
                for (i, (y_hat, y)) in output.data.iter().zip(&batch.targets.data).enumerate() {
                    let d = y_hat - y;
                    loss += d * d;
                    grad.data[i] = d / b;
                }
                Ok((0.5 * loss / b, grad))
            }
        }
    }

    /// Backward pass of layer `l`: returns `(grad wrt params, grad wrt input)`.
    pub fn backward_layer(&self, l: usize, params: &[f64], ctx: &LayerCtx, grad_out: &Matrix) -> Result<(Vector, Matrix)> {
        let spec = self.layer(l)?;
        check_len("backward_layer", spec.param_count, params.len())?;
        match (&self.model, spec.shape) {
            (Model::Quadratic(q), _) => {
                let rows = ctx.input.rows();
                let mut grad = Vec::with_capacity(spec.param_count);
                for k in 0..spec.param_count {
                    let c = spec.offset + k;
                    let mean_obs = (0..rows).fold(0.0, |acc, r| acc + ctx.input.get(r, c)) / rows.max(1) as f64;
                    grad.push(q.eigenvalues[c] * (params[k] - mean_obs));
                }
                Ok((Vector::from_vec(grad), grad_out.clone()))
            }
            (Model::Mlp(_), Some(shape)) => {
                check_len("backward_layer grad_out", shape.out_dim, grad_out.cols())?;
                check_len("backward_layer rows", ctx.output.rows(), grad_out.rows())?;
                let (w, _) = params.split_at(shape.out_dim * shape.in_dim);
                let rows = grad_out.rows();
                let mut grad = vec![0.0; spec.param_count];
                let mut grad_in = Matrix::zeros(rows, shape.in_dim);
                let (gw, gb) = grad.split_at_mut(shape.out_dim * shape.in_dim);
                for r in 0..rows {
                    let x = ctx.input.row(r);
                    for o in 0..shape.out_dim {
                        let a = ctx.output.get(r, o);
                        let dz = grad_out.get(r, o) * shape.activation.derivative_from_output(a);
                        if dz == 0.0 {
                            continue;
                        }
                        gb[o] += dz;
                        let gw_row = &mut gw[o * shape.in_dim..(o + 1) * shape.in_dim];
                        let w_row = &w[o * shape.in_dim..(o + 1) * shape.in_dim];
                        let gi = &mut grad_in.data[r * shape.in_dim..(r + 1) * shape.in_dim];
                        for i in 0..shape.in_dim {
                            gw_row[i] += dz * x[i];
                            gi[i] += dz * w_row[i];
                        }
                    }
                }
                Ok((Vector::from_vec(grad), grad_in))
            }
            (Model::Mlp(_), None) => Err(Error::Domain("mlp layer without shape".into())),
        }
    }

    /// Loss and full gradient through the layer-by-layer path.
    pub fn loss_and_grad(&self, params: &[Vector], batch: &Batch) -> Result<(f64, Vec<Vector>)> {
        check_len("loss_and_grad layers", self.num_layers(), params.len())?;
        let mut act = self.input_activation(batch);
        let mut ctxs = Vec::with_capacity(self.num_layers());
        for (l, p) in params.iter().enumerate() {
            let (out, ctx) = self.forward_layer(l, p.as_slice(), &act)?;
            ctxs.push(ctx);
            act = out;
        }
        let (loss, mut grad_out) = self.head_loss(&act, batch, params)?;
        let mut grads = vec![Vector::zeros(0); self.num_layers()];
        for l in (0..self.num_layers()).rev() {
            let (g, gin) = self.backward_layer(l, params[l].as_slice(), &ctxs[l], &grad_out)?;
            grads[l] = g;
            grad_out = gin;
        }
        Ok((loss, grads))
    }

    pub fn loss(&self, params: &[Vector], batch: &Batch) -> Result<f64> {
        let mut act = self.input_activation(batch);
        for (l, p) in params.iter().enumerate() {
            act = self.forward_layer(l, p.as_slice(), &act)?.0;
        }
        Ok(self.head_loss(&act, batch, params)?.0)
    }

    /// Noise-free gradient of the population loss (quadratic only).
    pub fn true_gradient(&self, params: &[Vector]) -> Option<Vec<f64>> {
        let Model::Quadratic(q) = &self.model else {
            return None;
        };
        let theta = Self::concat(params);
        Some(
            theta
                .iter()
                .zip(&q.optimum)
                .zip(&q.eigenvalues)
                .map(|((th, opt), a)| a * (th - opt))
                .collect(),
        )
    }

    /// Held-out loss: the exact population loss for the quadratic, the loss on
    /// a reserved validation batch for the MLP.
    pub fn validation_loss(&self, params: &[Vector]) -> Result<f64> {
        match &self.model {
            Model::Quadratic(q) => {
                let theta = Self::concat(params);
                check_len("validation_loss", self.param_dim, theta.len())?;
                Ok(0.5
                    * theta
                        .iter()
                        .zip(&q.optimum)
                        .zip(&q.eigenvalues)
                        .fold(0.0, |acc, ((th, opt), a)| acc + a * (th - opt) * (th - opt)))
            }
            Model::Mlp(m) => self.loss(params, &m.validation),
        }
    }

    /// Deterministic batch for `(shard, t, p)`.
    pub fn sample_batch(&self, shard: &DataShard, t: u64, p: u64, batch_size: usize) -> Batch {
        let batch_size = batch_size.max(1);
        let mut rng = Rng::derived(shard.seed, &[TAG_DATA, shard.worker_id as u64, t, p]);
        let factor = shard.corruption_factor(t, p);
        match &self.model {
            Model::Quadratic(q) => {
                let n = self.param_dim;
                let mut obs = Vec::with_capacity(batch_size * n);
                for _ in 0..batch_size {
                    for opt in &q.optimum {
                        obs.push(rng.normal_sample(*opt, self.noise_std, self.noise_clip));
                    }
                }
                let mut targets = Matrix::from_vec(batch_size, n, obs).expect("sized");
                if factor != 1.0 {
                    targets.scale(factor);
                }
                Batch {
                    inputs: Matrix::zeros(batch_size, 0),
                    targets,
                    worker_id: shard.worker_id,
                    t,
                    p,
                }
            }
            Model::Mlp(_) => self.mlp_batch(&mut rng, batch_size, factor, shard.worker_id, t, p),
        }
    }

    fn mlp_batch(&self, rng: &mut Rng, batch_size: usize, factor: f64, worker_id: usize, t: u64, p: u64) -> Batch {
        let Model::Mlp(m) = &self.model else {
            unreachable!("mlp_batch on non-mlp task")
        };
        let in_dim = m.dims[0];
        let out_dim = *m.dims.last().expect("dims");
        let xs: Vec<f64> = (0..batch_size * in_dim).map(|_| rng.normal_sample(0.0, 1.0, 3.0)).collect();
        let inputs = Matrix::from_vec(batch_size, in_dim, xs).expect("sized");
        let mut act = inputs.clone();
        for (l, w) in m.teacher.iter().enumerate() {
            act = self.forward_layer(l, w.as_slice(), &act).expect("teacher shapes").0;
        }
        let mut targets = act;
        for y in targets.data.iter_mut() {
            *y = rng.normal_sample(*y, self.noise_std, self.noise_clip);
        }
        debug_assert_eq!(targets.cols(), out_dim);
        if factor != 1.0 {
            targets.scale(factor);
        }
        Batch {
            inputs,
            targets,
            worker_id,
            t,
            p,
        }
    }

    /// Power iteration on finite-difference Hessian-vector products at the
    /// initial point; the top curvature is doubled as a safety margin.
    fn estimate_smoothness(&self) -> Result<f64> {
        let Model::Mlp(m) = &self.model else {
            return Ok(self.smoothness_l);
        };
        let probe = &m.validation;
        let theta = Self::concat(&self.initial);
        let grad_at = |x: &[f64]| -> Result<Vec<f64>> {
            let (_, g) = self.loss_and_grad(&self.split(x), probe)?;
            Ok(Self::concat(&g))
        };
        let g0 = grad_at(&theta)?;
        let mut rng = Rng::derived(self.seed, &[TAG_INIT, 0x55]);
        let mut v: Vec<f64> = (0..theta.len()).map(|_| rng.standard_normal()).collect();
        let h = 1e-5;
        let mut lambda = 0.0;
        for _ in 0..20 {
            let norm = v.iter().fold(0.0, |a, x| a + x * x).sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            let shifted: Vec<f64> = theta.iter().zip(&v).map(|(t, d)| t + h * d).collect();
            let g1 = grad_at(&shifted)?;
            let hv: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| (a - b) / h).collect();
            lambda = hv.iter().fold(0.0, |a, x| a + x * x).sqrt();
            v = hv;
            if lambda == 0.0 {
                break;
            }
        }
        Ok(2.0 * lambda.max(1e-12))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_mlp(seed: u64) -> LayeredTask {
        LayeredTask::mlp(&MlpConfig {
            dims: vec![3, 4, 2],
            noise_std: 0.1,
            noise_clip: 3.0,
            seed,
            validation_size: 16,
            init_scale: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn identity_hessian_when_cond_is_one() {
        let task = quadratic_make(4, 1.0, 0).unwrap();
        assert_eq!(task.eigenvalues().unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(task.smoothness_l, 1.0);
    }

    #[test]
    fn log_spaced_spectrum() {
        let task = quadratic_make(8, 10.0, 0).unwrap();
        let eig = task.eigenvalues().unwrap();
        for (k, a) in eig.iter().enumerate() {
            let expected = 10f64.powf(k as f64 / 7.0);
            assert!((a - expected).abs() < 1e-12);
        }
        assert_eq!(task.smoothness_l, 10.0);
    }

    #[test]
    fn quadratic_rejects_tiny_dim() {
        assert!(matches!(quadratic_make(1, 2.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        let task = quadratic_make(10, 5.0, 3).unwrap();
        let opt = task.optimum().unwrap();
        assert!(task.true_gradient(&opt).unwrap().iter().all(|g| *g == 0.0));
        assert_eq!(task.validation_loss(&opt).unwrap(), 0.0);
    }

    #[test]
    fn layers_cover_parameters() {
        let task = quadratic_make(10, 5.0, 3).unwrap();
        let sizes: Vec<usize> = task.layers.iter().map(|l| l.param_count).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert_eq!(sizes.iter().sum::<usize>(), task.param_dim);
        let mlp = small_mlp(1);
        assert_eq!(mlp.layers.iter().map(|l| l.param_count).sum::<usize>(), mlp.param_dim);
    }

    #[test]
    fn quadratic_forward_is_identity() {
        let task = quadratic_make(4, 2.0, 0).unwrap();
        let input = Matrix::from_vec(1, 4, vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let (out, _) = task.forward_layer(0, &[0.0], &input).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn quadratic_backward_closed_form() {
        let task = quadratic_make(8, 10.0, 4).unwrap();
        let opt = task.optimum().unwrap();
        let mut params = task.initial_params();
        params[1][0] = 1.5;
        let shard = DataShard::new(0, 1);
        let batch = task.sample_batch(&shard, 0, 0, 2);
        let (_, grads) = task.loss_and_grad(&params, &batch).unwrap();
        let eig = task.eigenvalues().unwrap();
        for (l, spec) in task.layers.iter().enumerate() {
            for k in 0..spec.param_count {
                let c = spec.offset + k;
                let expected = eig[c] * (params[l][k] - opt[l][k]);
                assert!((grads[l][k] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_zero_weights_give_zero_preactivation() {
        let task = small_mlp(2);
        let input = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let params = vec![0.0; task.layers[0].param_count];
        let (out, _) = task.forward_layer(0, &params, &input).unwrap();
        assert!(out.as_slice().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn one_by_one_linear_layer() {
        let task = LayeredTask::mlp(&MlpConfig {
            dims: vec![1, 1],
            noise_std: 0.0,
            noise_clip: 1.0,
            seed: 0,
            validation_size: 1,
            init_scale: 1.0,
        })
        .unwrap();
        let input = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let (out, _) = task.forward_layer(0, &[2.0, 0.0], &input).unwrap();
        assert_eq!(out.as_slice(), &[6.0]);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_param_gradient() {
        let task = small_mlp(5);
        let params = task.initial_params();
        let input = Matrix::from_vec(1, 3, vec![0.3, -0.2, 0.9]).unwrap();
        let (out, ctx) = task.forward_layer(0, params[0].as_slice(), &input).unwrap();
        let (g, gin) = task
            .backward_layer(0, params[0].as_slice(), &ctx, &Matrix::zeros(out.rows(), out.cols()))
            .unwrap();
        assert!(g.iter().all(|x| *x == 0.0));
        assert!(gin.as_slice().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_param_len() {
        let task = small_mlp(5);
        let input = Matrix::zeros(1, 3);
        assert!(matches!(
            task.forward_layer(0, &[1.0, 2.0], &input),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn batches_are_deterministic() {
        let task = small_mlp(6);
        let shard = DataShard::new(3, 11);
        assert_eq!(task.sample_batch(&shard, 2, 1, 4), task.sample_batch(&shard, 2, 1, 4));
        assert_ne!(task.sample_batch(&shard, 2, 1, 4), task.sample_batch(&shard, 2, 2, 4));
        let other = DataShard::new(4, 11);
        assert_ne!(task.sample_batch(&shard, 2, 1, 4).inputs, task.sample_batch(&other, 2, 1, 4).inputs);
    }

    #[test]
    fn unit_corruption_is_a_no_op() {
        let task = small_mlp(6);
        let clean = DataShard::new(0, 11);
        let marked = DataShard::new(0, 11).with_corruption(CorruptionSchedule {
            workers: vec![0],
            start_round: 0,
            every_rounds: 1,
            factor: 1.0,
        });
        assert_eq!(task.sample_batch(&clean, 3, 0, 4), task.sample_batch(&marked, 3, 0, 4));
    }

    #[test]
    fn corruption_inflates_quadratic_gradient() {
        let task = LayeredTask::quadratic(&QuadraticConfig {
            dim: 16,
            cond: 10.0,
            layers: 4,
            noise_std: 0.5,
            noise_clip: 1.5,
            seed: 2,
        })
        .unwrap();
        let params = task.initial_params();
        let clean = DataShard::new(0, 9);
        let marked = DataShard::new(0, 9).with_corruption(CorruptionSchedule {
            workers: vec![0],
            start_round: 0,
            every_rounds: 1,
            factor: 100.0,
        });
        let norm = |shard: &DataShard, p: u64| {
            let b = task.sample_batch(shard, 0, p, 4);
            let (_, g) = task.loss_and_grad(&params, &b).unwrap();
            Vector::from_vec(LayeredTask::concat(&g)).l2_norm()
        };
        let mut clean_norms: Vec<f64> = (0..21).map(|p| norm(&clean, p)).collect();
        clean_norms.sort_by(f64::total_cmp);
        let median = clean_norms[10];
        for p in 0..21 {
            assert!(norm(&marked, p) >= 10.0 * median);
        }
    }

    #[test]
    fn mlp_smoothness_estimate_is_positive() {
        assert!(small_mlp(7).smoothness_l > 0.0);
    }
}
