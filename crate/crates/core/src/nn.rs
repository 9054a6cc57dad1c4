//! Dense networks, Adam, GAN losses and the two physics layers that turn a
//! real vector into a density matrix and a density matrix into statistics.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::fock::DensityMatrix;
use crate::linalg::{ComplexMatrix, C64};
use crate::measure::{hermitian_pack_index, MeasurementSet};
use crate::{Error, Result};

/// Lower bound on the normalizing trace `tr{T†T}`.
pub const TRACE_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Linear => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu { slope } => tape.leaky_relu(x, slope),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Fully connected layer `act(x W + b)` with `W` of shape `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Arc<Vec<f64>>,
    bias: Arc<Vec<f64>>,
    activation: Activation,
}

/// Layer parameters recorded on one tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundDense {
    pub weights: Var,
    pub bias: Var,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: Arc::new(vec![0.0; in_dim * out_dim]),
            bias: Arc::new(vec![0.0; out_dim]),
            activation,
        }
    }

    /// Weights drawn from `N(0, std²)`, zero bias.
    pub fn gaussian(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let weights = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
        Self {
            in_dim,
            out_dim,
            weights: Arc::new(weights),
            bias: Arc::new(vec![0.0; out_dim]),
            activation,
        }
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "dense layer {in_dim}x{out_dim} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights: Arc::new(weights),
            bias: Arc::new(bias),
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Records the parameters as leaves (`trainable`) or constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<BoundDense> {
        let shape_w = vec![self.in_dim, self.out_dim];
        let shape_b = vec![self.out_dim];
        if trainable {
            Ok(BoundDense {
                weights: tape.leaf_shared(shape_w, Arc::clone(&self.weights))?,
                bias: tape.leaf_shared(shape_b, Arc::clone(&self.bias))?,
            })
        } else {
            Ok(BoundDense {
                weights: tape.constant_shared(shape_w, Arc::clone(&self.weights))?,
                bias: tape.constant_shared(shape_b, Arc::clone(&self.bias))?,
            })
        }
    }

    pub fn forward(&self, tape: &Tape, bound: &BoundDense, x: Var) -> Result<Var> {
        let z = tape.matmul(x, bound.weights)?;
        let z = tape.add_bias(z, bound.bias)?;
        self.activation.apply(tape, z)
    }
}

/// Stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Layer widths and activations, enough to rebuild an [`Mlp`] shell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    pub sizes: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer widths {} -> {} do not chain",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Gaussian-initialized network over `shape.sizes`.
    pub fn gaussian(shape: &MlpShape, std: f64, rng: &mut impl Rng) -> Result<Self> {
        if shape.sizes.len() < 2 {
            return Err(Error::Shape("network needs input and output widths".into()));
        }
        let last = shape.sizes.len() - 2;
        let layers = shape
            .sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let act = if k == last { shape.output } else { shape.hidden };
                DenseLayer::gaussian(w[0], w[1], act, std, rng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<Vec<BoundDense>> {
        self.layers.iter().map(|l| l.bind(tape, trainable)).collect()
    }

    pub fn forward(&self, tape: &Tape, bound: &[BoundDense], x: Var) -> Result<Var> {
        let mut h = x;
        for (layer, b) in self.layers.iter().zip(bound) {
            h = layer.forward(tape, b, h)?;
        }
        Ok(h)
    }

    /// Gradients in parameter order: `W₀, b₀, W₁, b₁, …`, moved out of the
    /// tape.
    pub fn grads(&self, tape: &Tape, bound: &[BoundDense]) -> Vec<Vec<f64>> {
        bound
            .iter()
            .flat_map(|b| [tape.take_grad(b.weights), tape.take_grad(b.bias)])
            .collect()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_sizes().iter().sum()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arc<Vec<f64>>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    /// All parameters concatenated in parameter order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters for a network with {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            *p = Arc::new(flat[offset..offset + n].to_vec());
            offset += n;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Multiply the rate by `rate` after every `every` steps.
    ExponentialDecay { rate: f64, every: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::ExponentialDecay {
                rate: 0.98,
                every: 500,
            },
        }
    }
}

/// Adam moments for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Learning rate applied by the next step.
    pub fn lr(&self) -> f64 {
        schedule_lr(&self.config, self.t)
    }

    pub fn step(&mut self, params: &mut [&mut Arc<Vec<f64>>], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam holds {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape(format!(
                    "adam tensor of {} entries, got {} params and {} grads",
                    m.len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        let lr = self.lr();
        self.t += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (step, inv_c2) = (lr / c1, 1.0 / c2);
        for (k, p) in params.iter_mut().enumerate() {
            let values = Arc::make_mut(p);
            let moments = self.m[k].iter_mut().zip(self.v[k].iter_mut());
            let mut probe = 0.0;
            for ((x, g), (m, v)) in values.iter_mut().zip(&grads[k]).zip(moments) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *x -= step * *m / ((*v * inv_c2).sqrt() + eps);
                probe += *x * 0.0;
            }
            if probe.is_nan() {
                return Err(Error::NumericFailure(format!(
                    "non-finite parameter after optimizer step {}",
                    self.t
                )));
            }
        }
        Ok(())
    }
}

/// Learning rate after `t` completed steps.
pub fn schedule_lr(config: &AdamConfig, t: u64) -> f64 {
    match config.schedule {
        Schedule::Constant => config.lr,
        Schedule::ExponentialDecay { rate, every } => {
            config.lr * rate.powi((t / every.max(1)) as i32)
        }
    }
}

/// Maps `N²` reals to a density matrix `T†T / max(tr{T†T}, ε)` where `T`
/// is lower triangular with a real diagonal.
///
/// Inputs `0..N` fill the diagonal; the rest are `(re, im)` pairs of the
/// strictly lower entries `(1,0), (2,0), (2,1), …` in row-major order.
#[derive(Clone, Debug)]
pub struct DensityMatrixLayer {
    dim: usize,
    t_re_adj: Arc<Vec<Option<usize>>>,
    t_im_adj: Arc<Vec<Option<usize>>>,
    t_re: Arc<Vec<Option<usize>>>,
    t_im: Arc<Vec<Option<usize>>>,
}

/// Position of the real part of `T[i, j]`, `i > j`, in the input vector.
fn lower_offset(dim: usize, i: usize, j: usize) -> usize {
    dim + 2 * (i * (i - 1) / 2 + j)
}

impl DensityMatrixLayer {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension("density layer of dimension 0".into()));
        }
        let n = dim;
        let re = |i: usize, j: usize| match i.cmp(&j) {
            std::cmp::Ordering::Equal => Some(i),
            std::cmp::Ordering::Greater => Some(lower_offset(n, i, j)),
            std::cmp::Ordering::Less => None,
        };
        let im = |i: usize, j: usize| (i > j).then(|| lower_offset(n, i, j) + 1);
        let table = |f: &dyn Fn(usize, usize) -> Option<usize>, adjoint: bool| {
            let mut out = Vec::with_capacity(n * n);
            for r in 0..n {
                for c in 0..n {
                    out.push(if adjoint { f(c, r) } else { f(r, c) });
                }
            }
            Arc::new(out)
        };
        Ok(Self {
            dim,
            t_re_adj: table(&re, true),
            t_im_adj: table(&im, true),
            t_re: table(&re, false),
            t_im: table(&im, false),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_len(&self) -> usize {
        self.dim * self.dim
    }

    /// Real and imaginary parts of `ρ`, each `[N, N]`.
    pub fn forward(&self, tape: &Tape, v: Var) -> Result<(Var, Var)> {
        let len = tape.shape(v).iter().product::<usize>();
        if len != self.input_len() {
            return Err(Error::Shape(format!(
                "density layer of dimension {} needs {} inputs, got {len}",
                self.dim,
                self.input_len()
            )));
        }
        let n = self.dim;
        let sq = vec![n, n];
        let tr = tape.gather(v, Arc::clone(&self.t_re), sq.clone())?;
        let ti = tape.gather(v, Arc::clone(&self.t_im), sq.clone())?;
        let ar = tape.gather(v, Arc::clone(&self.t_re_adj), sq.clone())?;
        let ai = tape.gather(v, Arc::clone(&self.t_im_adj), sq)?;
        let ai = tape.scale(ai, -1.0)?;
        let (xr, xi) = tape.complex_matmul((ar, ai), (tr, ti))?;
        // tr{T†T} is the squared norm of the inputs.
        let norm = tape.sum(tape.square(v)?)?;
        let trace = tape.scalar(norm);
        if trace < TRACE_GUARD {
            let err = Error::DegenerateParametrization(format!("tr{{T†T}} = {trace:e}"));
            log::error!("{err}");
        }
        let inv = tape.recip(tape.clamp_min(norm, TRACE_GUARD)?)?;
        Ok((tape.mul_scalar(xr, inv)?, tape.mul_scalar(xi, inv)?))
    }
}

/// Validated density matrix from the two output tensors of the layer.
pub fn to_density_matrix(tape: &Tape, rho_r: Var, rho_i: Var) -> Result<DensityMatrix> {
    let shape = tape.shape(rho_r);
    let n = match shape.as_slice() {
        [r, c] if r == c => *r,
        _ => return Err(Error::Shape(format!("density output of shape {shape:?}"))),
    };
    let re = tape.value(rho_r);
    let im = tape.value(rho_i);
    let m = ComplexMatrix::from_fn(n, n, |i, j| C64::new(re[i * n + j], im[i * n + j]));
    DensityMatrix::new(m)
}

/// `Re tr{Oᵢ ρ}` for every operator of `ms`; the operators are constants.
pub fn expectation_layer(tape: &Tape, rho_r: Var, rho_i: Var, ms: &MeasurementSet) -> Result<Var> {
    let n = ms.dim();
    for (name, v) in [("real", rho_r), ("imaginary", rho_i)] {
        let shape = tape.shape(v);
        if shape != [n, n] {
            return Err(Error::DimensionMismatch(format!(
                "{name} part of shape {shape:?} for operators of dimension {n}"
            )));
        }
    }
    let flat_r = tape.reshape(rho_r, vec![n * n])?;
    let flat_i = tape.reshape(rho_i, vec![n * n])?;
    let packed = tape.concat(&[flat_r, flat_i])?;
    // ρ is Hermitian by construction, so N² of its 2N² reals suffice.
    let index = hermitian_pack_index(n).into_iter().map(Some).collect();
    let reduced = tape.gather(packed, Arc::new(index), vec![n * n])?;
    tape.matmul_const_t(reduced, ms.compact_expectation_rows_shared(), ms.len())
}

/// `−mean[log D_real] − mean[log(1 − D_fake)]`.
pub fn bce_discriminator(tape: &Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let real = tape.mean(tape.log(d_real)?)?;
    let fake = tape.mean(tape.log(tape.affine(d_fake, -1.0, 1.0)?)?)?;
    tape.scale(tape.add(real, fake)?, -1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `mean[log(1 − D_fake)]`.
    Saturating,
    /// `−mean[log D_fake]`.
    #[default]
    NonSaturating,
}

pub fn bce_generator(tape: &Tape, d_fake: Var, kind: GeneratorLoss) -> Result<Var> {
    match kind {
        GeneratorLoss::Saturating => tape.mean(tape.log(tape.affine(d_fake, -1.0, 1.0)?)?),
        GeneratorLoss::NonSaturating => tape.scale(tape.mean(tape.log(d_fake)?)?, -1.0),
    }
}

/// `mean|d − d_G|`.
pub fn l1(tape: &Tape, d: Var, d_g: Var) -> Result<Var> {
    tape.mean(tape.abs(tape.sub(d, d_g)?)?)
}

/// A scalar-valued network whose input gradient can be penalized.
pub trait Critic {
    type Bound;

    fn bind(&self, tape: &Tape, trainable: bool) -> Result<Self::Bound>;

    /// Scalar score of `x`.
    fn score(&self, tape: &Tape, bound: &Self::Bound, x: Var) -> Result<Var>;
}

/// `(‖∇ₓ f(x̂)‖ − 1)²` at a single interpolate `x̂`.
///
/// The gradient direction `u` comes from a throwaway first-order pass; the
/// norm is then the directional derivative along `u`, estimated on `tape` by
/// a central difference of step `eps`, so its dependence on the critic's
/// parameters stays first order.
pub fn gradient_penalty<C: Critic>(
    tape: &Tape,
    critic: &C,
    bound: &C::Bound,
    x_hat: &[f64],
    eps: f64,
) -> Result<Var> {
    let probe = Tape::new();
    let probe_bound = critic.bind(&probe, false)?;
    let x = probe.leaf(vec![x_hat.len()], x_hat.to_vec())?;
    let s = critic.score(&probe, &probe_bound, x)?;
    probe.backward(s)?;
    let g = probe.grad(x);
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dir: Vec<f64> = if norm > 0.0 {
        g.iter().map(|v| v / norm).collect()
    } else {
        vec![0.0; g.len()]
    };
    let shifted = |sign: f64| -> Vec<f64> {
        x_hat
            .iter()
            .zip(&dir)
            .map(|(x, u)| x + sign * eps * u)
            .collect()
    };
    let plus = tape.constant(vec![x_hat.len()], shifted(1.0))?;
    let minus = tape.constant(vec![x_hat.len()], shifted(-1.0))?;
    let s_plus = critic.score(tape, bound, plus)?;
    let s_minus = critic.score(tape, bound, minus)?;
    let slope = tape.scale(tape.sub(s_plus, s_minus)?, 0.5 / eps)?;
    tape.square(tape.affine(slope, 1.0, -1.0)?)
}
