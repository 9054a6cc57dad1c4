//! Conditional GAN reconstruction: a generator maps measured statistics to a
//! density matrix, a discriminator compares (data, candidate) pairs.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::fock::DensityMatrix;
use crate::linalg::{ComplexMatrix, C64};
use crate::measure::{MeasurementRecipe, MeasurementSet, SharedMeasurementSet};
use crate::metrics::{self, FidelityProbe};
use crate::nn::{
    bce_discriminator, bce_generator, expectation_layer, gradient_penalty, l1, to_density_matrix,
    Activation, AdamConfig, AdamState, BoundDense, Critic, DensityMatrixLayer, GeneratorLoss, Mlp,
    MlpShape,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub init_std: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            generator_hidden: vec![256, 256],
            discriminator_hidden: vec![256, 128],
            hidden_activation: Activation::LeakyRelu { slope: 0.2 },
            init_std: 0.05,
        }
    }
}

impl Architecture {
    pub fn generator_shape(&self, m: usize, dim: usize) -> MlpShape {
        let mut sizes = vec![m];
        sizes.extend(&self.generator_hidden);
        sizes.push(dim * dim);
        MlpShape {
            sizes,
            hidden: self.hidden_activation,
            output: Activation::Linear,
        }
    }

    pub fn discriminator_shape(&self, m: usize) -> MlpShape {
        let mut sizes = vec![2 * m];
        sizes.extend(&self.discriminator_hidden);
        sizes.push(m);
        MlpShape {
            sizes,
            hidden: self.hidden_activation,
            output: Activation::Sigmoid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub generator_opt: AdamConfig,
    pub discriminator_opt: AdamConfig,
    pub lambda_l1: f64,
    pub lambda_gp: f64,
    /// Step of the finite difference inside the gradient penalty.
    pub gp_eps: f64,
    pub generator_loss: GeneratorLoss,
    pub seed: u64,
    pub log_every: usize,
    /// Stop once the fidelity against a supplied target reaches this value.
    pub fidelity_target: Option<f64>,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            generator_opt: AdamConfig::default(),
            discriminator_opt: AdamConfig::default(),
            lambda_l1: 100.0,
            lambda_gp: 0.0,
            gp_eps: 1e-4,
            generator_loss: GeneratorLoss::NonSaturating,
            seed: 0,
            log_every: 10,
            fidelity_target: Some(0.999),
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for training on a family of states.
    pub fn pretraining() -> Self {
        let opt = AdamConfig {
            lr: 5e-4,
            ..AdamConfig::default()
        };
        Self {
            generator_opt: opt,
            discriminator_opt: opt,
            lambda_gp: 10.0,
            fidelity_target: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Contract("iterations must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Contract("log_every must be at least 1".into()));
        }
        if !(self.lambda_l1 >= 0.0) || !(self.lambda_gp >= 0.0) {
            return Err(Error::Contract(format!(
                "loss weights must be non-negative, got l1 {} and gp {}",
                self.lambda_l1, self.lambda_gp
            )));
        }
        if !(self.gp_eps > 0.0) {
            return Err(Error::Contract("gp_eps must be positive".into()));
        }
        for opt in [&self.generator_opt, &self.discriminator_opt] {
            if !(opt.lr > 0.0) || !(0.0..1.0).contains(&opt.beta1) || !(0.0..1.0).contains(&opt.beta2) {
                return Err(Error::Contract(format!("invalid optimizer settings {opt:?}")));
            }
        }
        Ok(())
    }
}

/// Statistics → density matrix → predicted statistics.
#[derive(Clone, Debug)]
pub struct Generator {
    trunk: Mlp,
    density: DensityMatrixLayer,
    ms: SharedMeasurementSet,
}

/// Tape handles produced by one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    pub rho_r: Var,
    pub rho_i: Var,
    pub stats: Var,
}

impl Generator {
    pub fn new(trunk: Mlp, ms: SharedMeasurementSet) -> Result<Self> {
        let dim = ms.dim();
        if trunk.in_dim() != ms.len() || trunk.out_dim() != dim * dim {
            return Err(Error::DimensionMismatch(format!(
                "generator trunk {} -> {} for {} operators of dimension {dim}",
                trunk.in_dim(),
                trunk.out_dim(),
                ms.len()
            )));
        }
        Ok(Self {
            trunk,
            density: DensityMatrixLayer::new(dim)?,
            ms,
        })
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn measurement_set(&self) -> &MeasurementSet {
        &self.ms
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<Vec<BoundDense>> {
        self.trunk.bind(tape, trainable)
    }

    pub fn forward(&self, tape: &Tape, bound: &[BoundDense], d: Var) -> Result<GeneratorOutput> {
        let v = self.trunk.forward(tape, bound, d)?;
        let (rho_r, rho_i) = self.density.forward(tape, v)?;
        let stats = expectation_layer(tape, rho_r, rho_i, &self.ms)?;
        Ok(GeneratorOutput {
            rho_r,
            rho_i,
            stats,
        })
    }

    /// One forward pass without gradients.
    pub fn reconstruct_state(&self, d: &[f64]) -> Result<DensityMatrix> {
        check_len(d, self.ms.len())?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false)?;
        let x = tape.constant(vec![d.len()], d.to_vec())?;
        let out = self.forward(&tape, &bound, x)?;
        to_density_matrix(&tape, out.rho_r, out.rho_i)
    }
}

/// Scores (data, candidate) pairs with one sigmoid per operator.
#[derive(Clone, Debug)]
pub struct Discriminator {
    trunk: Mlp,
}

impl Discriminator {
    pub fn new(trunk: Mlp) -> Result<Self> {
        if trunk.in_dim() != 2 * trunk.out_dim() {
            return Err(Error::DimensionMismatch(format!(
                "discriminator trunk {} -> {} does not score pairs",
                trunk.in_dim(),
                trunk.out_dim()
            )));
        }
        Ok(Self { trunk })
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn outputs(&self) -> usize {
        self.trunk.out_dim()
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<Vec<BoundDense>> {
        self.trunk.bind(tape, trainable)
    }

    pub fn forward(&self, tape: &Tape, bound: &[BoundDense], d: Var, candidate: Var) -> Result<Var> {
        let pair = tape.concat(&[d, candidate])?;
        self.trunk.forward(tape, bound, pair)
    }
}

/// The discriminator with its conditioning fixed, scored by its mean output.
struct ConditionedCritic<'a> {
    disc: &'a Discriminator,
    cond: &'a [f64],
}

impl Critic for ConditionedCritic<'_> {
    type Bound = Vec<BoundDense>;

    fn bind(&self, tape: &Tape, trainable: bool) -> Result<Self::Bound> {
        self.disc.bind(tape, trainable)
    }

    fn score(&self, tape: &Tape, bound: &Self::Bound, x: Var) -> Result<Var> {
        let cond = tape.constant(vec![self.cond.len()], self.cond.to_vec())?;
        tape.mean(self.disc.forward(tape, bound, cond, x)?)
    }
}

/// Generator and discriminator with seeded Gaussian weights.
pub fn build_qst_cgan(
    ms: SharedMeasurementSet,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Generator, Discriminator)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = &cfg.architecture;
    let g = Mlp::gaussian(&arch.generator_shape(ms.len(), ms.dim()), arch.init_std, &mut rng)?;
    let d = Mlp::gaussian(&arch.discriminator_shape(ms.len()), arch.init_std, &mut rng)?;
    Ok((Generator::new(g, ms)?, Discriminator::new(d)?))
}

fn check_len(d: &[f64], m: usize) -> Result<()> {
    if d.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{} data values for {m} operators",
            d.len()
        )));
    }
    Ok(())
}

/// Row-major `[re; im]` tensors as a complex matrix.
pub fn rho_matrix(tape: &Tape, rho_r: Var, rho_i: Var) -> ComplexMatrix {
    let n = tape.shape(rho_r)[0];
    let re = tape.value(rho_r);
    let im = tape.value(rho_i);
    ComplexMatrix::from_fn(n, n, |i, j| C64::new(re[i * n + j], im[i * n + j]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorMetrics {
    pub loss: f64,
    pub bce: f64,
    pub gradient_penalty: f64,
    pub real_outputs: Vec<f64>,
    pub fake_outputs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorMetrics {
    /// Adversarial term plus `λ_L1 · l1`.
    pub loss: f64,
    pub adversarial: f64,
    pub l1: f64,
    pub fake_outputs: Vec<f64>,
    /// Generated statistics, exactly as fed to the discriminator.
    pub stats: Vec<f64>,
    /// Density matrix produced before the update.
    pub rho: ComplexMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub discriminator: DiscriminatorMetrics,
    pub generator: GeneratorMetrics,
}

/// Generator, discriminator and their optimizers.
#[derive(Clone, Debug)]
pub struct QstCgan {
    generator: Generator,
    discriminator: Discriminator,
    g_opt: AdamState,
    d_opt: AdamState,
    config: TrainConfig,
    rng: ChaCha8Rng,
}

/// Seed offset for the interpolation draws of the gradient penalty.
const GP_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

impl QstCgan {
    pub fn new(ms: SharedMeasurementSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (g, d) = build_qst_cgan(ms, &config, config.seed)?;
        Self::from_parts(g, d, config)
    }

    /// Fresh optimizer state around existing networks.
    pub fn from_parts(generator: Generator, discriminator: Discriminator, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if discriminator.outputs() != generator.ms.len() {
            return Err(Error::DimensionMismatch(format!(
                "discriminator scores {} operators, generator emits {}",
                discriminator.outputs(),
                generator.ms.len()
            )));
        }
        Ok(Self {
            g_opt: AdamState::new(config.generator_opt, &generator.trunk.param_sizes()),
            d_opt: AdamState::new(config.discriminator_opt, &discriminator.trunk.param_sizes()),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ GP_STREAM),
            generator,
            discriminator,
            config,
        })
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn measurement_set(&self) -> &SharedMeasurementSet {
        &self.generator.ms
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, d: &[f64]) -> Result<StepMetrics> {
        check_len(d, self.generator.ms.len())?;
        let (tape, bound, cond, out) = self.generator_pass(d)?;
        let stats = tape.value_vec(out.stats);
        let discriminator = self.update_discriminator(d, &stats)?;
        let generator = self.finish_generator(tape, &bound, cond, out, true)?;
        Ok(StepMetrics {
            discriminator,
            generator,
        })
    }

    /// Generator update against the current, frozen discriminator.
    pub fn generator_step(&mut self, d: &[f64]) -> Result<GeneratorMetrics> {
        check_len(d, self.generator.ms.len())?;
        let (tape, bound, cond, out) = self.generator_pass(d)?;
        self.finish_generator(tape, &bound, cond, out, true)
    }

    /// Generator objective without updating anything.
    pub fn generator_objective(&self, d: &[f64]) -> Result<GeneratorMetrics> {
        check_len(d, self.generator.ms.len())?;
        let mut shadow = self.clone();
        let (tape, bound, cond, out) = shadow.generator_pass(d)?;
        shadow.finish_generator(tape, &bound, cond, out, false)
    }

    /// Generator output for `d`, no parameter updates.
    pub fn single_shot(&self, d: &[f64]) -> Result<DensityMatrix> {
        self.generator.reconstruct_state(d)
    }

    /// Continues training on `d` for `k` steps from a copy of this model with
    /// fresh optimizer moments; returns the final generator output.
    pub fn fine_tune(&self, d: &[f64], k: usize) -> Result<DensityMatrix> {
        let mut copy = Self::from_parts(
            self.generator.clone(),
            self.discriminator.clone(),
            self.config.clone(),
        )?;
        for _ in 0..k {
            copy.train_step(d)?;
        }
        copy.single_shot(d)
    }

    fn generator_pass(&self, d: &[f64]) -> Result<(Tape, Vec<BoundDense>, Var, GeneratorOutput)> {
        let tape = Tape::new();
        let bound = self.generator.bind(&tape, true)?;
        let cond = tape.constant(vec![d.len()], d.to_vec())?;
        let out = self.generator.forward(&tape, &bound, cond)?;
        Ok((tape, bound, cond, out))
    }

    fn update_discriminator(&mut self, d: &[f64], fake: &[f64]) -> Result<DiscriminatorMetrics> {
        let m = d.len();
        let tape = Tape::new();
        let bound = self.discriminator.bind(&tape, true)?;
        let cond = tape.constant(vec![m], d.to_vec())?;
        let real_in = tape.constant(vec![m], d.to_vec())?;
        let fake_in = tape.constant(vec![m], fake.to_vec())?;
        let real = self.discriminator.forward(&tape, &bound, cond, real_in)?;
        let fake_out = self.discriminator.forward(&tape, &bound, cond, fake_in)?;
        let bce = bce_discriminator(&tape, real, fake_out)?;
        let (loss, gp) = if self.config.lambda_gp > 0.0 {
            let t: f64 = self.rng.random();
            let x_hat: Vec<f64> = d.iter().zip(fake).map(|(a, b)| t * a + (1.0 - t) * b).collect();
            let critic = ConditionedCritic {
                disc: &self.discriminator,
                cond: d,
            };
            let gp = gradient_penalty(&tape, &critic, &bound, &x_hat, self.config.gp_eps)?;
            let weighted = tape.scale(gp, self.config.lambda_gp)?;
            (tape.add(bce, weighted)?, tape.scalar(gp))
        } else {
            (bce, 0.0)
        };
        tape.backward(loss)?;
        let metrics = DiscriminatorMetrics {
            loss: tape.scalar(loss),
            bce: tape.scalar(bce),
            gradient_penalty: gp,
            real_outputs: tape.value_vec(real),
            fake_outputs: tape.value_vec(fake_out),
        };
        let grads = self.discriminator.trunk.grads(&tape, &bound);
        drop(tape);
        self.d_opt.step(&mut self.discriminator.trunk.params_mut(), &grads)?;
        Ok(metrics)
    }

    fn finish_generator(
        &mut self,
        tape: Tape,
        bound: &[BoundDense],
        cond: Var,
        out: GeneratorOutput,
        update: bool,
    ) -> Result<GeneratorMetrics> {
        let disc_bound = self.discriminator.bind(&tape, false)?;
        let fake = self.discriminator.forward(&tape, &disc_bound, cond, out.stats)?;
        let adversarial = bce_generator(&tape, fake, self.config.generator_loss)?;
        let l1_term = l1(&tape, cond, out.stats)?;
        let loss = tape.add(adversarial, tape.scale(l1_term, self.config.lambda_l1)?)?;
        let metrics = GeneratorMetrics {
            loss: tape.scalar(loss),
            adversarial: tape.scalar(adversarial),
            l1: tape.scalar(l1_term),
            fake_outputs: tape.value_vec(fake),
            stats: tape.value_vec(out.stats),
            rho: rho_matrix(&tape, out.rho_r, out.rho_i),
        };
        if update {
            tape.backward(loss)?;
            let grads = self.generator.trunk.grads(&tape, bound);
            drop(tape);
            self.g_opt.step(&mut self.generator.trunk.params_mut(), &grads)?;
        }
        Ok(metrics)
    }

    /// Parameters and configuration sufficient to rebuild this model.
    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            measurement: self.generator.ms.recipe(),
            config: self.config.clone(),
            generator: self.generator.trunk.flat_params(),
            discriminator: self.discriminator.trunk.flat_params(),
        }
    }

    pub fn from_snapshot(snapshot: &ModelSnapshot) -> Result<Self> {
        let ms = Arc::new(MeasurementSet::from_recipe(&snapshot.measurement)?);
        Self::from_snapshot_with(snapshot, ms)
    }

    /// Rebuild with an already constructed measurement set.
    pub fn from_snapshot_with(snapshot: &ModelSnapshot, ms: SharedMeasurementSet) -> Result<Self> {
        if ms.recipe() != snapshot.measurement {
            return Err(Error::DimensionMismatch(
                "measurement set differs from the one the model was trained on".into(),
            ));
        }
        let (mut g, mut d) = build_qst_cgan(ms, &snapshot.config, snapshot.config.seed)?;
        g.trunk.set_flat_params(&snapshot.generator)?;
        d.trunk.set_flat_params(&snapshot.discriminator)?;
        Self::from_parts(g, d, snapshot.config.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    pub measurement: MeasurementRecipe,
    pub config: TrainConfig,
    pub generator: Vec<f64>,
    pub discriminator: Vec<f64>,
}

/// One logged iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub fidelity: Option<f64>,
    pub g_loss: Option<f64>,
    pub d_loss: Option<f64>,
    pub l1: Option<f64>,
    #[serde(default)]
    pub log_likelihood: Option<f64>,
    pub wall_ms: f64,
}

/// Trajectory and result of one reconstruction run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    /// Effective configuration of the run.
    pub config: serde_json::Value,
    pub entries: Vec<LogEntry>,
    pub iterations_run: usize,
    pub converged: bool,
    pub final_fidelity: Option<f64>,
    pub final_rho: DensityMatrix,
}

impl RunReport {
    /// First logged iteration whose fidelity reaches `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.fidelity.is_some_and(|f| f >= threshold))
            .map(|e| e.iteration)
    }

    pub fn max_fidelity(&self) -> Option<f64> {
        self.entries
            .iter()
            .filter_map(|e| e.fidelity)
            .fold(None, |acc, f| Some(acc.map_or(f, |a: f64| a.max(f))))
    }

    /// Copy with every wall-clock entry zeroed, for comparing trajectories.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.entries {
            e.wall_ms = 0.0;
        }
        out
    }
}

pub(crate) fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Per-state adversarial reconstruction from data `d`.
pub fn reconstruct(
    d: &[f64],
    ms: SharedMeasurementSet,
    cfg: &TrainConfig,
    target: Option<&DensityMatrix>,
) -> Result<RunReport> {
    let mut model = QstCgan::new(ms, cfg.clone())?;
    model.run(d, target)
}

impl QstCgan {
    /// Trains for the configured number of iterations, stopping early once
    /// the fidelity target is met.
    pub fn run(&mut self, d: &[f64], target: Option<&DensityMatrix>) -> Result<RunReport> {
        check_len(d, self.generator.ms.len())?;
        if let Some(t) = target {
            if t.dim() != self.generator.ms.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "target of dimension {} for operators of dimension {}",
                    t.dim(),
                    self.generator.ms.dim()
                )));
            }
        }
        let probe = target.map(FidelityProbe::new);
        let goal = self.config.fidelity_target.filter(|_| probe.is_some());
        let start = Instant::now();
        let mut entries = Vec::new();
        let mut converged = false;
        let mut iterations_run = 0;
        for it in 1..=self.config.iterations {
            let step = self.train_step(d).map_err(|e| match e {
                Error::NumericFailure(msg) => {
                    Error::NumericFailure(format!("iteration {it}: {msg}"))
                }
                other => other,
            })?;
            iterations_run = it;
            let fidelity = probe.as_ref().map(|p| p.fidelity(&step.generator.rho));
            converged = matches!((fidelity, goal), (Some(f), Some(g)) if f >= g);
            if it % self.config.log_every == 0 || it == 1 || converged || it == self.config.iterations {
                entries.push(LogEntry {
                    iteration: it,
                    fidelity,
                    g_loss: Some(step.generator.loss),
                    d_loss: Some(step.discriminator.loss),
                    l1: Some(step.generator.l1),
                    log_likelihood: None,
                    wall_ms: elapsed_ms(start),
                });
            }
            if converged {
                break;
            }
        }
        let final_rho = self.single_shot(d)?;
        let final_fidelity = match target {
            Some(t) => Some(metrics::fidelity(t, &final_rho)?),
            None => None,
        };
        Ok(RunReport {
            method: "qst-cgan".into(),
            seed: self.config.seed,
            config: serde_json::to_value(&self.config)
                .map_err(|e| Error::MalformedPayload(e.to_string()))?,
            entries,
            iterations_run,
            converged,
            final_fidelity,
            final_rho,
        })
    }
}

/// Measured statistics paired with the state they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub data: Vec<f64>,
    pub state: DensityMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::pretraining(),
            epochs: 150,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_g_loss: f64,
    pub mean_d_loss: f64,
    pub mean_l1: f64,
    pub validation_fidelity: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Model at the epoch with the best validation fidelity.
    pub model: QstCgan,
    pub best_epoch: usize,
    pub best_validation_fidelity: f64,
    pub history: Vec<EpochRecord>,
}

/// Mean single-shot fidelity over `pairs`.
pub fn mean_single_shot_fidelity(model: &QstCgan, pairs: &[TrainingPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no states to evaluate".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        total += metrics::fidelity(&p.state, &model.single_shot(&p.data)?)?;
    }
    Ok(total / pairs.len() as f64)
}

fn check_dataset(pairs: &[TrainingPair], ms: &MeasurementSet) -> Result<()> {
    for (k, p) in pairs.iter().enumerate() {
        if p.data.len() != ms.len() {
            return Err(Error::Dataset(format!(
                "record {k} has {} values, expected {}",
                p.data.len(),
                ms.len()
            )));
        }
        if p.state.dim() != ms.dim() {
            return Err(Error::Dataset(format!(
                "record {k} has dimension {}, expected {}",
                p.state.dim(),
                ms.dim()
            )));
        }
    }
    Ok(())
}

/// Trains one model over shuffled epochs of a state family, keeping the
/// parameters with the best mean single-shot fidelity on `validation`
/// (on `train` when no validation states are given).
pub fn pretrain(
    ms: SharedMeasurementSet,
    train: &[TrainingPair],
    validation: &[TrainingPair],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    if cfg.epochs == 0 {
        return Err(Error::Contract("epochs must be at least 1".into()));
    }
    check_dataset(train, &ms)?;
    check_dataset(validation, &ms)?;
    let held_out = if validation.is_empty() { train } else { validation };
    let mut model = QstCgan::new(ms, cfg.train.clone())?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1));
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, QstCgan)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut g, mut dl, mut l) = (0.0, 0.0, 0.0);
        for &k in &order {
            let step = model.train_step(&train[k].data)?;
            g += step.generator.loss;
            dl += step.discriminator.loss;
            l += step.generator.l1;
        }
        let n = train.len() as f64;
        let validation_fidelity = mean_single_shot_fidelity(&model, held_out)?;
        log::info!("epoch {epoch}: l1 {:.3e}, validation fidelity {validation_fidelity:.4}", l / n);
        history.push(EpochRecord {
            epoch,
            mean_g_loss: g / n,
            mean_d_loss: dl / n,
            mean_l1: l / n,
            validation_fidelity,
            wall_ms: elapsed_ms(start),
        });
        if best.as_ref().is_none_or(|(_, f, _)| validation_fidelity > *f) {
            best = Some((epoch, validation_fidelity, model.clone()));
        }
    }
    let (best_epoch, best_validation_fidelity, model) = best.expect("at least one epoch");
    Ok(PretrainOutcome {
        model,
        best_epoch,
        best_validation_fidelity,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{random_density, StateSpec};
    use crate::measure::{husimi_ops, simulate_data, DisplacementSet};
    use crate::nn::Schedule;

    fn small_config(seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: 50,
            seed,
            architecture: Architecture {
                generator_hidden: vec![32],
                discriminator_hidden: vec![16],
                ..Architecture::default()
            },
            ..TrainConfig::default()
        }
    }

    fn small_set() -> SharedMeasurementSet {
        Arc::new(husimi_ops(DisplacementSet::square_grid(2.0, 4, 4).unwrap(), 4).unwrap())
    }

    #[test]
    fn default_architecture_shapes() {
        let ms = Arc::new(husimi_ops(DisplacementSet::square_grid(3.0, 5, 5).unwrap(), 6).unwrap());
        let (g, d) = build_qst_cgan(ms, &TrainConfig::default(), 0).unwrap();
        let gs: Vec<(usize, usize)> = g.trunk().layers().iter().map(|l| (l.in_dim(), l.out_dim())).collect();
        assert_eq!(gs, vec![(25, 256), (256, 256), (256, 36)]);
        let ds: Vec<(usize, usize)> = d.trunk().layers().iter().map(|l| (l.in_dim(), l.out_dim())).collect();
        assert_eq!(ds, vec![(50, 256), (256, 128), (128, 25)]);
        assert_eq!(d.trunk().layers()[2].activation(), Activation::Sigmoid);
        assert_eq!(g.trunk().layers()[2].activation(), Activation::Linear);
    }

    #[test]
    fn seeded_builds_are_identical_and_outputs_valid() {
        let ms = small_set();
        let cfg = small_config(4);
        let (g1, d1) = build_qst_cgan(ms.clone(), &cfg, 4).unwrap();
        let (g2, d2) = build_qst_cgan(ms.clone(), &cfg, 4).unwrap();
        assert_eq!(g1.trunk(), g2.trunk());
        assert_eq!(d1.trunk(), d2.trunk());
        let rho = random_density(4, 2, 1).unwrap();
        let d = simulate_data(&rho, &ms).unwrap().values;
        g1.reconstruct_state(&d).unwrap().validate().unwrap();
        assert!(matches!(
            g1.reconstruct_state(&d[1..]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn plain_losses_match_hand_computed_bce() {
        let ms = small_set();
        let cfg = TrainConfig {
            lambda_l1: 0.0,
            lambda_gp: 0.0,
            ..small_config(2)
        };
        let mut model = QstCgan::new(ms.clone(), cfg).unwrap();
        let d = simulate_data(&random_density(4, 4, 3).unwrap(), &ms).unwrap().values;
        for _ in 0..3 {
            let step = model.train_step(&d).unwrap();
            let mean_log = |xs: &[f64], f: fn(f64) -> f64| xs.iter().map(|x| f(*x).ln()).sum::<f64>() / xs.len() as f64;
            let dm = &step.discriminator;
            let expected_d = -mean_log(&dm.real_outputs, |x| x) - mean_log(&dm.fake_outputs, |x| 1.0 - x);
            assert!((dm.loss - expected_d).abs() < 1e-10);
            let gm = &step.generator;
            let expected_g = -mean_log(&gm.fake_outputs, |x| x);
            assert!((gm.loss - expected_g).abs() < 1e-10);
            assert!((gm.adversarial - gm.loss).abs() < 1e-15);
        }
    }

    #[test]
    fn generated_statistics_match_the_expectation_of_the_emitted_state() {
        let ms = small_set();
        let mut model = QstCgan::new(ms.clone(), small_config(5)).unwrap();
        let d = simulate_data(&random_density(4, 1, 2).unwrap(), &ms).unwrap().values;
        let step = model.train_step(&d).unwrap();
        assert_eq!(ms.predict(&step.generator.rho).len(), step.generator.stats.len());
        for (a, b) in ms.predict(&step.generator.rho).iter().zip(&step.generator.stats) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equilibrium_discriminator_gives_two_log_two() {
        // Zero discriminator weights output 0.5 everywhere.
        let ms = small_set();
        let cfg = TrainConfig {
            architecture: Architecture {
                init_std: 1e-300,
                ..small_config(0).architecture
            },
            ..small_config(0)
        };
        let mut model = QstCgan::new(ms.clone(), cfg).unwrap();
        let d = simulate_data(&random_density(4, 2, 6).unwrap(), &ms).unwrap().values;
        let step = model.train_step(&d).unwrap();
        assert!((step.discriminator.bce - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn generator_step_descends_on_a_frozen_discriminator() {
        let ms = small_set();
        let d = simulate_data(&StateSpec::cat(C64::new(1.0, 0.0), 2, 4).build().unwrap(), &ms)
            .unwrap()
            .values;
        let mut decreased = 0;
        for seed in 0..20 {
            let cfg = TrainConfig {
                generator_opt: AdamConfig {
                    lr: 1e-5,
                    schedule: Schedule::Constant,
                    ..AdamConfig::default()
                },
                ..small_config(seed)
            };
            let mut model = QstCgan::new(ms.clone(), cfg).unwrap();
            let before = model.generator_objective(&d).unwrap().loss;
            model.generator_step(&d).unwrap();
            let after = model.generator_objective(&d).unwrap().loss;
            decreased += usize::from(after < before);
        }
        assert!(decreased >= 18, "{decreased}/20");
    }

    #[test]
    fn runs_are_deterministic_and_report_bounded_fidelity() {
        let ms = small_set();
        let target = random_density(4, 1, 9).unwrap();
        let d = simulate_data(&target, &ms).unwrap().values;
        let cfg = TrainConfig {
            iterations: 30,
            log_every: 5,
            lambda_gp: 10.0,
            ..small_config(7)
        };
        let a = reconstruct(&d, ms.clone(), &cfg, Some(&target)).unwrap();
        let b = reconstruct(&d, ms.clone(), &cfg, Some(&target)).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
        assert_eq!(a.entries.len(), 7);
        assert!(a.max_fidelity().unwrap() <= 1.0 + 1e-9);
        a.final_rho.validate().unwrap();
    }

    #[test]
    fn snapshot_round_trip_reproduces_the_generator() {
        let ms = small_set();
        let mut model = QstCgan::new(ms.clone(), small_config(3)).unwrap();
        let d = simulate_data(&random_density(4, 2, 2).unwrap(), &ms).unwrap().values;
        model.train_step(&d).unwrap();
        let back = QstCgan::from_snapshot(&model.snapshot()).unwrap();
        assert_eq!(back.single_shot(&d).unwrap(), model.single_shot(&d).unwrap());
    }

    #[test]
    fn pretraining_rejects_inconsistent_records() {
        let ms = small_set();
        let rho = random_density(4, 2, 2).unwrap();
        let good = TrainingPair {
            data: simulate_data(&rho, &ms).unwrap().values,
            state: rho.clone(),
        };
        let bad = TrainingPair {
            data: vec![0.1; 3],
            state: rho,
        };
        let cfg = PretrainConfig {
            train: small_config(0),
            epochs: 1,
        };
        assert!(matches!(
            pretrain(ms.clone(), &[good.clone(), bad], &[], &cfg),
            Err(Error::Dataset(_))
        ));
        let out = pretrain(ms, &[good], &[], &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
    }
}
