//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! Run a subset with `cargo test -p tomo-core --test acceptance -- 1 3 8`.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tomo_core::autodiff::Tape;
use tomo_core::bench::{run_fig3a, run_fig3b, BenchRun, DatasetSpec, Fig3aConfig, Fig3bConfig, Method};
use tomo_core::cgan::{
    self, mean_single_shot_fidelity, pretrain, Discriminator, Generator, PretrainConfig, QstCgan, RunReport,
    TrainConfig, TrainingPair,
};
use tomo_core::fock::{coherent_state, fock_state, random_density, DensityMatrix, StateKind, StateSpec};
use tomo_core::imle::{imle_step, reconstruct_imle, ImleConfig, InitialState};
use tomo_core::measure::{
    generalized_q_ops, husimi_ops, simulate_data, wigner_ops, DisplacementSet, MeasurementKind, MeasurementSet,
};
use tomo_core::nn::{bce_discriminator, bce_generator, l1, Activation, DensityMatrixLayer, GeneratorLoss, Mlp, MlpShape};
use tomo_core::store;
use tomo_core::ComplexMatrix;

const HERMITIAN_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;
const TRACE_TOL: f64 = 1e-10;
const LAYER_SAMPLES: usize = 10_000;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_CONFIGS: usize = 50;
const ORACLE_TOL: f64 = 1e-6;
const RECON_FIDELITY: f64 = 0.999;
const RECON_BUDGET: usize = 5000;
const RECON_MIN_SEEDS: usize = 8;
const EFFICIENT_FIDELITY: f64 = 0.98;
const CROSSOVER_MARGIN: f64 = 0.05;
const CROSSOVER_POINTS: usize = 100;
const IMLE_MIN_POINTS: usize = 512;
const ITERATION_FIDELITY: f64 = 0.99;
const ITERATION_RATIO: f64 = 10.0;
const IMLE_ITERATION_SEEDS: u64 = 3;
const SINGLE_SHOT_FIDELITY: f64 = 0.90;
const FINE_TUNE_STEPS: usize = 50;
const MONOTONE_FRACTION: f64 = 0.95;

type Outcome = Result<(bool, String), Box<dyn std::error::Error + Send + Sync>>;

struct Criterion {
    id: u32,
    name: &'static str,
}

const CRITERIA: [Criterion; 9] = [
    Criterion { id: 1, name: "density layer properties" },
    Criterion { id: 2, name: "end-to-end gradients" },
    Criterion { id: 3, name: "analytic observables" },
    Criterion { id: 4, name: "cat reconstruction on a Husimi grid" },
    Criterion { id: 5, name: "data-efficiency crossover" },
    Criterion { id: 6, name: "iteration efficiency" },
    Criterion { id: 7, name: "pre-training and single shot" },
    Criterion { id: 8, name: "iMLE sanity" },
    Criterion { id: 9, name: "determinism and round trips" },
];

// ---------------------------------------------------------------- oracles

/// Eigenvalues of a Hermitian matrix from its real symmetric embedding
/// `[[A, -B], [B, A]]`; each eigenvalue appears twice.
fn embedded_eigenvalues(m: &ComplexMatrix) -> Vec<f64> {
    let n = m.nrows();
    let big = DMatrix::from_fn(2 * n, 2 * n, |i, j| {
        let z = m[(i % n, j % n)];
        match (i < n, j < n) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    });
    let sym = (&big + big.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().copied().collect()
}

struct Validity {
    hermitian: f64,
    trace: f64,
    min_eig: f64,
}

fn validity(m: &ComplexMatrix) -> Validity {
    let n = m.nrows();
    let mut hermitian = 0.0f64;
    let mut trace = 0.0;
    for i in 0..n {
        trace += m[(i, i)].re;
        for j in 0..n {
            hermitian = hermitian.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    let min_eig = embedded_eigenvalues(m).into_iter().fold(f64::INFINITY, f64::min);
    Validity {
        hermitian,
        trace: (trace - 1.0).abs(),
        min_eig,
    }
}

impl Validity {
    fn ok(&self) -> bool {
        self.hermitian <= HERMITIAN_TOL && self.trace <= TRACE_TOL && self.min_eig >= -PSD_TOL
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Truncated coherent amplitudes `e^{-|α|²/2} αⁿ/√n!`.
fn coherent_ket(alpha: C64, dim: usize) -> DVector<C64> {
    let pref = (-alpha.norm_sqr() / 2.0).exp();
    DVector::from_fn(dim, |n, _| alpha.powu(n as u32) * (pref / factorial(n).sqrt()))
}

/// Normalized `Σ_k |α e^{2πik/m}⟩` in the truncated space.
fn cat_ket(alpha: C64, heads: usize, dim: usize) -> DVector<C64> {
    let mut v = DVector::zeros(dim);
    for k in 0..heads {
        v += coherent_ket(alpha * C64::from_polar(1.0, 2.0 * PI * k as f64 / heads as f64), dim);
    }
    let norm = v.norm();
    v.unscale(norm)
}

/// `⟨ψ|σ|ψ⟩`, the fidelity of `σ` to a pure state.
fn pure_fidelity(psi: &DVector<C64>, sigma: &ComplexMatrix) -> f64 {
    (psi.adjoint() * sigma * psi)[(0, 0)].re
}

fn spec_ket(spec: &StateSpec) -> DVector<C64> {
    match &spec.kind {
        StateKind::Cat { alpha, heads, phases } if phases.is_empty() => cat_ket(*alpha, *heads, spec.dim),
        other => panic!("no closed form for {other:?}"),
    }
}

fn expectation(op: &ComplexMatrix, rho: &ComplexMatrix) -> f64 {
    let n = op.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            acc += op[(i, j)] * rho[(j, i)];
        }
    }
    acc.re
}

/// Multinomial log-likelihood of ideal outcome frequencies.
fn oracle_log_likelihood(d: &[f64], rho: &ComplexMatrix, ms: &MeasurementSet) -> f64 {
    let predicted: Vec<f64> = ms.operators().iter().map(|o| expectation(o, rho)).collect();
    let ln = |p: f64| p.max(1e-300).ln();
    match ms.kind() {
        MeasurementKind::Wigner => d
            .iter()
            .zip(&predicted)
            .map(|(&w_obs, &w)| {
                let (fp, fm) = ((1.0 + PI / 2.0 * w_obs) / 2.0, (1.0 - PI / 2.0 * w_obs) / 2.0);
                let (pp, pm) = ((1.0 + PI / 2.0 * w) / 2.0, (1.0 - PI / 2.0 * w) / 2.0);
                fp * ln(pp) + fm * ln(pm)
            })
            .sum(),
        MeasurementKind::Husimi => d.iter().zip(&predicted).map(|(&q, &p)| PI * q * ln(PI * p)).sum(),
        MeasurementKind::GeneralizedQ { .. } => d.iter().zip(&predicted).map(|(&q, &p)| q * ln(p)).sum(),
    }
}

// --------------------------------------------------------------- helpers

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn reached_within(report: &RunReport, threshold: f64, budget: usize) -> bool {
    report
        .entries
        .iter()
        .any(|e| e.iteration <= budget && e.fidelity.is_some_and(|f| f > threshold))
}

// ------------------------------------------------------------ criterion 1

fn density_layer_properties() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = Validity {
        hermitian: 0.0,
        trace: 0.0,
        min_eig: f64::INFINITY,
    };
    let mut failures = 0usize;
    for dim in [2usize, 4, 8, 16, 32] {
        let layer = DensityMatrixLayer::new(dim)?;
        let mut tape = Tape::new();
        for k in 0..LAYER_SAMPLES {
            let mut v = match k % 4 {
                0 => gaussian_vec(&mut rng, layer.input_len(), 1.0),
                1 => gaussian_vec(&mut rng, layer.input_len(), 1e-3),
                2 => gaussian_vec(&mut rng, layer.input_len(), 1e3),
                _ => (0..layer.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            if k % 7 == 3 {
                // Rank-deficient factor: keep a single row.
                let keep = rng.random_range(0..dim);
                for (i, x) in v.iter_mut().enumerate() {
                    if (i / dim) % dim != keep {
                        *x = 0.0;
                    }
                }
                v[keep * dim] += 1.0;
            }
            tape.reset();
            let x = tape.constant(vec![v.len()], v)?;
            let (r, i) = layer.forward(&tape, x)?;
            let (re, im) = (tape.value_vec(r), tape.value_vec(i));
            let rho = ComplexMatrix::from_fn(dim, dim, |a, b| C64::new(re[a * dim + b], im[a * dim + b]));
            let val = validity(&rho);
            if !val.ok() {
                failures += 1;
            }
            worst.hermitian = worst.hermitian.max(val.hermitian);
            worst.trace = worst.trace.max(val.trace);
            worst.min_eig = worst.min_eig.min(val.min_eig);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        failures == 0 && secs < 60.0,
        format!(
            "{} inputs, {failures} invalid; worst hermiticity {:.1e}, trace {:.1e}, min eigenvalue {:.1e}; {secs:.1}s",
            5 * LAYER_SAMPLES,
            worst.hermitian,
            worst.trace,
            worst.min_eig
        ),
    ))
}

// ------------------------------------------------------------ criterion 2

struct GradCase {
    generator: Mlp,
    discriminator: Mlp,
    ms: Arc<MeasurementSet>,
    d: Vec<f64>,
    lambda: f64,
    loss: GeneratorLoss,
}

impl GradCase {
    fn random(seed: u64) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let dim = rng.random_range(2..=5);
        let points: Vec<C64> = (0..rng.random_range(2..=6))
            .map(|_| C64::from_polar(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0 * PI)))
            .collect();
        let ds = DisplacementSet::explicit(points)?;
        let ms = match seed % 3 {
            0 => husimi_ops(ds, dim)?,
            1 => wigner_ops(ds, dim)?,
            _ => generalized_q_ops(ds, (0..dim.min(3)).collect(), dim)?,
        };
        let m = ms.len();
        let act = match rng.random_range(0..3) {
            0 => Activation::LeakyRelu { slope: 0.2 },
            1 => Activation::Tanh,
            _ => Activation::Sigmoid,
        };
        let mut g_sizes = vec![m];
        for _ in 0..rng.random_range(1..=2) {
            g_sizes.push(rng.random_range(3..=8));
        }
        g_sizes.push(dim * dim);
        let g_shape = MlpShape {
            sizes: g_sizes,
            hidden: act,
            output: Activation::Linear,
        };
        let d_shape = MlpShape {
            sizes: vec![2 * m, rng.random_range(3..=8), m],
            hidden: act,
            output: Activation::Sigmoid,
        };
        let generator = Mlp::gaussian(&g_shape, 0.5, &mut rng)?;
        let discriminator = Mlp::gaussian(&d_shape, 0.5, &mut rng)?;
        let truth = random_density(dim, rng.random_range(1..=dim), seed)?;
        let d = simulate_data(&truth, &ms)?.values;
        Ok(Self {
            generator,
            discriminator,
            ms: Arc::new(ms),
            d,
            lambda: rng.random_range(0.1..10.0),
            loss: if seed.is_multiple_of(2) {
                GeneratorLoss::NonSaturating
            } else {
                GeneratorLoss::Saturating
            },
        })
    }

    /// Generator objective plus discriminator objective; with gradients
    /// flattened in `[generator, discriminator]` parameter order.
    fn objective(&self, g: &Mlp, dnet: &Mlp, with_grad: bool) -> Result<(f64, Vec<f64>), Box<dyn std::error::Error + Send + Sync>> {
        let tape = Tape::new();
        let gen = Generator::new(g.clone(), self.ms.clone())?;
        let disc = Discriminator::new(dnet.clone())?;
        let gb = gen.bind(&tape, with_grad)?;
        let db = disc.bind(&tape, with_grad)?;
        let x = tape.constant(vec![self.d.len()], self.d.clone())?;
        let out = gen.forward(&tape, &gb, x)?;
        let d_fake = disc.forward(&tape, &db, x, out.stats)?;
        let d_real = disc.forward(&tape, &db, x, x)?;
        let g_adv = bce_generator(&tape, d_fake, self.loss)?;
        let g_l1 = tape.scale(l1(&tape, x, out.stats)?, self.lambda)?;
        let d_loss = bce_discriminator(&tape, d_real, d_fake)?;
        let total = tape.add(tape.add(g_adv, g_l1)?, d_loss)?;
        let value = tape.scalar(total);
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(total)?;
        let mut grad: Vec<f64> = g.grads(&tape, &gb).into_iter().flatten().collect();
        grad.extend(dnet.grads(&tape, &db).into_iter().flatten());
        Ok((value, grad))
    }

    fn relative_error(&self) -> Result<f64, Box<dyn std::error::Error + Send + Sync>> {
        let (_, analytic) = self.objective(&self.generator, &self.discriminator, true)?;
        let gp = self.generator.flat_params();
        let dp = self.discriminator.flat_params();
        let h = 1e-6;
        let mut numeric = Vec::with_capacity(gp.len() + dp.len());
        let eval = |gflat: &[f64], dflat: &[f64]| -> Result<f64, Box<dyn std::error::Error + Send + Sync>> {
            let mut g = self.generator.clone();
            let mut d = self.discriminator.clone();
            g.set_flat_params(gflat)?;
            d.set_flat_params(dflat)?;
            Ok(self.objective(&g, &d, false)?.0)
        };
        for k in 0..gp.len() + dp.len() {
            let mut plus = (gp.clone(), dp.clone());
            let mut minus = (gp.clone(), dp.clone());
            if k < gp.len() {
                plus.0[k] += h;
                minus.0[k] -= h;
            } else {
                plus.1[k - gp.len()] += h;
                minus.1[k - gp.len()] -= h;
            }
            numeric.push((eval(&plus.0, &plus.1)? - eval(&minus.0, &minus.1)?) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-12);
        Ok(diff / scale)
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = 0;
    for seed in 0..GRAD_CONFIGS as u64 {
        let err = GradCase::random(seed)?.relative_error()?;
        if !(err < GRAD_REL_TOL) {
            failures += 1;
        }
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        failures == 0 && secs < 300.0,
        format!("{GRAD_CONFIGS} configurations, {failures} above {GRAD_REL_TOL:e}; worst relative error {worst:.2e}; {secs:.1}s"),
    ))
}

// ------------------------------------------------------------ criterion 3

fn analytic_observables() -> Outcome {
    const N: usize = 32;
    let points = vec![
        C64::new(0.0, 0.0),
        C64::new(0.5, 0.3),
        C64::new(-1.1, 0.7),
        C64::new(1.5, -1.2),
        C64::new(0.0, 2.2),
        C64::new(-2.0, -1.0),
    ];
    let ds = || DisplacementSet::explicit(points.clone());
    let husimi = husimi_ops(ds()?, N)?;
    let wigner = wigner_ops(ds()?, N)?;
    let ns: Vec<usize> = (0..7).collect();
    let genq = generalized_q_ops(ds()?, ns.clone(), N)?;

    let vacuum = DensityMatrix::from_ket(&fock_state(0, N)?);
    let one = DensityMatrix::from_ket(&fock_state(1, N)?);
    let alpha = C64::new(1.3, -0.4);
    let coherent = DensityMatrix::from_ket(&coherent_state(alpha, N));
    let cat_alpha = C64::new(1.2, 1.1);
    let cat = StateSpec::cat(cat_alpha, 2, N).build()?;

    let mut checks: Vec<(&str, f64)> = Vec::new();
    let mut worst = |label: &'static str, got: Vec<f64>, want: Vec<f64>| {
        let e = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
        checks.push((label, e));
    };

    let gauss = |b: C64, a: C64, k: f64| (-k * (b - a).norm_sqr()).exp();
    let zero = C64::new(0.0, 0.0);
    worst(
        "vacuum Wigner",
        wigner.predict(vacuum.matrix()),
        points.iter().map(|&b| 2.0 / PI * gauss(b, zero, 2.0)).collect(),
    );
    worst(
        "vacuum Husimi",
        husimi.predict(vacuum.matrix()),
        points.iter().map(|&b| gauss(b, zero, 1.0) / PI).collect(),
    );
    worst(
        "|1> Wigner",
        wigner.predict(one.matrix()),
        points
            .iter()
            .map(|&b| -2.0 / PI * (1.0 - 4.0 * b.norm_sqr()) * gauss(b, zero, 2.0))
            .collect(),
    );
    worst(
        "|1> Husimi",
        husimi.predict(one.matrix()),
        points.iter().map(|&b| b.norm_sqr() * gauss(b, zero, 1.0) / PI).collect(),
    );
    worst(
        "coherent Husimi",
        husimi.predict(coherent.matrix()),
        points.iter().map(|&b| gauss(b, alpha, 1.0) / PI).collect(),
    );
    worst(
        "coherent Wigner",
        wigner.predict(coherent.matrix()),
        points.iter().map(|&b| 2.0 / PI * gauss(b, alpha, 2.0)).collect(),
    );
    worst(
        "coherent generalized Q",
        genq.predict(coherent.matrix()),
        points
            .iter()
            .flat_map(|&b| {
                let mu = (alpha - b).norm_sqr();
                ns.iter().map(move |&n| (-mu).exp() * mu.powi(n as i32) / factorial(n))
            })
            .collect(),
    );
    let norm = 2.0 * (1.0 + (-2.0 * cat_alpha.norm_sqr()).exp());
    let overlap = |b: C64, a: C64| (-b.norm_sqr() / 2.0 - a.norm_sqr() / 2.0 + b.conj() * a).exp();
    worst(
        "2-cat Husimi",
        husimi.predict(cat.matrix()),
        points
            .iter()
            .map(|&b| (overlap(b, cat_alpha) + overlap(b, -cat_alpha)).norm_sqr() / (PI * norm))
            .collect(),
    );
    worst(
        "2-cat Wigner",
        wigner.predict(cat.matrix()),
        points
            .iter()
            .map(|&b| {
                let cross = 2.0 * gauss(b, zero, 2.0) * (4.0 * (b.conj() * cat_alpha).im).cos();
                2.0 / PI * (gauss(b, cat_alpha, 2.0) + gauss(b, -cat_alpha, 2.0) + cross) / norm
            })
            .collect(),
    );
    let at_origin = [
        ("vacuum W(0)", wigner.predict(vacuum.matrix())[0], 2.0 / PI),
        ("|1> W(0)", wigner.predict(one.matrix())[0], -2.0 / PI),
    ];
    let origin_err = at_origin.iter().map(|(_, g, w)| (g - w).abs()).fold(0.0, f64::max);
    let max_err = checks.iter().map(|c| c.1).fold(origin_err, f64::max);
    let (label, _) = checks.iter().copied().fold(("", -1.0), |a, c| if c.1 > a.1 { c } else { a });
    Ok((
        max_err <= ORACLE_TOL,
        format!(
            "{} closed forms at N = {N}; max error {max_err:.2e} ({label}); W(0) vacuum {:.9}, |1> {:.9}",
            checks.len() + at_origin.len(),
            at_origin[0].1,
            at_origin[1].1
        ),
    ))
}

// ------------------------------------------------------------ criterion 4

fn cat_reconstruction(c4_runs: &mut Option<Vec<BenchRun>>) -> Outcome {
    let start = Instant::now();
    let cfg = Fig3aConfig {
        methods: vec![Method::Cgan],
        ..Fig3aConfig::default()
    };
    let psi = cat_ket(C64::new(cfg.problem.alpha, 0.0), cfg.problem.heads, cfg.problem.dim);
    let runs = run_fig3a(&cfg)?;
    let mut hits = 0;
    let mut metric_gap = 0.0f64;
    let mut detail = Vec::new();
    for run in &runs {
        let oracle = pure_fidelity(&psi, run.report.final_rho.matrix());
        metric_gap = metric_gap.max((oracle - run.report.final_fidelity.unwrap_or(f64::NAN)).abs());
        let hit = reached_within(&run.report, RECON_FIDELITY, RECON_BUDGET);
        hits += usize::from(hit);
        detail.push(match run.report.iterations_to(RECON_FIDELITY) {
            Some(it) => format!("{it}"),
            None => format!("-({oracle:.4})"),
        });
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = hits >= RECON_MIN_SEEDS && metric_gap < 1e-6;
    *c4_runs = Some(runs);
    Ok((
        pass,
        format!(
            "{hits}/{} seeds above {RECON_FIDELITY} within {RECON_BUDGET} iterations; iterations [{}]; fidelity metric vs oracle gap {metric_gap:.1e}; {secs:.0}s",
            detail.len(),
            detail.join(", ")
        ),
    ))
}

// ------------------------------------------------------------ criterion 5

fn fidelity_means(runs: &[BenchRun], psi: &DVector<C64>, method: Method) -> Vec<(usize, f64)> {
    let mut counts: Vec<usize> = runs.iter().filter(|r| r.method == method).map(|r| r.points).collect();
    counts.sort_unstable();
    counts.dedup();
    counts
        .into_iter()
        .map(|c| {
            let f: Vec<f64> = runs
                .iter()
                .filter(|r| r.method == method && r.points == c)
                .map(|r| pure_fidelity(psi, r.report.final_rho.matrix()))
                .collect();
            (c, mean(&f))
        })
        .collect()
}

fn data_efficiency() -> Outcome {
    let start = Instant::now();
    let base = Fig3bConfig::default();
    let psi = cat_ket(C64::new(base.problem.alpha, 0.0), base.problem.heads, base.problem.dim);
    let cgan_runs = run_fig3b(&Fig3bConfig {
        counts: vec![CROSSOVER_POINTS],
        methods: vec![Method::Cgan],
        ..base.clone()
    })?;
    let cgan_mean = fidelity_means(&cgan_runs, &psi, Method::Cgan)[0].1;

    let mut counts: Vec<usize> = base.counts.iter().copied().filter(|&c| c <= IMLE_MIN_POINTS).collect();
    let mut imle_runs = run_fig3b(&Fig3bConfig {
        counts: counts.clone(),
        methods: vec![Method::ImleCorrected],
        ..base.clone()
    })?;
    let mut imle = fidelity_means(&imle_runs, &psi, Method::ImleCorrected);
    if imle.iter().all(|&(c, f)| c < IMLE_MIN_POINTS || f < EFFICIENT_FIDELITY) {
        let larger: Vec<usize> = base.counts.iter().copied().filter(|&c| c > IMLE_MIN_POINTS).collect();
        if !larger.is_empty() {
            imle_runs.extend(run_fig3b(&Fig3bConfig {
                counts: larger.clone(),
                methods: vec![Method::ImleCorrected],
                ..base.clone()
            })?);
            counts.extend(larger);
            imle = fidelity_means(&imle_runs, &psi, Method::ImleCorrected);
        }
    }
    let imle_at = imle
        .iter()
        .find(|(c, _)| *c == CROSSOVER_POINTS)
        .map(|p| p.1)
        .unwrap_or(f64::NAN);
    let below_ok = imle
        .iter()
        .filter(|(c, _)| *c < IMLE_MIN_POINTS)
        .all(|&(_, f)| f < EFFICIENT_FIDELITY);
    let reaches = imle
        .iter()
        .any(|&(c, f)| c >= IMLE_MIN_POINTS && f >= EFFICIENT_FIDELITY);
    let pass = cgan_mean >= EFFICIENT_FIDELITY && cgan_mean - imle_at >= CROSSOVER_MARGIN && below_ok && reaches;
    let table: Vec<String> = imle.iter().map(|(c, f)| format!("{c}:{f:.3}")).collect();
    Ok((
        pass,
        format!(
            "CGAN mean at {CROSSOVER_POINTS} points {cgan_mean:.4}; corrected iMLE means [{}]; {}s",
            table.join(" "),
            start.elapsed().as_secs()
        ),
    ))
}

// ------------------------------------------------------------ criterion 6

fn iteration_efficiency(c4_runs: &Option<Vec<BenchRun>>) -> Outcome {
    let start = Instant::now();
    let owned;
    let cgan_runs = match c4_runs {
        Some(r) => r,
        None => {
            owned = run_fig3a(&Fig3aConfig {
                methods: vec![Method::Cgan],
                ..Fig3aConfig::default()
            })?;
            &owned
        }
    };
    let cfg = Fig3aConfig {
        methods: vec![Method::Imle],
        seeds: (0..IMLE_ITERATION_SEEDS).collect(),
        ..Fig3aConfig::default()
    };
    let budget = cfg.configs.imle.max_iterations as f64;
    let imle_runs = run_fig3a(&cfg)?;
    let to = |r: &BenchRun, cap: f64| r.report.iterations_to(ITERATION_FIDELITY).map_or(cap, |i| i as f64);
    let mut cgan: Vec<f64> = cgan_runs
        .iter()
        .map(|r| to(r, cgan_runs[0].report.config["iterations"].as_f64().unwrap_or(f64::INFINITY)))
        .collect();
    let mut imle: Vec<f64> = imle_runs.iter().map(|r| to(r, budget)).collect();
    let censored = imle.iter().filter(|&&i| i >= budget).count();
    let (c, i) = (median(&mut cgan), median(&mut imle));
    let ratio = i / c;
    Ok((
        ratio >= ITERATION_RATIO,
        format!(
            "median iterations to {ITERATION_FIDELITY}: CGAN {c:.0} over {} seeds, iMLE {i:.0} over {} seeds ({censored} hit the {budget:.0} budget); ratio {ratio:.1}; {}s",
            cgan.len(),
            imle.len(),
            start.elapsed().as_secs()
        ),
    ))
}

// ------------------------------------------------------------ criterion 7

fn pretraining_single_shot() -> Outcome {
    let start = Instant::now();
    let spec = DatasetSpec::default();
    let ms = Arc::new(spec.measurement_set()?);
    let train = spec.generate(&ms)?;
    let validation = DatasetSpec {
        count: 50,
        seed: spec.seed + 1,
        ..spec.clone()
    }
    .generate(&ms)?;
    let held_out_spec = DatasetSpec {
        count: 50,
        seed: spec.seed + 2,
        ..spec.clone()
    };
    let held_out = held_out_spec.generate(&ms)?;
    let kets: Vec<DVector<C64>> = held_out_spec.states()?.iter().map(spec_ket).collect();

    let cfg = PretrainConfig::default();
    let outcome = pretrain(ms, &train, &validation, &cfg)?;
    let model = &outcome.model;
    let single: Vec<f64> = held_out
        .iter()
        .zip(&kets)
        .map(|(p, psi)| Ok(pure_fidelity(psi, model.single_shot(&p.data)?.matrix())))
        .collect::<Result<_, tomo_core::Error>>()?;
    let tuned: Vec<f64> = held_out
        .iter()
        .zip(&kets)
        .map(|(p, psi)| Ok(pure_fidelity(psi, model.fine_tune(&p.data, FINE_TUNE_STEPS)?.matrix())))
        .collect::<Result<_, tomo_core::Error>>()?;
    let (s, t) = (mean(&single), mean(&tuned));
    let library = mean_single_shot_fidelity(model, &held_out)?;
    Ok((
        s >= SINGLE_SHOT_FIDELITY && t >= s && (library - s).abs() < 1e-6,
        format!(
            "N = {}, {} training states, {} epochs (best {}): held-out single-shot mean {s:.4}, after fine-tune({FINE_TUNE_STEPS}) {t:.4}; {}s",
            spec.dim,
            train.len(),
            cfg.epochs,
            outcome.best_epoch,
            start.elapsed().as_secs()
        ),
    ))
}

// ------------------------------------------------------------ criterion 8

struct Trajectory {
    steps: usize,
    non_decreasing: usize,
    invalid: usize,
}

fn trajectory(ms: &MeasurementSet, truth: &DensityMatrix, steps: usize, seed: u64) -> Result<Trajectory, Box<dyn std::error::Error + Send + Sync>> {
    let d = simulate_data(truth, ms)?.values;
    let scale: f64 = d.iter().map(|x| x.abs()).sum();
    let mut rho = random_density(ms.dim(), ms.dim(), seed)?;
    let mut prev = oracle_log_likelihood(&d, rho.matrix(), ms);
    let mut out = Trajectory {
        steps,
        non_decreasing: 0,
        invalid: 0,
    };
    for _ in 0..steps {
        rho = imle_step(&rho, &d, ms, false)?;
        if !validity(rho.matrix()).ok() {
            out.invalid += 1;
        }
        let now = oracle_log_likelihood(&d, rho.matrix(), ms);
        if now >= prev - 1e-12 * scale {
            out.non_decreasing += 1;
        }
        prev = now;
    }
    Ok(out)
}

fn imle_sanity() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    // Fixed point on exact data from complete sets.
    let truth = random_density(8, 8, 3)?;
    let complete = [
        ("Wigner grid", wigner_ops(DisplacementSet::square_grid(3.0, 9, 9)?, 8)?),
        (
            "number basis",
            generalized_q_ops(DisplacementSet::explicit(vec![C64::new(0.0, 0.0)])?, (0..8).collect(), 8)?,
        ),
    ];
    for (label, ms) in &complete {
        let d = simulate_data(&truth, ms)?.values;
        let cfg = ImleConfig {
            initial: InitialState::Explicit { rho: truth.clone() },
            max_iterations: 100,
            ..ImleConfig::default()
        };
        let report = reconstruct_imle(&d, ms, &cfg, Some(&truth))?;
        let drift = (report.final_rho.matrix() - truth.matrix()).camax();
        let ok = report.iterations_run <= 1 && report.converged && drift < 1e-9;
        pass &= ok;
        notes.push(format!("{label} fixed point after {} step(s), drift {drift:.1e}", report.iterations_run));
    }

    // Likelihood monotonicity and iterate validity.
    let problems = [
        (
            "Wigner N=8",
            wigner_ops(DisplacementSet::square_grid(3.0, 9, 9)?, 8)?,
            StateSpec::cat(C64::new(1.2, 0.0), 2, 8).build()?,
        ),
        (
            "Wigner N=16",
            wigner_ops(DisplacementSet::square_grid(4.0, 13, 13)?, 16)?,
            StateSpec::cat(C64::new(1.5, 0.5), 3, 16).build()?,
        ),
        (
            "generalized Q N=8",
            generalized_q_ops(DisplacementSet::square_grid(2.5, 7, 7)?, (0..4).collect(), 8)?,
            truth.clone(),
        ),
        (
            "Husimi N=32",
            husimi_ops(DisplacementSet::square_grid(5.0, 32, 32)?, 32)?,
            StateSpec::cat(C64::new(2.0, 0.0), 2, 32).build()?,
        ),
    ];
    for (k, (label, ms, state)) in problems.iter().enumerate() {
        let t = trajectory(ms, state, 300, k as u64)?;
        let frac = t.non_decreasing as f64 / t.steps as f64;
        let ok = frac >= MONOTONE_FRACTION && t.invalid == 0;
        pass &= ok;
        notes.push(format!("{label}: {:.1}% non-decreasing, {} invalid", 100.0 * frac, t.invalid));
    }

    // Commuting projectors only: the diagonal update p' ∝ d²/p alternates
    // about the fixed point, so this case is reported and not scored.
    let t = trajectory(&complete[1].1, &truth, 300, 9)?;
    notes.push(format!(
        "number basis alone (unscored): {:.1}% non-decreasing",
        100.0 * t.non_decreasing as f64 / t.steps as f64
    ));
    Ok((pass, notes.join("; ")))
}

// ------------------------------------------------------------ criterion 9

fn determinism_and_round_trips() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    pool.install(|| -> Outcome {
        let mut notes = Vec::new();
        let mut pass = true;
        let target = StateSpec::cat(C64::new(1.0, 0.0), 2, 8).build()?;
        let ms = Arc::new(husimi_ops(DisplacementSet::square_grid(3.0, 8, 8)?, 8)?);
        let d = simulate_data(&target, &ms)?.values;

        let cgan_cfg = TrainConfig {
            iterations: 150,
            seed: 7,
            log_every: 5,
            fidelity_target: None,
            ..TrainConfig::default()
        };
        let a = cgan::reconstruct(&d, ms.clone(), &cgan_cfg, Some(&target))?;
        let b = cgan::reconstruct(&d, ms.clone(), &cgan_cfg, Some(&target))?;
        let imle_cfg = ImleConfig {
            max_iterations: 300,
            seed: 7,
            ..ImleConfig::default()
        };
        let c = reconstruct_imle(&d, &ms, &imle_cfg, Some(&target))?;
        let e = reconstruct_imle(&d, &ms, &imle_cfg, Some(&target))?;
        let reports_equal = a.without_timing() == b.without_timing() && c.without_timing() == e.without_timing();
        pass &= reports_equal;
        notes.push(format!("repeated reports identical: {reports_equal}"));

        let spec = DatasetSpec {
            dim: 4,
            count: 12,
            grid: 4,
            extent: 2.5,
            ..DatasetSpec::default()
        };
        let pms = Arc::new(spec.measurement_set()?);
        let pairs: Vec<TrainingPair> = spec.generate(&pms)?;
        let pcfg = PretrainConfig {
            epochs: 2,
            ..PretrainConfig::default()
        };
        let p1 = pretrain(pms.clone(), &pairs, &[], &pcfg)?.model.snapshot();
        let p2 = pretrain(pms.clone(), &pairs, &[], &pcfg)?.model.snapshot();
        pass &= p1 == p2;
        notes.push(format!("repeated pre-training identical: {}", p1 == p2));

        let dir = tempfile::tempdir()?;
        let path = |name: &str| dir.path().join(name);
        let mut trips = Vec::new();

        let mixed = random_density(6, 3, 11)?;
        store::save_state(&path("state.json"), &mixed)?;
        trips.push(("state", store::load_state(&path("state.json"))? == mixed));

        store::save_measurement_set(&path("ms.json"), &ms)?;
        let rebuilt = store::load_measurement_set(&path("ms.json"))?;
        trips.push((
            "measurement set",
            rebuilt.recipe() == ms.recipe() && rebuilt.operators() == ms.operators(),
        ));

        let data = store::DataFile {
            measurement: ms.recipe(),
            data: simulate_data(&target, &ms)?,
        };
        store::save_data(&path("data.json"), &data)?;
        trips.push(("data", store::load_data(&path("data.json"))? == data));

        store::save_report(&path("report.json"), &a)?;
        trips.push(("report", store::load_report(&path("report.json"))? == a));

        store::write_report_csv(&path("report.csv"), &a)?;
        let csv = std::fs::read_to_string(path("report.csv"))?;
        let logged: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap_or("").parse::<f64>())
            .collect::<Result<_, _>>()?;
        let expected: Vec<f64> = a.entries.iter().map(|e| e.fidelity.unwrap_or(f64::NAN)).collect();
        trips.push(("report csv", logged == expected));

        store::save_artifact(&path("config.json"), store::ArtifactKind::Config, &cgan_cfg)?;
        let cfg_back: TrainConfig = store::load_artifact(&path("config.json"), store::ArtifactKind::Config)?;
        trips.push(("config", cfg_back == cgan_cfg));

        store::save_dataset(&path("set.jsonl"), &pms.recipe(), &pairs)?;
        let (recipe, back) = store::load_dataset(&path("set.jsonl"))?;
        trips.push(("dataset", recipe == pms.recipe() && back == pairs));

        let model = QstCgan::new(ms.clone(), cgan_cfg.clone())?;
        let snap = model.snapshot();
        store::save_checkpoint(&path("model.ckpt"), &snap)?;
        let snap_back = store::load_checkpoint(&path("model.ckpt"))?;
        let restored = QstCgan::from_snapshot(&snap_back)?;
        trips.push((
            "checkpoint",
            snap_back == snap && restored.single_shot(&d)? == model.single_shot(&d)?,
        ));

        let grid: Vec<(f64, f64, f64)> = (0..20)
            .map(|k| (0.1 * k as f64, -0.3 * k as f64, (k as f64).sin() / 7.0))
            .collect();
        store::write_grid_csv(&path("grid.csv"), &grid)?;
        let grid_back: Vec<(f64, f64, f64)> = std::fs::read_to_string(path("grid.csv"))?
            .lines()
            .skip(1)
            .map(|l| {
                let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap_or(f64::NAN)).collect();
                (v[0], v[1], v[2])
            })
            .collect();
        trips.push(("grid csv", grid_back == grid));

        let failed: Vec<&str> = trips.iter().filter(|t| !t.1).map(|t| t.0).collect();
        pass &= failed.is_empty();
        notes.push(format!("{} store formats round-tripped, failed: {failed:?}", trips.len()));
        Ok((pass, notes.join("; ")))
    })
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let wanted = |id: u32| selected.is_empty() || selected.contains(&id);
    let mut c4_runs = None;
    let mut failed = 0;
    for c in &CRITERIA {
        if !wanted(c.id) {
            continue;
        }
        let outcome = match c.id {
            1 => density_layer_properties(),
            2 => gradient_correctness(),
            3 => analytic_observables(),
            4 => cat_reconstruction(&mut c4_runs),
            5 => data_efficiency(),
            6 => iteration_efficiency(&c4_runs),
            7 => pretraining_single_shot(),
            8 => imle_sanity(),
            _ => determinism_and_round_trips(),
        };
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!pass);
        println!(
            "criterion {} ({}): {} | {detail}",
            c.id,
            c.name,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
