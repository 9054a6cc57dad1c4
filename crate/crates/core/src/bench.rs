//! Benchmark drivers: fidelity against iteration on a fixed grid, fidelity
//! against point count on disk-sampled sets, state-family datasets for
//! pre-training, and phase-space grids for plotting.
//!
//! Runs are independent and deterministic; they are spread over the
//! current rayon pool and each stays single-threaded in its inner loops.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cgan::{reconstruct, RunReport, TrainConfig, TrainingPair};
use crate::fock::{default_pad, DensityMatrix, Displacer, StateKind, StateSpec};
use crate::imle::{reconstruct_imle, ImleConfig};
use crate::measure::{husimi_ops, measurement_set, DisplacementSet, MeasurementKind, MeasurementSet};
use crate::{Error, Result, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cgan,
    Imle,
    /// iMLE with the `G⁻¹` completeness correction.
    ImleCorrected,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Cgan, Method::Imle, Method::ImleCorrected];

    pub fn label(self) -> &'static str {
        match self {
            Method::Cgan => "cgan",
            Method::Imle => "imle",
            Method::ImleCorrected => "imle_g",
        }
    }
}

/// Target state of the benchmarks: an `m`-headed cat of real amplitude `α`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CatProblem {
    pub alpha: f64,
    pub heads: usize,
    pub dim: usize,
}

impl Default for CatProblem {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            heads: 2,
            dim: 32,
        }
    }
}

impl CatProblem {
    pub fn target(&self) -> Result<DensityMatrix> {
        StateSpec::cat(C64::new(self.alpha, 0.0), self.heads, self.dim).build()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfigs {
    pub cgan: TrainConfig,
    pub imle: ImleConfig,
}

impl MethodConfigs {
    fn run(&self, method: Method, seed: u64, d: &[f64], ms: &Arc<MeasurementSet>, target: &DensityMatrix) -> Result<RunReport> {
        match method {
            Method::Cgan => {
                let cfg = TrainConfig {
                    seed,
                    ..self.cgan.clone()
                };
                reconstruct(d, ms.clone(), &cfg, Some(target))
            }
            Method::Imle | Method::ImleCorrected => {
                let cfg = ImleConfig {
                    seed,
                    g_correction: method == Method::ImleCorrected,
                    ..self.imle.clone()
                };
                reconstruct_imle(d, ms, &cfg, Some(target))
            }
        }
    }
}

/// Fidelity against iteration on a square Husimi grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Fig3aConfig {
    pub problem: CatProblem,
    pub grid: usize,
    pub extent: f64,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub configs: MethodConfigs,
}

impl Default for Fig3aConfig {
    fn default() -> Self {
        Self {
            problem: CatProblem::default(),
            grid: 32,
            extent: 5.0,
            seeds: (0..10).collect(),
            methods: Method::ALL.to_vec(),
            configs: MethodConfigs {
                cgan: TrainConfig {
                    log_every: 1,
                    ..TrainConfig::default()
                },
                imle: ImleConfig {
                    max_iterations: 20_000,
                    fidelity_target: Some(0.999),
                    ..ImleConfig::default()
                },
            },
        }
    }
}

/// Final fidelity against point count on disk-sampled Husimi sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Fig3bConfig {
    pub problem: CatProblem,
    pub radius: f64,
    pub counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub configs: MethodConfigs,
}

impl Default for Fig3bConfig {
    fn default() -> Self {
        Self {
            problem: CatProblem::default(),
            radius: 5.0,
            counts: default_counts(),
            seeds: (0..5).collect(),
            methods: Method::ALL.to_vec(),
            configs: MethodConfigs {
                cgan: TrainConfig {
                    log_every: 50,
                    ..TrainConfig::default()
                },
                imle: ImleConfig {
                    max_iterations: 20_000,
                    log_every: 100,
                    fidelity_target: Some(0.999),
                    ..ImleConfig::default()
                },
            },
        }
    }
}

/// Powers of two from 16 to 1024, plus 100.
pub fn default_counts() -> Vec<usize> {
    vec![16, 32, 64, 100, 128, 256, 512, 1024]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub method: Method,
    pub seed: u64,
    pub points: usize,
    pub report: RunReport,
}

pub fn run_fig3a(cfg: &Fig3aConfig) -> Result<Vec<BenchRun>> {
    let target = cfg.problem.target()?;
    let ds = DisplacementSet::square_grid(cfg.extent, cfg.grid, cfg.grid)?;
    let ms = Arc::new(husimi_ops(ds, cfg.problem.dim)?);
    let d = ms.predict(target.matrix());
    let jobs: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    jobs.par_iter()
        .map(|&(method, seed)| {
            let report = cfg.configs.run(method, seed, &d, &ms, &target)?;
            log::info!("fig3a {} seed {seed}: F {:?}", method.label(), report.final_fidelity);
            Ok(BenchRun {
                method,
                seed,
                points: ms.len(),
                report,
            })
        })
        .collect()
}

/// The disk set for one `(count, seed)` cell is shared by every method.
pub fn run_fig3b(cfg: &Fig3bConfig) -> Result<Vec<BenchRun>> {
    let target = cfg.problem.target()?;
    let cells: Vec<(usize, u64)> = cfg
        .counts
        .iter()
        .flat_map(|&c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let nested: Vec<Vec<BenchRun>> = cells
        .par_iter()
        .map(|&(count, seed)| {
            let ds = DisplacementSet::disk(cfg.radius, count, seed)?;
            let ms = Arc::new(husimi_ops(ds, cfg.problem.dim)?);
            let d = ms.predict(target.matrix());
            cfg.methods
                .iter()
                .map(|&method| {
                    let report = cfg.configs.run(method, seed, &d, &ms, &target)?;
                    log::info!(
                        "fig3b {} {count} points seed {seed}: F {:?}",
                        method.label(),
                        report.final_fidelity
                    );
                    Ok(BenchRun {
                        method,
                        seed,
                        points: count,
                        report,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub method: Method,
    pub points: usize,
    pub mean_fidelity: f64,
    pub std_fidelity: f64,
    pub runs: usize,
}

/// Mean and standard deviation of final fidelity per method and count,
/// ordered by method then count.
pub fn summarize_points(runs: &[BenchRun]) -> Vec<PointSummary> {
    let mut keys: Vec<(Method, usize)> = runs.iter().map(|r| (r.method, r.points)).collect();
    keys.sort_by_key(|&(m, p)| (Method::ALL.iter().position(|&x| x == m), p));
    keys.dedup();
    keys.into_iter()
        .map(|(method, points)| {
            let f: Vec<f64> = runs
                .iter()
                .filter(|r| r.method == method && r.points == points)
                .map(|r| r.report.final_fidelity.unwrap_or(0.0))
                .collect();
            let n = f.len() as f64;
            let mean = f.iter().sum::<f64>() / n;
            let var = f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            PointSummary {
                method,
                points,
                mean_fidelity: mean,
                std_fidelity: var.sqrt(),
                runs: f.len(),
            }
        })
        .collect()
}

pub fn mean_fidelity(summary: &[PointSummary], method: Method, points: usize) -> Option<f64> {
    summary
        .iter()
        .find(|s| s.method == method && s.points == points)
        .map(|s| s.mean_fidelity)
}

/// Columns `method, seed, iteration, fidelity`.
pub fn curves_csv(runs: &[BenchRun]) -> String {
    let mut out = String::from("method,seed,iteration,fidelity\n");
    for r in runs {
        for e in &r.report.entries {
            if let Some(f) = e.fidelity {
                out.push_str(&format!("{},{},{},{f}\n", r.method.label(), r.seed, e.iteration));
            }
        }
    }
    out
}

/// Columns `method, points, seed, final_fidelity, iterations`.
pub fn finals_csv(runs: &[BenchRun]) -> String {
    let mut out = String::from("method,points,seed,final_fidelity,iterations\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method.label(),
            r.points,
            r.seed,
            r.report.final_fidelity.map(|f| f.to_string()).unwrap_or_default(),
            r.report.iterations_run
        ));
    }
    out
}

pub fn summary_csv(summary: &[PointSummary]) -> String {
    let mut out = String::from("method,points,mean_fidelity,std_fidelity,runs\n");
    for s in summary {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.method.label(),
            s.points,
            s.mean_fidelity,
            s.std_fidelity,
            s.runs
        ));
    }
    out
}

/// Family of random cat states for pre-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub dim: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub heads_min: usize,
    pub heads_max: usize,
    pub count: usize,
    pub seed: u64,
    pub measurement: MeasurementKind,
    pub grid: usize,
    pub extent: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            alpha_min: 1.0,
            alpha_max: 2.5,
            heads_min: 1,
            heads_max: 2,
            count: 500,
            seed: 0,
            measurement: MeasurementKind::Husimi,
            grid: 16,
            extent: 4.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha_min && self.alpha_min <= self.alpha_max) {
            return Err(Error::Contract(format!(
                "amplitude range [{}, {}] is empty or negative",
                self.alpha_min, self.alpha_max
            )));
        }
        if self.heads_min == 0 || self.heads_min > self.heads_max || self.heads_max > 6 {
            return Err(Error::Contract(format!(
                "head range {}..={} outside 1..=6",
                self.heads_min, self.heads_max
            )));
        }
        if self.count == 0 || self.grid == 0 {
            return Err(Error::Contract("count and grid must be at least 1".into()));
        }
        Ok(())
    }

    pub fn measurement_set(&self) -> Result<MeasurementSet> {
        measurement_set(
            self.measurement.clone(),
            DisplacementSet::square_grid(self.extent, self.grid, self.grid)?,
            self.dim,
            default_pad(self.dim),
        )
    }

    /// `|α|` uniform in the range, uniform phase, heads uniform over the
    /// range with all head phases zero.
    pub fn states(&self) -> Result<Vec<StateSpec>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.count)
            .map(|_| {
                let r = rng.random_range(self.alpha_min..=self.alpha_max);
                let phase = rng.random_range(0.0..TAU);
                let heads = rng.random_range(self.heads_min..=self.heads_max);
                StateSpec::new(
                    StateKind::Cat {
                        alpha: C64::from_polar(r, phase),
                        heads,
                        phases: Vec::new(),
                    },
                    self.dim,
                )
            })
            .collect())
    }

    pub fn generate(&self, ms: &MeasurementSet) -> Result<Vec<TrainingPair>> {
        if ms.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "dataset dimension {} for operators of dimension {}",
                self.dim,
                ms.dim()
            )));
        }
        self.states()?
            .into_par_iter()
            .map(|spec| {
                let state = spec.build()?;
                Ok(TrainingPair {
                    data: ms.predict(state.matrix()),
                    state,
                })
            })
            .collect()
    }
}

/// Row-major grid points with the imaginary part as the slow index.
fn grid_points(extent: f64, nx: usize, ny: usize) -> Result<Vec<C64>> {
    Ok(DisplacementSet::square_grid(extent, nx, ny)?.points().to_vec())
}

/// `(1/π)⟨β|ρ|β⟩` on a square grid, triples `(Re β, Im β, value)`.
pub fn husimi_grid(rho: &DensityMatrix, extent: f64, nx: usize, ny: usize) -> Result<Vec<(f64, f64, f64)>> {
    let disp = Displacer::with_default_pad(rho.dim())?;
    let points = grid_points(extent, nx, ny)?;
    Ok(points
        .par_iter()
        .map(|&beta| {
            let v = disp.displaced_vacuum(beta);
            let q = (v.adjoint() * rho.matrix() * &v)[(0, 0)].re / PI;
            (beta.re, beta.im, q)
        })
        .collect())
}

/// `(2/π) Σₙ (−1)ⁿ ⟨n|D(β)† ρ D(β)|n⟩` on a square grid.
pub fn wigner_grid(rho: &DensityMatrix, extent: f64, nx: usize, ny: usize) -> Result<Vec<(f64, f64, f64)>> {
    let disp = Displacer::with_default_pad(rho.dim())?;
    let points = grid_points(extent, nx, ny)?;
    Ok(points
        .par_iter()
        .map(|&beta| {
            let d = disp.leading_rows(beta);
            let m = d.adjoint() * rho.matrix() * &d;
            let parity: f64 = (0..disp.working_dim())
                .map(|n| if n % 2 == 0 { m[(n, n)].re } else { -m[(n, n)].re })
                .sum();
            (beta.re, beta.im, 2.0 / PI * parity)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{coherent_state, fock_state};
    use crate::measure::{simulate_data, wigner_ops};

    #[test]
    fn grids_match_measurement_operators() {
        let rho = StateSpec::cat(C64::new(1.5, 0.3), 2, 12).build().unwrap();
        let w = wigner_grid(&rho, 2.0, 5, 4).unwrap();
        let ms = wigner_ops(DisplacementSet::square_grid(2.0, 5, 4).unwrap(), 12).unwrap();
        let d = simulate_data(&rho, &ms).unwrap().values;
        for ((x, y, v), (beta, e)) in w.iter().zip(ms.displacements().points().iter().zip(&d)) {
            assert_eq!((*x, *y), (beta.re, beta.im));
            assert!((v - e).abs() < 1e-12);
        }
        let q = husimi_grid(&rho, 2.0, 5, 4).unwrap();
        let ms = husimi_ops(DisplacementSet::square_grid(2.0, 5, 4).unwrap(), 12).unwrap();
        let d = simulate_data(&rho, &ms).unwrap().values;
        for ((_, _, v), e) in q.iter().zip(&d) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn grids_reproduce_closed_forms() {
        let vacuum = DensityMatrix::from_ket(&fock_state(0, 32).unwrap());
        let one = DensityMatrix::from_ket(&fock_state(1, 32).unwrap());
        let centre = |g: &[(f64, f64, f64)]| g.iter().find(|p| p.0 == 0.0 && p.1 == 0.0).unwrap().2;
        assert!((centre(&wigner_grid(&vacuum, 1.0, 3, 3).unwrap()) - 2.0 / PI).abs() < 1e-9);
        assert!((centre(&wigner_grid(&one, 1.0, 3, 3).unwrap()) + 2.0 / PI).abs() < 1e-9);
        let alpha = C64::new(0.7, -0.4);
        let coh = DensityMatrix::from_ket(&coherent_state(alpha, 32));
        for (x, y, q) in husimi_grid(&coh, 2.0, 6, 6).unwrap() {
            let expected = (-(C64::new(x, y) - alpha).norm_sqr()).exp() / PI;
            assert!((q - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn dataset_is_reproducible_and_in_range() {
        let spec = DatasetSpec {
            dim: 8,
            count: 40,
            grid: 4,
            ..DatasetSpec::default()
        };
        let ms = spec.measurement_set().unwrap();
        let a = spec.generate(&ms).unwrap();
        assert_eq!(a, spec.generate(&ms).unwrap());
        assert_eq!(a.len(), 40);
        let mut heads_seen = [false; 3];
        for s in spec.states().unwrap() {
            let StateKind::Cat { alpha, heads, .. } = s.kind else {
                panic!("cat family")
            };
            assert!((1.0..=2.5).contains(&alpha.norm()));
            heads_seen[heads] = true;
        }
        assert!(heads_seen[1] && heads_seen[2]);
        for p in &a {
            assert_eq!(p.data.len(), 16);
            p.state.validate().unwrap();
        }
        let bad = DatasetSpec {
            heads_min: 3,
            heads_max: 2,
            ..spec
        };
        assert!(bad.states().is_err());
    }

    #[test]
    fn summaries_average_per_cell() {
        let rho = DensityMatrix::maximally_mixed(2);
        let run = |method, points, f| BenchRun {
            method,
            seed: 0,
            points,
            report: RunReport {
                method: "x".into(),
                seed: 0,
                config: serde_json::Value::Null,
                entries: Vec::new(),
                iterations_run: 1,
                converged: true,
                final_fidelity: Some(f),
                final_rho: rho.clone(),
            },
        };
        let runs = vec![
            run(Method::Imle, 16, 0.5),
            run(Method::Cgan, 16, 0.9),
            run(Method::Cgan, 16, 0.7),
            run(Method::Cgan, 8, 0.2),
        ];
        let s = summarize_points(&runs);
        assert_eq!(s.len(), 3);
        assert_eq!((s[0].method, s[0].points), (Method::Cgan, 8));
        assert!((mean_fidelity(&s, Method::Cgan, 16).unwrap() - 0.8).abs() < 1e-12);
        assert!((s[1].std_fidelity - 0.1).abs() < 1e-12);
        assert_eq!(mean_fidelity(&s, Method::ImleCorrected, 16), None);
        assert_eq!(summary_csv(&s).lines().count(), 4);
    }

    #[test]
    fn small_sweeps_run_end_to_end() {
        let mut cfg = Fig3bConfig {
            problem: CatProblem {
                alpha: 1.0,
                heads: 2,
                dim: 6,
            },
            radius: 2.5,
            counts: vec![12, 40],
            seeds: vec![0, 1],
            ..Fig3bConfig::default()
        };
        cfg.configs.cgan.iterations = 20;
        cfg.configs.cgan.architecture.generator_hidden = vec![16];
        cfg.configs.cgan.architecture.discriminator_hidden = vec![16];
        cfg.configs.imle.max_iterations = 50;
        let runs = run_fig3b(&cfg).unwrap();
        assert_eq!(runs.len(), 2 * 2 * 3);
        assert_eq!(run_fig3b(&cfg).unwrap().iter().map(|r| r.report.without_timing()).collect::<Vec<_>>(),
            runs.iter().map(|r| r.report.without_timing()).collect::<Vec<_>>());
        assert_eq!(summarize_points(&runs).len(), 6);
        assert_eq!(finals_csv(&runs).lines().count(), 13);

        let a = Fig3aConfig {
            problem: cfg.problem.clone(),
            grid: 5,
            extent: 2.5,
            seeds: vec![3],
            configs: cfg.configs.clone(),
            ..Fig3aConfig::default()
        };
        let runs = run_fig3a(&a).unwrap();
        assert_eq!(runs.len(), 3);
        assert!(runs.iter().all(|r| r.points == 25 && r.report.final_fidelity.is_some()));
        assert!(curves_csv(&runs).lines().count() > 3);
    }
}
