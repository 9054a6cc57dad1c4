//! Iterative maximum-likelihood reconstruction, `ρ ← 𝒩[R ρ R]`.
//!
//! Husimi and generalized-Q statistics are treated as outcome
//! probabilities of the operators themselves. Wigner values are converted to
//! the two-outcome parity measurement at each displacement:
//! `Π± = (I ± (π/2)Oᵢ)/2` with `p± = (1 ± (π/2)Wᵢ)/2`.

use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cgan::{elapsed_ms, LogEntry, RunReport};
use crate::fock::{random_density, DensityMatrix};
use crate::linalg::{self, ComplexMatrix, C64};
use crate::measure::{MeasurementKind, MeasurementSet};
use crate::metrics::{log_likelihood_from_predictions, FidelityProbe};
use crate::{Error, Result};

/// Predicted probabilities below this are raised to it inside `R`.
pub const PROBABILITY_FLOOR: f64 = 1e-12;
/// Eigenvalue cutoff of the pseudo-inverse of `G = Σ Oᵢ`.
pub const PINV_CUTOFF: f64 = 1e-10;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InitialState {
    /// Full-rank Ginibre state drawn from the configured seed.
    #[default]
    Random,
    MaximallyMixed,
    Explicit { rho: DensityMatrix },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImleConfig {
    pub max_iterations: usize,
    /// Stop once `|ΔL| / Σ|dᵢ|` between consecutive iterates falls below this.
    pub tolerance: f64,
    pub fidelity_target: Option<f64>,
    pub g_correction: bool,
    pub seed: u64,
    pub initial: InitialState,
    pub log_every: usize,
}

impl Default for ImleConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            tolerance: 1e-14,
            fidelity_target: None,
            g_correction: false,
            seed: 0,
            initial: InitialState::Random,
            log_every: 10,
        }
    }
}

impl ImleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Contract("tolerance must be positive".into()));
        }
        if self.max_iterations == 0 || self.log_every == 0 {
            return Err(Error::Contract(
                "max_iterations and log_every must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn check_data(d: &[f64], ms: &MeasurementSet) -> Result<()> {
    if d.len() != ms.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} data values for {} operators",
            d.len(),
            ms.len()
        )));
    }
    Ok(())
}

/// Outcome frequencies and predicted probabilities in the iMLE picture.
struct Outcomes {
    observed: Vec<f64>,
    predicted: Vec<f64>,
}

fn outcomes(d: &[f64], raw_predictions: &[f64], kind: &MeasurementKind) -> Outcomes {
    match kind {
        MeasurementKind::Wigner => {
            let split = |w: &[f64]| -> Vec<f64> {
                w.iter()
                    .flat_map(|w| {
                        let x = 0.5 * PI * w;
                        [0.5 * (1.0 + x), 0.5 * (1.0 - x)]
                    })
                    .collect()
            };
            Outcomes {
                observed: split(d),
                predicted: split(raw_predictions),
            }
        }
        _ => Outcomes {
            observed: d.to_vec(),
            predicted: raw_predictions.to_vec(),
        },
    }
}

fn ratios(o: &Outcomes) -> Vec<f64> {
    let mut floored = 0;
    let r = o
        .observed
        .iter()
        .zip(&o.predicted)
        .map(|(&f, &p)| {
            if f == 0.0 {
                0.0
            } else if p < PROBABILITY_FLOOR {
                floored += 1;
                f / PROBABILITY_FLOOR
            } else {
                f / p
            }
        })
        .collect();
    if floored > 0 {
        log::warn!("{floored} predicted probabilities raised to {PROBABILITY_FLOOR:e}");
    }
    r
}

fn r_from_predictions(d: &[f64], predictions: &[f64], ms: &MeasurementSet) -> ComplexMatrix {
    let o = outcomes(d, predictions, ms.kind());
    let r = ratios(&o);
    match ms.kind() {
        MeasurementKind::Wigner => {
            // Σ a Π⁺ + b Π⁻ = ½Σ(a + b) I + ¼π Σ(a − b) Oᵢ
            let (mut id, mut w) = (0.0, Vec::with_capacity(ms.len()));
            for pair in r.chunks_exact(2) {
                id += 0.5 * (pair[0] + pair[1]);
                w.push(0.25 * PI * (pair[0] - pair[1]));
            }
            let n = ms.dim();
            ms.weighted_sum(&w) + ComplexMatrix::identity(n, n) * C64::new(id, 0.0)
        }
        _ => ms.weighted_sum(&r),
    }
}

/// `R = Σᵢ (dᵢ / tr{Oᵢ ρ}) Oᵢ` over the outcomes of `ms`.
pub fn r_operator(rho: &DensityMatrix, d: &[f64], ms: &MeasurementSet) -> Result<ComplexMatrix> {
    check_data(d, ms)?;
    check_dim(rho, ms)?;
    Ok(r_from_predictions(d, &ms.predict(rho.matrix()), ms))
}

fn check_dim(rho: &DensityMatrix, ms: &MeasurementSet) -> Result<()> {
    if rho.dim() != ms.dim() {
        return Err(Error::DimensionMismatch(format!(
            "state of dimension {} for operators of dimension {}",
            rho.dim(),
            ms.dim()
        )));
    }
    Ok(())
}

/// `G = Σ` of all outcome operators.
pub fn completeness_operator(ms: &MeasurementSet) -> ComplexMatrix {
    match ms.kind() {
        MeasurementKind::Wigner => {
            let n = ms.dim();
            ComplexMatrix::identity(n, n) * C64::new(ms.len() as f64, 0.0)
        }
        _ => ms.operator_sum(),
    }
}

/// `F` with `ρ = F F†`.
fn factor(rho: &ComplexMatrix) -> ComplexMatrix {
    let (values, vectors) = linalg::hermitian_eig(rho);
    let mut f = vectors;
    for (k, v) in values.iter().enumerate() {
        let w = v.max(0.0).sqrt();
        f.column_mut(k).scale_mut(w);
    }
    f
}

/// Replaces `F` by `X F` with `X = G⁻¹ R` (or `R`), rescaled to unit
/// Frobenius norm, and returns `F F†`. The Gram form keeps the iterate
/// positive semidefinite when `X` is badly conditioned.
fn advance(f: &mut ComplexMatrix, r: &ComplexMatrix, g_inv: Option<&ComplexMatrix>) -> Result<DensityMatrix> {
    let x = match g_inv {
        Some(gi) => gi * r,
        None => r.clone(),
    };
    let next = &x * &*f;
    let norm = next.norm();
    if !norm.is_finite() {
        return Err(Error::NumericFailure("non-finite iMLE iterate".into()));
    }
    if !(norm > 0.0) {
        return Err(Error::NumericFailure("iMLE collapsed to the zero matrix".into()));
    }
    *f = next.unscale(norm);
    DensityMatrix::from_psd(&(&*f * f.adjoint()))
}

/// One update `𝒩[R ρ R]`, or `𝒩[G⁻¹ R ρ R G⁻¹]` with `g_correction`.
pub fn imle_step(rho: &DensityMatrix, d: &[f64], ms: &MeasurementSet, g_correction: bool) -> Result<DensityMatrix> {
    let r = r_operator(rho, d, ms)?;
    let g_inv = g_correction.then(|| linalg::hermitian_pinv(&completeness_operator(ms), PINV_CUTOFF));
    advance(&mut factor(rho.matrix()), &r, g_inv.as_ref())
}

/// Log-likelihood of `d` in the iMLE outcome picture.
pub fn outcome_log_likelihood(d: &[f64], predictions: &[f64], kind: &MeasurementKind) -> f64 {
    let o = outcomes(d, predictions, kind);
    log_likelihood_from_predictions(&o.observed, &o.predicted)
}

fn initial_state(cfg: &ImleConfig, dim: usize) -> Result<DensityMatrix> {
    match &cfg.initial {
        InitialState::Random => random_density(dim, dim, cfg.seed),
        InitialState::MaximallyMixed => Ok(DensityMatrix::maximally_mixed(dim)),
        InitialState::Explicit { rho } => {
            if rho.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "initial state of dimension {} for operators of dimension {dim}",
                    rho.dim()
                )));
            }
            Ok(rho.clone())
        }
    }
}

/// Iterates until the likelihood stalls, the fidelity target is met, or
/// the iteration budget runs out.
pub fn reconstruct_imle(
    d: &[f64],
    ms: &MeasurementSet,
    cfg: &ImleConfig,
    target: Option<&DensityMatrix>,
) -> Result<RunReport> {
    cfg.validate()?;
    check_data(d, ms)?;
    if let Some(t) = target {
        check_dim(t, ms)?;
    }
    let scale = d.iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
    let g_inv = cfg
        .g_correction
        .then(|| linalg::hermitian_pinv(&completeness_operator(ms), PINV_CUTOFF));
    let probe = target.map(FidelityProbe::new);
    let goal = cfg.fidelity_target.filter(|_| probe.is_some());
    let start = Instant::now();
    let mut rho = initial_state(cfg, ms.dim())?;
    let mut f = factor(rho.matrix());
    let mut predictions = ms.predict(rho.matrix());
    let mut likelihood = outcome_log_likelihood(d, &predictions, ms.kind());
    let mut entries = Vec::new();
    let mut converged = false;
    let mut iterations_run = 0;
    for it in 1..=cfg.max_iterations {
        let r = r_from_predictions(d, &predictions, ms);
        rho = advance(&mut f, &r, g_inv.as_ref())
            .map_err(|e| Error::NumericFailure(format!("iteration {it}: {e}")))?;
        predictions = ms.predict(rho.matrix());
        let next = outcome_log_likelihood(d, &predictions, ms.kind());
        let delta = (next - likelihood).abs() / scale;
        likelihood = next;
        iterations_run = it;
        let fidelity = probe.as_ref().map(|p| p.fidelity(rho.matrix()));
        let reached = matches!((fidelity, goal), (Some(f), Some(g)) if f >= g);
        converged = reached || delta < cfg.tolerance;
        if it % cfg.log_every == 0 || it == 1 || converged || it == cfg.max_iterations {
            let l1 = d.iter().zip(&predictions).map(|(a, b)| (a - b).abs()).sum::<f64>() / d.len() as f64;
            entries.push(LogEntry {
                iteration: it,
                fidelity,
                g_loss: Some(-likelihood),
                d_loss: None,
                l1: Some(l1),
                log_likelihood: Some(likelihood),
                wall_ms: elapsed_ms(start),
            });
        }
        if converged {
            break;
        }
    }
    let final_fidelity = match target {
        Some(t) => Some(crate::metrics::fidelity(t, &rho)?),
        None => None,
    };
    Ok(RunReport {
        method: "imle".into(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg).map_err(|e| Error::MalformedPayload(e.to_string()))?,
        entries,
        iterations_run,
        converged,
        final_fidelity,
        final_rho: rho,
    })
}
