//! State comparison and likelihood metrics.

use crate::fock::DensityMatrix;
use crate::linalg::{self, ComplexMatrix};
use crate::measure::MeasurementSet;
use crate::{Error, Result};

const HERMITIAN_TOL: f64 = 1e-8;
const PREDICTION_FLOOR: f64 = 1e-300;

fn require_hermitian(m: &ComplexMatrix, name: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Contract(format!("{name} is not square")));
    }
    let defect = linalg::hermiticity_defect(m);
    if defect > HERMITIAN_TOL {
        return Err(Error::Contract(format!(
            "{name} is not Hermitian (defect {defect:e})"
        )));
    }
    Ok(())
}

// Eigenvalues below `n · 1e-15 · λ_max` are rounding noise; their square
// roots would otherwise inflate the root fidelity by ~1e-8.
fn noise_floor(values: &[f64]) -> f64 {
    let top = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    values.len() as f64 * 1e-15 * top
}

fn sqrt_psd(m: &ComplexMatrix) -> ComplexMatrix {
    let floor = noise_floor(&linalg::hermitian_eigenvalues(m));
    linalg::hermitian_map(m, |v| if v > floor { v.sqrt() } else { 0.0 })
}

fn root_fidelity(sqrt_rho: &ComplexMatrix, sigma: &ComplexMatrix) -> f64 {
    let inner = sqrt_rho * sigma * sqrt_rho;
    let values = linalg::hermitian_eigenvalues(&inner);
    let floor = noise_floor(&values);
    values.iter().filter(|v| **v > floor).map(|v| v.sqrt()).sum()
}

/// Uhlmann fidelity `F(ρ, σ) = (tr √(√ρ σ √ρ))²`.
pub fn fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    fidelity_matrices(rho.matrix(), sigma.matrix())
}

pub fn fidelity_matrices(rho: &ComplexMatrix, sigma: &ComplexMatrix) -> Result<f64> {
    require_hermitian(rho, "rho")?;
    require_hermitian(sigma, "sigma")?;
    if rho.shape() != sigma.shape() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            rho.shape(),
            sigma.shape()
        )));
    }
    let f = root_fidelity(&sqrt_psd(rho), sigma);
    Ok(f * f)
}

/// Fidelity against a fixed reference, with `√ρ` computed once.
///
/// Rank-one references use `F = ⟨ψ|σ|ψ⟩`, which is the same quantity.
#[derive(Clone, Debug)]
pub struct FidelityProbe {
    sqrt_reference: ComplexMatrix,
    pure: Option<nalgebra::DVector<crate::C64>>,
}

impl FidelityProbe {
    pub fn new(reference: &DensityMatrix) -> Self {
        let (values, vectors) = linalg::hermitian_eig(reference.matrix());
        let n = values.len();
        let pure = (values[n - 1] > 1.0 - 1e-12).then(|| vectors.column(n - 1).into_owned());
        Self {
            sqrt_reference: sqrt_psd(reference.matrix()),
            pure,
        }
    }

    pub fn fidelity(&self, sigma: &ComplexMatrix) -> f64 {
        match &self.pure {
            Some(psi) => (psi.adjoint() * sigma * psi)[(0, 0)].re,
            None => {
                let f = root_fidelity(&self.sqrt_reference, sigma);
                f * f
            }
        }
    }
}

/// `Σᵢ dᵢ log tr{ρ Oᵢ}`, predictions floored at `1e-300`.
pub fn log_likelihood(rho: &DensityMatrix, d: &[f64], ms: &MeasurementSet) -> Result<f64> {
    if d.len() != ms.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} data values for {} operators",
            d.len(),
            ms.len()
        )));
    }
    let predicted = ms.predict(rho.matrix());
    Ok(log_likelihood_from_predictions(d, &predicted))
}

pub fn log_likelihood_from_predictions(d: &[f64], predicted: &[f64]) -> f64 {
    d.iter()
        .zip(predicted)
        .filter(|(di, _)| **di != 0.0)
        .map(|(di, p)| di * p.max(PREDICTION_FLOOR).ln())
        .sum()
}

/// `½ Σ |eig(ρ − σ)|`.
pub fn trace_distance(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    if rho.dim() != sigma.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {}",
            rho.dim(),
            sigma.dim()
        )));
    }
    let diff = rho.matrix() - sigma.matrix();
    Ok(0.5 * linalg::hermitian_eigenvalues(&diff).iter().map(|v| v.abs()).sum::<f64>())
}

/// `tr{ρ²}`.
pub fn purity(rho: &DensityMatrix) -> f64 {
    rho.matrix().iter().map(|z| z.norm_sqr()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{coherent_state, fock_state, random_density, StateSpec};
    use crate::measure::{generalized_q_ops, husimi_ops, simulate_data, DisplacementSet};
    use crate::C64;
    use proptest::prelude::*;

    fn pure(n: usize, dim: usize) -> DensityMatrix {
        DensityMatrix::from_ket(&fock_state(n, dim).unwrap())
    }

    #[test]
    fn fidelity_basics() {
        let rho = random_density(6, 3, 1).unwrap();
        assert!((fidelity(&rho, &rho).unwrap() - 1.0).abs() < 1e-9);
        assert!(fidelity(&pure(0, 4), &pure(1, 4)).unwrap().abs() < 1e-12);
        let coh = DensityMatrix::from_ket(&coherent_state(C64::new(1.0, 0.0), 32));
        let f = fidelity(&pure(0, 32), &coh).unwrap();
        assert!((f - (-1f64).exp()).abs() < 1e-6);
        assert!((f - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn fidelity_rejects_non_hermitian() {
        let mut m = ComplexMatrix::identity(2, 2);
        m[(0, 1)] = C64::new(0.3, 0.0);
        let rho = pure(0, 2);
        assert!(matches!(
            fidelity_matrices(&m, rho.matrix()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn probe_matches_direct_fidelity() {
        let target = StateSpec::cat(C64::new(1.5, 0.0), 2, 12).build().unwrap();
        let mixed = random_density(12, 4, 3).unwrap();
        let sigma = random_density(12, 12, 9).unwrap();
        for reference in [&target, &mixed] {
            let probe = FidelityProbe::new(reference);
            let direct = fidelity(reference, &sigma).unwrap();
            assert!((probe.fidelity(sigma.matrix()) - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn purity_and_trace_distance() {
        let rho = random_density(5, 2, 4).unwrap();
        assert!(trace_distance(&rho, &rho).unwrap().abs() < 1e-12);
        assert!((purity(&pure(2, 5)) - 1.0).abs() < 1e-15);
        assert!((purity(&DensityMatrix::maximally_mixed(5)) - 0.2).abs() < 1e-15);
        assert!((trace_distance(&pure(0, 3), &pure(1, 3)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn likelihood_substitution_and_zero_frequencies() {
        let ms = generalized_q_ops(DisplacementSet::disk(1.0, 4, 2).unwrap(), vec![0, 1], 8)
            .unwrap();
        let rho = random_density(8, 8, 5).unwrap();
        let p = simulate_data(&rho, &ms).unwrap().values;
        let ll = log_likelihood(&rho, &p, &ms).unwrap();
        let expected: f64 = p.iter().map(|v| v * v.ln()).sum();
        assert!((ll - expected).abs() < 1e-12);

        let mut d = p.clone();
        d[3] = 0.0;
        let without = log_likelihood(&rho, &d, &ms).unwrap();
        let manual: f64 = d
            .iter()
            .zip(&p)
            .filter(|(di, _)| **di != 0.0)
            .map(|(di, pi)| di * pi.ln())
            .sum();
        assert!((without - manual).abs() < 1e-12);
    }

    #[test]
    fn likelihood_argmax_matches_grid_search() {
        // Family ρ(t) = (1−t)|0⟩⟨0| + t|1⟩⟨1|; data from t* = 0.3.
        let ms = husimi_ops(DisplacementSet::square_grid(2.0, 5, 5).unwrap(), 6).unwrap();
        let family = |t: f64| {
            let mut m = ComplexMatrix::zeros(6, 6);
            m[(0, 0)] = C64::new(1.0 - t, 0.0);
            m[(1, 1)] = C64::new(t, 0.0);
            DensityMatrix::new(m).unwrap()
        };
        let d = simulate_data(&family(0.3), &ms).unwrap().values;
        // Brute-force oracle: evaluate the closed-form likelihood directly.
        let oracle = |t: f64| -> f64 {
            ms.displacements()
                .points()
                .iter()
                .zip(&d)
                .map(|(b, di)| {
                    let w = (-b.norm_sqr()).exp() / std::f64::consts::PI;
                    di * ((1.0 - t) * w + t * w * b.norm_sqr()).ln()
                })
                .sum()
        };
        let grid: Vec<f64> = (1..100).map(|k| k as f64 / 100.0).collect();
        let best_oracle = grid
            .iter()
            .copied()
            .max_by(|a, b| oracle(*a).total_cmp(&oracle(*b)))
            .unwrap();
        let best = grid
            .iter()
            .copied()
            .max_by(|a, b| {
                let la = log_likelihood(&family(*a), &d, &ms).unwrap();
                let lb = log_likelihood(&family(*b), &d, &ms).unwrap();
                la.total_cmp(&lb)
            })
            .unwrap();
        assert_eq!(best, best_oracle);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn fidelity_symmetry_and_fuchs_van_de_graaf(
            dim in 2usize..7, r1 in 1usize..7, r2 in 1usize..7, s1 in 0u64..1000, s2 in 0u64..1000
        ) {
            let rho = random_density(dim, r1.min(dim), s1).unwrap();
            let sigma = random_density(dim, r2.min(dim), s2 + 1000).unwrap();
            let f = fidelity(&rho, &sigma).unwrap();
            let g = fidelity(&sigma, &rho).unwrap();
            prop_assert!((f - g).abs() < 1e-9);
            prop_assert!((-1e-12..=1.0 + 1e-9).contains(&f));
            let t = trace_distance(&rho, &sigma).unwrap();
            prop_assert!(1.0 - f.sqrt() <= t + 1e-9);
            prop_assert!(t <= (1.0 - f).max(0.0).sqrt() + 1e-9);
        }

        #[test]
        fn pure_fidelity_shortcut(dim in 2usize..8, s in 0u64..1000) {
            let psi = random_density(dim, 1, s).unwrap();
            let sigma = random_density(dim, dim, s + 7).unwrap();
            let (vals, vecs) = linalg::hermitian_eig(psi.matrix());
            prop_assert!((vals[dim - 1] - 1.0).abs() < 1e-10);
            let v = vecs.column(dim - 1).into_owned();
            let overlap = (v.adjoint() * sigma.matrix() * &v)[(0, 0)].re;
            prop_assert!((fidelity(&psi, &sigma).unwrap() - overlap).abs() < 1e-9);
        }
    }
}
