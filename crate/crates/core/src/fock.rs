//! Truncated Fock-space algebra: ladder operators, displacement unitaries
//! and the ground-truth state factory.
//!
//! All operators live in an `N`-dimensional truncation of the oscillator
//! Hilbert space spanned by `|0⟩ … |N−1⟩`. Displacements are exponentiated
//! at a padded working dimension `N + pad` and then cut back to `N × N`,
//! which keeps the low-photon block accurate.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, ComplexMatrix, C64, ONE, ZERO};
use crate::{Error, Result};

/// Hilbert-space truncation used throughout the benchmarks.
pub const DEFAULT_DIM: usize = 32;

/// Default padding for a truncation `dim`.
pub fn default_pad(dim: usize) -> usize {
    dim / 2
}

const NORM_TOL: f64 = 1e-10;

/// Normalized pure state in the truncated Fock basis.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    amplitudes: DVector<C64>,
}

impl StateVector {
    /// Normalizes `amplitudes`; fails if the vector is (numerically) zero.
    pub fn from_amplitudes(amplitudes: DVector<C64>) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::InvalidDimension("empty state vector".into()));
        }
        if amplitudes.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NumericFailure("non-finite amplitude".into()));
        }
        let norm = amplitudes.norm();
        if norm < NORM_TOL {
            return Err(Error::DegenerateState(format!(
                "superposition norm {norm:e} vanishes"
            )));
        }
        Ok(Self {
            amplitudes: amplitudes.unscale(norm),
        })
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amplitudes
    }

    pub fn amplitude(&self, n: usize) -> C64 {
        self.amplitudes[n]
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &StateVector) -> C64 {
        self.amplitudes.dotc(&other.amplitudes)
    }

    /// `⟨ψ|a†a|ψ⟩`.
    pub fn mean_photon_number(&self) -> f64 {
        self.amplitudes
            .iter()
            .enumerate()
            .map(|(n, z)| n as f64 * z.norm_sqr())
            .sum()
    }
}

/// Hermitian, positive semidefinite, unit-trace `N × N` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    matrix: ComplexMatrix,
}

impl DensityMatrix {
    pub const HERMITIAN_TOL: f64 = 1e-10;
    pub const EIGEN_TOL: f64 = 1e-10;
    pub const TRACE_TOL: f64 = 1e-10;

    /// Wraps `matrix` after checking every density-matrix invariant.
    pub fn new(matrix: ComplexMatrix) -> Result<Self> {
        let rho = Self { matrix };
        rho.validate()?;
        Ok(rho)
    }

    /// Symmetrizes and trace-normalizes a matrix that is PSD by construction
    /// (e.g. `T†T` or `X ρ X†`). Only finiteness and the trace are checked.
    pub fn from_psd(matrix: &ComplexMatrix) -> Result<Self> {
        if !linalg::all_finite(matrix) {
            return Err(Error::NumericFailure("non-finite density matrix entry".into()));
        }
        let herm = linalg::hermitize(matrix);
        let tr = linalg::trace(&herm).re;
        if !(tr > 0.0) || !tr.is_finite() {
            return Err(Error::DegenerateState(format!("trace {tr:e} is not positive")));
        }
        Ok(Self {
            matrix: herm.unscale(tr),
        })
    }

    pub fn from_ket(psi: &StateVector) -> Self {
        let m = linalg::outer(psi.amplitudes(), psi.amplitudes());
        Self {
            matrix: linalg::hermitize(&m),
        }
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            matrix: ComplexMatrix::identity(dim, dim).unscale(dim as f64),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.matrix
    }

    pub fn trace(&self) -> f64 {
        linalg::trace(&self.matrix).re
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        linalg::hermitian_eigenvalues(&self.matrix)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.matrix;
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::InvalidDimension(format!(
                "density matrix must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if !linalg::all_finite(m) {
            return Err(Error::NumericFailure("non-finite density matrix entry".into()));
        }
        let defect = linalg::hermiticity_defect(m);
        if defect > Self::HERMITIAN_TOL {
            return Err(Error::HermiticityViolation(format!(
                "hermiticity defect {defect:e}"
            )));
        }
        let tr = linalg::trace(m);
        if (tr.re - 1.0).abs() > Self::TRACE_TOL || tr.im.abs() > Self::TRACE_TOL {
            return Err(Error::Contract(format!("trace {tr} differs from 1")));
        }
        let min = self.eigenvalues().first().copied().unwrap_or(0.0);
        if min < -Self::EIGEN_TOL {
            return Err(Error::Contract(format!("negative eigenvalue {min:e}")));
        }
        Ok(())
    }
}

/// Row-major nested arrays of `[re, im]` pairs.
impl Serialize for DensityMatrix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let n = self.dim();
        let rows: Vec<Vec<[f64; 2]>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| [self.matrix[(i, j)].re, self.matrix[(i, j)].im])
                    .collect()
            })
            .collect();
        rows.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DensityMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<[f64; 2]>>::deserialize(deserializer)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("density matrix rows are not square"));
        }
        let m = ComplexMatrix::from_fn(n, n, |i, j| C64::new(rows[i][j][0], rows[i][j][1]));
        DensityMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

/// Recipe for a ground-truth state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateKind {
    Fock {
        n: usize,
    },
    Coherent {
        alpha: C64,
    },
    /// `Σ_k e^{iφ_k} |α e^{2πik/m}⟩` with `m = heads`. An empty phase list
    /// means `φ_k = 0`.
    Cat {
        alpha: C64,
        heads: usize,
        #[serde(default)]
        phases: Vec<f64>,
    },
    Random {
        rank: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    #[serde(flatten)]
    pub kind: StateKind,
    pub dim: usize,
}

impl StateSpec {
    pub fn new(kind: StateKind, dim: usize) -> Self {
        Self { kind, dim }
    }

    pub fn cat(alpha: C64, heads: usize, dim: usize) -> Self {
        Self::new(
            StateKind::Cat {
                alpha,
                heads,
                phases: Vec::new(),
            },
            dim,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidDimension(format!("dim {} < 2", self.dim)));
        }
        match &self.kind {
            StateKind::Fock { n } if *n >= self.dim => Err(Error::OutOfRange(format!(
                "Fock level {n} outside dimension {}",
                self.dim
            ))),
            StateKind::Cat { heads, phases, .. } => {
                if !(1..=6).contains(heads) {
                    return Err(Error::OutOfRange(format!("{heads} heads outside 1..=6")));
                }
                if !phases.is_empty() && phases.len() != *heads {
                    return Err(Error::OutOfRange(format!(
                        "{} phases given for {heads} heads",
                        phases.len()
                    )));
                }
                Ok(())
            }
            StateKind::Random { rank, .. } if *rank < 1 || *rank > self.dim => Err(
                Error::OutOfRange(format!("rank {rank} outside 1..={}", self.dim)),
            ),
            _ => Ok(()),
        }
    }

    /// Builds the density matrix described by this recipe.
    pub fn build(&self) -> Result<DensityMatrix> {
        self.validate()?;
        match &self.kind {
            StateKind::Fock { n } => Ok(DensityMatrix::from_ket(&fock_state(*n, self.dim)?)),
            StateKind::Coherent { alpha } => {
                Ok(DensityMatrix::from_ket(&coherent_state(*alpha, self.dim)))
            }
            StateKind::Cat { .. } => Ok(DensityMatrix::from_ket(&cat_state(self)?)),
            StateKind::Random { rank, seed } => random_density(self.dim, *rank, *seed),
        }
    }

    /// Pure-state recipes return their ket; random mixtures return `None`.
    pub fn ket(&self) -> Result<Option<StateVector>> {
        self.validate()?;
        match &self.kind {
            StateKind::Fock { n } => fock_state(*n, self.dim).map(Some),
            StateKind::Coherent { alpha } => Ok(Some(coherent_state(*alpha, self.dim))),
            StateKind::Cat { .. } => cat_state(self).map(Some),
            StateKind::Random { .. } => Ok(None),
        }
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim < 2 {
        return Err(Error::InvalidDimension(format!("dim {dim} < 2")));
    }
    Ok(())
}

/// Truncated annihilation operator, `a[n−1, n] = √n`.
pub fn annihilation_op(dim: usize) -> Result<ComplexMatrix> {
    check_dim(dim)?;
    Ok(annihilation_unchecked(dim))
}

fn annihilation_unchecked(dim: usize) -> ComplexMatrix {
    let mut a = ComplexMatrix::zeros(dim, dim);
    for n in 1..dim {
        a[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    a
}

pub fn creation_op(dim: usize) -> Result<ComplexMatrix> {
    Ok(annihilation_op(dim)?.adjoint())
}

pub fn number_op(dim: usize) -> Result<ComplexMatrix> {
    check_dim(dim)?;
    Ok(ComplexMatrix::from_diagonal(&DVector::from_fn(dim, |n, _| {
        C64::new(n as f64, 0.0)
    })))
}

/// Parity `diag((−1)^n)`.
pub fn parity_op(dim: usize) -> ComplexMatrix {
    ComplexMatrix::from_diagonal(&DVector::from_fn(dim, |n, _| {
        if n % 2 == 0 {
            ONE
        } else {
            -ONE
        }
    }))
}

/// Reusable displacement-operator factory for one `(dim, pad)` pair.
///
/// Writing `β = r e^{iθ}`, `βa† − β*a = R(θ) r(a† − a) R(θ)†` with the
/// phase rotation `R(θ) = e^{iθ a†a}`. The Hermitian generator
/// `X = i(a† − a)` is diagonalized once, `X = V Λ V†`, and every displacement
/// follows as `D(β) = R(θ) V e^{−irΛ} V† R(θ)†` at the padded dimension.
#[derive(Clone, Debug)]
pub struct Displacer {
    dim: usize,
    pad: usize,
    eigenvalues: Vec<f64>,
    eigenvectors: ComplexMatrix,
}

impl Displacer {
    pub fn new(dim: usize, pad: usize) -> Result<Self> {
        check_dim(dim)?;
        let work = dim + pad;
        let a = annihilation_unchecked(work);
        let generator = (a.adjoint() - &a) * C64::new(0.0, 1.0);
        let (eigenvalues, eigenvectors) = linalg::hermitian_eig(&generator);
        Ok(Self {
            dim,
            pad,
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn with_default_pad(dim: usize) -> Result<Self> {
        Self::new(dim, default_pad(dim))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn working_dim(&self) -> usize {
        self.dim + self.pad
    }

    /// `R(θ)V`, restricted to the first `rows` rows, and the spectral phases.
    fn factors(&self, beta: C64, rows: usize) -> (ComplexMatrix, Vec<C64>) {
        let (r, theta) = beta.to_polar();
        let work = self.working_dim();
        let left = ComplexMatrix::from_fn(rows, work, |n, k| {
            C64::from_polar(1.0, theta * n as f64) * self.eigenvectors[(n, k)]
        });
        let phases = self
            .eigenvalues
            .iter()
            .map(|&lam| C64::from_polar(1.0, -r * lam))
            .collect();
        (left, phases)
    }

    /// Full `D(β)` at the padded working dimension (unitary to rounding).
    pub fn padded(&self, beta: C64) -> ComplexMatrix {
        self.block(beta, self.working_dim())
    }

    /// `D(β)` truncated to `dim × dim`.
    pub fn truncated(&self, beta: C64) -> ComplexMatrix {
        self.block(beta, self.dim)
    }

    fn block(&self, beta: C64, rows: usize) -> ComplexMatrix {
        let (left, phases) = self.factors(beta, rows);
        let mut scaled = left.clone();
        for (k, ph) in phases.iter().enumerate() {
            for i in 0..rows {
                scaled[(i, k)] *= ph;
            }
        }
        scaled * left.adjoint()
    }

    /// The first `dim` rows of the padded `D(β)`, all working columns.
    pub fn leading_rows(&self, beta: C64) -> ComplexMatrix {
        let (top, phases) = self.factors(beta, self.dim);
        let (full, _) = self.factors(beta, self.working_dim());
        let mut scaled = top;
        for (k, ph) in phases.iter().enumerate() {
            for i in 0..self.dim {
                scaled[(i, k)] *= ph;
            }
        }
        scaled * full.adjoint()
    }

    /// Column 0 of the truncated `D(β)`: the padded coherent state `|β⟩`
    /// cut to `dim` entries, not renormalized.
    pub fn displaced_vacuum(&self, beta: C64) -> DVector<C64> {
        self.displaced_fock(beta, 0)
    }

    /// Column `n` of the truncated `D(β)`.
    pub fn displaced_fock(&self, beta: C64, n: usize) -> DVector<C64> {
        let (left, phases) = self.factors(beta, self.dim);
        let mut out = DVector::from_element(self.dim, ZERO);
        for k in 0..self.working_dim() {
            let w = phases[k] * left[(n, k)].conj();
            for i in 0..self.dim {
                out[i] += left[(i, k)] * w;
            }
        }
        out
    }
}

/// `D(β)` for truncation `dim`, computed at dimension `dim + pad` and cut
/// back to `dim × dim`.
pub fn displacement_op(beta: C64, dim: usize, pad: usize) -> Result<ComplexMatrix> {
    Ok(Displacer::new(dim, pad)?.truncated(beta))
}

pub fn fock_state(n: usize, dim: usize) -> Result<StateVector> {
    if n >= dim {
        return Err(Error::OutOfRange(format!("Fock level {n} outside dimension {dim}")));
    }
    let mut amps = DVector::from_element(dim, ZERO);
    amps[n] = ONE;
    StateVector::from_amplitudes(amps)
}

/// Closed-form `e^{−|α|²/2} αⁿ/√(n!)` for `n < dim`, without renormalization.
pub fn coherent_amplitudes(alpha: C64, dim: usize) -> DVector<C64> {
    let mut amps = DVector::from_element(dim, ZERO);
    let mut c = C64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
    for n in 0..dim {
        if n > 0 {
            c = c * alpha / (n as f64).sqrt();
        }
        amps[n] = c;
    }
    amps
}

/// Coherent state renormalized after truncation.
pub fn coherent_state(alpha: C64, dim: usize) -> StateVector {
    if alpha.norm_sqr() > dim as f64 / 2.0 {
        log::warn!(
            "coherent amplitude |α|² = {:.3} exceeds half the truncation {dim}",
            alpha.norm_sqr()
        );
    }
    StateVector::from_amplitudes(coherent_amplitudes(alpha, dim))
        .expect("coherent amplitudes always have c_0 > 0")
}

/// Normalized superposition of `m` coherent states on a circle of radius `|α|`.
pub fn cat_state(spec: &StateSpec) -> Result<StateVector> {
    spec.validate()?;
    let StateKind::Cat {
        alpha,
        heads,
        phases,
    } = &spec.kind
    else {
        return Err(Error::Contract("cat_state needs a cat recipe".into()));
    };
    if alpha.norm_sqr() > spec.dim as f64 / 2.0 {
        log::warn!(
            "cat amplitude |α|² = {:.3} exceeds half the truncation {}",
            alpha.norm_sqr(),
            spec.dim
        );
    }
    let mut amps = DVector::from_element(spec.dim, ZERO);
    for k in 0..*heads {
        let rot = C64::from_polar(1.0, 2.0 * PI * k as f64 / *heads as f64);
        let weight = C64::from_polar(1.0, phases.get(k).copied().unwrap_or(0.0));
        amps += coherent_amplitudes(alpha * rot, spec.dim) * weight;
    }
    StateVector::from_amplitudes(amps)
}

/// Ginibre random state `G G† / tr{G G†}` with `G` of shape `dim × rank`.
pub fn random_density(dim: usize, rank: usize, seed: u64) -> Result<DensityMatrix> {
    check_dim(dim)?;
    if rank < 1 || rank > dim {
        return Err(Error::OutOfRange(format!("rank {rank} outside 1..={dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = ComplexMatrix::from_fn(dim, rank, |_, _| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        C64::new(re, im)
    });
    DensityMatrix::from_psd(&(&g * g.adjoint()))
}
