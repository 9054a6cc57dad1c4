//! Displace-and-measure observables.
//!
//! Every observable is a Hermitian operator `Oᵢ` on the truncated space, and
//! the ideal statistic for a state `ρ` is `Re tr{Oᵢ ρ}`:
//!
//! * Husimi Q: `(1/π) |β⟩⟨β|`
//! * Wigner: `(2/π) D(β) P D(β)†` with parity `P = diag((−1)ⁿ)`
//! * generalized Q: `D(β) |n⟩⟨n| D(β)†` for each requested `n`
//!
//! All three come from the same padded `D(β)` (see [`Displacer`]) and are
//! compressed to the first `N` levels. The Wigner parity runs over every
//! padded level, so it equals the parity-weighted sum of generalized-Q
//! operators for all `n < N + pad`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fock::{default_pad, DensityMatrix, Displacer};
use crate::linalg::{self, ComplexMatrix, C64, ZERO};
use crate::{Error, Result};

/// How a displacement set was generated; also its storage recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "origin", rename_all = "snake_case")]
pub enum DisplacementRecipe {
    /// `nx × ny` grid with `|Re β|, |Im β| ≤ extent`, endpoints included.
    SquareGrid { extent: f64, nx: usize, ny: usize },
    /// `count` points uniform in area inside `|β| ≤ radius`.
    Disk { radius: f64, count: usize, seed: u64 },
    Explicit { points: Vec<C64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementSet {
    recipe: DisplacementRecipe,
    points: Vec<C64>,
}

fn linspace(extent: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.0];
    }
    (0..count)
        .map(|i| -extent + 2.0 * extent * i as f64 / (count - 1) as f64)
        .collect()
}

impl DisplacementSet {
    /// Grid points ordered with the imaginary part as the slow index.
    pub fn square_grid(extent: f64, nx: usize, ny: usize) -> Result<Self> {
        Self::from_recipe(DisplacementRecipe::SquareGrid { extent, nx, ny })
    }

    pub fn disk(radius: f64, count: usize, seed: u64) -> Result<Self> {
        Self::from_recipe(DisplacementRecipe::Disk {
            radius,
            count,
            seed,
        })
    }

    pub fn explicit(points: Vec<C64>) -> Result<Self> {
        Self::from_recipe(DisplacementRecipe::Explicit { points })
    }

    pub fn from_recipe(recipe: DisplacementRecipe) -> Result<Self> {
        let points = match &recipe {
            DisplacementRecipe::SquareGrid { extent, nx, ny } => {
                if !extent.is_finite() || *extent < 0.0 {
                    return Err(Error::OutOfRange(format!("grid extent {extent}")));
                }
                let xs = linspace(*extent, *nx);
                let ys = linspace(*extent, *ny);
                ys.iter()
                    .flat_map(|&y| xs.iter().map(move |&x| C64::new(x, y)))
                    .collect()
            }
            DisplacementRecipe::Disk {
                radius,
                count,
                seed,
            } => {
                if !radius.is_finite() || *radius < 0.0 {
                    return Err(Error::OutOfRange(format!("disk radius {radius}")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..*count)
                    .map(|_| {
                        let r = radius * rng.random::<f64>().sqrt();
                        let theta = 2.0 * PI * rng.random::<f64>();
                        C64::from_polar(r, theta)
                    })
                    .collect()
            }
            DisplacementRecipe::Explicit { points } => points.clone(),
        };
        if points.is_empty() {
            return Err(Error::OutOfRange("displacement set is empty".into()));
        }
        if points.iter().any(|b| !b.re.is_finite() || !b.im.is_finite()) {
            return Err(Error::NumericFailure("non-finite displacement".into()));
        }
        Ok(Self { recipe, points })
    }

    pub fn points(&self) -> &[C64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn recipe(&self) -> &DisplacementRecipe {
        &self.recipe
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MeasurementKind {
    Husimi,
    Wigner,
    GeneralizedQ { ns: Vec<usize> },
}

impl MeasurementKind {
    pub fn operators_per_point(&self) -> usize {
        match self {
            MeasurementKind::GeneralizedQ { ns } => ns.len(),
            _ => 1,
        }
    }

    /// Affine map from an ideal statistic to an outcome probability,
    /// `p = scale · value + offset`.
    pub fn probability_map(&self) -> (f64, f64) {
        match self {
            MeasurementKind::Husimi => (PI, 0.0),
            MeasurementKind::Wigner => (PI / 4.0, 0.5),
            MeasurementKind::GeneralizedQ { .. } => (1.0, 0.0),
        }
    }
}

/// Everything needed to rebuild a [`MeasurementSet`] deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecipe {
    pub kind: MeasurementKind,
    pub dim: usize,
    pub pad: usize,
    pub displacements: DisplacementRecipe,
}

impl MeasurementRecipe {
    /// Number of operators the recipe builds, without building them.
    pub fn operator_count(&self) -> usize {
        let points = match &self.displacements {
            DisplacementRecipe::SquareGrid { nx, ny, .. } => nx * ny,
            DisplacementRecipe::Disk { count, .. } => *count,
            DisplacementRecipe::Explicit { points } => points.len(),
        };
        points * self.kind.operators_per_point()
    }
}

/// Immutable, ordered set of Hermitian observables with the real matrix
/// used by the differentiable expectation layer precomputed.
#[derive(Debug)]
pub struct MeasurementSet {
    kind: MeasurementKind,
    dim: usize,
    pad: usize,
    displacements: DisplacementSet,
    operators: Vec<ComplexMatrix>,
    /// Row-major `M × 2N²`; row `i` holds `[vec(Re Oᵢᵀ), −vec(Im Oᵢᵀ)]`
    /// so that its dot product with `[vec(Re ρ), vec(Im ρ)]` is `Re tr{Oᵢ ρ}`.
    real_rows: Arc<Vec<f64>>,
    /// Row-major `M × N²`: the same map restricted to Hermitian `ρ`, acting
    /// on the entries selected by [`hermitian_pack_index`].
    compact_rows: Arc<Vec<f64>>,
}

/// Positions in `[vec(Re ρ), vec(Im ρ)]` (row-major) of the `N²` real
/// numbers that determine a Hermitian `ρ`: the diagonal, then `Re ρ[i, j]`
/// for `i < j` in row-major order, then `Im ρ[i, j]` in the same order.
pub fn hermitian_pack_index(dim: usize) -> Vec<usize> {
    let n2 = dim * dim;
    let pairs: Vec<usize> = (0..dim)
        .flat_map(|i| (i + 1..dim).map(move |j| i * dim + j))
        .collect();
    let mut index: Vec<usize> = (0..dim).map(|i| i * dim + i).collect();
    index.extend(&pairs);
    index.extend(pairs.iter().map(|p| n2 + p));
    index
}

fn compact(full: &[f64], dim: usize) -> Vec<f64> {
    let n2 = dim * dim;
    let mut out = Vec::with_capacity(full.len() / 2);
    for row in full.chunks_exact(2 * n2) {
        out.extend((0..dim).map(|i| row[i * dim + i]));
        for i in 0..dim {
            for j in i + 1..dim {
                out.push(row[i * dim + j] + row[j * dim + i]);
            }
        }
        for i in 0..dim {
            for j in i + 1..dim {
                out.push(row[n2 + i * dim + j] - row[n2 + j * dim + i]);
            }
        }
    }
    out
}

impl MeasurementSet {
    fn build(
        kind: MeasurementKind,
        displacements: DisplacementSet,
        dim: usize,
        pad: usize,
    ) -> Result<Self> {
        let disp = Displacer::new(dim, pad)?;
        if let MeasurementKind::GeneralizedQ { ns } = &kind {
            if ns.is_empty() {
                return Err(Error::OutOfRange("empty Fock-level list".into()));
            }
            if let Some(&bad) = ns.iter().find(|&&n| n >= dim) {
                return Err(Error::OutOfRange(format!(
                    "Fock level {bad} outside dimension {dim}"
                )));
            }
        }
        let per_point: Vec<Vec<ComplexMatrix>> = displacements
            .points()
            .par_iter()
            .map(|&beta| match &kind {
                MeasurementKind::Husimi => {
                    let v = disp.displaced_vacuum(beta);
                    vec![linalg::outer(&v, &v).unscale(PI)]
                }
                MeasurementKind::Wigner => {
                    let d = disp.leading_rows(beta);
                    let mut op = ComplexMatrix::zeros(dim, dim);
                    for n in 0..disp.working_dim() {
                        let col = d.column(n);
                        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                        op += (col * col.adjoint()) * C64::new(sign, 0.0);
                    }
                    vec![linalg::hermitize(&op) * C64::new(2.0 / PI, 0.0)]
                }
                MeasurementKind::GeneralizedQ { ns } => {
                    let d = disp.truncated(beta);
                    ns.iter()
                        .map(|&n| {
                            let col: DVector<C64> = d.column(n).into_owned();
                            linalg::outer(&col, &col)
                        })
                        .collect()
                }
            })
            .collect();
        let operators: Vec<ComplexMatrix> = per_point.into_iter().flatten().collect();
        let n2 = dim * dim;
        let mut real_rows = vec![0.0; operators.len() * 2 * n2];
        for (i, op) in operators.iter().enumerate() {
            let row = &mut real_rows[i * 2 * n2..(i + 1) * 2 * n2];
            for k in 0..dim {
                for j in 0..dim {
                    // coefficient of ρ[k, j]
                    let o = op[(j, k)];
                    row[k * dim + j] = o.re;
                    row[n2 + k * dim + j] = -o.im;
                }
            }
        }
        Ok(Self {
            kind,
            dim,
            pad,
            displacements,
            operators,
            compact_rows: Arc::new(compact(&real_rows, dim)),
            real_rows: Arc::new(real_rows),
        })
    }

    pub fn from_recipe(recipe: &MeasurementRecipe) -> Result<Self> {
        let ds = DisplacementSet::from_recipe(recipe.displacements.clone())?;
        Self::build(recipe.kind.clone(), ds, recipe.dim, recipe.pad)
    }

    pub fn recipe(&self) -> MeasurementRecipe {
        MeasurementRecipe {
            kind: self.kind.clone(),
            dim: self.dim,
            pad: self.pad,
            displacements: self.displacements.recipe().clone(),
        }
    }

    pub fn kind(&self) -> &MeasurementKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn displacements(&self) -> &DisplacementSet {
        &self.displacements
    }

    pub fn operators(&self) -> &[ComplexMatrix] {
        &self.operators
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    /// Row-major `M × 2N²` real expectation matrix (see field docs).
    pub fn real_expectation_rows(&self) -> &[f64] {
        &self.real_rows
    }

    /// Row-major `M × N²` expectation matrix for Hermitian arguments.
    pub fn compact_expectation_rows(&self) -> &[f64] {
        &self.compact_rows
    }

    pub fn compact_expectation_rows_shared(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.compact_rows)
    }

    /// Shared handle to the full rows, for use as a constant on a tape.
    pub fn real_expectation_rows_shared(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.real_rows)
    }

    /// `G = Σᵢ Oᵢ`.
    pub fn operator_sum(&self) -> ComplexMatrix {
        let mut g = ComplexMatrix::zeros(self.dim, self.dim);
        for op in &self.operators {
            g += op;
        }
        g
    }

    /// Expected statistics `Re tr{Oᵢ ρ}` through the real expectation rows.
    pub fn predict(&self, rho: &ComplexMatrix) -> Vec<f64> {
        let packed = pack_real(rho);
        self.real_rows
            .chunks_exact(packed.len())
            .map(|row| row.iter().zip(&packed).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Σᵢ wᵢ Oᵢ` for real weights.
    pub fn weighted_sum(&self, weights: &[f64]) -> ComplexMatrix {
        let n2 = self.dim * self.dim;
        let mut acc = vec![0.0; 2 * n2];
        for (w, row) in weights.iter().zip(self.real_rows.chunks_exact(2 * n2)) {
            if *w == 0.0 {
                continue;
            }
            for (a, r) in acc.iter_mut().zip(row) {
                *a += w * r;
            }
        }
        // acc holds Σ w Re(Oᵀ) and −Σ w Im(Oᵀ), both row-major.
        ComplexMatrix::from_fn(self.dim, self.dim, |j, k| {
            C64::new(acc[k * self.dim + j], -acc[n2 + k * self.dim + j])
        })
    }
}

/// `[vec(Re ρ), vec(Im ρ)]`, row-major.
pub(crate) fn pack_real(rho: &ComplexMatrix) -> Vec<f64> {
    let n = rho.nrows();
    let mut out = vec![0.0; 2 * n * n];
    for k in 0..n {
        for j in 0..n {
            out[k * n + j] = rho[(k, j)].re;
            out[n * n + k * n + j] = rho[(k, j)].im;
        }
    }
    out
}

pub fn husimi_ops(ds: DisplacementSet, dim: usize) -> Result<MeasurementSet> {
    MeasurementSet::build(MeasurementKind::Husimi, ds, dim, default_pad(dim))
}

pub fn wigner_ops(ds: DisplacementSet, dim: usize) -> Result<MeasurementSet> {
    MeasurementSet::build(MeasurementKind::Wigner, ds, dim, default_pad(dim))
}

pub fn generalized_q_ops(ds: DisplacementSet, ns: Vec<usize>, dim: usize) -> Result<MeasurementSet> {
    MeasurementSet::build(MeasurementKind::GeneralizedQ { ns }, ds, dim, default_pad(dim))
}

pub fn measurement_set(
    kind: MeasurementKind,
    ds: DisplacementSet,
    dim: usize,
    pad: usize,
) -> Result<MeasurementSet> {
    MeasurementSet::build(kind, ds, dim, pad)
}

/// Shared handle used by reconstructors that keep a set alive.
pub type SharedMeasurementSet = Arc<MeasurementSet>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Binomial,
    Gaussian { sigma: f64 },
}

/// Measurement statistics, one value per operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataVector {
    pub values: Vec<f64>,
    pub shots: Option<u64>,
    pub noise: NoiseKind,
}

impl DataVector {
    pub fn ideal(values: Vec<f64>) -> Self {
        Self {
            values,
            shots: None,
            noise: NoiseKind::None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Checks the physical range of the statistics for `kind`.
    pub fn check_bounds(&self, kind: &MeasurementKind, tol: f64) -> Result<()> {
        let (lo, hi) = match kind {
            MeasurementKind::Husimi => (0.0, 1.0 / PI),
            MeasurementKind::Wigner => (-2.0 / PI, 2.0 / PI),
            MeasurementKind::GeneralizedQ { .. } => (0.0, 1.0),
        };
        match self.values.iter().find(|&&v| v < lo - tol || v > hi + tol) {
            Some(v) => Err(Error::InvalidProbability(format!(
                "value {v} outside [{lo}, {hi}]"
            ))),
            None => Ok(()),
        }
    }
}

const IMAG_TOL: f64 = 1e-9;

/// Ideal statistics `Re tr{Oᵢ ρ}` evaluated operator by operator.
pub fn simulate_data(rho: &DensityMatrix, ms: &MeasurementSet) -> Result<DataVector> {
    if rho.dim() != ms.dim() {
        return Err(Error::DimensionMismatch(format!(
            "state dimension {} vs measurement dimension {}",
            rho.dim(),
            ms.dim()
        )));
    }
    let mut values = Vec::with_capacity(ms.len());
    for (i, op) in ms.operators().iter().enumerate() {
        let t = linalg::trace_of_product(op, rho.matrix());
        if t.im.abs() > IMAG_TOL {
            return Err(Error::HermiticityViolation(format!(
                "operator {i}: imaginary expectation {:e}",
                t.im
            )));
        }
        values.push(t.re);
    }
    Ok(DataVector::ideal(values))
}

const PROBABILITY_MARGIN: f64 = 1e-6;

/// Resamples `d` as if each point were estimated from `shots` repetitions.
pub fn add_shot_noise(
    d: &DataVector,
    kind: &MeasurementKind,
    shots: u64,
    noise: &NoiseKind,
    seed: u64,
) -> Result<DataVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = match noise {
        NoiseKind::None => d.values.clone(),
        NoiseKind::Gaussian { sigma } => {
            let normal = Normal::new(0.0, *sigma)
                .map_err(|e| Error::OutOfRange(format!("gaussian sigma {sigma}: {e}")))?;
            d.values.iter().map(|v| v + normal.sample(&mut rng)).collect()
        }
        NoiseKind::Binomial => {
            if shots == 0 {
                return Err(Error::OutOfRange("binomial noise needs shots > 0".into()));
            }
            let (scale, offset) = kind.probability_map();
            let mut out = Vec::with_capacity(d.len());
            for v in &d.values {
                let p = scale * v + offset;
                if !(-PROBABILITY_MARGIN..=1.0 + PROBABILITY_MARGIN).contains(&p) {
                    return Err(Error::InvalidProbability(format!(
                        "statistic {v} maps to probability {p}"
                    )));
                }
                let p = p.clamp(0.0, 1.0);
                let draw = Binomial::new(shots, p)
                    .map_err(|e| Error::InvalidProbability(e.to_string()))?
                    .sample(&mut rng);
                out.push((draw as f64 / shots as f64 - offset) / scale);
            }
            out
        }
    };
    Ok(DataVector {
        values,
        shots: Some(shots),
        noise: noise.clone(),
    })
}

/// `M × N²` complex sensing matrix; row `i` is the row-major flattening of
/// `Oᵢᵀ`, so that `A · vec(ρ) = tr{Oᵢ ρ}`.
pub fn sensing_matrix(ms: &MeasurementSet) -> ComplexMatrix {
    let n = ms.dim();
    let mut a = ComplexMatrix::from_element(ms.len(), n * n, ZERO);
    for (i, op) in ms.operators().iter().enumerate() {
        for k in 0..n {
            for j in 0..n {
                a[(i, k * n + j)] = op[(j, k)];
            }
        }
    }
    a
}

/// Row-major flattening of a square matrix.
pub fn flatten(m: &ComplexMatrix) -> DVector<C64> {
    let n = m.nrows();
    DVector::from_fn(n * m.ncols(), |idx, _| m[(idx / m.ncols(), idx % m.ncols())])
}

/// Numerical rank from singular values above `rel_tol · σ_max`.
pub fn numerical_rank(a: &ComplexMatrix, rel_tol: f64) -> usize {
    let sv = a.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}
