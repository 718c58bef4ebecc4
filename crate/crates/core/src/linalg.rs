//! Dense symmetric linear algebra used throughout the crate.
//!
//! Every Gramian here is symmetric positive semi-definite with a ridge floor,
//! so the only decompositions needed are the symmetric eigendecomposition and
//! Cholesky. Eigenvectors inside a repeated eigenvalue are an arbitrary
//! orthonormal basis of that eigenspace; callers must not rely on which one.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;

/// Relative convergence tolerance of the symmetric QR iteration.
const EIGEN_TOL: f64 = 1e-12;

/// An exactly symmetric, finite square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMat(DMatrix<f64>);

impl SymMat {
    /// Wraps `m`, rejecting non-square, non-finite or asymmetric input.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::contract(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("matrix has non-finite entries"));
        }
        let n = m.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if m[(i, j)] != m[(j, i)] {
                    return Err(Error::contract(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(SymMat(m))
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        SymMat(DMatrix::identity(dim, dim) * scale)
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMat(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// In-place `self += z zᵀ`. Symmetry is exact since `z_i z_j == z_j z_i`.
    pub(crate) fn add_outer(&mut self, z: &Vector) {
        let d = self.dim();
        for j in 0..d {
            let zj = z[j];
            for i in 0..d {
                self.0[(i, j)] += z[i] * zj;
            }
        }
    }
}

/// One eigenvalue with its unit-norm eigenvector.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vector,
}

/// Full eigendecomposition with eigenvalues in ascending order.
pub fn eigen_sorted(m: &SymMat) -> Result<Vec<EigenPair>> {
    let d = m.dim();
    let eig = SymmetricEigen::try_new(m.0.clone(), EIGEN_TOL, 100 * d.max(1)).ok_or_else(|| {
        Error::NumericalRank(format!("symmetric eigensolver did not converge (d = {d})"))
    })?;
    let mut pairs: Vec<EigenPair> = (0..d)
        .map(|i| EigenPair {
            value: eig.eigenvalues[i],
            vector: canonical_sign(eig.eigenvectors.column(i).into_owned()),
        })
        .collect();
    pairs.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(pairs)
}

/// Ascending eigenvalues only.
pub fn eigenvalues_sorted(m: &SymMat) -> Result<Vec<f64>> {
    Ok(eigen_sorted(m)?.into_iter().map(|p| p.value).collect())
}

pub fn min_eigen(m: &SymMat) -> Result<EigenPair> {
    Ok(eigen_sorted(m)?.swap_remove(0))
}

pub fn min_eigenvalue(m: &SymMat) -> Result<f64> {
    Ok(min_eigen(m)?.value)
}

/// Flips `v` so that its first clearly nonzero coordinate is positive.
pub(crate) fn canonical_sign(mut v: Vector) -> Vector {
    if let Some(first) = v.iter().copied().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.neg_mut();
        }
    }
    v
}

/// Cholesky factor of an SPD matrix, reused for repeated `M⁻¹` quadratic forms.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    /// Factors `m`. A failed factorization is retried once with a
    /// `1e-10 · trace / d` diagonal jitter before reporting a rank error.
    pub fn new(m: &SymMat) -> Result<Self> {
        if let Some(chol) = Cholesky::new(m.0.clone()) {
            return Ok(SpdFactor { chol });
        }
        let d = m.dim() as f64;
        let jitter = 1e-10 * m.trace().abs() / d;
        let mut shifted = m.0.clone();
        for i in 0..m.dim() {
            shifted[(i, i)] += jitter;
        }
        Cholesky::new(shifted)
            .map(|chol| SpdFactor { chol })
            .ok_or_else(|| Error::NumericalRank("matrix is not positive definite".into()))
    }

    /// `vᵀ M⁻¹ v` via one triangular solve.
    pub fn inv_quad(&self, v: &Vector) -> f64 {
        let l = self.chol.l_dirty();
        let n = v.len();
        // forward substitution on the lower-triangular factor
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = v[i];
            for (k, yk) in y.iter().enumerate().take(i) {
                s -= l[(i, k)] * yk;
            }
            y[i] = s / l[(i, i)];
        }
        y.iter().map(|x| x * x).sum()
    }

    pub fn solve(&self, v: &Vector) -> Vector {
        self.chol.solve(v)
    }
}

/// `‖v‖_{M⁻¹} = √(vᵀ M⁻¹ v)` for SPD `M`.
pub fn maha_norm(v: &Vector, m: &SymMat) -> Result<f64> {
    check_dims(v.len(), m.dim())?;
    Ok(SpdFactor::new(m)?.inv_quad(v).max(0.0).sqrt())
}

/// `M + z zᵀ`.
pub fn rank_one_update(m: &SymMat, z: &Vector) -> Result<SymMat> {
    check_dims(z.len(), m.dim())?;
    let mut out = m.clone();
    out.add_outer(z);
    Ok(out)
}

/// Smallest `d*` in `1..=d` such that `λ_{d*+1}(M) − λ_min(M) ≥ ⌈n / d*⌉`,
/// with `λ_{d+1} = +∞` so the scan always terminates at `d`.
pub fn imbalance_index(m: &SymMat, n: usize) -> Result<usize> {
    let eig = eigenvalues_sorted(m)?;
    Ok(imbalance_index_from_spectrum(&eig, n))
}

pub(crate) fn imbalance_index_from_spectrum(ascending: &[f64], n: usize) -> usize {
    let d = ascending.len();
    for k in 1..d {
        let need = n.div_ceil(k) as f64;
        if ascending[k] - ascending[0] >= need {
            return k;
        }
    }
    d
}

fn check_dims(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::contract(format!(
            "dimension mismatch: vector has {got} entries, matrix is {want}x{want}"
        )));
    }
    Ok(())
}
