//! Dense symmetric and SPD matrix kernel.
//!
//! Everything here is value-in/value-out on small dense matrices (the joint
//! dimensions used by the policies stay in the low tens). Tolerances are
//! relative to the spectral scale of the matrix involved.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Default smallest admissible eigenvalue of an [`SpdMatrix`].
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Inverses are refused above this condition number.
pub const MAX_CONDITION: f64 = 1e12;

/// Slack allowed when checking an eigenvalue against a floor, in units of
/// machine epsilon times the spectral radius.
fn floor_slack(spectral_radius: f64) -> f64 {
    1e3 * f64::EPSILON * spectral_radius.max(1.0)
}

/// A square matrix that is exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    /// Symmetrizes `m` as `(m + mᵀ) / 2`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidInput(format!(
                "matrix is {}x{}, expected square",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidInput("matrix has dimension 0".into()));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("matrix has non-finite entries".into()));
        }
        Ok(Self(symmetrize(&m)))
    }

    pub fn from_row_slice(n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: data.len(),
            });
        }
        Self::new(DMatrix::from_row_slice(n, n, data))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// A symmetric matrix whose eigenvalues are all at least `floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    mat: DMatrix<f64>,
    floor: f64,
}

impl SpdMatrix {
    /// Validates the eigenvalue floor. Fails with [`Error::Degenerate`] when
    /// the smallest eigenvalue is below `floor`.
    pub fn new(m: SymmetricMatrix, floor: f64) -> Result<Self> {
        check_floor(floor)?;
        let eig = eigh(&m)?;
        let lo = eig.min();
        if lo < floor - floor_slack(eig.spectral_radius()) {
            return Err(Error::Degenerate(format!(
                "smallest eigenvalue {lo:.3e} is below floor {floor:.3e}"
            )));
        }
        Ok(Self { mat: m.0, floor })
    }

    pub fn from_matrix(m: DMatrix<f64>, floor: f64) -> Result<Self> {
        Self::new(SymmetricMatrix::new(m)?, floor)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mat: DMatrix::identity(n, n),
            floor: DEFAULT_FLOOR,
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(SymmetricMatrix::from_diagonal(diag)?, DEFAULT_FLOOR)
    }

    /// Caller guarantees symmetry and the floor; used on results whose
    /// spectrum has just been computed.
    fn from_parts(mat: DMatrix<f64>, floor: f64) -> Self {
        Self { mat, floor }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }

    pub fn to_symmetric(&self) -> SymmetricMatrix {
        SymmetricMatrix(self.mat.clone())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        eigh_matrix(&self.mat).min()
    }

    /// Whether every eigenvalue still clears the floor.
    pub fn satisfies_floor(&self) -> bool {
        let eig = eigh_matrix(&self.mat);
        eig.min() >= self.floor - floor_slack(eig.spectral_radius())
    }
}

impl AsRef<DMatrix<f64>> for SpdMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.mat
    }
}

impl AsRef<DMatrix<f64>> for SymmetricMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Eigenvalues in descending order with matching orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl EigenDecomposition {
    pub fn max(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    pub fn spectral_radius(&self) -> f64 {
        self.max().abs().max(self.min().abs())
    }

    /// Q·diag(f(λ))·Qᵀ, symmetrized.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let q = &self.eigenvectors;
        let mut scaled = q.clone();
        for (j, lambda) in self.eigenvalues.iter().enumerate() {
            let s = f(*lambda);
            scaled.column_mut(j).scale_mut(s);
        }
        symmetrize(&(scaled * q.transpose()))
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.reconstruct_with(|l| l)
    }
}

fn check_floor(floor: f64) -> Result<()> {
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "eigenvalue floor must be positive, got {floor}"
        )));
    }
    Ok(())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn eigh_matrix(m: &DMatrix<f64>) -> EigenDecomposition {
    let n = m.nrows();
    let raw = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| raw.eigenvalues[b].total_cmp(&raw.eigenvalues[a]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| raw.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &raw.eigenvectors.column(src));
    }
    EigenDecomposition {
        eigenvalues,
        eigenvectors,
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
pub fn eigh(m: &SymmetricMatrix) -> Result<EigenDecomposition> {
    if m.0.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    Ok(eigh_matrix(&m.0))
}

/// Principal square root.
pub fn spd_sqrt(m: &SpdMatrix) -> Result<SpdMatrix> {
    let eig = eigh_matrix(&m.mat);
    if eig.min() < m.floor - floor_slack(eig.spectral_radius()) {
        return Err(Error::Degenerate(format!(
            "eigenvalue {:.3e} below floor {:.3e}",
            eig.min(),
            m.floor
        )));
    }
    Ok(SpdMatrix::from_parts(
        eig.reconstruct_with(|l| l.max(0.0).sqrt()),
        m.floor,
    ))
}

/// Inverse; refuses matrices with condition number above [`MAX_CONDITION`].
pub fn spd_inverse(m: &SpdMatrix) -> Result<SpdMatrix> {
    let eig = eigh_matrix(&m.mat);
    let cond = condition_number(&eig);
    if cond > MAX_CONDITION {
        return Err(Error::IllConditioned(cond));
    }
    let inv_floor = m.floor.min(0.5 / eig.max());
    Ok(SpdMatrix::from_parts(eig.reconstruct_with(|l| 1.0 / l), inv_floor))
}

/// Inverse principal square root S^{-1/2}.
pub fn spd_inv_sqrt(m: &SpdMatrix) -> Result<SpdMatrix> {
    let eig = eigh_matrix(&m.mat);
    let cond = condition_number(&eig);
    if cond > MAX_CONDITION {
        return Err(Error::IllConditioned(cond));
    }
    let floor = m.floor.min(0.5 / eig.max().sqrt());
    Ok(SpdMatrix::from_parts(
        eig.reconstruct_with(|l| 1.0 / l.sqrt()),
        floor,
    ))
}

fn condition_number(eig: &EigenDecomposition) -> f64 {
    let lo = eig.min();
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        eig.max() / lo
    }
}

/// Frobenius-nearest matrix whose eigenvalues are all at least `floor`:
/// eigenvectors kept, eigenvalues replaced by `max(λ, floor)`. Inputs already
/// above the floor come back unchanged.
pub fn spd_project(m: &SymmetricMatrix, floor: f64) -> Result<SpdMatrix> {
    check_floor(floor)?;
    let eig = eigh(m)?;
    if eig.min() >= floor - floor_slack(eig.spectral_radius()) {
        return Ok(SpdMatrix::from_parts(m.0.clone(), floor));
    }
    Ok(SpdMatrix::from_parts(
        eig.reconstruct_with(|l| l.max(floor)),
        floor,
    ))
}

/// ‖a − b‖_F.
pub fn frobenius_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    Ok((a - b).norm())
}
