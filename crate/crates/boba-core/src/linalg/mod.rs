//! Dense kernels: truncated SVD, affine subspaces and the sum-to-one
//! coordinate solve.
//!
//! Matrices are `nalgebra` column-major `DMatrix<f64>`; a gradient set is a
//! `d × n` matrix with one client per column.

mod gram;
mod svd;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use gram::{gram, pairwise_sq_distances};
pub use svd::{kth_singular_value, sym_eigen_desc, truncated_svd, TruncatedSvd};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Below this reciprocal condition number the server simplex is degenerate.
pub const MIN_RCOND: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("rank {rank} is outside 1..={max}")]
    InvalidRank { rank: usize, max: usize },
    #[error("input contains non-finite entries")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("basis is not column-orthonormal (max deviation {deviation:.3e})")]
    NotOrthonormal { deviation: f64 },
    #[error("server simplex is degenerate (reciprocal condition {rcond:.3e})")]
    DegenerateSimplex { rcond: f64 },
}

/// Column `j` of a column-major matrix as a slice.
pub fn col(m: &Matrix, j: usize) -> &[f64] {
    let r = m.nrows();
    &m.as_slice()[j * r..(j + 1) * r]
}

/// All columns of `m` as slices.
pub fn columns(m: &Matrix) -> Vec<&[f64]> {
    (0..m.ncols()).map(|j| col(m, j)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean of the columns, summed in column order.
pub fn column_mean(m: &Matrix) -> Vector {
    let mut out = Vector::zeros(m.nrows());
    for j in 0..m.ncols() {
        for (o, x) in out.iter_mut().zip(col(m, j)) {
            *o += x;
        }
    }
    if m.ncols() > 0 {
        out /= m.ncols() as f64;
    }
    out
}

fn check_len(expected: usize, found: usize) -> Result<(), LinalgError> {
    if expected == found {
        Ok(())
    } else {
        Err(LinalgError::DimensionMismatch { expected, found })
    }
}

/// `{U λ + m}` with column-orthonormal `U`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineSubspace {
    basis: Matrix,
    mean: Vector,
}

impl AffineSubspace {
    /// Validates shapes and orthonormality (`UᵀU = I` within 1e-8).
    pub fn new(basis: Matrix, mean: Vector) -> Result<Self, LinalgError> {
        check_len(basis.nrows(), mean.len())?;
        if basis.iter().chain(mean.iter()).any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        let deviation = orthonormality_deviation(&basis);
        if deviation > 1e-8 {
            return Err(LinalgError::NotOrthonormal { deviation });
        }
        Ok(Self { basis, mean })
    }

    pub(crate) fn from_parts(basis: Matrix, mean: Vector) -> Self {
        Self { basis, mean }
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    /// Ambient dimension `d`.
    pub fn ambient_dim(&self) -> usize {
        self.mean.len()
    }

    /// Number of basis directions.
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// `Uᵀ(g − m)`.
    pub fn encode(&self, g: &[f64]) -> Result<Vector, LinalgError> {
        check_len(self.ambient_dim(), g.len())?;
        let centered: Vec<f64> = g.iter().zip(self.mean.iter()).map(|(a, b)| a - b).collect();
        Ok(Vector::from_fn(self.rank(), |j, _| dot(col(&self.basis, j), &centered)))
    }

    /// `U λ + m`.
    pub fn decode(&self, lambda: &[f64]) -> Result<Vector, LinalgError> {
        check_len(self.rank(), lambda.len())?;
        let mut out = self.mean.clone();
        for (j, l) in lambda.iter().enumerate() {
            for (o, u) in out.iter_mut().zip(col(&self.basis, j)) {
                *o += l * u;
            }
        }
        Ok(out)
    }

    /// Nearest point of the subspace to `g`.
    pub fn project(&self, g: &[f64]) -> Result<Vector, LinalgError> {
        let lambda = self.encode(g)?;
        self.decode(lambda.as_slice())
    }

    /// `‖g − Π(g)‖²`.
    pub fn residual_sq(&self, g: &[f64]) -> Result<f64, LinalgError> {
        let p = self.project(g)?;
        Ok(sq_dist(g, p.as_slice()))
    }

    /// Orthogonal projector `U Uᵀ`; the basis-independent identity of the
    /// direction space, used to compare subspaces.
    pub fn projector(&self) -> Matrix {
        &self.basis * self.basis.transpose()
    }
}

/// Max entrywise deviation of `UᵀU` from the identity.
pub fn orthonormality_deviation(basis: &Matrix) -> f64 {
    let gram = basis.transpose() * basis;
    let k = gram.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// Factorised `[Γ̃; 1ᵀ]` for repeated stage-two solves.
#[derive(Clone, Debug)]
pub struct SimplexCoordinates {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    rcond: f64,
}

impl SimplexCoordinates {
    /// `encoded_vertices` is `(c−1) × c`: one encoded server gradient per
    /// column. Fails with [`LinalgError::DegenerateSimplex`] when the stacked
    /// system is singular or its reciprocal condition is below [`MIN_RCOND`].
    pub fn new(encoded_vertices: &Matrix) -> Result<Self, LinalgError> {
        let (k, c) = encoded_vertices.shape();
        if k + 1 > c {
            return Err(LinalgError::DimensionMismatch { expected: c - 1, found: k });
        }
        if k + 1 < c {
            return Err(LinalgError::DegenerateSimplex { rcond: 0.0 });
        }
        if encoded_vertices.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        let mut stacked = Matrix::from_element(c, c, 1.0);
        stacked.view_mut((0, 0), (k, c)).copy_from(encoded_vertices);
        let sv = stacked.clone().singular_values();
        let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        let rcond = if hi > 0.0 { lo / hi } else { 0.0 };
        if !(rcond >= MIN_RCOND) {
            return Err(LinalgError::DegenerateSimplex { rcond });
        }
        Ok(Self { lu: stacked.lu(), rcond })
    }

    pub fn rcond(&self) -> f64 {
        self.rcond
    }

    /// Barycentric coordinates of an encoded gradient.
    pub fn solve(&self, encoded_g: &[f64]) -> Result<Vector, LinalgError> {
        let c = self.lu.l().nrows();
        check_len(c - 1, encoded_g.len())?;
        let mut rhs = Vector::from_element(c, 1.0);
        rhs.rows_mut(0, c - 1).copy_from_slice(encoded_g);
        self.lu.solve(&rhs).ok_or(LinalgError::DegenerateSimplex { rcond: 0.0 })
    }
}

/// Solves `[Γ̃; 1ᵀ] p = [g̃; 1]` once.
pub fn solve_affine_coordinates(
    encoded_vertices: &Matrix,
    encoded_g: &[f64],
) -> Result<Vector, LinalgError> {
    SimplexCoordinates::new(encoded_vertices)?.solve(encoded_g)
}
