//! Truncated SVD of centred point sets through a symmetric eigenproblem on
//! the smaller side.

use nalgebra::SymmetricEigen;

use super::{col, column_mean, columns, gram, AffineSubspace, LinalgError, Matrix, Vector};

/// Singular values at or below this fraction of the largest are treated as
/// zero when building the left basis.
const RANK_TOL: f64 = 1e-10;

/// Result of [`truncated_svd`].
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    pub subspace: AffineSubspace,
    pub singular_values: Vector,
    /// `n × k`. Columns for zero singular values are eigenvectors of the
    /// centred Gram matrix when `n ≤ d` and zero otherwise.
    pub right_vectors: Matrix,
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order (stable on ties).
pub fn sym_eigen_desc(m: Matrix) -> (Vec<f64>, Matrix) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, j| eig.eigenvectors[(r, order[j])]);
    (values, vectors)
}

fn validate(points: &Matrix, rank: usize) -> Result<(), LinalgError> {
    let max = points.nrows().min(points.ncols());
    if rank == 0 || rank > max {
        return Err(LinalgError::InvalidRank { rank, max });
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    Ok(())
}

/// Best rank-`rank` affine approximation of the columns of `points`.
///
/// The mean is the column average. The basis comes from the centred Gram
/// matrix when `n ≤ d` and from the covariance otherwise; directions with
/// vanishing singular value are completed deterministically from canonical
/// vectors. Each basis vector is oriented so its largest-magnitude entry is
/// positive.
pub fn truncated_svd(points: &Matrix, rank: usize) -> Result<TruncatedSvd, LinalgError> {
    validate(points, rank)?;
    let (d, n) = points.shape();
    let mean = column_mean(points);

    let mut basis = Matrix::zeros(d, rank);
    let mut right = Matrix::zeros(n, rank);
    let mut sv = Vector::zeros(rank);

    if n <= d {
        let k = gram(&columns(points), Some(mean.as_slice()));
        let (values, vectors) = sym_eigen_desc(k);
        let top = values[0].max(0.0).sqrt();
        for j in 0..rank {
            let s = values[j].max(0.0).sqrt();
            sv[j] = s;
            right.set_column(j, &vectors.column(j));
            if s > RANK_TOL * top && s > 0.0 {
                let mut u = Vector::zeros(d);
                for i in 0..n {
                    let w = vectors[(i, j)];
                    for ((o, x), m) in u.iter_mut().zip(col(points, i)).zip(mean.iter()) {
                        *o += w * (x - m);
                    }
                }
                basis.set_column(j, &(u / s));
            }
        }
    } else {
        let centered = Matrix::from_fn(d, n, |r, c| points[(r, c)] - mean[r]);
        let cov = &centered * centered.transpose();
        let (values, vectors) = sym_eigen_desc(cov);
        let top = values[0].max(0.0).sqrt();
        for j in 0..rank {
            let s = values[j].max(0.0).sqrt();
            sv[j] = s;
            if s > RANK_TOL * top && s > 0.0 {
                let u = vectors.column(j).into_owned();
                right.set_column(j, &(centered.transpose() * &u / s));
                basis.set_column(j, &u);
            }
        }
    }

    orthonormalize(&mut basis);
    for j in 0..rank {
        let (idx, _) = basis
            .column(j)
            .iter()
            .enumerate()
            .fold((0, -1.0), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
        if basis[(idx, j)] < 0.0 {
            basis.column_mut(j).neg_mut();
            right.column_mut(j).neg_mut();
        }
    }

    Ok(TruncatedSvd {
        subspace: AffineSubspace::from_parts(basis, mean),
        singular_values: sv,
        right_vectors: right,
    })
}

/// Modified Gram–Schmidt over the non-zero columns, then completion of the
/// zero columns from `e_0, e_1, …`.
fn orthonormalize(basis: &mut Matrix) {
    let (d, k) = basis.shape();
    let mut done: Vec<Option<Vector>> = Vec::with_capacity(k);
    for j in 0..k {
        let v = orthogonalize(basis.column(j).into_owned(), &done);
        done.push(v);
    }
    let mut canon = 0;
    for j in 0..k {
        while done[j].is_none() && canon < d {
            let mut e = Vector::zeros(d);
            e[canon] = 1.0;
            canon += 1;
            done[j] = orthogonalize(e, &done);
        }
        let v = done[j].as_ref().expect("k ≤ d leaves a canonical vector to complete with");
        basis.set_column(j, v);
    }
}

fn orthogonalize(mut v: Vector, against: &[Option<Vector>]) -> Option<Vector> {
    let before = v.norm();
    if before == 0.0 {
        return None;
    }
    for g in against.iter().flatten() {
        let p = g.dot(&v);
        v.axpy(-p, g, 1.0);
    }
    let norm = v.norm();
    (norm > 0.5 * before).then(|| v / norm)
}

/// `σ_k` (1-based) of the centred columns of `points`.
pub fn kth_singular_value(points: &Matrix, k: usize) -> Result<f64, LinalgError> {
    validate(points, k)?;
    let (d, n) = points.shape();
    let mean = column_mean(points);
    let values = if n <= d {
        sym_eigen_desc(gram(&columns(points), Some(mean.as_slice()))).0
    } else {
        let centered = Matrix::from_fn(d, n, |r, c| points[(r, c)] - mean[r]);
        sym_eigen_desc(&centered * centered.transpose()).0
    };
    Ok(values[k - 1].max(0.0).sqrt())
}
