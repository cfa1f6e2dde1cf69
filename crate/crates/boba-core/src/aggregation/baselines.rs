//! Baseline rules: averaging, coordinate-wise statistics, Krum, geometric
//! median, FLTrust, loss-based rejection and bucketing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{argsort_ascending, AggregationError, AggregationInput, AggregationResult, Diagnostics, Rule};
use crate::linalg::{col, column_mean, columns, dot, pairwise_sq_distances, Matrix, Vector};

/// Plain column mean.
pub fn average(gradients: &Matrix) -> Vector {
    column_mean(gradients)
}

/// Applies `stat` to each coordinate's sorted values.
fn coordinatewise(gradients: &Matrix, stat: impl Fn(&[f64]) -> f64) -> Vector {
    let (d, n) = gradients.shape();
    let mut buf = vec![0.0; n];
    Vector::from_fn(d, |r, _| {
        for (j, b) in buf.iter_mut().enumerate() {
            *b = gradients[(r, j)];
        }
        buf.sort_unstable_by(f64::total_cmp);
        stat(&buf)
    })
}

/// Coordinate-wise median; an even count takes the midpoint of the two
/// central values.
pub fn coordinate_median(gradients: &Matrix) -> Vector {
    coordinatewise(gradients, |v| {
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    })
}

/// Coordinate-wise mean after dropping the `f` largest and `f` smallest
/// values.
pub fn trimmed_mean(gradients: &Matrix, f: usize) -> Result<Vector, AggregationError> {
    let n = gradients.ncols();
    if n <= 2 * f {
        return Err(AggregationError::TooFewClients { f, n, needed: 2 * f });
    }
    Ok(coordinatewise(gradients, |v| {
        let kept = &v[f..n - f];
        kept.iter().sum::<f64>() / kept.len() as f64
    }))
}

/// Krum score of each client: the sum of squared distances to its
/// `n − f − 2` nearest other clients.
pub fn krum_scores(gradients: &Matrix, f: usize) -> Result<Vec<f64>, AggregationError> {
    let n = gradients.ncols();
    if n < f + 3 {
        return Err(AggregationError::TooFewClients { f, n, needed: f + 2 });
    }
    let k = n - f - 2;
    let dist = pairwise_sq_distances(&columns(gradients));
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[(i, j)]).collect();
            row.sort_unstable_by(f64::total_cmp);
            row[..k].iter().sum()
        })
        .collect())
}

/// Krum (`multi = false`) returns the lowest-score gradient; Multi-Krum
/// averages the `n − f` lowest-score gradients.
pub fn krum(gradients: &Matrix, f: usize, multi: bool) -> Result<AggregationResult, AggregationError> {
    let n = gradients.ncols();
    let scores = krum_scores(gradients, f)?;
    let order = argsort_ascending(&scores);
    let m = if multi { n - f } else { 1 };
    let mut accepted = vec![false; n];
    let mut aggregate = Vector::zeros(gradients.nrows());
    for &i in &order[..m] {
        accepted[i] = true;
        for (o, x) in aggregate.iter_mut().zip(col(gradients, i)) {
            *o += x;
        }
    }
    aggregate /= m as f64;
    Ok(AggregationResult {
        aggregate,
        accepted,
        diagnostics: Diagnostics { scores: Some(scores), ..Default::default() },
    })
}

/// `Σ_i ‖g_i − y‖`.
pub fn geometric_median_objective(gradients: &Matrix, y: &[f64]) -> f64 {
    (0..gradients.ncols()).map(|i| crate::linalg::sq_dist(col(gradients, i), y).sqrt()).sum()
}

/// Weiszfeld iteration from the mean. Stops when a step is shorter than
/// `tol` or after `max_iter` steps and returns the best iterate seen. Input
/// points within 1e-12 of the iterate are left out of that step.
pub fn geometric_median(gradients: &Matrix, tol: f64, max_iter: usize) -> Vector {
    const GUARD: f64 = 1e-12;
    let n = gradients.ncols();
    let mut y = column_mean(gradients);
    let mut best = y.clone();
    let mut best_obj = geometric_median_objective(gradients, y.as_slice());
    for _ in 0..max_iter {
        let mut num = Vector::zeros(y.len());
        let mut den = 0.0;
        for i in 0..n {
            let g = col(gradients, i);
            let dist = crate::linalg::sq_dist(g, y.as_slice()).sqrt();
            if dist < GUARD {
                continue;
            }
            let w = 1.0 / dist;
            for (o, x) in num.iter_mut().zip(g) {
                *o += w * x;
            }
            den += w;
        }
        if den == 0.0 {
            break;
        }
        let next = num / den;
        let step = (&next - &y).norm();
        y = next;
        let obj = geometric_median_objective(gradients, y.as_slice());
        if obj < best_obj {
            best_obj = obj;
            best = y.clone();
        }
        if step < tol {
            break;
        }
    }
    // Weiszfeld converges slowly when the median is an input point, so test
    // the input closest to the best iterate directly.
    if let Some(i) = (0..n)
        .min_by(|&a, &b| {
            let da = crate::linalg::sq_dist(col(gradients, a), best.as_slice());
            let db = crate::linalg::sq_dist(col(gradients, b), best.as_slice());
            da.total_cmp(&db)
        })
    {
        let point = col(gradients, i);
        if geometric_median_objective(gradients, point) <= best_obj {
            best = Vector::from_column_slice(point);
        }
    }
    best
}

/// FLTrust: the server direction is the mean of the server class
/// gradients; each client is weighted by its clipped cosine to it and
/// rescaled to its norm. All-zero weights return the server direction.
pub fn fltrust(gradients: &Matrix, server: &Matrix) -> Result<AggregationResult, AggregationError> {
    let n = gradients.ncols();
    let gs = column_mean(server);
    let gs_norm = gs.norm();
    if gs_norm == 0.0 {
        return Err(AggregationError::ZeroServerNorm);
    }
    let mut weights = Vec::with_capacity(n);
    let mut aggregate = Vector::zeros(gradients.nrows());
    for i in 0..n {
        let g = col(gradients, i);
        let norm = dot(g, g).sqrt();
        let w = if norm > 0.0 { (dot(g, gs.as_slice()) / (norm * gs_norm)).max(0.0) } else { 0.0 };
        if w > 0.0 {
            let scale = w * gs_norm / norm;
            for (o, x) in aggregate.iter_mut().zip(g) {
                *o += scale * x;
            }
        }
        weights.push(w);
    }
    let total: f64 = weights.iter().sum();
    let aggregate = if total > 0.0 { aggregate / total } else { gs };
    Ok(AggregationResult {
        aggregate,
        accepted: weights.iter().map(|&w| w > 0.0).collect(),
        diagnostics: Diagnostics { scores: Some(weights), ..Default::default() },
    })
}

/// Evaluates server-side loss at candidate parameters.
pub struct LossProbe<'a> {
    /// Current global parameters `w_G`.
    pub params: &'a [f64],
    /// Step size `η` used to form candidate models `w_G − η g`.
    pub step: f64,
    /// Loss on server data at the given parameters.
    pub loss: &'a (dyn Fn(&[f64]) -> f64 + Sync),
}

impl LossProbe<'_> {
    fn loss_after(&self, g: &[f64]) -> f64 {
        let w: Vec<f64> = self.params.iter().zip(g).map(|(w, g)| w - self.step * g).collect();
        (self.loss)(&w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectionVariant {
    /// Keep the clients whose own step `w_G − η g_i` has the lowest loss.
    SelfLoss,
    /// Keep the clients whose inclusion lowers the loss of the averaged step
    /// the most.
    AverageLoss,
}

/// Loss-based rejection; keeps `n − f` clients and averages them.
pub fn loss_rejection(
    gradients: &Matrix,
    f: usize,
    variant: RejectionVariant,
    probe: &LossProbe<'_>,
) -> Result<AggregationResult, AggregationError> {
    let (d, n) = gradients.shape();
    if f >= n {
        return Err(AggregationError::TooFewClients { f, n, needed: f });
    }
    // Lower rank key = better.
    let keys: Vec<f64> = match variant {
        RejectionVariant::SelfLoss => (0..n).map(|i| probe.loss_after(col(gradients, i))).collect(),
        RejectionVariant::AverageLoss => {
            let full = column_mean(gradients);
            let base = probe.loss_after(full.as_slice());
            let sum = full * n as f64;
            (0..n)
                .map(|i| {
                    if n == 1 {
                        return 0.0;
                    }
                    let without: Vec<f64> =
                        sum.iter().zip(col(gradients, i)).map(|(s, g)| (s - g) / (n - 1) as f64).collect();
                    // Reduction gained by including client i; larger is better.
                    let gain = probe.loss_after(&without) - base;
                    -gain
                })
                .collect()
        }
    };
    let order = argsort_ascending(&keys);
    let mut accepted = vec![false; n];
    let mut aggregate = Vector::zeros(d);
    for &i in &order[..n - f] {
        accepted[i] = true;
        for (o, x) in aggregate.iter_mut().zip(col(gradients, i)) {
            *o += x;
        }
    }
    aggregate /= (n - f) as f64;
    Ok(AggregationResult { aggregate, accepted, diagnostics: Diagnostics { scores: Some(keys), ..Default::default() } })
}

/// Seeded random bucketing: clients are permuted, grouped into buckets of
/// `size`, averaged per bucket, and the bucket means go to `inner` with the
/// same `f`. `size = 1` calls `inner` on the input unchanged.
pub fn bucketing(
    input: &AggregationInput<'_>,
    size: usize,
    inner: &Rule,
    seed: u64,
    probe: Option<&LossProbe<'_>>,
) -> Result<AggregationResult, AggregationError> {
    if size == 0 {
        return Err(AggregationError::InvalidParameter("bucket size must be ≥ 1".into()));
    }
    if size == 1 {
        return inner.aggregate(input, probe);
    }
    let (d, n) = input.gradients.shape();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let buckets: Vec<&[usize]> = perm.chunks(size).collect();
    let mut means = Matrix::zeros(d, buckets.len());
    for (b, members) in buckets.iter().enumerate() {
        let mut m = Vector::zeros(d);
        for &i in *members {
            for (o, x) in m.iter_mut().zip(col(input.gradients, i)) {
                *o += x;
            }
        }
        means.set_column(b, &(m / members.len() as f64));
    }
    let bucket_input = AggregationInput { gradients: &means, ..*input };
    let res = inner.aggregate(&bucket_input, probe)?;
    let mut accepted = vec![false; n];
    for (b, members) in buckets.iter().enumerate() {
        for &i in *members {
            accepted[i] = res.accepted[b];
        }
    }
    Ok(AggregationResult { aggregate: res.aggregate, accepted, diagnostics: res.diagnostics })
}
