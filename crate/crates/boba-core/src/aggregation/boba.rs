//! Two-stage subspace aggregator.
//!
//! Stage one fits a (c−1)-dimensional affine subspace to the n−f gradients
//! with the smallest residuals, either by alternating between selection and
//! refitting or by exhaustive search over selections. Stage two expresses
//! every client in barycentric coordinates of the encoded server class
//! gradients, rejects clients whose smallest coordinate falls below
//! `p_min`, and averages the encoded survivors.
//!
//! All fits work on the Gram matrix of `[G | Γ]`: a subspace is held as
//! coefficient vectors over those columns (`m = X a`, `U = X B`), so the only
//! pass over the d-dimensional data is one Gram product plus the final
//! reconstruction of the aggregate.

use super::{argsort_ascending, AggregationError, AggregationInput, AggregationResult, Diagnostics};
use crate::subsets::{binomial, next_combination};
use crate::linalg::{
    col, columns, gram, sym_eigen_desc, AffineSubspace, LinalgError, Matrix, SimplexCoordinates,
    Vector,
};

/// Largest number of selections the exhaustive search will enumerate.
pub const DEFAULT_ES_CAP: u128 = 200_000;

/// Eigen-directions of a fit with `λ ≤ EIG_REL_TOL · λ₁` carry no spread and
/// are dropped.
const EIG_REL_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct BobaParams {
    /// Rejection threshold on the smallest estimated class proportion; ≤ 0.
    pub p_min: f64,
    /// Cap on subspace refits in the alternating optimisation.
    pub max_alternations: usize,
}

impl Default for BobaParams {
    fn default() -> Self {
        Self { p_min: -0.5, max_alternations: 50 }
    }
}

impl BobaParams {
    fn validate(&self) -> Result<(), AggregationError> {
        if !(self.p_min <= 0.0) {
            return Err(AggregationError::InvalidParameter(format!("p_min must be ≤ 0, got {}", self.p_min)));
        }
        if self.max_alternations == 0 {
            return Err(AggregationError::InvalidParameter("max_alternations must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitMode {
    Alternating,
    Exhaustive { cap: u128 },
}

/// Explicit stage-one result.
#[derive(Clone, Debug)]
pub struct SubspaceFit {
    pub subspace: AffineSubspace,
    /// The n−f clients closest to the subspace.
    pub selection: Vec<bool>,
    pub trimmed_loss: f64,
    /// Truncated-SVD fits performed, including the server initialisation.
    pub trsvd_calls: usize,
    /// Trimmed loss of every subspace visited, in order.
    pub loss_trace: Vec<f64>,
}

/// Sum of the `n − f` smallest squared residuals under `subspace`, with the
/// selecting mask (ties broken by lower index).
pub fn trimmed_reconstruction_loss(
    subspace: &AffineSubspace,
    gradients: &Matrix,
    f: usize,
) -> Result<(f64, Vec<bool>), AggregationError> {
    let n = gradients.ncols();
    if f >= n {
        return Err(AggregationError::TooFewClients { f, n, needed: f });
    }
    let residuals = (0..n)
        .map(|i| subspace.residual_sq(col(gradients, i)))
        .collect::<Result<Vec<_>, LinalgError>>()?;
    Ok(trim(&residuals, n - f))
}

fn trim(residuals: &[f64], keep: usize) -> (f64, Vec<bool>) {
    let order = argsort_ascending(residuals);
    let mut mask = vec![false; residuals.len()];
    let mut loss = 0.0;
    for &i in &order[..keep] {
        mask[i] = true;
        loss += residuals[i];
    }
    (loss, mask)
}

/// Columns `[G | Γ]` and their Gram matrix, shifted by the server mean.
struct KernelData<'a> {
    cols: Vec<&'a [f64]>,
    n: usize,
    k: Matrix,
}

/// A subspace over the columns of [`KernelData`]: mean `X a`, basis `X B`.
struct KernelSubspace {
    weights: Vector,
    coeffs: Matrix,
    /// `Bᵀ K`, one encoded column per data column before centring.
    projected: Matrix,
    /// `Bᵀ K a`.
    center: Vector,
    /// `K a`.
    ka: Vector,
    /// `aᵀ K a`.
    aka: f64,
}

impl<'a> KernelData<'a> {
    fn new(gradients: &'a Matrix, server: Option<&'a Matrix>) -> Self {
        let mut cols = columns(gradients);
        let shift_src = server.unwrap_or(gradients);
        let shift = crate::linalg::column_mean(shift_src);
        if let Some(s) = server {
            cols.extend(columns(s));
        }
        let k = gram(&cols, Some(shift.as_slice()));
        Self { cols, n: gradients.ncols(), k }
    }

    /// Rank-`rank` affine fit to the columns in `subset` (sorted indices).
    fn fit(&self, subset: &[usize], rank: usize) -> KernelSubspace {
        let total = self.cols.len();
        let s = subset.len();
        let inv = 1.0 / s as f64;
        let row_means: Vec<f64> = subset
            .iter()
            .map(|&a| subset.iter().map(|&b| self.k[(a, b)]).sum::<f64>() * inv)
            .collect();
        let grand = row_means.iter().sum::<f64>() * inv;
        let centred = Matrix::from_fn(s, s, |i, j| {
            self.k[(subset[i], subset[j])] - row_means[i] - row_means[j] + grand
        });
        let trace: f64 = (0..s).map(|i| self.k[(subset[i], subset[i])]).sum();
        let (values, vectors) = sym_eigen_desc(centred);
        let floor = (EIG_REL_TOL * values[0]).max(64.0 * f64::EPSILON * trace.abs());
        let kept: Vec<usize> = (0..rank.min(s)).filter(|&j| values[j] > floor).collect();

        let mut weights = Vector::zeros(total);
        for &a in subset {
            weights[a] = inv;
        }
        let mut coeffs = Matrix::zeros(total, kept.len());
        for (c, &j) in kept.iter().enumerate() {
            let v = vectors.column(j);
            let mean = v.sum() * inv;
            let scale = 1.0 / values[j].sqrt();
            for (i, &a) in subset.iter().enumerate() {
                coeffs[(a, c)] = (v[i] - mean) * scale;
            }
        }
        let mut projected = Matrix::zeros(kept.len(), total);
        for c in 0..kept.len() {
            for &a in subset {
                let w = coeffs[(a, c)];
                for t in 0..total {
                    projected[(c, t)] += w * self.k[(a, t)];
                }
            }
        }
        let mut ka = Vector::zeros(total);
        for &a in subset {
            for t in 0..total {
                ka[t] += inv * self.k[(a, t)];
            }
        }
        let aka = subset.iter().map(|&a| ka[a]).sum::<f64>() * inv;
        let center = Vector::from_fn(kept.len(), |c, _| subset.iter().map(|&a| projected[(c, a)]).sum::<f64>() * inv);
        KernelSubspace { weights, coeffs, projected, center, ka, aka }
    }
}

impl KernelSubspace {
    fn residual_sq(&self, kd: &KernelData<'_>, i: usize) -> f64 {
        let dist = kd.k[(i, i)] - 2.0 * self.ka[i] + self.aka;
        let along: f64 = (0..self.center.len())
            .map(|c| {
                let e = self.projected[(c, i)] - self.center[c];
                e * e
            })
            .sum();
        (dist - along).max(0.0)
    }

    fn encode(&self, i: usize) -> Vector {
        Vector::from_fn(self.center.len(), |c, _| self.projected[(c, i)] - self.center[c])
    }

    /// Trimmed loss and selection over the client columns.
    fn trimmed(&self, kd: &KernelData<'_>, keep: usize) -> (f64, Vec<bool>) {
        let residuals: Vec<f64> = (0..kd.n).map(|i| self.residual_sq(kd, i)).collect();
        trim(&residuals, keep)
    }

    /// `Σ_t coef_t x_t` over the raw (unshifted) data columns.
    fn combine(kd: &KernelData<'_>, coef: &Vector) -> Vector {
        let d = kd.cols.first().map_or(0, |c| c.len());
        let mut out = Vector::zeros(d);
        for (t, c) in kd.cols.iter().enumerate() {
            let w = coef[t];
            if w != 0.0 {
                for (o, x) in out.iter_mut().zip(c.iter()) {
                    *o += w * x;
                }
            }
        }
        out
    }

    fn materialize(&self, kd: &KernelData<'_>) -> AffineSubspace {
        let mean = Self::combine(kd, &self.weights);
        let d = mean.len();
        let mut basis = Matrix::zeros(d, self.coeffs.ncols());
        for c in 0..self.coeffs.ncols() {
            basis.set_column(c, &Self::combine(kd, &self.coeffs.column(c).into_owned()));
        }
        AffineSubspace::from_parts(basis, mean)
    }
}

fn mask_to_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect()
}

struct KernelFit {
    subspace: KernelSubspace,
    selection: Vec<bool>,
    loss: f64,
    fits: usize,
    trace: Vec<f64>,
}

fn check_stage_one(input: &AggregationInput<'_>) -> Result<usize, AggregationError> {
    input.require_nonempty()?;
    let n = input.n();
    if input.f >= n {
        return Err(AggregationError::TooFewClients { f: input.f, n, needed: input.f });
    }
    if input.classes < 2 {
        return Err(AggregationError::InvalidParameter("at least two classes are required".into()));
    }
    let rank = input.classes - 1;
    if n - input.f < rank {
        return Err(AggregationError::CannotSpan { kept: n - input.f, rank });
    }
    Ok(rank)
}

fn alternating(kd: &KernelData<'_>, f: usize, rank: usize, max_alternations: usize) -> KernelFit {
    let keep = kd.n - f;
    let server: Vec<usize> = (kd.n..kd.cols.len()).collect();
    let mut sub = kd.fit(&server, rank);
    let mut fits = 1;
    let mut history: Vec<Vec<bool>> = Vec::new();
    let mut trace = Vec::new();
    loop {
        let (loss, selection) = sub.trimmed(kd, keep);
        trace.push(loss);
        if history.contains(&selection) || history.len() == max_alternations {
            return KernelFit { subspace: sub, selection, loss, fits, trace };
        }
        sub = kd.fit(&mask_to_indices(&selection), rank);
        fits += 1;
        history.push(selection);
    }
}

fn exhaustive(kd: &KernelData<'_>, f: usize, rank: usize, cap: u128) -> Result<KernelFit, AggregationError> {
    let n = kd.n;
    let keep = n - f;
    let count = binomial(n, keep);
    if count > cap {
        return Err(AggregationError::SearchCapExceeded { count, cap });
    }
    let mut subset: Vec<usize> = (0..keep).collect();
    let mut best: Option<KernelFit> = None;
    let mut fits = 0;
    let mut trace = Vec::new();
    loop {
        let sub = kd.fit(&subset, rank);
        fits += 1;
        let (loss, selection) = sub.trimmed(kd, keep);
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            trace.push(loss);
            best = Some(KernelFit { subspace: sub, selection, loss, fits: 0, trace: Vec::new() });
        }
        if !next_combination(&mut subset, n) {
            break;
        }
    }
    let mut best = best.expect("at least one subset is enumerated");
    best.fits = fits;
    best.trace = trace;
    Ok(best)
}

fn run_stage_one(
    kd: &KernelData<'_>,
    input: &AggregationInput<'_>,
    rank: usize,
    params: &BobaParams,
    mode: FitMode,
) -> Result<KernelFit, AggregationError> {
    match mode {
        FitMode::Alternating => Ok(alternating(kd, input.f, rank, params.max_alternations)),
        FitMode::Exhaustive { cap } => exhaustive(kd, input.f, rank, cap),
    }
}

/// Stage one by alternating optimisation, initialised from the server
/// class gradients. Stops when a selection repeats or after
/// `params.max_alternations` refits.
pub fn fit_subspace_alternating(
    input: &AggregationInput<'_>,
    params: &BobaParams,
) -> Result<SubspaceFit, AggregationError> {
    params.validate()?;
    let rank = check_stage_one(input)?;
    let server = input.require_server("subspace initialisation")?;
    let kd = KernelData::new(input.gradients, Some(server));
    let fit = alternating(&kd, input.f, rank, params.max_alternations);
    Ok(explicit(&kd, fit))
}

/// Stage one by enumerating every (n−f)-subset in lexicographic order; the
/// first global minimiser wins. Server gradients are optional here.
pub fn fit_subspace_exhaustive(input: &AggregationInput<'_>, cap: u128) -> Result<SubspaceFit, AggregationError> {
    let rank = check_stage_one(input)?;
    let server = match input.server {
        Some(_) => Some(input.require_server("subspace fit")?),
        None => None,
    };
    let kd = KernelData::new(input.gradients, server);
    let fit = exhaustive(&kd, input.f, rank, cap)?;
    Ok(explicit(&kd, fit))
}

fn explicit(kd: &KernelData<'_>, fit: KernelFit) -> SubspaceFit {
    SubspaceFit {
        subspace: fit.subspace.materialize(kd),
        selection: fit.selection,
        trimmed_loss: fit.loss,
        trsvd_calls: fit.fits,
        loss_trace: fit.trace,
    }
}

/// Full two-stage aggregation.
pub fn boba_aggregate(
    input: &AggregationInput<'_>,
    params: &BobaParams,
    mode: FitMode,
) -> Result<AggregationResult, AggregationError> {
    params.validate()?;
    let rank = check_stage_one(input)?;
    let server = input.require_server("boba")?;
    let kd = KernelData::new(input.gradients, Some(server));
    let fit = run_stage_one(&kd, input, rank, params, mode)?;
    let sub = &fit.subspace;
    let n = kd.n;
    let c = input.classes;

    if sub.center.is_empty() {
        // The selected gradients coincide: there are no coordinates to
        // estimate and their common value is the estimate.
        return Ok(AggregationResult {
            aggregate: KernelSubspace::combine(&kd, &sub.weights),
            accepted: fit.selection,
            diagnostics: Diagnostics {
                trimmed_loss: Some(fit.loss),
                trsvd_calls: Some(fit.fits),
                loss_trace: fit.trace,
                ..Default::default()
            },
        });
    }

    let vertices = Matrix::from_fn(sub.center.len(), c, |r, z| sub.projected[(r, n + z)] - sub.center[r]);
    let solver = SimplexCoordinates::new(&vertices)?;
    let mut coords = Matrix::zeros(c, n);
    let mut encoded = Vec::with_capacity(n);
    let mut min_coord = Vec::with_capacity(n);
    for i in 0..n {
        let e = sub.encode(i);
        let p = solver.solve(e.as_slice())?;
        min_coord.push(p.min());
        coords.set_column(i, &p);
        encoded.push(e);
    }

    let mut accepted: Vec<bool> = min_coord.iter().map(|&m| m >= params.p_min).collect();
    let keep = n - input.f;
    if accepted.iter().filter(|&&a| a).count() < keep {
        let neg: Vec<f64> = min_coord.iter().map(|m| -m).collect();
        accepted = vec![false; n];
        for &i in &argsort_ascending(&neg)[..keep] {
            accepted[i] = true;
        }
    }

    let mut mean_code = Vector::zeros(sub.center.len());
    let mut count = 0usize;
    for (e, _) in encoded.iter().zip(&accepted).filter(|(_, &a)| a) {
        mean_code += e;
        count += 1;
    }
    mean_code /= count as f64;
    let coef = &sub.weights + &sub.coeffs * &mean_code;
    let aggregate = KernelSubspace::combine(&kd, &coef);

    Ok(AggregationResult {
        aggregate,
        accepted,
        diagnostics: Diagnostics {
            trimmed_loss: Some(fit.loss),
            trsvd_calls: Some(fit.fits),
            coordinates: Some(coords),
            loss_trace: fit.trace,
            scores: Some(min_coord),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{column_mean, truncated_svd};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planar_instance(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(2, n, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Brute force over all (n−f)-subsets using the explicit SVD path.
    fn brute_force_loss(g: &Matrix, f: usize, rank: usize) -> f64 {
        let n = g.ncols();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != n - f {
                continue;
            }
            let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let sub = Matrix::from_fn(g.nrows(), idx.len(), |r, c| g[(r, idx[c])]);
            let fit = truncated_svd(&sub, rank).unwrap();
            let (loss, _) = trimmed_reconstruction_loss(&fit.subspace, g, f).unwrap();
            best = best.min(loss);
        }
        best
    }

    #[test]
    fn far_byzantine_is_excluded_from_trimmed_loss() {
        let n = 6;
        let mut g = Matrix::zeros(2, n);
        for i in 0..n - 1 {
            g[(0, i)] = -1.0 + 2.0 * i as f64 / (n - 2) as f64;
        }
        g[(0, n - 1)] = 100.0 * n as f64;
        g[(1, n - 1)] = 100.0 * n as f64;
        let axis = AffineSubspace::new(Matrix::from_column_slice(2, 1, &[1.0, 0.0]), Vector::zeros(2)).unwrap();
        let (loss, sel) = trimmed_reconstruction_loss(&axis, &g, 1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(!sel[n - 1] && sel[..n - 1].iter().all(|&s| s));
    }

    #[test]
    fn exhaustive_matches_brute_force_in_plane() {
        for seed in 0..10 {
            let g = planar_instance(5, seed);
            let input = AggregationInput::new(&g, None, 1, 2);
            let es = fit_subspace_exhaustive(&input, DEFAULT_ES_CAP).unwrap();
            let brute = brute_force_loss(&g, 1, 1);
            assert!((es.trimmed_loss - brute).abs() < 1e-10, "seed {seed}: {} vs {brute}", es.trimmed_loss);
            let (explicit, _) = trimmed_reconstruction_loss(&es.subspace, &g, 1).unwrap();
            assert!((explicit - es.trimmed_loss).abs() < 1e-10);
        }
    }

    #[test]
    fn kernel_fit_matches_explicit_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Matrix::from_fn(12, 9, |_, _| rng.random_range(-1.0..1.0));
        let kd = KernelData::new(&g, None);
        let subset: Vec<usize> = vec![0, 2, 3, 5, 6, 8];
        let sub = kd.fit(&subset, 3).materialize(&kd);
        let pts = Matrix::from_fn(12, subset.len(), |r, c| g[(r, subset[c])]);
        let svd = truncated_svd(&pts, 3).unwrap();
        assert!((sub.projector() - svd.subspace.projector()).amax() < 1e-9);
        assert!((sub.mean() - svd.subspace.mean()).amax() < 1e-12);
        assert!(crate::linalg::orthonormality_deviation(sub.basis()) < 1e-9);
    }

    #[test]
    fn identical_clients_return_their_value() {
        let v = [0.5, -1.0, 2.0, 0.25];
        let g = Matrix::from_fn(4, 7, |r, _| v[r]);
        let server = Matrix::from_fn(4, 3, |r, c| (r + 2 * c) as f64);
        for mode in [FitMode::Alternating, FitMode::Exhaustive { cap: DEFAULT_ES_CAP }] {
            let res = boba_aggregate(&AggregationInput::new(&g, Some(&server), 2, 3), &BobaParams::default(), mode).unwrap();
            assert_eq!(res.aggregate.as_slice(), &v);
            assert_eq!(res.accepted_count(), 5);
        }
    }

    #[test]
    fn exact_subspace_with_far_byzantines() {
        // Honest points on a plane in R^5, two Byzantines far off it.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let server = Matrix::from_fn(5, 3, |r, c| if r < 2 { rng.random_range(-1.0..1.0) + c as f64 } else { 0.0 });
        let mut g = Matrix::zeros(5, 10);
        for i in 0..8 {
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = w.iter().sum();
            for z in 0..3 {
                for r in 0..5 {
                    g[(r, i)] += w[z] / s * server[(r, z)];
                }
            }
        }
        // Off the plane and, once projected, far outside the server simplex.
        for i in 8..10 {
            for r in 0..5 {
                g[(r, i)] = 10.0 * server[(r, 0)] - 9.0 * server[(r, 1)];
            }
            g[(4, i)] = 50.0;
        }
        let input = AggregationInput::new(&g, Some(&server), 2, 3);
        let fit = fit_subspace_alternating(&input, &BobaParams::default()).unwrap();
        assert!(fit.trimmed_loss < 1e-12, "loss {}", fit.trimmed_loss);
        assert!(!fit.selection[8] && !fit.selection[9]);
        let res = boba_aggregate(&input, &BobaParams::default(), FitMode::Alternating).unwrap();
        let honest = Matrix::from_fn(5, 8, |r, c| g[(r, c)]);
        assert!((res.aggregate - column_mean(&honest)).amax() < 1e-10);
        assert!(!res.accepted[8] && !res.accepted[9]);
    }

    #[test]
    fn loss_trace_is_monotone_and_es_dominates() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Matrix::from_fn(6, 9, |_, _| rng.random_range(-1.0..1.0));
            let server = Matrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
            let input = AggregationInput::new(&g, Some(&server), 2, 3);
            let ao = fit_subspace_alternating(&input, &BobaParams::default()).unwrap();
            for w in ao.loss_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "seed {seed}: {:?}", ao.loss_trace);
            }
            assert_eq!(ao.trsvd_calls, ao.loss_trace.len());
            let es = fit_subspace_exhaustive(&input, DEFAULT_ES_CAP).unwrap();
            assert!(es.trimmed_loss <= ao.trimmed_loss, "seed {seed}");
        }
    }

    #[test]
    fn cap_and_span_errors() {
        let g = Matrix::from_element(3, 30, 1.0);
        let server = Matrix::from_element(3, 2, 1.0);
        let input = AggregationInput::new(&g, Some(&server), 10, 2);
        assert!(matches!(
            fit_subspace_exhaustive(&input, DEFAULT_ES_CAP),
            Err(AggregationError::SearchCapExceeded { .. })
        ));
        let small = Matrix::from_element(3, 3, 1.0);
        let server4 = Matrix::from_element(3, 4, 1.0);
        let input = AggregationInput::new(&small, Some(&server4), 1, 4);
        assert_eq!(
            fit_subspace_alternating(&input, &BobaParams::default()).unwrap_err(),
            AggregationError::CannotSpan { kept: 2, rank: 3 }
        );
        let input = AggregationInput::new(&small, None, 1, 2);
        assert!(matches!(
            boba_aggregate(&input, &BobaParams::default(), FitMode::Alternating),
            Err(AggregationError::MissingServer(_))
        ));
    }
}
