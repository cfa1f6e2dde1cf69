//! Evaluation quantities: accuracy, recall, recall drop, estimation error,
//! measured variations and the singular-value assumption check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::datagen::LabeledDataset;
use crate::fedsim::Model;
use crate::linalg::{col, column_mean, columns, gram, kth_singular_value, sq_dist, sym_eigen_desc, LinalgError, Matrix};
use crate::subsets::{binomial, next_combination};

/// Exhaustive subset enumeration limit for [`assumption_report`].
pub const DEFAULT_SUBSET_CAP: u128 = 100_000;
/// Random subsets drawn when the exhaustive count exceeds the cap.
pub const DEFAULT_SUBSET_SAMPLES: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{count} subsets exceed the cap of {cap} and sampling is disabled")]
    CapExceeded { count: u128, cap: u128 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Test accuracy and per-class recall; recall is `None` for classes absent
/// from the test set.
pub fn accuracy_and_recall(
    model: &Model,
    params: &[f64],
    test: &LabeledDataset,
) -> Result<(f64, Vec<Option<f64>>), MetricsError> {
    if test.is_empty() {
        return Err(MetricsError::Empty);
    }
    if params.len() != model.param_count() {
        return Err(MetricsError::DimensionMismatch { expected: model.param_count(), found: params.len() });
    }
    Ok(score_predictions(&model.predict(params, &test.features), &test.labels, test.classes))
}

/// Accuracy and recall from predicted and true labels.
pub fn score_predictions(predicted: &[usize], labels: &[usize], classes: usize) -> (f64, Vec<Option<f64>>) {
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    let recall = hits.iter().zip(&totals).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64)).collect();
    (correct as f64 / labels.len().max(1) as f64, recall)
}

/// `max_z max(reference_z − observed_z, 0)` over classes defined in both.
pub fn max_recall_drop(observed: &[Option<f64>], reference: &[Option<f64>]) -> Result<f64, MetricsError> {
    if observed.len() != reference.len() {
        return Err(MetricsError::DimensionMismatch { expected: reference.len(), found: observed.len() });
    }
    Ok(observed
        .iter()
        .zip(reference)
        .filter_map(|(o, r)| Some((r.as_ref()? - o.as_ref()?).max(0.0)))
        .fold(0.0, f64::max))
}

/// `‖estimate − expected‖²`.
pub fn gradient_estimation_error(estimate: &[f64], expected: &[f64]) -> Result<f64, MetricsError> {
    if estimate.len() != expected.len() {
        return Err(MetricsError::DimensionMismatch { expected: expected.len(), found: estimate.len() });
    }
    Ok(sq_dist(estimate, expected))
}

/// Measured variation bounds, all squared.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationReport {
    /// Largest client inner variation.
    pub eps_sq: f64,
    /// Largest client outer variation.
    pub delta_sq: f64,
    /// Largest server inner variation.
    pub eps_s_sq: f64,
    /// Largest server outer variation.
    pub delta_s_sq: f64,
    pub client_inner: Vec<f64>,
    pub client_outer: Vec<f64>,
    pub server_inner: Vec<f64>,
    pub server_outer: Vec<f64>,
}

fn mean_sq_deviation(samples: &Matrix, centre: &[f64]) -> Result<f64, MetricsError> {
    if samples.ncols() == 0 {
        return Err(MetricsError::Empty);
    }
    if samples.nrows() != centre.len() {
        return Err(MetricsError::DimensionMismatch { expected: centre.len(), found: samples.nrows() });
    }
    Ok((0..samples.ncols()).map(|j| sq_dist(col(samples, j), centre)).sum::<f64>() / samples.ncols() as f64)
}

/// Inner variation of each client (mean squared deviation of its gradient
/// samples from its expectation) and outer variation (squared distance of
/// its expectation from the honest expected mean), and the same for the
/// server classes. A single sample per client gives the realised values.
pub fn measure_variations(
    client_samples: &[Matrix],
    client_expected: &Matrix,
    expected_mean: &[f64],
    server_samples: &[Matrix],
    server_expected: &Matrix,
) -> Result<VariationReport, MetricsError> {
    if client_samples.len() != client_expected.ncols() {
        return Err(MetricsError::DimensionMismatch { expected: client_expected.ncols(), found: client_samples.len() });
    }
    if server_samples.len() != server_expected.ncols() {
        return Err(MetricsError::DimensionMismatch { expected: server_expected.ncols(), found: server_samples.len() });
    }
    if client_expected.nrows() != expected_mean.len() || server_expected.nrows() != expected_mean.len() {
        return Err(MetricsError::DimensionMismatch { expected: expected_mean.len(), found: client_expected.nrows() });
    }
    let inner = |samples: &[Matrix], expected: &Matrix| -> Result<Vec<f64>, MetricsError> {
        samples.iter().enumerate().map(|(i, s)| mean_sq_deviation(s, col(expected, i))).collect()
    };
    let outer = |expected: &Matrix| -> Vec<f64> {
        (0..expected.ncols()).map(|i| sq_dist(col(expected, i), expected_mean)).collect()
    };
    let client_inner = inner(client_samples, client_expected)?;
    let server_inner = inner(server_samples, server_expected)?;
    let client_outer = outer(client_expected);
    let server_outer = outer(server_expected);
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    Ok(VariationReport {
        eps_sq: max(&client_inner),
        delta_sq: max(&client_outer),
        eps_s_sq: max(&server_inner),
        delta_s_sq: max(&server_outer),
        client_inner,
        client_outer,
        server_inner,
        server_outer,
    })
}

/// How subsets are covered when their count exceeds the cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubsetSampling {
    /// Fail instead of sampling.
    Disabled,
    Random { samples: usize, seed: u64 },
}

impl Default for SubsetSampling {
    fn default() -> Self {
        SubsetSampling::Random { samples: DEFAULT_SUBSET_SAMPLES, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionReport {
    /// Smallest `(c−1)`-th singular value over the checked subsets of
    /// `n − 2f` honest expectations.
    pub sigma: f64,
    /// `(c−1)`-th singular value of the server expectations, if given.
    pub sigma_server: Option<f64>,
    pub subsets_checked: usize,
    pub exhaustive: bool,
    /// Seed of the random subsets when not exhaustive.
    pub seed: Option<u64>,
}

/// Checks that every `n − 2f` honest expectations still span `c − 1`
/// dimensions.
pub fn assumption_report(
    honest_expected: &Matrix,
    n: usize,
    f: usize,
    classes: usize,
    server_expected: Option<&Matrix>,
    cap: u128,
    sampling: SubsetSampling,
) -> Result<AssumptionReport, MetricsError> {
    let h = honest_expected.ncols();
    if n <= 2 * f {
        return Err(MetricsError::InvalidParameter(format!("n − 2f must be positive (n={n}, f={f})")));
    }
    let size = n - 2 * f;
    if size > h {
        return Err(MetricsError::InvalidParameter(format!("n − 2f = {size} exceeds the {h} honest clients")));
    }
    if classes < 2 {
        return Err(MetricsError::InvalidParameter("need at least 2 classes".into()));
    }
    let rank = classes - 1;
    let sigma_of = |subset: &[usize]| -> f64 {
        if rank > size.min(honest_expected.nrows()) {
            return 0.0;
        }
        let pts = honest_expected.select_columns(subset);
        kth_singular_value(&pts, rank).expect("rank checked")
    };
    let count = binomial(h, size);
    let (subsets, exhaustive, seed) = if count <= cap {
        let mut subset: Vec<usize> = (0..size).collect();
        let mut all = vec![subset.clone()];
        while next_combination(&mut subset, h) {
            all.push(subset.clone());
        }
        (all, true, None)
    } else {
        match sampling {
            SubsetSampling::Disabled => return Err(MetricsError::CapExceeded { count, cap }),
            SubsetSampling::Random { samples, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let all = (0..samples)
                    .map(|_| {
                        let mut s = rand::seq::index::sample(&mut rng, h, size).into_vec();
                        s.sort_unstable();
                        s
                    })
                    .collect();
                (all, false, Some(seed))
            }
        }
    };
    // min is exact, so the parallel reduction is order independent.
    let sigma = subsets.par_iter().map(|s| sigma_of(s)).reduce(|| f64::INFINITY, f64::min);
    let sigma_server = match server_expected {
        Some(s) if rank <= s.nrows().min(s.ncols()) => Some(kth_singular_value(s, rank)?),
        Some(_) => Some(0.0),
        None => None,
    };
    Ok(AssumptionReport { sigma, sigma_server, subsets_checked: subsets.len(), exhaustive, seed })
}

/// Fraction of each principal component in the total variance of the
/// centred columns, in descending order.
pub fn principal_variance_fractions(gradients: &Matrix) -> Result<Vec<f64>, MetricsError> {
    let (d, n) = gradients.shape();
    if n <= 1 || d == 0 {
        return Err(MetricsError::InvalidParameter(format!("need at least 2 gradients, got {n}")));
    }
    let mean = column_mean(gradients);
    let eig = if n <= d {
        sym_eigen_desc(gram(&columns(gradients), Some(mean.as_slice()))).0
    } else {
        let centred = Matrix::from_fn(d, n, |r, c| gradients[(r, c)] - mean[r]);
        sym_eigen_desc(&centred * centred.transpose()).0
    };
    let eig: Vec<f64> = eig.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = eig.iter().sum();
    if total == 0.0 {
        let mut out = vec![0.0; eig.len()];
        out[0] = 1.0;
        return Ok(out);
    }
    Ok(eig.iter().map(|v| v / total).collect())
}

/// Share of the variance captured by the first `c − 1` principal
/// components. Identical columns count as fully concentrated.
pub fn variance_concentration(gradients: &Matrix, classes: usize) -> Result<f64, MetricsError> {
    if classes < 2 {
        return Err(MetricsError::InvalidParameter("need at least 2 classes".into()));
    }
    let fractions = principal_variance_fractions(gradients)?;
    Ok(fractions.iter().take(classes - 1).sum::<f64>().min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(d: usize, n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn recall_from_confusion() {
        let labels = [0, 0, 1, 1, 1, 2];
        let predicted = [0, 1, 1, 1, 2, 0];
        let (acc, recall) = score_predictions(&predicted, &labels, 4);
        assert!((acc - 0.5).abs() < 1e-15);
        assert_eq!(recall, vec![Some(0.5), Some(2.0 / 3.0), Some(0.0), None]);
        let (acc, recall) = score_predictions(&[0, 0, 0], &[0, 1, 2], 3);
        assert!((acc - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall, vec![Some(1.0), Some(0.0), Some(0.0)]);
    }

    #[test]
    fn recall_drop() {
        let r = [Some(0.9), Some(0.9)];
        assert_eq!(max_recall_drop(&r, &r).unwrap(), 0.0);
        assert!((max_recall_drop(&[Some(0.9), Some(0.4)], &r).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(max_recall_drop(&[Some(1.0), Some(1.0)], &r).unwrap(), 0.0);
        assert_eq!(max_recall_drop(&[None, Some(0.1)], &[Some(0.5), None]).unwrap(), 0.0);
        assert!(max_recall_drop(&r, &r[..1]).is_err());
    }

    #[test]
    fn estimation_error() {
        assert_eq!(gradient_estimation_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(gradient_estimation_error(&[1.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert!(gradient_estimation_error(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn variations_of_exact_samples_are_zero() {
        let expected = random(4, 5, 1);
        let server = random(4, 3, 2);
        let mean = column_mean(&expected);
        let samples: Vec<Matrix> = (0..5).map(|i| expected.columns(i, 1).into_owned()).collect();
        let server_samples: Vec<Matrix> = (0..3).map(|z| server.columns(z, 1).into_owned()).collect();
        let rep = measure_variations(&samples, &expected, mean.as_slice(), &server_samples, &server).unwrap();
        assert_eq!(rep.eps_sq, 0.0);
        assert_eq!(rep.eps_s_sq, 0.0);
        let outer: f64 = (0..5).map(|i| sq_dist(col(&expected, i), mean.as_slice())).fold(0.0, f64::max);
        assert_eq!(rep.delta_sq, outer);
    }

    #[test]
    fn injected_noise_is_measured() {
        let d = 50;
        let v: f64 = 0.3;
        let expected = Matrix::zeros(d, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = rand_distr::Normal::new(0.0, v.sqrt()).unwrap();
        let samples: Vec<Matrix> =
            (0..2).map(|_| Matrix::from_fn(d, 1000, |_, _| rand_distr::Distribution::sample(&normal, &mut rng))).collect();
        let rep =
            measure_variations(&samples, &expected, &vec![0.0; d], &samples, &expected).unwrap();
        for inner in &rep.client_inner {
            assert!((inner - v * d as f64).abs() < 0.2 * v * d as f64);
        }
    }

    #[test]
    fn assumption_vertex_counts() {
        // c = 2: three clients at each of two vertices.
        let e = Matrix::from_fn(2, 6, |r, c| if (c < 3) == (r == 0) { 1.0 } else { 0.0 });
        let ok = assumption_report(&e, 6, 1, 2, None, DEFAULT_SUBSET_CAP, SubsetSampling::Disabled).unwrap();
        assert!(ok.sigma > 0.0);
        assert!(ok.exhaustive);
        assert_eq!(ok.subsets_checked, 15);
        let bad = assumption_report(&e, 6, 2, 2, None, DEFAULT_SUBSET_CAP, SubsetSampling::Disabled).unwrap();
        assert_eq!(bad.sigma, 0.0);
        let same = Matrix::from_element(3, 6, 1.0);
        assert_eq!(assumption_report(&same, 6, 1, 3, None, 1000, SubsetSampling::Disabled).unwrap().sigma, 0.0);
    }

    #[test]
    fn assumption_matches_brute_force() {
        let e = random(5, 6, 4);
        let rep = assumption_report(&e, 6, 1, 3, Some(&random(5, 3, 5)), 1000, SubsetSampling::Disabled).unwrap();
        // Independent oracle: singular values of every 4-subset from the
        // eigenvalues of its centred covariance.
        let mut best = f64::INFINITY;
        for mask in 0u32..64 {
            if mask.count_ones() != 4 {
                continue;
            }
            let cols: Vec<usize> = (0..6).filter(|&i| mask & (1 << i) != 0).collect();
            let m = e.select_columns(&cols);
            let mean = m.column_mean();
            let c = Matrix::from_fn(5, 4, |r, j| m[(r, j)] - mean[r]);
            let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(&c * c.transpose()).eigenvalues.iter().copied().collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            best = best.min(ev[1].max(0.0).sqrt());
        }
        assert!((rep.sigma - best).abs() < 1e-10);
        assert!(rep.sigma_server.unwrap() > 0.0);
    }

    #[test]
    fn assumption_sampling_mode() {
        let e = random(6, 12, 6);
        assert!(matches!(
            assumption_report(&e, 12, 2, 3, None, 10, SubsetSampling::Disabled),
            Err(MetricsError::CapExceeded { .. })
        ));
        let sampled =
            assumption_report(&e, 12, 2, 3, None, 10, SubsetSampling::Random { samples: 50_000, seed: 1 }).unwrap();
        let exact = assumption_report(&e, 12, 2, 3, None, 1000, SubsetSampling::Disabled).unwrap();
        assert!(!sampled.exhaustive && exact.exhaustive);
        assert_eq!(sampled.seed, Some(1));
        // 50k draws of 495 subsets cover all of them.
        assert_eq!(sampled.sigma, exact.sigma);
    }

    #[test]
    fn concentration_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let basis = random(30, 2, 8);
        let flat = Matrix::from_fn(2, 40, |_, _| rng.random_range(-1.0..1.0));
        let on_plane = &basis * flat;
        assert!((variance_concentration(&on_plane, 3).unwrap() - 1.0).abs() < 1e-12);
        let same = Matrix::from_element(4, 5, 2.0);
        assert_eq!(variance_concentration(&same, 3).unwrap(), 1.0);
        assert!(variance_concentration(&Matrix::zeros(3, 1), 2).is_err());
    }

    #[test]
    fn isotropic_noise_spreads_variance() {
        let noise = random(20, 2000, 9);
        let frac = variance_concentration(&noise, 5).unwrap();
        // Direct expectation for isotropic data: (c−1)/min(d, n) = 4/20.
        assert!((frac - 0.2).abs() < 0.05, "{frac}");
    }
}
