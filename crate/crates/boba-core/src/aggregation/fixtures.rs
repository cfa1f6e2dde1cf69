//! Hand-built gradient sets with known expected means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AggregationError;
use crate::linalg::{Matrix, Vector};

/// Two 1-D gradient sets with identical values but swapped honest and
/// Byzantine roles, so no rule can tell them apart.
#[derive(Clone, Debug)]
pub struct LowerBoundInstance {
    /// `1 × n`; shared by both sets.
    pub gradients: Matrix,
    /// Honest mask in the first set (first `|H|` clients).
    pub honest_first: Vec<bool>,
    /// Honest mask in the second set (last `|H|` clients).
    pub honest_second: Vec<bool>,
    /// Expected honest means: `+βδ` and `−βδ`.
    pub expected_means: (f64, f64),
    pub beta: f64,
    pub delta: f64,
}

/// Values `+(|H|/n)δ` on the first half and `−(|H|/n)δ` on the second. In
/// the first set the honest clients are the first `|H|`, in the second the
/// last `|H|`; both have zero inner variation and outer variation ≤ δ.
pub fn make_lower_bound_instance(
    honest: usize,
    byzantine: usize,
    delta: f64,
) -> Result<LowerBoundInstance, AggregationError> {
    let n = honest + byzantine;
    if n == 0 || n % 2 == 1 {
        return Err(AggregationError::InvalidParameter(format!("client count must be even and positive, got {n}")));
    }
    if byzantine > honest {
        return Err(AggregationError::InvalidParameter("Byzantines must not outnumber honest clients".into()));
    }
    let value = honest as f64 / n as f64 * delta;
    let gradients = Matrix::from_fn(1, n, |_, j| if j < n / 2 { value } else { -value });
    let beta = byzantine as f64 / n as f64;
    Ok(LowerBoundInstance {
        gradients,
        honest_first: (0..n).map(|j| j < honest).collect(),
        honest_second: (0..n).map(|j| j >= byzantine).collect(),
        expected_means: (beta * delta, -beta * delta),
        beta,
        delta,
    })
}

/// The three-client planar instance: two clients near `(δ/2)v` perturbed by
/// `±ε` along `w`, one client at `−δv`, with `v = (−1,1)/√2` and
/// `w = (1,1)/√2`. The expected mean is the origin.
#[derive(Clone, Debug)]
pub struct ThreeClientInstance {
    /// `2 × 3`.
    pub gradients: Matrix,
    /// The two Bernoulli draws.
    pub draws: [bool; 2],
    pub expected_mean: Vector,
}

pub fn make_three_client_instance(delta: f64, eps: f64, seed: u64) -> Result<ThreeClientInstance, AggregationError> {
    if !(delta > 2.0 * eps) || eps < 0.0 {
        return Err(AggregationError::InvalidParameter(format!("need δ > 2ε ≥ 0, got δ={delta}, ε={eps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = [rng.random_bool(0.5), rng.random_bool(0.5)];
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let v = [-s, s];
    let w = [s, s];
    let mut gradients = Matrix::zeros(2, 3);
    for (i, &z) in draws.iter().enumerate() {
        let sign = if z { 1.0 } else { -1.0 };
        for r in 0..2 {
            gradients[(r, i)] = 0.5 * delta * v[r] + eps * sign * w[r];
        }
    }
    for r in 0..2 {
        gradients[(r, 2)] = -delta * v[r];
    }
    Ok(ThreeClientInstance { gradients, draws, expected_mean: Vector::zeros(2) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lower_bound_values() {
        let inst = make_lower_bound_instance(3, 1, 1.0).unwrap();
        assert_eq!(inst.gradients.as_slice(), &[0.75, 0.75, -0.75, -0.75]);
        assert_eq!(inst.expected_means, (0.25, -0.25));
        // Honest means in both sets are ±βδ.
        let mean = |mask: &[bool]| {
            let vals: Vec<f64> = (0..4).filter(|&j| mask[j]).map(|j| inst.gradients[(0, j)]).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        assert!((mean(&inst.honest_first) - 0.25).abs() < 1e-15);
        assert!((mean(&inst.honest_second) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn lower_bound_without_byzantines() {
        let inst = make_lower_bound_instance(4, 0, 2.0).unwrap();
        assert_eq!(inst.expected_means, (0.0, -0.0));
        assert!(make_lower_bound_instance(3, 0, 1.0).is_err());
    }

    #[test]
    fn three_client_geometry() {
        let inst = make_three_client_instance(1.0, 0.05, 3).unwrap();
        let g = &inst.gradients;
        for i in 0..2 {
            let sq = g[(0, i)] * g[(0, i)] + g[(1, i)] * g[(1, i)];
            assert!((sq - (0.25 + 0.0025)).abs() < 1e-15);
        }
        assert!((g[(0, 2)] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(make_three_client_instance(0.1, 0.05, 0).is_err());
    }
}
