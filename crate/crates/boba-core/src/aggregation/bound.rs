//! Upper bound on the squared estimation error of the subspace aggregator.

use super::AggregationError;

/// Variation and geometry constants entering the bound. Squared quantities
/// are passed squared.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundInputs {
    /// Honest inner variation bound ε².
    pub eps_sq: f64,
    /// Server inner variation bound ε_s².
    pub eps_s_sq: f64,
    /// Honest outer variation bound δ².
    pub delta_sq: f64,
    /// Server outer variation bound δ_s².
    pub delta_s_sq: f64,
    /// Lower bound σ on the (c−1)-th singular value of any n−2f honest
    /// expectations.
    pub sigma: f64,
    pub n: usize,
    pub f: usize,
    pub classes: usize,
    pub p_min: f64,
    /// Byzantine fraction |B|/n.
    pub beta: f64,
    pub honest: usize,
}

/// The three constants and the resulting bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundTerms {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub value: f64,
}

/// `C₁ε² + C₂ε_s² + C₃β²δ_s²` with
/// `C₁ = 4 + 8(1/(n−2f) + δ²/σ²)(2(n−f) + |H|)`,
/// `C₂ = 16(1/(n−2f) + δ²/σ²)(n−f) + 16c(1 + c|p_min|)²β²`,
/// `C₃ = 16(1 + c|p_min|)²`.
pub fn compute_boba_error_bound(b: &BoundInputs) -> Result<BoundTerms, AggregationError> {
    if b.n <= 2 * b.f {
        return Err(AggregationError::TooFewClients { f: b.f, n: b.n, needed: 2 * b.f });
    }
    if !(b.sigma > 0.0) {
        return Err(AggregationError::InvalidParameter(format!("sigma must be positive, got {}", b.sigma)));
    }
    let n = b.n as f64;
    let f = b.f as f64;
    let c = b.classes as f64;
    let spread = 1.0 / (n - 2.0 * f) + b.delta_sq / (b.sigma * b.sigma);
    let simplex = (1.0 + c * b.p_min.abs()).powi(2);
    let c1 = 4.0 + 8.0 * spread * (2.0 * (n - f) + b.honest as f64);
    let c2 = 16.0 * spread * (n - f) + 16.0 * c * simplex * b.beta * b.beta;
    let c3 = 16.0 * simplex;
    let value = c1 * b.eps_sq + c2 * b.eps_s_sq + c3 * b.beta * b.beta * b.delta_s_sq;
    Ok(BoundTerms { c1, c2, c3, value })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> BoundInputs {
        BoundInputs {
            eps_sq: 1.0,
            eps_s_sq: 1.0,
            delta_sq: 1.0,
            delta_s_sq: 1.0,
            sigma: 1.0,
            n: 115,
            f: 16,
            classes: 10,
            p_min: -0.5,
            beta: 15.0 / 115.0,
            honest: 100,
        }
    }

    #[test]
    fn zero_variation_gives_zero() {
        let b = BoundInputs { eps_sq: 0.0, eps_s_sq: 0.0, beta: 0.0, ..base() };
        assert_eq!(compute_boba_error_bound(&b).unwrap().value, 0.0);
    }

    #[test]
    fn no_byzantines_ignore_server_outer_variation() {
        let a = BoundInputs { beta: 0.0, ..base() };
        let b = BoundInputs { delta_s_sq: 1e6, ..a };
        assert_eq!(compute_boba_error_bound(&a).unwrap().value, compute_boba_error_bound(&b).unwrap().value);
    }

    #[test]
    fn transcribed_constants() {
        let t = compute_boba_error_bound(&base()).unwrap();
        // Independent transcription with n−2f = 83, n−f = 99, 1 + c|p_min| = 6.
        let k = 1.0 / 83.0 + 1.0;
        let beta = 15.0 / 115.0;
        let c1 = 4.0 + 8.0 * k * (2.0 * 99.0 + 100.0);
        let c2 = 16.0 * k * 99.0 + 16.0 * 10.0 * 36.0 * beta * beta;
        let c3 = 16.0 * 36.0;
        assert!((t.c1 - c1).abs() < 1e-9 && (t.c2 - c2).abs() < 1e-9 && (t.c3 - c3).abs() < 1e-12);
        assert!((t.value - (c1 + c2 + c3 * beta * beta)).abs() < 1e-9);
    }

    #[test]
    fn preconditions() {
        assert!(compute_boba_error_bound(&BoundInputs { f: 60, ..base() }).is_err());
        assert!(compute_boba_error_bound(&BoundInputs { sigma: 0.0, ..base() }).is_err());
    }
}
