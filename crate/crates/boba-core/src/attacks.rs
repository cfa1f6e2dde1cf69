//! Byzantine gradient generators.
//!
//! Every attack is omniscient: it sees the full honest gradient matrix of
//! the round. Apart from Gauss, all attacks collude and emit one vector
//! repeated for every Byzantine client.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};
use thiserror::Error;

use crate::linalg::{col, column_mean, sq_dist, Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("attack needs at least {needed} honest gradients, got {found}")]
    TooFewHonest { needed: usize, found: usize },
    #[error("mimic target {target} is out of range for {count} honest clients")]
    TargetOutOfRange { target: usize, count: usize },
    #[error("invalid client counts: n={n}, byzantine={byzantine}")]
    ClientCounts { n: usize, byzantine: usize },
    #[error("invalid attack parameter: {0}")]
    InvalidParameter(String),
}

/// Which constraint the optimized perturbation must satisfy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MinOptVariant {
    /// Largest distance to an honest gradient stays within the largest
    /// honest pairwise distance.
    MinMax,
    /// Sum of squared distances to the honest gradients stays within the
    /// largest such sum over honest clients.
    MinSum,
}

/// A configured attack.
#[derive(Clone, Debug, PartialEq)]
pub enum Attack {
    Gauss { variance: f64 },
    Ipm { gamma: f64 },
    Lie,
    /// `None` copies the context's default target.
    Mimic { target: Option<usize> },
    MinOpt { variant: MinOptVariant, gamma_init: f64, tau: f64 },
}

/// Round-level facts an attack may need besides the honest gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttackContext {
    /// Total client count `n = |H| + |B|`.
    pub total_clients: usize,
    /// Number of Byzantine columns to emit.
    pub byzantine: usize,
    /// Honest client copied by Mimic when no target is configured.
    pub mimic_target: usize,
}

impl Attack {
    pub fn gauss() -> Self {
        Attack::Gauss { variance: 200.0 }
    }

    pub fn ipm() -> Self {
        Attack::Ipm { gamma: 10.0 }
    }

    pub fn minmax() -> Self {
        Attack::MinOpt { variant: MinOptVariant::MinMax, gamma_init: 10.0, tau: 1e-5 }
    }

    pub fn minsum() -> Self {
        Attack::MinOpt { variant: MinOptVariant::MinSum, gamma_init: 10.0, tau: 1e-5 }
    }

    /// The six attacks with their default parameters.
    pub fn all() -> [Attack; 6] {
        [Attack::gauss(), Attack::ipm(), Attack::Lie, Attack::Mimic { target: None }, Attack::minmax(), Attack::minsum()]
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |msg: String| Err(AttackError::InvalidParameter(msg));
        match *self {
            Attack::Gauss { variance } if !(variance > 0.0 && variance.is_finite()) => {
                bad(format!("variance must be positive, got {variance}"))
            }
            Attack::Ipm { gamma } if !(gamma >= 0.0 && gamma.is_finite()) => {
                bad(format!("gamma must be non-negative, got {gamma}"))
            }
            Attack::MinOpt { gamma_init, tau, .. } if !(gamma_init > 0.0 && tau > 0.0) => {
                bad(format!("gamma_init and tau must be positive, got {gamma_init} and {tau}"))
            }
            _ => Ok(()),
        }
    }

    /// Whether all emitted columns are identical.
    pub fn is_colluding(&self) -> bool {
        !matches!(self, Attack::Gauss { .. })
    }

    /// Emits `ctx.byzantine` columns of dimension `honest.nrows()`. Only
    /// Gauss draws from `rng`.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        honest: &Matrix,
        ctx: &AttackContext,
        rng: &mut R,
    ) -> Result<Matrix, AttackError> {
        self.validate()?;
        let count = ctx.byzantine;
        match *self {
            Attack::Gauss { variance } => Ok(gauss_with_variance(honest.nrows(), count, variance, rng)),
            Attack::Ipm { gamma } => ipm(honest, gamma, count),
            Attack::Lie => lie(honest, ctx.total_clients, count),
            Attack::Mimic { target } => mimic(honest, target.unwrap_or(ctx.mimic_target), count),
            Attack::MinOpt { variant, gamma_init, tau } => min_opt(honest, variant, gamma_init, tau, count),
        }
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attack::Gauss { .. } => "gauss",
            Attack::Ipm { .. } => "ipm",
            Attack::Lie => "lie",
            Attack::Mimic { .. } => "mimic",
            Attack::MinOpt { variant: MinOptVariant::MinMax, .. } => "minmax",
            Attack::MinOpt { variant: MinOptVariant::MinSum, .. } => "minsum",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown attack `{0}`")]
pub struct UnknownAttack(pub String);

impl FromStr for Attack {
    type Err = UnknownAttack;

    /// Parses attack names with default parameters.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "gauss" | "gaussian" => Attack::gauss(),
            "ipm" => Attack::ipm(),
            "lie" => Attack::Lie,
            "mimic" => Attack::Mimic { target: None },
            "minmax" => Attack::minmax(),
            "minsum" => Attack::minsum(),
            _ => return Err(UnknownAttack(s.to_string())),
        })
    }
}

/// `count` columns of i.i.d. `N(0, 200)` coordinates.
pub fn gauss<R: Rng + ?Sized>(d: usize, count: usize, rng: &mut R) -> Matrix {
    gauss_with_variance(d, count, 200.0, rng)
}

pub fn gauss_with_variance<R: Rng + ?Sized>(d: usize, count: usize, variance: f64, rng: &mut R) -> Matrix {
    let normal = Normal::new(0.0, variance.sqrt()).expect("positive finite variance");
    Matrix::from_fn(d, count, |_, _| normal.sample(rng))
}

fn repeat(v: &Vector, count: usize) -> Matrix {
    Matrix::from_fn(v.len(), count, |r, _| v[r])
}

fn require_honest(honest: &Matrix, needed: usize) -> Result<(), AttackError> {
    if honest.ncols() < needed {
        Err(AttackError::TooFewHonest { needed, found: honest.ncols() })
    } else {
        Ok(())
    }
}

/// Inner-product manipulation: every column is `−γ` times the honest mean.
pub fn ipm(honest: &Matrix, gamma: f64, count: usize) -> Result<Matrix, AttackError> {
    require_honest(honest, 1)?;
    Ok(repeat(&(column_mean(honest) * -gamma), count))
}

/// Coordinate-wise sample standard deviation (divisor `n − 1`; zero for a
/// single column).
pub fn coordinate_std(honest: &Matrix) -> Vector {
    let n = honest.ncols();
    let mean = column_mean(honest);
    if n < 2 {
        return Vector::zeros(honest.nrows());
    }
    Vector::from_fn(honest.nrows(), |r, _| {
        let ss: f64 = (0..n).map(|j| (honest[(r, j)] - mean[r]).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    })
}

/// The shift `z = Φ⁻¹((n − ⌊n/2 + 1⌋) / (n − |B|))` used by the
/// little-is-enough attack.
pub fn lie_z(n: usize, byzantine: usize) -> Result<f64, AttackError> {
    if byzantine >= n {
        return Err(AttackError::ClientCounts { n, byzantine });
    }
    let supporters = n - (n / 2 + 1);
    let q = supporters as f64 / (n - byzantine) as f64;
    if !(q > 0.0 && q < 1.0) {
        return Err(AttackError::InvalidParameter(format!(
            "quantile {q} for n={n}, byzantine={byzantine} is outside (0, 1)"
        )));
    }
    Ok(StdNormal::standard().inverse_cdf(q))
}

/// Little-is-enough: honest mean plus `z` honest standard deviations in
/// every coordinate.
pub fn lie(honest: &Matrix, n: usize, count: usize) -> Result<Matrix, AttackError> {
    require_honest(honest, 1)?;
    let z = lie_z(n, count)?;
    let v = column_mean(honest) + coordinate_std(honest) * z;
    Ok(repeat(&v, count))
}

/// Copies honest column `target` into every Byzantine column.
pub fn mimic(honest: &Matrix, target: usize, count: usize) -> Result<Matrix, AttackError> {
    if target >= honest.ncols() {
        return Err(AttackError::TargetOutOfRange { target, count: honest.ncols() });
    }
    Ok(Matrix::from_fn(honest.nrows(), count, |r, _| honest[(r, target)]))
}

/// Index of the distribution with the largest single-class share; ties go
/// to the lower index.
pub fn most_skewed_client<P: AsRef<[f64]>>(distributions: &[P]) -> usize {
    let peak = |p: &P| p.as_ref().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best = 0;
    for (i, p) in distributions.iter().enumerate() {
        if peak(p) > peak(&distributions[best]) {
            best = i;
        }
    }
    best
}

/// Result of the perturbation-scale search.
#[derive(Clone, Debug, PartialEq)]
pub struct MinOptOutcome {
    /// Largest feasible scale found; zero for a degenerate honest set.
    pub gamma: f64,
    pub vector: Vector,
}

/// Honest mean plus `gamma` coordinate-wise standard deviations.
pub fn min_opt_candidate(mean: &Vector, direction: &Vector, gamma: f64) -> Vector {
    mean + direction * gamma
}

/// Largest admissible value of the variant's statistic over the honest set.
pub fn min_opt_threshold(honest: &Matrix, variant: MinOptVariant) -> f64 {
    let n = honest.ncols();
    let mut threshold = 0.0f64;
    for i in 0..n {
        let row = (0..n).map(|j| sq_dist(col(honest, i), col(honest, j)));
        threshold = threshold.max(match variant {
            MinOptVariant::MinMax => row.fold(0.0, f64::max),
            MinOptVariant::MinSum => row.sum(),
        });
    }
    threshold
}

/// The variant's statistic for a candidate vector.
pub fn min_opt_statistic(honest: &Matrix, variant: MinOptVariant, candidate: &[f64]) -> f64 {
    let dists = (0..honest.ncols()).map(|i| sq_dist(col(honest, i), candidate));
    match variant {
        MinOptVariant::MinMax => dists.fold(0.0, f64::max),
        MinOptVariant::MinSum => dists.sum(),
    }
}

pub fn min_opt_feasible(honest: &Matrix, variant: MinOptVariant, candidate: &[f64]) -> bool {
    min_opt_statistic(honest, variant, candidate) <= min_opt_threshold(honest, variant)
}

/// Searches the largest `γ` such that `mean + γ·std` satisfies the variant
/// constraint. The upper end doubles from `gamma_init` until infeasible,
/// then the bracket is bisected until narrower than `tau`.
pub fn min_opt_search(
    honest: &Matrix,
    variant: MinOptVariant,
    gamma_init: f64,
    tau: f64,
) -> Result<MinOptOutcome, AttackError> {
    require_honest(honest, 2)?;
    if !(gamma_init > 0.0 && tau > 0.0) {
        return Err(AttackError::InvalidParameter(format!(
            "gamma_init and tau must be positive, got {gamma_init} and {tau}"
        )));
    }
    let mean = column_mean(honest);
    let direction = coordinate_std(honest);
    if direction.iter().all(|&s| s == 0.0) {
        return Ok(MinOptOutcome { gamma: 0.0, vector: mean });
    }
    let threshold = min_opt_threshold(honest, variant);
    let feasible = |g: f64| {
        let v = min_opt_candidate(&mean, &direction, g);
        min_opt_statistic(honest, variant, v.as_slice()) <= threshold
    };
    // The statistic is convex in γ and feasible at 0, so the feasible set
    // is an interval [0, γ*].
    let (mut lo, mut hi) = (0.0, gamma_init);
    while feasible(hi) {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(AttackError::InvalidParameter("perturbation scale diverged".into()));
        }
    }
    while hi - lo >= tau {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(MinOptOutcome { gamma: lo, vector: min_opt_candidate(&mean, &direction, lo) })
}

/// Min-max / min-sum attack columns.
pub fn min_opt(
    honest: &Matrix,
    variant: MinOptVariant,
    gamma_init: f64,
    tau: f64,
    count: usize,
) -> Result<Matrix, AttackError> {
    Ok(repeat(&min_opt_search(honest, variant, gamma_init, tau)?.vector, count))
}
