//! Aggregation rules. Each maps a `d × n` gradient matrix (plus, for some
//! rules, server class gradients or a loss probe) to one update vector and
//! a set of diagnostics.

mod baselines;
mod boba;
mod bound;
mod fixtures;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::linalg::{LinalgError, Matrix, Vector};

pub use baselines::{
    average, bucketing, coordinate_median, fltrust, geometric_median, geometric_median_objective,
    krum, krum_scores, loss_rejection, trimmed_mean, LossProbe, RejectionVariant,
};
pub use boba::{
    boba_aggregate, fit_subspace_alternating, fit_subspace_exhaustive, trimmed_reconstruction_loss,
    BobaParams, FitMode, SubspaceFit, DEFAULT_ES_CAP,
};
pub use bound::{compute_boba_error_bound, BoundInputs, BoundTerms};
pub use fixtures::{
    make_lower_bound_instance, make_three_client_instance, LowerBoundInstance, ThreeClientInstance,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("empty gradient set")]
    Empty,
    #[error("byzantine tolerance f={f} requires more than {needed} clients, got n={n}")]
    TooFewClients { f: usize, n: usize, needed: usize },
    #[error("{0} requires server gradients")]
    MissingServer(&'static str),
    #[error("server gradient set has {found} columns, expected {expected}")]
    ServerShape { expected: usize, found: usize },
    #[error("gradient dimension {found} does not match server dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("n - f = {kept} clients cannot span a {rank}-dimensional subspace")]
    CannotSpan { kept: usize, rank: usize },
    #[error("exhaustive search over {count} subsets exceeds the cap of {cap}")]
    SearchCapExceeded { count: u128, cap: u128 },
    #[error("server direction has zero norm")]
    ZeroServerNorm,
    #[error("{0} requires a loss probe (model and server data)")]
    MissingLossProbe(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Inputs shared by every rule.
#[derive(Clone, Copy, Debug)]
pub struct AggregationInput<'a> {
    /// `d × n`, one client per column.
    pub gradients: &'a Matrix,
    /// `d × c` server class gradients, when the server holds labelled data.
    pub server: Option<&'a Matrix>,
    /// Declared Byzantine tolerance.
    pub f: usize,
    /// Number of classes.
    pub classes: usize,
}

impl<'a> AggregationInput<'a> {
    pub fn new(gradients: &'a Matrix, server: Option<&'a Matrix>, f: usize, classes: usize) -> Self {
        Self { gradients, server, f, classes }
    }

    pub fn n(&self) -> usize {
        self.gradients.ncols()
    }

    pub fn dim(&self) -> usize {
        self.gradients.nrows()
    }

    fn require_server(&self, rule: &'static str) -> Result<&'a Matrix, AggregationError> {
        let server = self.server.ok_or(AggregationError::MissingServer(rule))?;
        if server.ncols() != self.classes {
            return Err(AggregationError::ServerShape { expected: self.classes, found: server.ncols() });
        }
        if server.nrows() != self.dim() {
            return Err(AggregationError::DimensionMismatch { expected: server.nrows(), found: self.dim() });
        }
        Ok(server)
    }

    fn require_nonempty(&self) -> Result<(), AggregationError> {
        if self.n() == 0 || self.dim() == 0 {
            Err(AggregationError::Empty)
        } else {
            Ok(())
        }
    }
}

/// Per-call diagnostics; fields that a rule does not produce stay `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    /// Trimmed reconstruction loss of the fitted subspace.
    pub trimmed_loss: Option<f64>,
    /// Number of truncated-SVD fits performed.
    pub trsvd_calls: Option<usize>,
    /// `c × n` estimated label distributions, one client per column.
    pub coordinates: Option<Matrix>,
    /// Trimmed loss after each subspace update.
    pub loss_trace: Vec<f64>,
    /// Rule-specific per-client scores (Krum scores, FLTrust weights, …).
    pub scores: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationResult {
    pub aggregate: Vector,
    pub accepted: Vec<bool>,
    pub diagnostics: Diagnostics,
}

impl AggregationResult {
    fn all_accepted(aggregate: Vector, n: usize) -> Self {
        Self { aggregate, accepted: vec![true; n], diagnostics: Diagnostics::default() }
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted.iter().filter(|&&a| a).count()
    }
}

/// A configured aggregation rule.
#[derive(Clone, Debug, PartialEq)]
pub enum Rule {
    Average,
    CoordinateMedian,
    TrimmedMean,
    Krum,
    MultiKrum,
    GeoMed { tol: f64, max_iter: usize },
    FlTrust,
    SelfRej,
    AvgRej,
    Boba(BobaParams),
    BobaEs { params: BobaParams, cap: u128 },
    Bucketing { size: usize, inner: Box<Rule>, seed: u64 },
}

impl Rule {
    pub fn geomed() -> Self {
        Rule::GeoMed { tol: 1e-8, max_iter: 1000 }
    }

    pub fn boba() -> Self {
        Rule::Boba(BobaParams::default())
    }

    /// Whether the rule consumes server class gradients.
    pub fn needs_server(&self) -> bool {
        match self {
            Rule::FlTrust | Rule::Boba(_) | Rule::BobaEs { .. } => true,
            Rule::Bucketing { inner, .. } => inner.needs_server(),
            _ => false,
        }
    }

    /// Whether the rule evaluates candidate models on server data.
    pub fn needs_loss_probe(&self) -> bool {
        match self {
            Rule::SelfRej | Rule::AvgRej => true,
            Rule::Bucketing { inner, .. } => inner.needs_loss_probe(),
            _ => false,
        }
    }

    /// Overrides the seed of bucketing rules (used per round by the simulator).
    pub fn with_seed(&self, seed: u64) -> Rule {
        match self {
            Rule::Bucketing { size, inner, .. } => {
                Rule::Bucketing { size: *size, inner: Box::new(inner.with_seed(seed)), seed }
            }
            other => other.clone(),
        }
    }

    /// Applies the rule.
    pub fn aggregate(
        &self,
        input: &AggregationInput<'_>,
        probe: Option<&LossProbe<'_>>,
    ) -> Result<AggregationResult, AggregationError> {
        input.require_nonempty()?;
        if input.f >= input.n() {
            return Err(AggregationError::TooFewClients { f: input.f, n: input.n(), needed: input.f });
        }
        let n = input.n();
        match self {
            Rule::Average => Ok(AggregationResult::all_accepted(average(input.gradients), n)),
            Rule::CoordinateMedian => {
                Ok(AggregationResult::all_accepted(coordinate_median(input.gradients), n))
            }
            Rule::TrimmedMean => {
                Ok(AggregationResult::all_accepted(trimmed_mean(input.gradients, input.f)?, n))
            }
            Rule::Krum => krum(input.gradients, input.f, false),
            Rule::MultiKrum => krum(input.gradients, input.f, true),
            Rule::GeoMed { tol, max_iter } => Ok(AggregationResult::all_accepted(
                geometric_median(input.gradients, *tol, *max_iter),
                n,
            )),
            Rule::FlTrust => fltrust(input.gradients, input.require_server("fltrust")?),
            Rule::SelfRej => loss_rejection(
                input.gradients,
                input.f,
                RejectionVariant::SelfLoss,
                probe.ok_or(AggregationError::MissingLossProbe("selfrej"))?,
            ),
            Rule::AvgRej => loss_rejection(
                input.gradients,
                input.f,
                RejectionVariant::AverageLoss,
                probe.ok_or(AggregationError::MissingLossProbe("avgrej"))?,
            ),
            Rule::Boba(params) => boba_aggregate(input, params, FitMode::Alternating),
            Rule::BobaEs { params, cap } => boba_aggregate(input, params, FitMode::Exhaustive { cap: *cap }),
            Rule::Bucketing { size, inner, seed } => bucketing(input, *size, inner, *seed, probe),
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Average => f.write_str("average"),
            Rule::CoordinateMedian => f.write_str("coomed"),
            Rule::TrimmedMean => f.write_str("trmean"),
            Rule::Krum => f.write_str("krum"),
            Rule::MultiKrum => f.write_str("mkrum"),
            Rule::GeoMed { .. } => f.write_str("geomed"),
            Rule::FlTrust => f.write_str("fltrust"),
            Rule::SelfRej => f.write_str("selfrej"),
            Rule::AvgRej => f.write_str("avgrej"),
            Rule::Boba(_) => f.write_str("boba"),
            Rule::BobaEs { .. } => f.write_str("boba-es"),
            Rule::Bucketing { inner, .. } => write!(f, "b-{inner}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown aggregation rule `{0}`")]
pub struct UnknownRule(pub String);

impl FromStr for Rule {
    type Err = UnknownRule;

    /// Parses the names printed by `Display`; `b-<inner>` wraps any rule in
    /// bucketing with bucket size 2 and seed 0.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        if let Some(inner) = lower.strip_prefix("b-") {
            let inner: Rule = inner.parse().map_err(|_| UnknownRule(s.to_string()))?;
            return Ok(Rule::Bucketing { size: 2, inner: Box::new(inner), seed: 0 });
        }
        Ok(match lower.as_str() {
            "average" | "avg" | "mean" => Rule::Average,
            "coomed" | "median" => Rule::CoordinateMedian,
            "trmean" => Rule::TrimmedMean,
            "krum" => Rule::Krum,
            "mkrum" => Rule::MultiKrum,
            "geomed" => Rule::geomed(),
            "fltrust" => Rule::FlTrust,
            "selfrej" => Rule::SelfRej,
            "avgrej" => Rule::AvgRej,
            "boba" => Rule::boba(),
            "boba-es" | "bobaes" => Rule::BobaEs { params: BobaParams::default(), cap: DEFAULT_ES_CAP },
            _ => return Err(UnknownRule(s.to_string())),
        })
    }
}

/// Index order of `values` ascending, ties by lower index.
pub(crate) fn argsort_ascending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order
}
