//! Executable checks of the projection lemmas, the hand-built fixtures and
//! the error bound. Each check reports a named pass/fail line.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::aggregation::{
    compute_boba_error_bound, make_lower_bound_instance, make_three_client_instance, AggregationInput, LossProbe, Rule,
};
use crate::attacks::Attack;
use crate::instances::{random_instance, InstanceSpec};
use crate::linalg::{truncated_svd, AffineSubspace, Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Lemmas,
    Fixtures,
    Bounds,
    All,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown suite `{0}` (expected lemmas, fixtures, bounds or all)")]
pub struct UnknownSuite(pub String);

impl FromStr for Suite {
    type Err = UnknownSuite;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lemmas" => Ok(Suite::Lemmas),
            "fixtures" => Ok(Suite::Fixtures),
            "bounds" => Ok(Suite::Bounds),
            "all" => Ok(Suite::All),
            other => Err(UnknownSuite(other.to_string())),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Lemmas => "lemmas",
            Suite::Fixtures => "fixtures",
            Suite::Bounds => "bounds",
            Suite::All => "all",
        })
    }
}

/// Instance counts and tolerances.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub lemma_instances: usize,
    pub unbiased_instances: usize,
    pub bound_instances: usize,
    pub three_client_draws: usize,
    /// Lemma and unbiasedness tolerance.
    pub tolerance: f64,
    /// Tolerance of the exact equality for averaging on the lower-bound sets.
    pub average_tolerance: f64,
    /// Tolerance of the Krum error on the three-client sets.
    pub krum_tolerance: f64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            lemma_instances: 10_000,
            unbiased_instances: 100,
            bound_instances: 500,
            three_client_draws: 100,
            tolerance: 1e-8,
            average_tolerance: 1e-12,
            krum_tolerance: 1e-10,
            seed: 0,
        }
    }
}

impl VerifyOptions {
    /// Replaces every tolerance with `tol`.
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self.average_tolerance = tol;
        self.krum_tolerance = tol;
        self
    }
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.to_string(), passed, detail }
}

/// Runs `suite`.
pub fn run(suite: Suite, opts: &VerifyOptions) -> Vec<Check> {
    match suite {
        Suite::Lemmas => lemma_checks(opts),
        Suite::Fixtures => fixture_checks(opts),
        Suite::Bounds => bound_checks(opts),
        Suite::All => {
            let mut all = lemma_checks(opts);
            all.extend(fixture_checks(opts));
            all.extend(bound_checks(opts));
            all
        }
    }
}

fn normal_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn normal_vector<R: Rng>(d: usize, scale: f64, rng: &mut R) -> Vector {
    Vector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// A random affine subspace fitted by the truncated SVD to a random cloud.
fn random_subspace<R: Rng>(rng: &mut R) -> AffineSubspace {
    let d = rng.random_range(2..=24);
    let n = rng.random_range(2..=30);
    let rank = rng.random_range(1..=d.min(n).min(9));
    let scale = 10f64.powf(rng.random_range(-1.0..1.0));
    let pts = normal_matrix(d, n, scale, rng);
    truncated_svd(&pts, rank).expect("rank within bounds").subspace
}

/// Slack of `f(instance)` across instances; `f` returns `(lhs, rhs)` for a
/// claim `lhs ≤ rhs`.
fn worst_slack<R: Rng>(count: usize, rng: &mut R, mut f: impl FnMut(&mut R) -> (f64, f64)) -> f64 {
    (0..count).map(|_| f(rng)).map(|(l, r)| l - r).fold(f64::NEG_INFINITY, f64::max)
}

pub fn lemma_checks(opts: &VerifyOptions) -> Vec<Check> {
    let tol = opts.tolerance;
    let count = opts.lemma_instances;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // The projection of u is no farther from u than the projection of any v.
    let nearest = worst_slack(count, &mut rng, |rng| {
        let s = random_subspace(rng);
        let d = s.ambient_dim();
        let u = normal_vector(d, 3.0, rng);
        let v = normal_vector(d, 3.0, rng);
        let pu = s.project(u.as_slice()).expect("dimension");
        let pv = s.project(v.as_slice()).expect("dimension");
        ((&pu - &u).norm(), (&pv - &u).norm())
    });
    // Projection does not increase distances.
    let contraction = worst_slack(count, &mut rng, |rng| {
        let s = random_subspace(rng);
        let d = s.ambient_dim();
        let u = normal_vector(d, 3.0, rng);
        let v = normal_vector(d, 3.0, rng);
        let pu = s.project(u.as_slice()).expect("dimension");
        let pv = s.project(v.as_slice()).expect("dimension");
        ((pu - pv).norm(), (u - v).norm())
    });
    // Projection commutes with affine combinations, negative weights included.
    let commutation = worst_slack(count, &mut rng, |rng| {
        let s = random_subspace(rng);
        let d = s.ambient_dim();
        let m = rng.random_range(1..=8);
        let pts = normal_matrix(d, m, 3.0, rng);
        let mut w: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let partial: f64 = w[..m - 1].iter().sum();
        w[m - 1] = 1.0 - partial;
        let combo = &pts * Vector::from_column_slice(&w);
        let lhs = s.project(combo.as_slice()).expect("dimension");
        let mut rhs = Vector::zeros(d);
        for (j, wj) in w.iter().enumerate() {
            rhs += s.project(pts.column(j).as_slice()).expect("dimension") * *wj;
        }
        ((lhs - rhs).amax(), 0.0)
    });
    let line = |slack: f64| format!("{count} instances, worst slack {slack:.3e}, tolerance {tol:e}");
    vec![
        check("lemmas/nearest_point", nearest <= tol, line(nearest)),
        check("lemmas/contraction", contraction <= tol, line(contraction)),
        check("lemmas/affine_commutation", commutation <= tol, line(commutation)),
    ]
}

/// Every rule evaluated on the indistinguishable pair.
fn lower_bound_rules() -> Vec<Rule> {
    ["average", "coomed", "trmean", "krum", "mkrum", "geomed", "fltrust", "selfrej", "avgrej", "boba", "boba-es", "b-mkrum"]
        .iter()
        .map(|s| s.parse().expect("known rule"))
        .collect()
}

pub fn fixture_checks(opts: &VerifyOptions) -> Vec<Check> {
    let mut out = Vec::new();
    let (honest, byzantine, delta) = (9, 3, 2.0);
    let inst = make_lower_bound_instance(honest, byzantine, delta).expect("valid fixture");
    let floor = (inst.beta * inst.delta).powi(2);
    let v = inst.gradients[(0, 0)];
    let server = Matrix::from_row_slice(1, 2, &[v, -0.5 * v]);
    let input = AggregationInput::new(&inst.gradients, Some(&server), byzantine, 2);
    let loss = |w: &[f64]| (w[0] - 0.1).powi(2);
    let probe = LossProbe { params: &[0.0], step: 1.0, loss: &loss };
    for rule in lower_bound_rules() {
        let name = format!("fixtures/lower_bound/{rule}");
        match rule.aggregate(&input, Some(&probe)) {
            Ok(res) => {
                let g = res.aggregate[0];
                let err = (g - inst.expected_means.0).powi(2).max((g - inst.expected_means.1).powi(2));
                out.push(check(&name, err >= floor - opts.tolerance, format!("max error {err:.6} vs floor {floor:.6}")));
                if matches!(rule, Rule::Average) {
                    let gap = (err - floor).abs();
                    out.push(check(
                        "fixtures/lower_bound/average_equality",
                        gap <= opts.average_tolerance,
                        format!("|max error − floor| = {gap:.3e}, tolerance {:e}", opts.average_tolerance),
                    ));
                }
            }
            Err(e) => out.push(check(&name, false, format!("aggregation failed: {e}"))),
        }
    }

    let (delta, eps) = (1.0, 0.2);
    let target = eps * eps + delta * delta / 4.0;
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for seed in 0..opts.three_client_draws as u64 {
        let tc = make_three_client_instance(delta, eps, opts.seed.wrapping_add(seed)).expect("valid fixture");
        match Rule::Krum.aggregate(&AggregationInput::new(&tc.gradients, None, 0, 2), None) {
            Ok(res) => worst = worst.max(((res.aggregate - &tc.expected_mean).norm_squared() - target).abs()),
            Err(e) => failure = Some(e.to_string()),
        }
    }
    out.push(match failure {
        Some(e) => check("fixtures/krum_three_client", false, format!("aggregation failed: {e}")),
        None => check(
            "fixtures/krum_three_client",
            worst <= opts.krum_tolerance,
            format!(
                "{} draws, worst |error − (ε² + δ²/4)| = {worst:.3e}, tolerance {:e}",
                opts.three_client_draws, opts.krum_tolerance
            ),
        ),
    });

    // Noise-free honest clients only: the aggregate is their exact mean.
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for _ in 0..opts.unbiased_instances {
        let spec = InstanceSpec {
            dim: rng.random_range(8..=40),
            classes: rng.random_range(2..=6),
            honest: rng.random_range(8..=16),
            byzantine: 0,
            f: rng.random_range(0..=3),
            eps_server: rng.random_range(0.0..0.2),
            ..InstanceSpec::default()
        };
        let inst = random_instance(&spec, &mut rng).expect("valid spec");
        match Rule::boba().aggregate(&inst.input(), None) {
            Ok(res) => worst = worst.max((res.aggregate - inst.honest_mean()).amax()),
            Err(e) => failure = Some(e.to_string()),
        }
    }
    out.push(match failure {
        Some(e) => check("fixtures/boba_unbiased", false, format!("aggregation failed: {e}")),
        None => check(
            "fixtures/boba_unbiased",
            worst <= opts.tolerance,
            format!("{} instances, worst max-abs deviation {worst:.3e}", opts.unbiased_instances),
        ),
    });
    out
}

pub fn bound_checks(opts: &VerifyOptions) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xb0b0);
    let attacks: Vec<Option<Attack>> = std::iter::once(None).chain(Attack::all().into_iter().map(Some)).collect();
    let mut held = 0;
    let mut worst_ratio: f64 = 0.0;
    let mut failure = None;
    for i in 0..opts.bound_instances {
        let classes = rng.random_range(2..=5);
        let honest = rng.random_range(classes + 6..=16);
        let byzantine = rng.random_range(0..=honest / 4);
        let spec = InstanceSpec {
            dim: rng.random_range(classes + 2..=40),
            classes,
            honest,
            byzantine,
            f: byzantine.max(1),
            eps: rng.random_range(0.0..0.3),
            eps_server: rng.random_range(0.0..0.3),
            attack: attacks[i % attacks.len()].clone(),
            ..InstanceSpec::default()
        };
        let outcome = random_instance(&spec, &mut rng)
            .map_err(|e| e.to_string())
            .and_then(|inst| {
                let res = Rule::boba().aggregate(&inst.input(), None).map_err(|e| e.to_string())?;
                let inputs = inst.bound_inputs(-0.5, 1_000_000).map_err(|e| e.to_string())?;
                let bound = compute_boba_error_bound(&inputs).map_err(|e| e.to_string())?.value;
                Ok(((res.aggregate - inst.expected_mean()).norm_squared(), bound))
            });
        match outcome {
            Ok((err, bound)) => {
                if err <= bound + opts.tolerance {
                    held += 1;
                }
                worst_ratio = worst_ratio.max(err / bound);
            }
            Err(e) => failure = Some(e),
        }
    }
    let n = opts.bound_instances;
    vec![match failure {
        Some(e) => check("bounds/error_bound", false, format!("instance failed: {e}")),
        None => check(
            "bounds/error_bound",
            held == n,
            format!("bound held on {held}/{n} instances, worst error/bound {worst_ratio:.3e}"),
        ),
    }]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyOptions {
        VerifyOptions { lemma_instances: 300, unbiased_instances: 10, bound_instances: 20, three_client_draws: 10, ..Default::default() }
    }

    #[test]
    fn all_checks_pass_on_small_counts() {
        for c in run(Suite::All, &quick()) {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn corrupted_tolerance_fails_named_checks() {
        let checks = run(Suite::Lemmas, &quick().with_tolerance(-1.0));
        assert!(checks.iter().any(|c| !c.passed && c.name == "lemmas/affine_commutation"));
        assert!(checks[0].to_string().starts_with("FAIL lemmas/"));
    }

    #[test]
    fn every_rule_is_on_the_lower_bound_list() {
        let names: Vec<String> = lower_bound_rules().iter().map(|r| r.to_string()).collect();
        assert_eq!(names.len(), 12);
        assert!(names.contains(&"boba".to_string()));
    }

    #[test]
    fn suite_names_round_trip() {
        for s in [Suite::Lemmas, Suite::Fixtures, Suite::Bounds, Suite::All] {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }
}
