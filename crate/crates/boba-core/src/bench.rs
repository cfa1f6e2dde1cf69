//! Wall-clock timing of aggregation rules on synthetic problems.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{AggregationError, Rule};
use crate::instances::{random_instance, GradientInstance, InstanceError, InstanceSpec};

/// Classes in every timing problem.
pub const BENCH_CLASSES: usize = 10;

/// Rules timed by default. Loss-probing rules are left out: their cost is
/// dominated by model evaluation, which the problems here do not have.
pub fn default_rules() -> Vec<Rule> {
    ["average", "coomed", "trmean", "krum", "mkrum", "geomed", "fltrust", "boba"]
        .iter()
        .map(|s| s.parse().expect("known rule"))
        .collect()
}

/// A problem with `n` clients of which about 13% are Byzantine, honest
/// clients on a 10-class simplex with small noise.
pub fn bench_problem(n: usize, d: usize, seed: u64) -> Result<GradientInstance, InstanceError> {
    let byzantine = (n * 2 / 15).min(n.saturating_sub(BENCH_CLASSES + 1));
    let spec = InstanceSpec {
        dim: d,
        classes: BENCH_CLASSES,
        honest: n - byzantine,
        byzantine,
        f: byzantine,
        eps: 0.05,
        eps_server: 0.05,
        ..InstanceSpec::default()
    };
    random_instance(&spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub agr: String,
    pub n: usize,
    pub d: usize,
    /// Median over the repeats.
    pub seconds: f64,
    /// Subspace fits, for subspace rules.
    pub k: Option<usize>,
}

/// Times every rule on every `(n, d)` pair, taking the median of `repeats`
/// runs.
pub fn time_rules(
    rules: &[Rule],
    n_list: &[usize],
    d_list: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<TimingRow>, BenchError> {
    let repeats = repeats.max(1);
    let mut rows = Vec::new();
    for &n in n_list {
        for &d in d_list {
            let inst = bench_problem(n, d, seed)?;
            let input = inst.input();
            for rule in rules {
                let mut times = Vec::with_capacity(repeats);
                let mut k = None;
                for _ in 0..repeats {
                    let start = Instant::now();
                    let res = rule.aggregate(&input, None)?;
                    times.push(start.elapsed().as_secs_f64());
                    k = res.diagnostics.trsvd_calls;
                }
                times.sort_by(f64::total_cmp);
                rows.push(TimingRow { agr: rule.to_string(), n, d, seconds: times[times.len() / 2], k });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
}

/// Writes `agr,n,d,seconds,k`; `k` is empty for rules without subspace fits.
pub fn write_timing_csv<W: Write>(out: W, rows: &[TimingRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["agr", "n", "d", "seconds", "k"])?;
    for r in rows {
        w.write_record([
            r.agr.clone(),
            r.n.to_string(),
            r.d.to_string(),
            format!("{:.6e}", r.seconds),
            r.k.map_or_else(String::new, |k| k.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn problem_shape() {
        let inst = bench_problem(115, 50, 0).unwrap();
        assert_eq!(inst.n(), 115);
        assert_eq!(inst.byzantine(), 15);
        assert_eq!(inst.f, 15);
        assert_eq!(inst.gradients.nrows(), 50);
        let small = bench_problem(12, 20, 0).unwrap();
        assert_eq!(small.byzantine(), 1);
    }

    #[test]
    fn rows_cover_every_combination() {
        let rules = default_rules();
        let rows = time_rules(&rules, &[30, 40], &[20], 1, 1).unwrap();
        assert_eq!(rows.len(), rules.len() * 2);
        for r in &rows {
            assert_eq!(r.k.is_some(), r.agr == "boba");
            assert!(r.seconds >= 0.0);
        }
        let mut out = Vec::new();
        write_timing_csv(&mut out, &rows).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("agr,n,d,seconds,k\naverage,30,20,"));
    }
}
