use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::Path;

use boba_core::aggregation::{make_lower_bound_instance, make_three_client_instance, AggregationInput, Rule};
use boba_core::bench::{default_rules, time_rules, write_timing_csv};
use boba_core::config::SimConfig;
use boba_core::fedsim::{run_experiment, write_pca_csv, write_rounds_csv, Federation, FedsimError};
use boba_core::gradfile::{GradfileError, GradientFile};
use boba_core::linalg::Matrix;
use boba_core::metrics::principal_variance_fractions;
use boba_core::verify::{self, Suite, VerifyOptions};

use crate::exit;

fn fail(code: u8, msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {msg}");
    code
}

fn fedsim_code(e: &FedsimError) -> u8 {
    if e.is_numeric() {
        exit::NUMERIC
    } else {
        exit::USAGE
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<SimConfig, u8> {
    let mut cfg = SimConfig::load(path).map_err(|e| fail(exit::USAGE, e))?;
    if let Some(s) = seed {
        cfg.seeds.master = s;
    }
    cfg.validate().map_err(|e| fail(exit::USAGE, e))?;
    Ok(cfg)
}

fn with_threads<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T, u8> {
    match threads {
        None => Ok(job()),
        Some(0) => Err(fail(exit::USAGE, "--threads must be at least 1")),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(k).build().map_err(|e| fail(exit::FAILURE, e))?;
            Ok(pool.install(job))
        }
    }
}

pub fn simulate(config: &Path, out: &Path, seed: Option<u64>, threads: Option<usize>) -> u8 {
    let cfg = match load_config(config, seed) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let result = match with_threads(threads, || run_experiment(&cfg)) {
        Ok(r) => r,
        Err(code) => return code,
    };
    let output = match result {
        Ok(o) => o,
        Err(e) => return fail(fedsim_code(&e), e),
    };
    let write = || -> Result<(), Box<dyn std::error::Error>> {
        fs::create_dir_all(out)?;
        let s = &output.summary;
        write_rounds_csv(BufWriter::new(File::create(out.join("rounds.csv"))?), &output.records, &s.agr, &s.attack, s.seed)?;
        write_pca_csv(BufWriter::new(File::create(out.join("pca.csv"))?), &s.pca_fractions)?;
        fs::write(out.join("summary.txt"), s.to_key_values())?;
        fs::write(out.join("config.toml"), cfg.to_toml_string())?;
        Ok(())
    };
    match write() {
        Ok(()) => exit::OK,
        Err(e) => fail(exit::FAILURE, format!("writing {}: {e}", out.display())),
    }
}

fn set_p_min(rule: Rule, p_min: f64) -> Rule {
    match rule {
        Rule::Boba(mut p) => {
            p.p_min = p_min;
            Rule::Boba(p)
        }
        Rule::BobaEs { mut params, cap } => {
            params.p_min = p_min;
            Rule::BobaEs { params, cap }
        }
        Rule::Bucketing { size, inner, seed } => Rule::Bucketing { size, inner: Box::new(set_p_min(*inner, p_min)), seed },
        other => other,
    }
}

fn fmt_values(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|x| format!(",{x}")).collect()
}

pub fn aggregate(path: &Path, agr: Option<&str>, f: Option<usize>, p_min: Option<f64>, text: bool) -> u8 {
    let file = match GradientFile::load(path) {
        Ok(g) => g,
        Err(e @ GradfileError::Io(_)) => return fail(exit::USAGE, format!("{}: {e}", path.display())),
        Err(e) => return fail(exit::USAGE, e),
    };
    if text {
        let stdout = io::stdout();
        return match file.write_text(stdout.lock()) {
            Ok(()) => exit::OK,
            Err(e) => fail(exit::FAILURE, e),
        };
    }
    let (Some(agr), Some(f)) = (agr, f) else {
        return fail(exit::USAGE, "--agr and --f are required");
    };
    let mut rule: Rule = match agr.parse() {
        Ok(r) => r,
        Err(e) => return fail(exit::USAGE, e),
    };
    if let Some(p) = p_min {
        rule = set_p_min(rule, p);
    }
    if rule.needs_loss_probe() {
        return fail(exit::USAGE, format!("`{rule}` evaluates models and cannot run on a gradient file"));
    }
    if rule.needs_server() && file.server.is_none() {
        return fail(exit::USAGE, format!("`{rule}` needs server gradients, which {} lacks", path.display()));
    }
    let input = AggregationInput::new(&file.gradients, file.server.as_ref(), f, file.classes);
    match rule.aggregate(&input, None) {
        Ok(res) => {
            let loss = res.diagnostics.trimmed_loss.map_or_else(|| "nan".to_string(), |l| l.to_string());
            println!("{rule},{loss},{}{}", res.accepted_count(), fmt_values(res.aggregate.iter().copied()));
            exit::OK
        }
        Err(e) => fail(exit::USAGE, e),
    }
}

pub fn verify(suite: Suite, seed: u64, tolerance: Option<f64>) -> u8 {
    let mut opts = VerifyOptions { seed, ..VerifyOptions::default() };
    if let Some(t) = tolerance {
        opts = opts.with_tolerance(t);
    }
    let checks = verify::run(suite, &opts);
    let mut failed = Vec::new();
    for c in &checks {
        println!("{c}");
        if !c.passed {
            failed.push(c.name.as_str());
        }
    }
    if failed.is_empty() {
        println!("{} checks passed", checks.len());
        exit::OK
    } else {
        eprintln!("failed checks: {}", failed.join(", "));
        exit::FAILURE
    }
}

pub fn bench(n: &[usize], d: &[usize], repeats: usize, seed: u64) -> u8 {
    if n.is_empty() || d.is_empty() {
        return fail(exit::USAGE, "--n and --d need at least one value");
    }
    match time_rules(&default_rules(), n, d, repeats, seed) {
        Ok(rows) => match write_timing_csv(io::stdout().lock(), &rows) {
            Ok(()) => exit::OK,
            Err(e) => fail(exit::FAILURE, e),
        },
        Err(e) => fail(exit::USAGE, e),
    }
}

pub fn pca(config: &Path, seed: Option<u64>) -> u8 {
    let cfg = match load_config(config, seed) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let fractions = Federation::from_config(&cfg).and_then(|fed| {
        let params = fed.init_state().params;
        let honest = fed.honest_gradients(params.as_slice(), 0, &fed.participants(0))?;
        Ok(principal_variance_fractions(&honest)?)
    });
    match fractions {
        Ok(fr) => match write_pca_csv(io::stdout().lock(), &fr) {
            Ok(()) => exit::OK,
            Err(e) => fail(exit::FAILURE, e),
        },
        Err(e) => fail(fedsim_code(&e), e),
    }
}

fn save(file: &GradientFile, out: &Path) -> u8 {
    match file.save(out) {
        Ok(()) => exit::OK,
        Err(e) => fail(exit::FAILURE, format!("{}: {e}", out.display())),
    }
}

/// Writes the indistinguishable pair with server columns at `+v` and
/// `−v/2`, where `±v` are the client values. Any aggregate inside the
/// clients' hull has error between `(βδ)²` and `δ²` for one of the two
/// readings; both are printed to stderr.
pub fn make_lower_bound(out: &Path, honest: usize, byzantine: usize, delta: f64) -> u8 {
    let inst = match make_lower_bound_instance(honest, byzantine, delta) {
        Ok(i) => i,
        Err(e) => return fail(exit::USAGE, e),
    };
    let v = inst.gradients[(0, 0)];
    let server = Matrix::from_row_slice(1, 2, &[v, -0.5 * v]);
    let file = GradientFile::new(inst.gradients.clone(), Some(server), 2).expect("consistent shapes");
    let code = save(&file, out);
    if code == exit::OK {
        let (a, b) = inst.expected_means;
        eprintln!("expected_means={a},{b}");
        eprintln!("error_floor={}", (inst.beta * inst.delta).powi(2));
        eprintln!("error_ceiling={}", (v + inst.beta * inst.delta).powi(2));
    }
    code
}

pub fn make_three_client(out: &Path, delta: f64, eps: f64, seed: u64) -> u8 {
    let inst = match make_three_client_instance(delta, eps, seed) {
        Ok(i) => i,
        Err(e) => return fail(exit::USAGE, e),
    };
    let file = GradientFile::new(inst.gradients, None, 2).expect("consistent shapes");
    let code = save(&file, out);
    if code == exit::OK {
        eprintln!("krum_error={}", eps * eps + delta * delta / 4.0);
    }
    code
}
