//! `steer` and `validate` commands. Both return a process exit code:
//! 0 on success, 1 on usage, configuration or input errors, 2 when a stage
//! of the steering problem is infeasible.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::belief::GaussianBelief;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::export::{
    beliefs_csv, ellipses_csv, sigma_points_csv, trajectories_csv, write_text, CheckOutcome, PolicyFile, ReportFile,
    BELIEFS_FILE, ELLIPSES_FILE, POLICY_FILE, REPORT_FILE, SIGMA_POINTS_FILE, TRAJECTORIES_FILE,
};
use crate::greedy::greedy_steer;
use crate::montecarlo::simulate_closed_loop;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;

/// Name of the effective configuration written next to the results.
pub const EFFECTIVE_CONFIG_FILE: &str = "config.toml";

/// Caps Monte Carlo worker threads when set to a positive integer.
pub const THREADS_ENV: &str = "COVSTEER_THREADS";

pub fn threads_from_env() -> Option<usize> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("ignoring {THREADS_ENV}={raw:?}: expected a positive integer");
            None
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Infeasible { .. } => EXIT_INFEASIBLE,
        _ => EXIT_USAGE,
    }
}

fn report(err: &Error, context: &str) -> i32 {
    match err {
        Error::Infeasible { stage, reason } => {
            eprintln!("error: {context}: infeasible at stage {stage}: {reason}");
        }
        other => eprintln!("error: {context}: {other}"),
    }
    exit_code(err)
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
        other => other,
    })
}

fn gap_ratio(cov: &DMatrix<f64>, target: &GaussianBelief) -> f64 {
    let gap = (cov - target.cov()).symmetric_eigen().eigenvalues.max();
    gap / target.cov().clone().symmetric_eigen().eigenvalues.max()
}

fn check(name: &str, value: f64, bound: f64) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        value,
        bound,
        passed: value <= bound,
    }
}

fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.directory.clone())
}

pub fn cmd_steer(config: &Path, out: Option<&Path>, soften: bool) -> i32 {
    match run_steer(config, out, soften) {
        Ok(()) => EXIT_OK,
        Err(e) => report(&e, "steer"),
    }
}

fn run_steer(config: &Path, out: Option<&Path>, soften: bool) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.solver.soften |= soften;
    let dir = output_dir(&cfg, out);
    let model = cfg.model()?;
    let b0 = cfg.initial_belief()?;
    let goal = cfg.goal()?;
    let run = greedy_steer(model.as_ref(), &b0, &cfg.greedy_config(model.input_dim())?)?;

    PolicyFile::from_run(&run).write(&dir.join(POLICY_FILE))?;
    write_text(&dir.join(BELIEFS_FILE), &beliefs_csv(&run))?;
    write_text(&dir.join(ELLIPSES_FILE), &ellipses_csv(&run, &goal, cfg.steer.alpha))?;
    write_text(&dir.join(SIGMA_POINTS_FILE), &sigma_points_csv(&run))?;
    write_text(&dir.join(EFFECTIVE_CONFIG_FILE), &cfg.to_toml())?;

    let last = run.terminal();
    let mean_err = (last.mean() - goal.mean()).norm();
    let cov_gap = gap_ratio(last.cov(), &goal);
    println!(
        "stages: {} ({} softened, all optimal: {})",
        run.laws.len(),
        run.softened_stages(),
        run.all_optimal()
    );
    println!(
        "terminal mean error: {mean_err:.3e} (bound {:.3e}) {}",
        cfg.checks.terminal_mean,
        if mean_err <= cfg.checks.terminal_mean {
            "ok"
        } else {
            "EXCEEDED"
        }
    );
    println!(
        "terminal covariance excess: {cov_gap:.3e} of λmax(Σf) (bound {:.3e}) {}",
        cfg.checks.terminal_cov_rel,
        if cov_gap <= cfg.checks.terminal_cov_rel {
            "ok"
        } else {
            "EXCEEDED"
        }
    );
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn cmd_validate(
    config: &Path,
    policy: &Path,
    samples: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
    threads: Option<usize>,
) -> i32 {
    match run_validate(config, policy, samples, seed, out, threads) {
        Ok(()) => EXIT_OK,
        Err(e) => report(&e, "validate"),
    }
}

fn run_validate(
    config: &Path,
    policy: &Path,
    samples: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
    threads: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let dir = output_dir(&cfg, out);
    let model = cfg.model()?;
    let policy = PolicyFile::read(policy).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read {}: {io}", policy.display())),
        other => other,
    })?;
    if policy.state_dim != model.state_dim() || policy.input_dim != model.input_dim() {
        return Err(Error::Dimension(format!(
            "policy is for state/input dimensions {}/{}, the configured system has {}/{}",
            policy.state_dim,
            policy.input_dim,
            model.state_dim(),
            model.input_dim()
        )));
    }
    let laws = policy.laws()?;
    let b0 = policy.initial_belief.to_belief()?;
    let predicted = policy.terminal_belief.to_belief()?;
    let goal = cfg.goal()?;

    let mut settings = cfg.mc_settings(threads);
    if let Some(m) = samples {
        settings.samples = m;
    }
    if let Some(s) = seed {
        settings.seed = s;
    }
    let (mc, trajectories) = simulate_closed_loop(model.as_ref(), &laws, &b0, &settings)?;

    let checks = vec![
        check(
            "terminal_mean",
            (predicted.mean() - goal.mean()).norm(),
            cfg.checks.terminal_mean,
        ),
        check(
            "terminal_cov_rel",
            gap_ratio(predicted.cov(), &goal),
            cfg.checks.terminal_cov_rel,
        ),
        check(
            "empirical_cov_rel",
            gap_ratio(&mc.empirical_cov, &goal),
            cfg.checks.empirical_cov_rel,
        ),
    ];
    for c in &checks {
        println!(
            "{}: {:.3e} (bound {:.3e}) {}",
            c.name,
            c.value,
            c.bound,
            if c.passed { "ok" } else { "EXCEEDED" }
        );
    }
    println!("samples: {} valid, {} diverged", mc.valid, mc.diverged);

    ReportFile::new(&mc, &predicted, &goal, checks).write(&dir.join(REPORT_FILE))?;
    write_text(
        &dir.join(TRAJECTORIES_FILE),
        &trajectories_csv(&trajectories, mc.start_stage),
    )?;
    println!("wrote {}", dir.display());
    Ok(())
}
