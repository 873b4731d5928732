use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use slowfast::averaging::{integrate_averaged, AveragedMode, DriftSource};
use slowfast::harness::{
    assumption_report, drift_source, emit_report, run_convergence_experiment, run_ldp_experiment,
    run_mixing_experiment, run_picard_experiment, ExperimentKind, RunConfig, RunRecord, RunStatus, Summary,
};
use slowfast::sde_engine::{simulate_with, RecordMode, RecordOptions, Trajectory};
use slowfast::Error;

/// Slow-fast McKean-Vlasov experiments.
#[derive(Parser, Debug)]
#[command(name = "slowfast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON with model, operators, sim, experiment).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `sim.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Omit timestamps so repeated runs produce identical files.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker thread cap; overrides `experiment.max_workers`.
    #[arg(long, global = true)]
    max_workers: Option<usize>,
    /// Exit with status 5 when an acceptance verdict fails.
    #[arg(long, global = true)]
    assert: bool,
    /// Enable slow checks (the rare-event probe).
    #[arg(long, global = true)]
    slow: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the particle system and write trajectory.csv.
    Simulate {
        /// Record means and second moments only.
        #[arg(long)]
        reduced: bool,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Frozen invariant statistics and mixing fit at sim.x0.
    Frozen,
    /// Integrate the averaged equation and write averaged.csv.
    Average {
        /// Drift cache to preload; the updated cache is written to the output dir.
        #[arg(long)]
        drift_cache: Option<PathBuf>,
    },
    /// Averaging convergence sweep; writes errors.csv and plot.svg.
    Converge,
    /// Rate function table and optional rare-event probe; writes rates.csv.
    Ldp,
    /// Sampled assumption constants; writes assumptions.json.
    Check,
    /// Re-emit report files from the run record in --out.
    Report,
    /// Picard iteration gaps for sim.
    Picard,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_GATE: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;
const EXIT_ASSERT: u8 = 5;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Gate(_) => EXIT_GATE,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Step { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("acceptance verdicts failed");
            ExitCode::from(EXIT_ASSERT)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> slowfast::Result<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => Error::Config(e.to_string()),
        other => other,
    })?;
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
    }
    if let Some(k) = cli.max_workers {
        cfg.experiment.max_workers = Some(k);
    }
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

fn init_pool(workers: Option<usize>) -> slowfast::Result<()> {
    if let Some(k) = workers {
        if k == 0 {
            return Err(Error::Config("--max-workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn create_out(dir: &Path) -> slowfast::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &slowfast::model::AssumptionReport) -> slowfast::Result<()> {
    let f = File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn write_trajectory(path: &Path, traj: &Trajectory) -> slowfast::Result<()> {
    let f = File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    traj.write_csv(BufWriter::new(f))
}

/// Returns whether all acceptance verdicts passed (always true without `--assert`).
fn run(cli: &Cli) -> slowfast::Result<bool> {
    if let Command::Report = cli.command {
        init_pool(cli.max_workers)?;
        let mut record = RunRecord::load(&cli.out)?;
        let summary = Summary::read(&cli.out)?;
        emit_report(&summary, &mut record, &cli.out, cli.deterministic)?;
        return Ok(!cli.assert || summary.passed());
    }
    let cfg = load_config(cli)?;
    init_pool(cfg.experiment.max_workers)?;
    create_out(&cli.out)?;
    let started = Instant::now();
    let name = format!("{:?}", cli.command).to_lowercase();
    let name = name.split([' ', '{']).next().unwrap_or("run").to_string();
    let mut record = RunRecord::new(&name, &cfg)?;
    let mut summary = Summary::new(&record);
    let out = &cli.out;

    let outcome: slowfast::Result<()> = (|| {
        match &cli.command {
            Command::Simulate { reduced, stride } => {
                let built = cfg.build_model()?;
                let mode = if *reduced { RecordMode::Reduced } else { RecordMode::Full };
                let res = simulate_with(
                    &built.coeffs,
                    &built.a1,
                    &built.a2,
                    &cfg.sim,
                    RecordOptions {
                        mode,
                        stride: *stride,
                        observer: None,
                    },
                );
                let path = out.join("trajectory.csv");
                match res {
                    Ok(traj) => {
                        write_trajectory(&path, &traj)?;
                        record.metrics.macro_steps = cfg.sim.n_steps() as u64;
                    }
                    Err(Error::Divergence { t, partial }) => {
                        write_trajectory(&path, &partial)?;
                        record.register_output(out, "trajectory.csv")?;
                        return Err(Error::Divergence { t, partial });
                    }
                    Err(e) => return Err(e),
                }
                record.register_output(out, "trajectory.csv")?;
            }
            Command::Frozen => {
                let m = run_mixing_experiment(&cfg)?;
                if let Some(rate) = m.rate {
                    summary.verdicts.insert("mixing_fit_r2".into(), m.r2.unwrap_or(0.0) >= 0.9);
                    summary.notes.push(format!("mixing rate {rate}"));
                } else {
                    summary.verdicts.insert("mixing_fit_r2".into(), false);
                    summary.notes.push("mixing fit had insufficient signal".into());
                }
                summary.mixing = Some(m);
            }
            Command::Average { drift_cache } => {
                let built = cfg.build_model()?;
                let drift = drift_source(&built, &cfg)?;
                if let (Some(p), DriftSource::Estimated(d)) = (drift_cache, &drift) {
                    let f = File::open(p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: e,
                    })?;
                    d.load_json(f)?;
                }
                let mode = if cfg.sim.theta > 0.0 {
                    AveragedMode::ThetaPositive
                } else {
                    AveragedMode::ThetaZero
                };
                let traj = integrate_averaged(&drift, &built.coeffs, &built.a1, &cfg.sim, mode)?;
                write_trajectory(&out.join("averaged.csv"), &traj)?;
                record.register_output(out, "averaged.csv")?;
                if let DriftSource::Estimated(d) = &drift {
                    d.save_path(&out.join("drift_cache.json"))?;
                    record.register_output(out, "drift_cache.json")?;
                }
                record.metrics.macro_steps = cfg.sim.n_steps() as u64;
            }
            Command::Converge => {
                if !matches!(cfg.experiment.kind, ExperimentKind::AvgThetaPos | ExperimentKind::AvgThetaZero) {
                    return Err(Error::Config("converge needs experiment.kind avg_theta_pos or avg_theta_zero".into()));
                }
                let rep = run_convergence_experiment(&cfg)?;
                for f in &rep.fits {
                    summary.verdicts.insert(
                        format!("strictly_decreasing_gamma_{}", f.gamma),
                        f.strictly_decreasing.unwrap_or(false),
                    );
                    summary
                        .verdicts
                        .insert(format!("slope_at_least_0.2_gamma_{}", f.gamma), f.slope.is_some_and(|s| s >= 0.2));
                    if f.slope.is_none() {
                        summary.notes.push(format!("slope undefined for gamma {}", f.gamma));
                    }
                }
                for r in rep.rows.iter().filter(|r| r.failure.is_some()) {
                    summary.notes.push(format!("cell delta = {} failed", r.delta));
                }
                record.metrics.macro_steps = rep.macro_steps;
                summary.errors = rep.rows;
                summary.fits = rep.fits;
                summary.streams = rep.streams;
            }
            Command::Ldp => {
                let probe = cli.slow || cfg.experiment.ldp.probe;
                let rep = run_ldp_experiment(&cfg, probe)?;
                summary
                    .verdicts
                    .insert("rates_converged".into(), rep.rates.iter().all(|r| r.rate.is_none() || r.converged));
                summary.verdicts.insert(
                    "baseline_rate_zero".into(),
                    rep.rates.iter().any(|r| r.target_id == "baseline" && r.rate == Some(0.0)),
                );
                if probe {
                    summary
                        .verdicts
                        .insert("probe_within_factor_2".into(), rep.final_ratio.is_some_and(|q| (0.5..=2.0).contains(&q)));
                }
                summary.rates = rep.rates;
                summary.probes = rep.probes;
                summary.event_rate = rep.event_rate;
                summary.final_ratio = rep.final_ratio;
            }
            Command::Check => {
                let built = cfg.build_model()?;
                let report = assumption_report(&built, &cfg.sim)?;
                write_json(&out.join("assumptions.json"), &report)?;
                record.register_output(out, "assumptions.json")?;
                summary.verdicts.insert("dissipative".into(), report.flags.dissipative);
                summary.verdicts.insert("sigma2_bounded".into(), report.flags.sigma2_bounded);
                summary
                    .verdicts
                    .insert("sigma1_y_independent".into(), report.flags.sigma1_y_independent);
                report.require_dissipative()?;
            }
            Command::Picard => {
                let p = run_picard_experiment(&cfg)?;
                summary.verdicts.insert("picard_converged".into(), p.converged);
                summary.verdicts.insert(
                    "picard_contracts".into(),
                    p.gaps.windows(2).filter(|w| w[0] > 0.0).all(|w| w[1] < w[0]),
                );
                summary.picard = Some(p);
            }
            Command::Report => unreachable!(),
        }
        Ok(())
    })();

    record.metrics.wall_clock_s = if cli.deterministic { 0.0 } else { started.elapsed().as_secs_f64() };
    if let Err(e) = &outcome {
        record.status = RunStatus::Failed { message: e.to_string() };
        summary.notes.push(format!("failed: {e}"));
    }
    emit_report(&summary, &mut record, out, cli.deterministic)?;
    outcome?;
    Ok(!cli.assert || summary.passed())
}
