//! Command-line front end for the federated invariant-penalty experiments.
//!
//! Every subcommand reads one TOML experiment config, applies the global
//! `--seed` / `--out` overrides, and writes its artifacts under the output
//! directory. Exit codes: 0 on success, 1 for validation or I/O problems,
//! 2 when a run aborts on a numerical failure.

mod config;
mod plot;
mod setup;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedinv_core::data::container::save_container;
use fedinv_core::eval::{write_atomic, write_outputs};
use fedinv_core::rng;
use fedinv_core::sim::Sim;
use fedinv_core::theory::{
    self, convergence_check, estimate_constants, ood_bound_check, stale_ratio_check,
};
use fedinv_core::{CoreError, ParamVec};

use config::{ExperimentConfig, TheoryConfig};

#[derive(Parser)]
#[command(name = "fedinv", version, about = "Federated training with an invariant-gradient penalty")]
struct Cli {
    /// Experiment config (TOML). Required by every subcommand except plot.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppresses progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generates the configured environments into a dataset container.
    GenData,
    /// Runs only the pretraining probes and writes the contribution scores.
    PretrainScore,
    /// Runs the full federated experiment and writes all logs.
    Run,
    /// Reruns the experiment across the sweep grid of penalty weights.
    Sweep,
    /// Runs the experiment and verifies the analytical bounds against it.
    TheoryCheck,
    /// Renders summary curves from finished run directories as an SVG.
    Plot {
        /// Run directories containing a summary.csv.
        dirs: Vec<PathBuf>,
        /// Summary column to plot.
        #[arg(long, default_value = "global_loss")]
        metric: String,
    },
}

enum CliError {
    Validation(Vec<String>),
    Core(CoreError),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn one(msg: impl Into<String>) -> Self {
        CliError::Validation(vec![msg.into()])
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Core(CoreError::Numerical { .. } | CoreError::DegenerateGradient { .. }) => 2,
            CliError::Core(_) => 1,
        }
    }
}

/// Shared invocation state after the config is loaded and overrides applied.
struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    quiet: bool,
}

fn effective_threads(configured: usize) -> Result<usize, CliError> {
    match std::env::var("FEDINV_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(configured),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(CliError::one("FEDINV_THREADS is not valid unicode"))
        }
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n >= 1)
            .map(|cap| configured.min(cap))
            .ok_or_else(|| {
                CliError::one(format!("FEDINV_THREADS must be a positive integer, got {v:?}"))
            }),
    }
}

fn load_ctx(cli: &Cli) -> Result<Ctx, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::one("--config <file> is required for this subcommand"))?;
    let mut cfg = config::parse_config(path).map_err(CliError::Validation)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.schedule.threads = effective_threads(cfg.schedule.threads)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.outputs.dir));
    Ok(Ctx { cfg, out, quiet: cli.quiet })
}

fn say(ctx: &Ctx, msg: &str) {
    if !ctx.quiet {
        println!("{msg}");
    }
}

fn cmd_gen_data(ctx: &Ctx) -> Result<(), CliError> {
    let envs = setup::build_envs(&ctx.cfg, ctx.cfg.seed)?;
    std::fs::create_dir_all(&ctx.out)
        .map_err(|e| CliError::Core(CoreError::io(&ctx.out, e)))?;
    let path = ctx.out.join("dataset.bin");
    save_container(&path, &envs)?;
    let total: usize = envs.iter().map(|e| e.samples.len()).sum();
    say(
        ctx,
        &format!("wrote {} environments ({total} samples) to {}", envs.len(), path.display()),
    );
    Ok(())
}

fn cmd_pretrain_score(ctx: &Ctx) -> Result<(), CliError> {
    if !ctx.cfg.schedule.pretrain.enabled {
        return Err(CliError::one(
            "schedule.pretrain.enabled must be true for pretrain-score",
        ));
    }
    let (cohort, fed) = setup::build(&ctx.cfg, ctx.cfg.seed, ctx.cfg.schedule.threads)?;
    let mut sim = Sim::new(cohort, fed)?;
    let outcome = sim.pretrain_and_exit()?;
    std::fs::create_dir_all(&ctx.out)
        .map_err(|e| CliError::Core(CoreError::io(&ctx.out, e)))?;
    let json = serde_json::to_string_pretty(&outcome)
        .map_err(|e| CliError::one(format!("cannot serialize pretrain outcome: {e}")))?;
    write_atomic(&ctx.out.join("pretrain.json"), json.as_bytes())?;
    for (id, score) in &outcome.scores {
        let mark = if outcome.excluded.contains(id) { " (excluded)" } else { "" };
        say(ctx, &format!("client {id}: contribution {score}{mark}"));
    }
    say(ctx, &format!("{} of {} clients kept", outcome.selected.len(), outcome.scores.len()));
    Ok(())
}

fn cmd_run(ctx: &Ctx) -> Result<(), CliError> {
    let (cohort, fed) = setup::build(&ctx.cfg, ctx.cfg.seed, ctx.cfg.schedule.threads)?;
    let spec = fed.model.clone();
    let artifacts = Sim::run_experiment(cohort, fed)?;
    write_outputs(&ctx.out, &artifacts, &spec, None)?;
    if let Some(last) = artifacts.summaries.last() {
        say(
            ctx,
            &format!(
                "t={} loss={} id_acc={} ood_acc={} -> {}",
                last.t,
                last.global_loss,
                last.id_acc,
                last.ood_acc,
                ctx.out.display()
            ),
        );
    }
    Ok(())
}

fn cmd_sweep(ctx: &Ctx) -> Result<(), CliError> {
    let mut lambdas = ctx.cfg.sweep.clone().unwrap_or_default().lambdas;
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let mut rows = String::from("lambda,global_loss,id_acc,ood_acc\n");
    for lambda in &lambdas {
        let mut cfg = ctx.cfg.clone();
        cfg.schedule.lambda = *lambda;
        let (cohort, fed) = setup::build(&cfg, cfg.seed, cfg.schedule.threads)?;
        let spec = fed.model.clone();
        let artifacts = Sim::run_experiment(cohort, fed)?;
        let subdir = ctx.out.join(format!("lam_{lambda}"));
        write_outputs(&subdir, &artifacts, &spec, None)?;
        let last = artifacts
            .summaries
            .last()
            .ok_or_else(|| CoreError::Contract("run produced no summary rows".into()))?;
        writeln!(rows, "{},{},{},{}", lambda, last.global_loss, last.id_acc, last.ood_acc)
            .expect("string write");
        say(
            ctx,
            &format!(
                "lambda={lambda}: loss={} id_acc={} ood_acc={}",
                last.global_loss, last.id_acc, last.ood_acc
            ),
        );
    }
    write_atomic(&ctx.out.join("sweep.csv"), rows.as_bytes())?;
    Ok(())
}

fn cmd_theory_check(ctx: &Ctx) -> Result<(), CliError> {
    let tc: TheoryConfig = ctx.cfg.theory.clone().unwrap_or_default();
    let (cohort, fed) = setup::build(&ctx.cfg, ctx.cfg.seed, ctx.cfg.schedule.threads)?;
    let clients = cohort.clients.clone();
    let spec = fed.model.clone();
    let eta = fed.eta;
    let lambda = fed.penalty.lambda;
    let fed_for_constants = fed.clone();
    let artifacts = Sim::run_experiment(cohort, fed)?;
    say(ctx, "run finished, estimating constants");
    let constants = estimate_constants(&artifacts.trajectory, &clients, &fed_for_constants)?;
    for w in &constants.warnings {
        say(ctx, &format!("warning: {w}"));
    }
    let mut checks = Vec::new();
    checks.push(stale_ratio_check(
        &artifacts.trajectory,
        &clients,
        &spec,
        constants.l,
        constants.g,
        tc.max_tau,
    )?);
    let d = spec.arch.d_model();
    let scale = constants.beta.max(1.0) / (d as f64).sqrt();
    let mut probe_rng = rng::substream(ctx.cfg.seed, "theory-probe");
    let probes: Vec<ParamVec> = (0..tc.num_probes)
        .map(|_| {
            ParamVec::new((0..d).map(|_| scale * rng::normal(&mut probe_rng)).collect())
        })
        .collect::<fedinv_core::Result<_>>()?;
    checks.push(ood_bound_check(&probes, &clients, &spec, tc.upsilon, tc.grid_steps)?);
    if constants.mu_prime > 0.0 {
        let horizons = if tc.horizons.is_empty() {
            vec![ctx.cfg.schedule.t]
        } else {
            tc.horizons.clone()
        };
        checks.push(convergence_check(
            &artifacts.trajectory,
            &clients,
            &spec,
            lambda,
            eta,
            &constants,
            &horizons,
        )?);
    } else {
        say(ctx, "mu' = 0: convergence bound is vacuous, skipping that check");
    }
    let report = theory::TheoryReport {
        lambda_max: constants.lambda_max,
        constants,
        bound_checks: checks,
    };
    std::fs::create_dir_all(&ctx.out)
        .map_err(|e| CliError::Core(CoreError::io(&ctx.out, e)))?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::one(format!("cannot serialize theory report: {e}")))?;
    write_atomic(&ctx.out.join("theory.json"), json.as_bytes())?;
    for check in &report.bound_checks {
        say(
            ctx,
            &format!(
                "{}: {} (max violation {})",
                check.name,
                if check.satisfied { "satisfied" } else { "VIOLATED" },
                check.max_violation
            ),
        );
    }
    Ok(())
}

fn cmd_plot(cli: &Cli, dirs: &[PathBuf], metric: &str) -> Result<(), CliError> {
    if dirs.is_empty() {
        return Err(CliError::one("plot needs at least one run directory"));
    }
    let series = dirs
        .iter()
        .map(|d| plot::read_series(d, metric))
        .collect::<Result<Vec<_>, String>>()
        .map_err(|e| CliError::Validation(vec![e]))?;
    let svg = plot::line_chart(metric, &series);
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(|e| CliError::Core(CoreError::io(&out, e)))?;
    let path = out.join(format!("plot_{metric}.svg"));
    write_atomic(&path, svg.as_bytes())?;
    if !cli.quiet {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Plot { dirs, metric } => cmd_plot(cli, dirs, metric),
        Cmd::GenData => cmd_gen_data(&load_ctx(cli)?),
        Cmd::PretrainScore => cmd_pretrain_score(&load_ctx(cli)?),
        Cmd::Run => cmd_run(&load_ctx(cli)?),
        Cmd::Sweep => cmd_sweep(&load_ctx(cli)?),
        Cmd::TheoryCheck => cmd_theory_check(&load_ctx(cli)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Validation(msgs) => {
                    for m in msgs {
                        eprintln!("error: {m}");
                    }
                }
                CliError::Core(err) => eprintln!("error: {err}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}
