//! Command-line interface: demand generation, the three training stages,
//! evaluation, report assembly, and the selftest battery.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.

use crate::checks;
use crate::config::Config;
use crate::control::{Controller, FixedCycleController, PolicyController, RandomController};
use crate::demand::{
    load_od_csv, make_even_demand, parse_od_csv, ODMatrix, ScenarioSet, HELDOUT_CSV,
    NUM_SCENARIOS, SCENARIO_TOTAL,
};
use crate::eval::{
    build_report, evaluate_group, load_groups_csv, load_metrics_dir, rows_from_metrics,
    write_changes_csv, write_group_metrics, write_groups_csv, write_plot_csv, GroupMetrics,
};
use crate::grid::{build_grid, GridSpec, Network};
use crate::policy::{DensePolicy, PolicyHead};
use crate::sim::{derive_seed, SimState};
use crate::train::{
    train_baseline, train_drmarl, train_wce, PolicyScheduler, TrainHooks,
};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Seed stream tag for scenario-set generation.
const DEMAND_STREAM: u64 = 0xDE;

#[derive(Parser, Debug)]
#[command(
    name = "gridsignal",
    version,
    about = "Robust multi-agent signal control workbench on a 3x3 grid"
)]
pub struct Cli {
    /// Configuration file (TOML sections; defaults are paper-scale).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config's run.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Scale factor applied to training horizons and iteration counts.
    #[arg(long, global = true)]
    pub scale: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Print per-iteration progress.
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the eight scenario CSVs, the held-out placeholder, the even
    /// baseline matrix, and the network topology JSON.
    GenDemand,
    /// Train the baseline phase policy on even demand.
    TrainBaseline,
    /// Train the worst-case demand estimator against a frozen baseline.
    TrainWce {
        /// Baseline policy checkpoint.
        #[arg(long)]
        theta: PathBuf,
    },
    /// Fine-tune the baseline under the frozen estimator's demand schedule.
    TrainDrmarl {
        /// Baseline policy checkpoint (initialization).
        #[arg(long)]
        theta: PathBuf,
        /// Frozen estimator checkpoint (demand scheduler).
        #[arg(long)]
        psi: PathBuf,
    },
    /// Evaluate one controller over a group set.
    Evaluate {
        /// Controller: "random", "fixed" (two-phase 30 s), "cycle"
        /// (all phases 10 s), or a policy checkpoint path.
        #[arg(long)]
        controller: String,
        /// Label used in output file names (defaults to the controller).
        #[arg(long)]
        label: Option<String>,
        /// Groups to evaluate, e.g. "0-8" or "0,3,7". Default all.
        #[arg(long, default_value = "0-8")]
        groups: String,
        /// Held-out OD CSV for group 8 (defaults to the shipped placeholder).
        #[arg(long)]
        heldout: Option<PathBuf>,
        /// Load scenario_<k>.csv files from this directory instead of
        /// regenerating them from the seed.
        #[arg(long)]
        demand_dir: Option<PathBuf>,
        /// Also write a per-second state trace (one extra seeded rollout
        /// per group).
        #[arg(long)]
        trace: bool,
    },
    /// Build the robustness report from two evaluation directories, or from
    /// a fixtures CSV of published per-group metrics.
    Report {
        #[arg(long, required_unless_present = "fixtures")]
        baseline: Option<PathBuf>,
        #[arg(long, required_unless_present = "fixtures")]
        robust: Option<PathBuf>,
        /// Per-group metrics CSV (group,baseline_queue,robust_queue,
        /// baseline_speed,robust_speed); bypasses the evaluation artifacts.
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Run the invariant battery and exit nonzero on any failure.
    Selftest,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

fn validation<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

struct Env {
    config: Config,
    seed: u64,
    out: PathBuf,
    network: Arc<Network>,
    verbose: bool,
}

fn prepare(cli: &Cli) -> Result<Env, CliError> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path).map_err(validation)?,
        None => Config::default(),
    };
    if let Some(scale) = cli.scale {
        if scale <= 0.0 {
            return Err(CliError::Usage(format!(
                "--scale must be positive, got {scale}"
            )));
        }
        config = config.scaled(scale);
        config.validate().map_err(validation)?;
    }
    let seed = cli.seed.unwrap_or(config.run.seed);
    std::fs::create_dir_all(&cli.out).map_err(|e| {
        CliError::Runtime(format!("cannot create output dir {}: {e}", cli.out.display()))
    })?;
    let network = Arc::new(build_grid(&GridSpec::default()).map_err(validation)?);
    Ok(Env {
        config,
        seed,
        out: cli.out.clone(),
        network,
        verbose: cli.verbose,
    })
}

/// Deterministic scenario set for a master seed.
pub fn scenario_set_for_seed(config: &Config, seed: u64) -> ScenarioSet {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, DEMAND_STREAM));
    ScenarioSet::generate(&mut rng, &config.demand)
}

fn scenario_set_from_dir(dir: &Path) -> Result<ScenarioSet, CliError> {
    let mut matrices = Vec::with_capacity(NUM_SCENARIOS);
    for k in 0..NUM_SCENARIOS {
        let path = dir.join(format!("scenario_{k}.csv"));
        if !path.exists() {
            return Err(CliError::Validation(format!(
                "missing scenario file {}",
                path.display()
            )));
        }
        matrices.push(load_od_csv(&path).map_err(validation)?);
    }
    ScenarioSet::from_matrices(matrices).map_err(validation)
}

fn heldout_matrix(path: Option<&PathBuf>) -> Result<ODMatrix, CliError> {
    let od = match path {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Validation(format!(
                    "held-out OD file not found: {}",
                    p.display()
                )));
            }
            load_od_csv(p).map_err(validation)?
        }
        None => parse_od_csv(HELDOUT_CSV, "held-out").map_err(validation)?,
    };
    od.normalize_total(SCENARIO_TOTAL).map_err(validation)
}

fn load_checkpoint(path: &Path, head: PolicyHead, what: &str) -> Result<DensePolicy, CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "{what} checkpoint not found: {}",
            path.display()
        )));
    }
    let policy = DensePolicy::load(path).map_err(validation)?;
    if policy.head != head {
        return Err(CliError::Validation(format!(
            "{what} checkpoint {} has the wrong head for this stage",
            path.display()
        )));
    }
    Ok(policy)
}

fn make_controller(env: &Env, spec: &str) -> Result<Box<dyn Controller>, CliError> {
    match spec {
        "random" => Ok(Box::new(RandomController)),
        "fixed" => Ok(Box::new(FixedCycleController::two_phase_30s())),
        "cycle" => Ok(Box::new(FixedCycleController::all_phases_10s())),
        path => {
            let policy = load_checkpoint(Path::new(path), PolicyHead::Categorical, "policy")?;
            let label = Path::new(path)
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "policy".to_string());
            Ok(Box::new(PolicyController::new(
                policy,
                env.config.obs.clone(),
                &label,
            )))
        }
    }
}

fn parse_groups(spec: &str) -> Result<Vec<usize>, CliError> {
    let bad = |s: &str| CliError::Usage(format!("invalid --groups value {s:?}"));
    let mut groups = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once('-') {
            let a: usize = a.trim().parse().map_err(|_| bad(spec))?;
            let b: usize = b.trim().parse().map_err(|_| bad(spec))?;
            if a > b || b > 8 {
                return Err(bad(spec));
            }
            groups.extend(a..=b);
        } else {
            let g: usize = part.parse().map_err(|_| bad(spec))?;
            if g > 8 {
                return Err(bad(spec));
            }
            groups.push(g);
        }
    }
    groups.sort_unstable();
    groups.dedup();
    Ok(groups)
}

fn hooks(env: &Env, stage: &'static str) -> TrainHooks {
    TrainHooks {
        out_dir: Some(env.out.clone()),
        checkpoint_interval: env.config.run.checkpoint_interval,
        stage,
        verbose: env.verbose,
    }
}

fn cmd_gen_demand(env: &Env) -> Result<(), CliError> {
    let set = scenario_set_for_seed(&env.config, env.seed);
    for (k, od) in set.iter().enumerate() {
        let path = env.out.join(format!("scenario_{k}.csv"));
        od.write_csv(&path).map_err(runtime)?;
        println!("wrote {} (total {:.3} veh/h, {})", path.display(), od.total(), od.label);
    }
    let heldout = heldout_matrix(None)?;
    let heldout_path = env.out.join("heldout.csv");
    heldout.write_csv(&heldout_path).map_err(runtime)?;
    println!("wrote {} (total {:.3} veh/h)", heldout_path.display(), heldout.total());
    let even = make_even_demand();
    let even_path = env.out.join("even.csv");
    even.write_csv(&even_path).map_err(runtime)?;
    println!("wrote {} (total {:.3} veh/h)", even_path.display(), even.total());
    let topo_path = env.out.join("topology.json");
    let doc = serde_json::to_vec_pretty(&env.network.topology_json()).expect("topology");
    std::fs::write(&topo_path, doc).map_err(runtime)?;
    println!("wrote {}", topo_path.display());
    Ok(())
}

fn cmd_train_baseline(env: &Env) -> Result<(), CliError> {
    let ctx = env.config.train_context(env.seed);
    let (theta, curve) = train_baseline(
        &env.network,
        &ctx,
        &env.config.train.baseline,
        &env.config.policy.tl_hidden,
        &hooks(env, "baseline"),
    )
    .map_err(runtime)?;
    let path = env.out.join("theta_baseline.ckpt");
    theta.save(&path).map_err(runtime)?;
    if let Some(last) = curve.last() {
        println!(
            "baseline: {} iterations, final mean queue {:.2}, mean speed {:.2}",
            curve.len(),
            last.mean_queue,
            last.mean_speed
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_train_wce(env: &Env, theta_path: &Path) -> Result<(), CliError> {
    let theta = load_checkpoint(theta_path, PolicyHead::Categorical, "baseline")?;
    let scenarios = scenario_set_for_seed(&env.config, env.seed);
    let ctx = env.config.train_context(env.seed);
    let (psi, curve) = train_wce(
        &env.network,
        &ctx,
        &env.config.train.wce,
        &theta,
        &scenarios,
        &env.config.policy.wce_hidden,
        &hooks(env, "wce"),
    )
    .map_err(runtime)?;
    let path = env.out.join("psi_wce.ckpt");
    psi.save(&path).map_err(runtime)?;
    if let Some(last) = curve.last() {
        println!(
            "wce: {} iterations, final mean window waiting time {:.0} veh-s",
            curve.len(),
            last.mean_return
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_train_drmarl(env: &Env, theta_path: &Path, psi_path: &Path) -> Result<(), CliError> {
    let theta0 = load_checkpoint(theta_path, PolicyHead::Categorical, "baseline")?;
    let psi = load_checkpoint(psi_path, PolicyHead::Dirichlet, "estimator")?;
    let scenarios = scenario_set_for_seed(&env.config, env.seed);
    let ctx = env.config.train_context(env.seed);
    let (theta, curve) = train_drmarl(
        &env.network,
        &ctx,
        &env.config.train.drmarl,
        theta0,
        &PolicyScheduler(&psi),
        &scenarios,
        &hooks(env, "drmarl"),
    )
    .map_err(runtime)?;
    let path = env.out.join("theta_dr.ckpt");
    theta.save(&path).map_err(runtime)?;
    if let Some(last) = curve.last() {
        println!(
            "drmarl: {} iterations, final mean queue {:.2}, mean speed {:.2}",
            curve.len(),
            last.mean_queue,
            last.mean_speed
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// One extra seeded rollout emitting the per-second state trace.
fn write_trace(
    env: &Env,
    controller: &dyn Controller,
    od: &ODMatrix,
    group: usize,
    label: &str,
) -> Result<(), CliError> {
    let params = &env.config.eval;
    let mut state = SimState::new(env.network.clone(), env.config.sim.clone(), derive_seed(env.seed, 0x7AACE));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(env.seed, 0x7AACF));
    let mut out = String::new();
    for _ in 0..params.warmup + params.horizon {
        let actions = controller.actions(&state, &mut rng);
        state.step(&actions, od).map_err(runtime)?;
        let phases: Vec<usize> = state.signals.iter().map(|s| s.current_phase).collect();
        out.push_str(&format!(
            "{{\"t\":{},\"queue\":{},\"speed\":{:.6},\"phases\":{:?}}}\n",
            state.clock,
            state.queue_count(),
            state.mean_speed(),
            phases
        ));
    }
    let path = env.out.join(format!("group{group}_{label}.trace.jsonl"));
    std::fs::write(&path, out).map_err(runtime)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    env: &Env,
    controller_spec: &str,
    label: Option<&String>,
    groups_spec: &str,
    heldout: Option<&PathBuf>,
    demand_dir: Option<&PathBuf>,
    trace: bool,
) -> Result<(), CliError> {
    let controller = make_controller(env, controller_spec)?;
    let label = label.cloned().unwrap_or_else(|| controller.label());
    let groups = parse_groups(groups_spec)?;
    let scenarios = match demand_dir {
        Some(dir) => scenario_set_from_dir(dir)?,
        None => scenario_set_for_seed(&env.config, env.seed),
    };
    let heldout_od = heldout_matrix(heldout)?;
    let ctx = env.config.eval_context();
    for &group in &groups {
        let od = if group < NUM_SCENARIOS {
            scenarios.scenario(group).clone()
        } else {
            heldout_od.clone()
        };
        let mut metrics = evaluate_group(
            &env.network,
            &ctx,
            controller.as_ref(),
            group,
            &od,
            &env.config.eval,
            derive_seed(env.seed, 0xE7A0 + group as u64),
        )
        .map_err(runtime)?;
        metrics.controller = label.clone();
        write_group_metrics(&metrics, &env.out).map_err(runtime)?;
        println!(
            "group {group} ({}): mean queue {:.3}, mean speed {:.3} over {} rollouts",
            od.label, metrics.mean_queue, metrics.mean_speed, metrics.rollouts
        );
        if trace {
            write_trace(env, controller.as_ref(), &od, group, &label)?;
        }
    }
    println!("wrote evaluation artifacts to {}", env.out.display());
    Ok(())
}

fn cmd_report(
    env: &Env,
    baseline: Option<&PathBuf>,
    robust: Option<&PathBuf>,
    fixtures: Option<&PathBuf>,
) -> Result<(), CliError> {
    let (rows, metrics) = match fixtures {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Validation(format!(
                    "fixtures file not found: {}",
                    path.display()
                )));
            }
            (load_groups_csv(path).map_err(validation)?, None)
        }
        None => {
            let baseline_dir = baseline.expect("clap enforces presence");
            let robust_dir = robust.expect("clap enforces presence");
            let baseline_metrics = load_metrics_dir(baseline_dir).map_err(validation)?;
            let robust_metrics = load_metrics_dir(robust_dir).map_err(validation)?;
            if baseline_metrics.is_empty() || robust_metrics.is_empty() {
                return Err(CliError::Validation(
                    "no group metrics found in the evaluation directories".into(),
                ));
            }
            let rows = rows_from_metrics(&baseline_metrics, &robust_metrics).map_err(validation)?;
            (rows, Some((baseline_metrics, robust_metrics)))
        }
    };
    let report = build_report(&rows).map_err(validation)?;
    write_groups_csv(&rows, &env.out.join("table_groups.csv")).map_err(runtime)?;
    write_changes_csv(&report, &env.out.join("table_changes.csv")).map_err(runtime)?;
    let summary = serde_json::to_vec_pretty(&report).expect("report serializes");
    std::fs::write(env.out.join("summary.json"), summary).map_err(runtime)?;
    if let Some((baseline_metrics, robust_metrics)) = metrics {
        let plots = env.out.join("plots");
        std::fs::create_dir_all(&plots).map_err(runtime)?;
        let emit = |m: &[GroupMetrics], who: &str| -> Result<(), CliError> {
            write_plot_csv(m, "queue", &plots.join(format!("{who}_queue.csv"))).map_err(runtime)?;
            write_plot_csv(m, "speed", &plots.join(format!("{who}_speed.csv"))).map_err(runtime)
        };
        emit(&baseline_metrics, "baseline")?;
        emit(&robust_metrics, "robust")?;
    }
    println!("per-group relative changes (percent):");
    for (row, (q, s)) in report
        .rows
        .iter()
        .zip(report.queue_change_pct.iter().zip(report.speed_change_pct.iter()))
    {
        println!("  group {}: queue {:+.3}, speed {:+.3}", row.group, q, s);
    }
    let wc = &report.worst_case;
    println!(
        "worst-case queue: baseline {:.3} (group {}) vs robust {:.3} (group {}): {:+.2}%",
        wc.baseline_worst_queue,
        wc.baseline_worst_queue_group,
        wc.robust_worst_queue,
        wc.robust_worst_queue_group,
        wc.queue_change_pct
    );
    println!(
        "worst-case speed: baseline {:.3} (group {}) vs robust {:.3} (group {}): {:+.2}%",
        wc.baseline_worst_speed,
        wc.baseline_worst_speed_group,
        wc.robust_worst_speed,
        wc.robust_worst_speed_group,
        wc.speed_change_pct
    );
    println!(
        "J_avg baseline {:.3} robust {:.3}; J_worst baseline {:.3} (group {}) robust {:.3} (group {})",
        report.baseline_j.j_avg,
        report.robust_j.j_avg,
        report.baseline_j.j_worst,
        report.baseline_j.worst_group,
        report.robust_j.j_worst,
        report.robust_j.worst_group
    );
    println!("wrote report artifacts to {}", env.out.display());
    Ok(())
}

fn cmd_selftest(env: &Env) -> Result<(), CliError> {
    let outcomes = checks::run_selftest(env.seed);
    let mut failed = false;
    for outcome in &outcomes {
        println!(
            "{:<28} {} ({})",
            outcome.name,
            if outcome.passed { "PASS" } else { "FAIL" },
            outcome.detail
        );
        failed |= !outcome.passed;
    }
    if failed {
        Err(CliError::Validation("selftest failures".into()))
    } else {
        Ok(())
    }
}

/// Entry point used by `main`; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let env = match prepare(&cli) {
        Ok(env) => env,
        Err(e) => {
            eprintln!("error: {}", e.message());
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::GenDemand => cmd_gen_demand(&env),
        Command::TrainBaseline => cmd_train_baseline(&env),
        Command::TrainWce { theta } => cmd_train_wce(&env, theta),
        Command::TrainDrmarl { theta, psi } => cmd_train_drmarl(&env, theta, psi),
        Command::Evaluate {
            controller,
            label,
            groups,
            heldout,
            demand_dir,
            trace,
        } => cmd_evaluate(
            &env,
            controller,
            label.as_ref(),
            groups,
            heldout.as_ref(),
            demand_dir.as_ref(),
            *trace,
        ),
        Command::Report {
            baseline,
            robust,
            fixtures,
        } => cmd_report(&env, baseline.as_ref(), robust.as_ref(), fixtures.as_ref()),
        Command::Selftest => cmd_selftest(&env),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
