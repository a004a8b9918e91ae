use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use lsd_core::checkpoint::load_checkpoint;
use lsd_core::config::{parse_config, ExperimentConfig};
use lsd_core::experiment::{
    eval_seed, evaluate_rollouts, run_ablation, train, zero_shot_table, AblationRow, EvalRow, RunOutput,
};
use lsd_core::metrics::{export_results, plot_points, ExportFormat, ExportHeader};
use lsd_core::reward::RewardVariant;
use lsd_core::trainer::RunState;
use lsd_core::verify;
use lsd_core::{Error, Result};

#[derive(Parser)]
#[command(name = "lsd", version, about = "Lipschitz-constrained skill discovery on PointEnv")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (JSON) or preset name.
    #[arg(long, default_value = "pointenv-lsd")]
    config: String,
    /// Dotted-key override, e.g. `schedule.epochs=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Threads used for rollout collection.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        parse_config(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a skill-discovery run; writes metrics, evaluations and checkpoints.
    Train(Common),
    /// Zero-shot goal-reaching success for one or more checkpoints.
    EvalZeroshot {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to evaluate (one per seed).
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Skill norm for the directional scheme; defaults to the prior's mean norm.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// State-space coverage of evaluation rollouts for checkpoints.
    Coverage {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Short runs over every reward design, reporting coverage.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Epochs per cell.
        #[arg(long, default_value_t = 400)]
        epochs: u64,
        /// Restrict to these variants (`form/arg/sn-on|sn-off`).
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
    /// Trajectory points `(trajectory, hue, x, y)` for plotting.
    ExportPlot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        trajectories: usize,
    },
    /// Run the numerical self-checks.
    Verify,
}

fn header_for(config: &ExperimentConfig) -> ExportHeader {
    ExportHeader {
        config_digest: config.digest(),
        seed: config.seed,
    }
}

fn load_runs(common: &Common, paths: &[PathBuf]) -> Result<Vec<RunState>> {
    paths
        .iter()
        .map(|p| {
            let mut run = load_checkpoint(p, None)?;
            run.workers = common.workers;
            Ok(run)
        })
        .collect()
}

fn out_file(common: &Common, name: &str) -> PathBuf {
    common.out.join(name)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let config = common.load()?;
            let dir = common.out.join(format!("{}-seed{}", config.name, config.seed));
            let mut run = RunState::new(config)?;
            run.workers = common.workers;
            let output = RunOutput { dir: dir.clone() };
            train(&mut run, Some(&output), None)?;
            let e = evaluate_rollouts(&run, run.config.eval.coverage_trajectories)?;
            println!(
                "trained {} epochs; coverage {} traveled distance {:.3} ({:.3} env units); artifacts in {}",
                run.epoch,
                e.coverage,
                e.traveled_distance,
                e.raw_displacement,
                dir.display()
            );
        }
        Command::EvalZeroshot { common, checkpoints, alpha } => {
            let runs = load_runs(&common, &checkpoints)?;
            let mut rows = Vec::new();
            for run in &runs {
                rows.extend(zero_shot_table(run, alpha)?);
            }
            let path = out_file(&common, "zeroshot.csv");
            export_results(&rows, &header_for(&runs[0].config), &path, ExportFormat::Csv)?;
            print_zero_shot_summary(&rows);
            println!("wrote {}", path.display());
        }
        Command::Coverage { common, checkpoints } => {
            let runs = load_runs(&common, &checkpoints)?;
            let mut rows: Vec<EvalRow> = Vec::new();
            for run in &runs {
                let row = evaluate_rollouts(run, run.config.eval.coverage_trajectories)?;
                println!(
                    "seed {}: coverage {} traveled distance {:.3} ({:.3} env units)",
                    run.config.seed, row.coverage, row.traveled_distance, row.raw_displacement
                );
                rows.push(row);
            }
            let path = out_file(&common, "coverage.csv");
            export_results(&rows, &header_for(&runs[0].config), &path, ExportFormat::Csv)?;
            println!("wrote {}", path.display());
        }
        Command::Ablate { common, epochs, variants } => {
            let mut base = common.load()?;
            base.schedule.epochs = epochs;
            let grid = if variants.is_empty() {
                RewardVariant::grid()
            } else {
                variants.iter().map(|v| RewardVariant::parse(v)).collect::<Result<Vec<_>>>()?
            };
            let rows = run_ablation(&base, &grid, common.workers)?;
            print_ablation(&rows);
            let path = out_file(&common, "ablation.csv");
            export_results(&rows, &header_for(&base), &path, ExportFormat::Csv)?;
            println!("wrote {}", path.display());
        }
        Command::ExportPlot { common, checkpoint, trajectories } => {
            let mut runs = load_runs(&common, std::slice::from_ref(&checkpoint))?;
            let run = runs.remove(0);
            let trajs = run.evaluation_rollouts(trajectories, eval_seed(run.config.seed))?;
            let path = out_file(&common, "plot.csv");
            export_results(&plot_points(&trajs), &header_for(&run.config), &path, ExportFormat::Csv)?;
            println!("wrote {}", path.display());
        }
        Command::Verify => {
            let outcomes = verify::run_all();
            let mut failed = 0;
            for o in &outcomes {
                println!("{} {:<20} {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                failed += usize::from(!o.passed);
            }
            if failed > 0 {
                return Err(Error::Verification(format!("{failed} of {} checks failed", outcomes.len())));
            }
            println!("all {} checks passed", outcomes.len());
        }
    }
    Ok(())
}

fn print_zero_shot_summary(rows: &[lsd_core::zeroshot::ZeroShotResult]) {
    let mut tasks: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !tasks.iter().any(|(t, g)| *t == r.task && *g == r.goal_range) {
            tasks.push((r.task.clone(), r.goal_range));
        }
    }
    let cells: Vec<String> = tasks
        .iter()
        .map(|(task, g)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.task == *task && r.goal_range == *g)
                .map(|r| r.mean_return)
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            format!("{task}: {mean:.2} ± {sd:.2}")
        })
        .collect();
    println!("{}", cells.join(" | "));
}

fn print_ablation(rows: &[AblationRow]) {
    let mut sorted: Vec<&AblationRow> = rows.iter().collect();
    sorted.sort_by(|a, b| b.coverage.cmp(&a.coverage));
    println!("{:<40} {:>8} {:>10} {:>10}", "variant", "coverage", "distance", "env units");
    for r in sorted {
        println!(
            "{:<40} {:>8} {:>10.3} {:>10.3}",
            r.variant, r.coverage, r.traveled_distance, r.raw_displacement
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            info!("exiting with status {}", e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
