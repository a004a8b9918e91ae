//! Whole runs: training with logs and checkpoints, and the evaluations built
//! on top of trained runs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{raw_displacement, state_coverage, traveled_distance, ExportHeader, ResultRecord};
use crate::reward::RewardVariant;
use crate::trainer::{EpochMetrics, RunState};
use crate::zeroshot::{evaluate_zero_shot, ZeroShotPolicy, ZeroShotResult};

impl ResultRecord for EpochMetrics {
    const COLUMNS: &'static [&'static str] = &EpochMetrics::CSV_HEADER;
}

/// Seeds for evaluation are derived from the run seed but kept apart from the
/// streams used during training.
pub fn eval_seed(run_seed: u64) -> u64 {
    run_seed ^ 0xE7A1_5EED_0000_0000
}

/// Appends rows to a CSV that starts with digest/seed comment lines.
pub struct CsvLog {
    writer: csv::Writer<BufWriter<File>>,
    path: PathBuf,
}

impl CsvLog {
    pub fn create(path: &Path, header: &ExportHeader, columns: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "# config_digest={}", header.config_digest).map_err(|e| Error::io(path, e))?;
        writeln!(out, "# seed={}", header.seed).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        writer
            .write_record(columns)
            .map_err(|e| Error::Export(e.to_string()))?;
        Ok(Self {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn append<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.writer
            .serialize(row)
            .map_err(|e| Error::Export(e.to_string()))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Periodic evaluation during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub epoch: u64,
    pub coverage: usize,
    /// In the network's (possibly normalized) state space.
    pub traveled_distance: f64,
    /// In environment units.
    pub raw_displacement: f64,
}

impl ResultRecord for EvalRow {
    const COLUMNS: &'static [&'static str] = &["epoch", "coverage", "traveled_distance", "raw_displacement"];
}

/// Coverage and traveled distance of `episodes` evaluation rollouts.
pub fn evaluate_rollouts(run: &RunState, episodes: usize) -> Result<EvalRow> {
    let trajs = run.evaluation_rollouts(episodes, eval_seed(run.config.seed))?;
    Ok(EvalRow {
        epoch: run.epoch,
        coverage: state_coverage(&trajs, run.config.eval.coverage_bin)?,
        traveled_distance: traveled_distance(&trajs)?,
        raw_displacement: raw_displacement(&trajs)?,
    })
}

/// Where a training run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn metrics_csv(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn eval_csv(&self) -> PathBuf {
        self.dir.join("eval.csv")
    }

    pub fn checkpoint(&self, epoch: u64) -> PathBuf {
        self.dir.join(format!("checkpoint-{epoch:06}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn diverged_checkpoint(&self) -> PathBuf {
        self.dir.join("diverged.ckpt")
    }
}

/// Hook called after selected epochs, e.g. to take a mid-run snapshot.
pub type EpochHook<'a> = dyn FnMut(&RunState) -> Result<()> + 'a;

/// Trains `run` up to the configured epoch count. With an output directory,
/// writes the metric log, periodic evaluations and checkpoints there. A
/// non-finite metric stops the run after dumping the pre-epoch state.
pub fn train(run: &mut RunState, output: Option<&RunOutput>, hook: Option<&mut EpochHook<'_>>) -> Result<()> {
    let header = ExportHeader {
        config_digest: run.config.digest(),
        seed: run.config.seed,
    };
    let mut logs = match output {
        Some(out) => {
            fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
            let config_path = out.dir.join("config.json");
            fs::write(&config_path, run.config.to_json_pretty()).map_err(|e| Error::io(&config_path, e))?;
            Some((
                CsvLog::create(&out.metrics_csv(), &header, EpochMetrics::COLUMNS)?,
                CsvLog::create(&out.eval_csv(), &header, EvalRow::COLUMNS)?,
            ))
        }
        None => None,
    };
    let mut hook = hook;
    let total = run.config.schedule.epochs;
    while run.epoch < total {
        let before = output.map(|_| run.clone());
        let metrics = match run.train_epoch() {
            Ok(m) => m,
            Err(e @ Error::Training(_)) => {
                if let (Some(out), Some(snapshot)) = (output, before) {
                    let path = out.diverged_checkpoint();
                    match save_checkpoint(&snapshot, &path) {
                        Ok(()) => warn!("diverged at epoch {}; state dumped to {}", snapshot.epoch + 1, path.display()),
                        Err(save) => warn!("diverged and could not dump state: {save}"),
                    }
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some((m, _)) = logs.as_mut() {
            m.append(&metrics)?;
        }
        let every = run.config.eval.every_epochs;
        if every > 0 && run.epoch % every == 0 {
            let row = evaluate_rollouts(run, run.config.eval.episodes)?;
            info!(
                "epoch {} reward {:.3} coverage {} distance {:.2}",
                run.epoch, metrics.mean_intrinsic_reward, row.coverage, row.traveled_distance
            );
            if let Some((_, e)) = logs.as_mut() {
                e.append(&row)?;
            }
        }
        if let Some(out) = output {
            let every = run.config.checkpoint_every;
            if every > 0 && run.epoch % every == 0 {
                save_checkpoint(run, &out.checkpoint(run.epoch))?;
            }
        }
        if let Some(h) = hook.as_deref_mut() {
            h(run)?;
        }
    }
    if let Some(out) = output {
        save_checkpoint(run, &out.final_checkpoint())?;
    }
    Ok(())
}

/// Zero-shot results for every configured single- and multi-goal range.
pub fn zero_shot_table(run: &RunState, alpha: Option<f64>) -> Result<Vec<ZeroShotResult>> {
    let ctl = ZeroShotPolicy::for_run(run, alpha)?;
    let eval = &run.config.eval;
    let seed = eval_seed(run.config.seed);
    let mut rows = Vec::new();
    for &g in &eval.goal_ranges {
        rows.push(evaluate_zero_shot(&ctl, run.config.goal_task(g), eval.episodes_per_task, seed)?);
    }
    for &g in &eval.multi_goal_ranges {
        rows.push(evaluate_zero_shot(&ctl, run.config.multi_goal_task(g), eval.episodes_per_task, seed)?);
    }
    Ok(rows.into_iter().map(|mut r| {
        r.seed = run.config.seed;
        r
    }).collect())
}

impl ResultRecord for ZeroShotResult {
    const COLUMNS: &'static [&'static str] = &[
        "scheme",
        "task",
        "goal_range",
        "seed",
        "mean_return",
        "std_error",
        "episodes",
        "mean_skill_norm",
    ];
}

/// One cell of the reward-design grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub epochs: u64,
    pub coverage: usize,
    pub traveled_distance: f64,
    pub raw_displacement: f64,
}

impl ResultRecord for AblationRow {
    const COLUMNS: &'static [&'static str] =
        &["variant", "seed", "epochs", "coverage", "traveled_distance", "raw_displacement"];
}

/// Trains one short run per variant and measures coverage of the configured
/// number of evaluation trajectories.
pub fn run_ablation(base: &ExperimentConfig, variants: &[RewardVariant], workers: usize) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = base.clone().with_variant(*v);
        let mut run = RunState::new(cfg)?;
        run.workers = workers;
        train(&mut run, None, None)?;
        let e = evaluate_rollouts(&run, run.config.eval.coverage_trajectories)?;
        info!("ablation {v}: coverage {} distance {:.2}", e.coverage, e.traveled_distance);
        rows.push(AblationRow {
            variant: v.to_string(),
            seed: run.config.seed,
            epochs: run.epoch,
            coverage: e.coverage,
            traveled_distance: e.traveled_distance,
            raw_displacement: e.raw_displacement,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{read_results, ExportFormat};

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::pointenv_lsd()
            .with_overrides(&[
                "network.hidden_width=8",
                "schedule.episodes_per_epoch=4",
                "schedule.minibatch_size=20",
                "schedule.epochs=4",
                "eval.every_epochs=2",
                "eval.episodes=5",
                "checkpoint_every=2",
            ])
            .unwrap()
    }

    #[test]
    fn training_writes_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let out = RunOutput { dir: dir.path().to_path_buf() };
        let mut run = RunState::new(tiny()).unwrap();
        let mut seen = Vec::new();
        let mut hook = |r: &RunState| {
            seen.push(r.epoch);
            Ok(())
        };
        train(&mut run, Some(&out), Some(&mut hook)).unwrap();
        assert_eq!(seen, vec![1, 2, 3, 4]);
        let (h, rows) = read_results::<EpochMetrics>(&out.metrics_csv(), ExportFormat::Csv).unwrap();
        assert_eq!(h.config_digest, run.config.digest());
        assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        let (_, evals) = read_results::<EvalRow>(&out.eval_csv(), ExportFormat::Csv).unwrap();
        assert_eq!(evals.len(), 2);
        assert!(out.checkpoint(2).exists() && out.checkpoint(4).exists());
        assert!(out.final_checkpoint().exists());
    }

    #[test]
    fn rerun_produces_identical_artifacts() {
        let read = |p: PathBuf| fs::read(p).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [&a, &b] {
            let out = RunOutput { dir: d.path().to_path_buf() };
            train(&mut RunState::new(tiny()).unwrap(), Some(&out), None).unwrap();
        }
        for name in ["metrics.csv", "eval.csv", "final.ckpt", "config.json"] {
            assert_eq!(read(a.path().join(name)), read(b.path().join(name)), "{name}");
        }
    }

    #[test]
    fn zero_shot_table_has_one_row_per_task() {
        let cfg = tiny().with_overrides(&["eval.episodes_per_task=2"]).unwrap();
        let run = RunState::new(cfg).unwrap();
        let rows = zero_shot_table(&run, None).unwrap();
        assert_eq!(rows.len(), 7);
        assert!(rows.iter().all(|r| r.episodes == 2));
    }
}
