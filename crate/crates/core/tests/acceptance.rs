//! End-to-end acceptance run. Trains four LSD and four DIAYN seeds for the
//! full 5000 epochs, runs the 24-cell reward ablation and the verification
//! suite, then prints one PASS/FAIL line per criterion. Expect well over an
//! hour on a single core.

use std::io::Write;
use std::time::{Duration, Instant};

use lsd_core::config::ExperimentConfig;
use lsd_core::experiment::{eval_seed, evaluate_rollouts, run_ablation, train, AblationRow};
use lsd_core::reward::RewardVariant;
use lsd_core::trainer::RunState;
use lsd_core::verify;
use lsd_core::zeroshot::{evaluate_zero_shot, ZeroShotPolicy};
use lsd_core::Result;

/// Writes straight to stderr so the lines survive the test harness's output
/// capture.
macro_rules! report {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stderr().lock(), $($arg)*);
    }};
}

const SEEDS: [u64; 4] = [0, 1, 2, 3];
const ZERO_SHOT_EPISODES: usize = 100;
const REDUCED_EPOCH: u64 = 1000;
const ABLATION_EPOCHS: u64 = 400;
const WALL_CLOCK_LIMIT: Duration = Duration::from_secs(60 * 60);

struct SeedReport {
    seed: u64,
    wall: Duration,
    goal10_reduced: Option<f64>,
    goal10: f64,
    goal40: f64,
    multi10: f64,
    displacement: f64,
}

fn goal_success(run: &RunState, range: f64, multi: bool) -> Result<f64> {
    let ctl = ZeroShotPolicy::for_run(run, None)?;
    let task = if multi { run.config.multi_goal_task(range) } else { run.config.goal_task(range) };
    Ok(evaluate_zero_shot(&ctl, task, ZERO_SHOT_EPISODES, eval_seed(run.config.seed))?.mean_return)
}

fn train_seed(preset: &str, seed: u64) -> Result<SeedReport> {
    let config = ExperimentConfig::preset(preset)?.with_overrides(&[format!("seed={seed}")])?;
    let mut run = RunState::new(config)?;
    let mut reduced = None;
    let mut hook = |r: &RunState| -> Result<()> {
        if r.epoch == REDUCED_EPOCH {
            reduced = Some(goal_success(r, 10.0, false)?);
        }
        Ok(())
    };
    let started = Instant::now();
    train(&mut run, None, Some(&mut hook))?;
    let wall = started.elapsed();
    let eval = evaluate_rollouts(&run, run.config.eval.coverage_trajectories)?;
    let report = SeedReport {
        seed,
        wall,
        goal10_reduced: reduced,
        goal10: goal_success(&run, 10.0, false)?,
        goal40: goal_success(&run, 40.0, false)?,
        multi10: goal_success(&run, 10.0, true)?,
        displacement: eval.raw_displacement,
    };
    report!(
        "  {preset} seed {}: {:.0}s, g10@{REDUCED_EPOCH} {:.2}, g10 {:.2}, g40 {:.2}, multi g10 {:.2}, distance {:.2}",
        report.seed,
        report.wall.as_secs_f64(),
        report.goal10_reduced.unwrap_or(f64::NAN),
        report.goal10,
        report.goal40,
        report.multi10,
        report.displacement
    );
    Ok(report)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct Verdicts(Vec<(u32, bool, String)>);

impl Verdicts {
    fn record(&mut self, id: u32, passed: bool, detail: String) {
        report!("{} criterion {id}: {detail}", if passed { "PASS" } else { "FAIL" });
        self.0.push((id, passed, detail));
    }
}

fn coverage_of(rows: &[AblationRow], variant: RewardVariant) -> usize {
    let name = variant.to_string();
    rows.iter()
        .find(|r| r.variant == name)
        .unwrap_or_else(|| panic!("ablation grid is missing {name}"))
        .coverage
}

#[test]
fn acceptance() {
    let mut verdicts = Verdicts(Vec::new());

    report!("training LSD");
    let lsd: Vec<SeedReport> = SEEDS.iter().map(|&s| train_seed("pointenv-lsd", s).unwrap()).collect();
    report!("training DIAYN");
    let diayn: Vec<SeedReport> = SEEDS.iter().map(|&s| train_seed("pointenv-diayn", s).unwrap()).collect();

    let g10 = mean(lsd.iter().map(|r| r.goal10));
    let g10_reduced = mean(lsd.iter().map(|r| r.goal10_reduced.expect("reduced checkpoint evaluated")));
    let slowest = lsd.iter().map(|r| r.wall).max().unwrap();
    verdicts.record(
        1,
        g10 >= 0.95 && g10_reduced >= 0.85 && slowest <= WALL_CLOCK_LIMIT,
        format!(
            "PointGoal g_s=10 success {g10:.3} (need >= 0.95), after {REDUCED_EPOCH} epochs {g10_reduced:.3} \
             (need >= 0.85), slowest seed {:.1} min (limit 60)",
            slowest.as_secs_f64() / 60.0
        ),
    );

    let lsd40 = mean(lsd.iter().map(|r| r.goal40));
    let diayn40 = mean(diayn.iter().map(|r| r.goal40));
    verdicts.record(
        2,
        lsd40 - diayn40 >= 0.5,
        format!("PointGoal g_s=40 LSD {lsd40:.3} vs DIAYN {diayn40:.3}, gap {:.3} (need >= 0.5)", lsd40 - diayn40),
    );

    let multi = mean(lsd.iter().map(|r| r.multi10));
    verdicts.record(3, multi >= 3.5, format!("PointMultiGoals g_m=10 return {multi:.3} (need >= 3.5)"));

    let lsd_dist = mean(lsd.iter().map(|r| r.displacement));
    let diayn_dist = mean(diayn.iter().map(|r| r.displacement));
    verdicts.record(
        4,
        lsd_dist >= 10.0 && diayn_dist < lsd_dist,
        format!("traveled distance LSD {lsd_dist:.3} (need >= 10.0), DIAYN {diayn_dist:.3} (need < LSD)"),
    );

    report!("ablation grid");
    let mut base = ExperimentConfig::preset("pointenv-lsd").unwrap();
    base.schedule.epochs = ABLATION_EPOCHS;
    let rows = run_ablation(&base, &RewardVariant::grid(), 1).unwrap();
    for r in &rows {
        report!("  {:<40} coverage {:>5} distance {:.2}", r.variant, r.coverage, r.raw_displacement);
    }
    let lsd_cov = coverage_of(&rows, RewardVariant::LSD);
    let no_sn = coverage_of(&rows, RewardVariant { sn: false, ..RewardVariant::LSD });
    let best_other = rows
        .iter()
        .filter(|r| r.variant != RewardVariant::LSD.to_string())
        .map(|r| r.coverage)
        .max()
        .unwrap();
    verdicts.record(
        5,
        lsd_cov >= best_other && lsd_cov >= 2 * no_sn,
        format!(
            "ablation coverage LSD {lsd_cov}, best other cell {best_other}, without SN {no_sn} \
             (need largest and >= 2x without SN)"
        ),
    );

    let outcomes = verify::run_all();
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    verdicts.record(
        6,
        failed.is_empty(),
        format!("{} of {} verification checks passed {:?}", outcomes.len() - failed.len(), outcomes.len(), failed),
    );

    let failures: Vec<_> = verdicts.0.iter().filter(|(_, ok, _)| !ok).collect();
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
