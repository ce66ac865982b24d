//! Orchestration behind the CLI: run a training job into a run directory,
//! evaluate sections against its frozen checkpoints with incremental result
//! writes (a failure partway leaves every finished section on disk), and
//! reload a run directory for evaluation-only commands.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mgvt_core::numerics::Rng;
use mgvt_core::tokens::{predicted_count, PatchStrategy, ReductionPlan};
use mgvt_core::vlm::{load_checkpoint, save_checkpoint};
use mgvt_core::{Error, Result};
use serde::Serialize;

use crate::config::{Baseline, ResolvedConfig, RunInfo};
use crate::experiment::{
    ablation_plans, family_comparison, reduced_plan, ExperimentConfig, Scores, TrainedExperiment,
};
use crate::report::{read_results, write_results, EvalRow, Results};

pub const RUN_RECORD: &str = "run.json";
pub const MAIN_CHECKPOINT: &str = "checkpoint.bin";
pub const CONTROL_CHECKPOINT: &str = "control.bin";
pub const RUN_LOG: &str = "log.jsonl";

fn append_log<T: Serialize>(dir: &Path, event: &T) -> Result<()> {
    let line = serde_json::to_string(event)
        .map_err(|e| Error::Corrupt(format!("log encoding failed: {e}")))?;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join(RUN_LOG))?;
    writeln!(f, "{line}")?;
    Ok(())
}

#[derive(Serialize)]
struct StageEvent<'a> {
    event: &'static str,
    model: &'a str,
    stage: u32,
    initial_loss: f64,
    final_loss: f64,
    epoch_losses: &'a [f64],
}

#[derive(Serialize)]
struct TimingEvent<'a> {
    event: &'static str,
    name: &'a str,
    seconds: f64,
}

/// Train both models, persist checkpoints plus the run record and training
/// log, and return the live experiment for evaluation.
pub fn run_training(resolved: &ResolvedConfig, dir: &Path) -> Result<TrainedExperiment> {
    fs::create_dir_all(dir)?;
    let exp = TrainedExperiment::train(&resolved.experiment)?;

    save_checkpoint(dir.join(MAIN_CHECKPOINT), &exp.main_checkpoint())?;
    save_checkpoint(dir.join(CONTROL_CHECKPOINT), &exp.patch_checkpoint())?;
    RunInfo::new(&resolved.experiment, exp.main_checksum(), exp.patch_checksum())
        .save(&dir.join(RUN_RECORD))?;

    for (model, stage, log) in [
        ("main", 1, &exp.logs.stage1),
        ("main", 2, &exp.logs.stage2),
        ("patch", 1, &exp.logs.patch_stage1),
        ("patch", 2, &exp.logs.patch_stage2),
    ] {
        append_log(
            dir,
            &StageEvent {
                event: "stage",
                model,
                stage,
                initial_loss: log.initial_loss,
                final_loss: log.final_loss,
                epoch_losses: &log.epoch_losses,
            },
        )?;
    }
    for (name, seconds) in &exp.logs.timings {
        append_log(
            dir,
            &TimingEvent {
                event: "timing",
                name,
                seconds: *seconds,
            },
        )?;
    }
    Ok(exp)
}

/// Reload a run directory: verify the checkpoints are the ones the run
/// record describes, rebuild the encoder and the held-out scenes, and hand
/// back a ready-to-evaluate experiment.
pub fn load_run(dir: &Path, verbose: bool) -> Result<(TrainedExperiment, RunInfo)> {
    let info = RunInfo::load(&dir.join(RUN_RECORD))?;
    let main = load_checkpoint(dir.join(MAIN_CHECKPOINT))?;
    let patch = load_checkpoint(dir.join(CONTROL_CHECKPOINT))?;
    let cfg = info.to_experiment(verbose);
    let exp = TrainedExperiment::from_checkpoints(&cfg, main, patch)?;
    for (what, want, got) in [
        ("main", &info.main_checksum, exp.main_checksum()),
        ("control", &info.patch_checksum, exp.patch_checksum()),
    ] {
        let got = format!("{got:016x}");
        if *want != got {
            return Err(Error::Corrupt(format!(
                "{what} checkpoint fingerprint {got} does not match run record {want}"
            )));
        }
    }
    Ok((exp, info))
}

fn results_or_new(dir: &Path) -> Results {
    read_results(dir).unwrap_or_else(|_| Results::new())
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, u64)> {
    let t0 = Instant::now();
    let v = f()?;
    Ok((v, t0.elapsed().as_millis() as u64))
}

/// Token budget of the reduced-bundle operating point (pooled locals,
/// global, five object tokens) for the trained layout.
pub fn reduced_budget(exp: &TrainedExperiment) -> Result<usize> {
    let probe = &exp
        .eval
        .first()
        .ok_or_else(|| Error::Config("experiment holds no eval scenes".into()))?
        .bundle;
    predicted_count(probe, &reduced_plan())
}

/// The sweep section: one row per configured reduction plan.
pub fn eval_plans_section(
    exp: &TrainedExperiment,
    plans: &[(String, ReductionPlan)],
) -> Result<Vec<EvalRow>> {
    let reference = exp.cfg.rr_reference;
    let model = exp.main_checksum();
    let mut rows = Vec::new();
    for (name, plan) in plans {
        let ((scores, tokens), ms) = timed(|| exp.eval_plan(plan))?;
        rows.push(EvalRow::from_scores(
            "plan", name, &scores, tokens, reference, model, ms,
        ));
    }
    Ok(rows)
}

/// The token-composition ablation: locals, locals+global, full triplet,
/// all zero-shot drops of the one trained model.
pub fn eval_ablation_section(exp: &TrainedExperiment) -> Result<Vec<EvalRow>> {
    let reference = exp.cfg.rr_reference;
    let model = exp.main_checksum();
    let mut rows = Vec::new();
    for (name, plan) in ablation_plans(&exp.cfg) {
        let ((scores, tokens), ms) = timed(|| exp.eval_plan(&plan))?;
        rows.push(EvalRow::from_scores(
            "ablation", &name, &scores, tokens, reference, model, ms,
        ));
    }
    Ok(rows)
}

/// The mask-family comparison: one freshly trained model per mask source,
/// all scored at the shared reduced budget. The row's model fingerprint is 0
/// because these models are transient — trained, scored, and dropped.
pub fn eval_family_section(cfg: &ExperimentConfig) -> Result<Vec<EvalRow>> {
    let reference = cfg.rr_reference;
    let (runs, ms) = timed(|| family_comparison(cfg))?;
    let per_row = ms / runs.len().max(1) as u64;
    Ok(runs
        .iter()
        .map(|run| {
            EvalRow::from_scores(
                "family",
                run.family.name(),
                &run.scores,
                run.tokens,
                reference,
                0,
                per_row,
            )
        })
        .collect())
}

fn pool_scores(parts: &[Scores]) -> Scores {
    let mut out = Scores::default();
    for s in parts {
        for (acc, part) in [
            (&mut out.existence, s.existence),
            (&mut out.count, s.count),
            (&mut out.color, s.color),
            (&mut out.position, s.position),
        ] {
            acc.correct += part.correct;
            acc.total += part.total;
        }
    }
    out
}

/// Seeds for the random-patch-drop control rows.
pub fn control_seeds(seed: u64) -> [u64; 3] {
    let d = |k: u64| Rng::from_seed(seed).child(k).seed();
    [d(21), d(22), d(23)]
}

/// Baseline rows: the patch-only model at its full budget, the equal-budget
/// random-drop control (three seeds plus their pool), and the patch+global
/// zero-shot drop of the main model.
pub fn eval_baseline_section(
    exp: &TrainedExperiment,
    baselines: &[Baseline],
) -> Result<Vec<EvalRow>> {
    let reference = exp.cfg.rr_reference;
    let mut rows = Vec::new();
    for b in baselines {
        match b {
            Baseline::PatchOnly => {
                let ((scores, tokens), ms) = timed(|| exp.eval_patch_full())?;
                rows.push(EvalRow::from_scores(
                    "baseline",
                    "patch-only",
                    &scores,
                    tokens,
                    reference,
                    exp.patch_checksum(),
                    ms,
                ));
            }
            Baseline::RandomPatchDrop => {
                let budget = reduced_budget(exp)?;
                let mut parts = Vec::new();
                for (i, seed) in control_seeds(exp.cfg.seed).into_iter().enumerate() {
                    let ((scores, tokens), ms) = timed(|| exp.eval_patch_random(budget, seed))?;
                    parts.push(scores);
                    rows.push(EvalRow::from_scores(
                        "baseline",
                        &format!("random-drop-s{i}"),
                        &scores,
                        tokens,
                        reference,
                        exp.patch_checksum(),
                        ms,
                    ));
                }
                rows.push(EvalRow::from_scores(
                    "baseline",
                    "random-drop-pooled",
                    &pool_scores(&parts),
                    budget,
                    reference,
                    exp.patch_checksum(),
                    0,
                ));
            }
            Baseline::PatchCls => {
                let plan = ReductionPlan {
                    patch_strategy: PatchStrategy::KeepAll,
                    object_keep: 0,
                    use_global: true,
                };
                let ((scores, tokens), ms) = timed(|| exp.eval_plan(&plan))?;
                rows.push(EvalRow::from_scores(
                    "baseline",
                    "patch-cls",
                    &scores,
                    tokens,
                    reference,
                    exp.main_checksum(),
                    ms,
                ));
            }
        }
    }
    Ok(rows)
}

/// Run every evaluation section, writing results to disk after each one so
/// a failure preserves everything already measured.
pub fn evaluate_all(exp: &TrainedExperiment, resolved: &ResolvedConfig, dir: &Path) -> Result<Results> {
    let mut results = results_or_new(dir);

    let rows = eval_plans_section(exp, &resolved.plans)?;
    results.replace_section("plan", rows);
    write_results(dir, &results)?;

    let rows = eval_ablation_section(exp)?;
    results.replace_section("ablation", rows);
    write_results(dir, &results)?;

    let rows = eval_family_section(&exp.cfg)?;
    results.replace_section("family", rows);
    write_results(dir, &results)?;

    let rows = eval_baseline_section(exp, &resolved.baselines)?;
    results.replace_section("baseline", rows);
    write_results(dir, &results)?;

    results.caption_exact = crate::report::finite(exp.caption_exact_match(exp.cfg.caption_eval)?);
    write_results(dir, &results)?;
    Ok(results)
}

/// Resolve an `eval` plan request against the built-in plan names.
pub fn find_plan(exp: &TrainedExperiment, name: &str) -> Result<ReductionPlan> {
    for (n, p) in crate::experiment::desk_plans(&exp.cfg)
        .into_iter()
        .chain(ablation_plans(&exp.cfg))
    {
        if n == name {
            return Ok(p);
        }
    }
    Err(Error::Config(format!(
        "unknown plan {name:?}; built-in plans: full, obj-12, obj-5, loc-10-obj-5, loc-4-obj-5, locals, locals-global, locals-global-objects"
    )))
}

pub fn run_dir_paths(dir: &Path) -> [PathBuf; 4] {
    [
        dir.join(RUN_RECORD),
        dir.join(MAIN_CHECKPOINT),
        dir.join(CONTROL_CHECKPOINT),
        dir.join(RUN_LOG),
    ]
}
