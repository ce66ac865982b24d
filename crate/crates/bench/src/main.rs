use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use mgvt_bench::config::{self, FileConfig};
use mgvt_bench::dataset::{gen_dataset, verify_dataset, DatasetConfig};
use mgvt_bench::driver;
use mgvt_bench::experiment::ExperimentConfig;
use mgvt_bench::report::{human_table, read_results, to_csv, write_results, Results};

/// Multi-granularity visual token experiments: synthetic scene datasets,
/// two-stage training, and test-time token-reduction sweeps.
#[derive(Parser)]
#[command(name = "mgvt-bench", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a scene/mask/question dataset directory.
    GenData(GenDataArgs),
    /// Train the main and control models, then evaluate every configured
    /// plan and baseline into a run directory.
    Train(TrainArgs),
    /// Evaluate one reduction plan against a finished run.
    Eval(EvalArgs),
    /// Re-run the reduction-plan sweep against a finished run.
    Sweep(RunArgs),
    /// Re-run the token-composition and mask-family ablations against a
    /// finished run.
    Ablate(RunArgs),
    /// Render the stored results of a run as tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    out: PathBuf,
    /// Generation seed (scenes, masks, and questions all derive from it).
    #[arg(long)]
    seed: u64,
    /// Optional TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    qa_per_scene: Option<usize>,
    #[arg(long)]
    proposals: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run directory to create (checkpoints, logs, results).
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Experiment seed; everything downstream derives from it.
    #[arg(long)]
    seed: u64,
    /// Optional TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    eval_scenes: Option<usize>,
    #[arg(long)]
    qa_per_scene: Option<usize>,
    #[arg(long)]
    proposals: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    stage1_lr: Option<f64>,
    #[arg(long)]
    stage2_lr: Option<f64>,
    #[arg(long)]
    caption_scenes: Option<usize>,
    /// Suppress progress lines on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Suppress progress lines on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Plan name: full, obj-12, obj-5, loc-10-obj-5, loc-4-obj-5, locals,
    /// locals-global, locals-global-objects.
    #[arg(long, default_value = "obj-5")]
    plan: String,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Also write the CSV rendering to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<Option<FileConfig>> {
    match path {
        Some(p) => Ok(Some(
            config::load_file(p).with_context(|| format!("loading {}", p.display()))?,
        )),
        None => Ok(None),
    }
}

fn cmd_gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let fc = load_config(&a.config)?;
    let mut cfg = DatasetConfig {
        seed: a.seed,
        ..DatasetConfig::default()
    };
    if let Some(d) = fc.as_ref().and_then(|f| f.dataset.as_ref()) {
        if let Some(v) = d.scenes {
            cfg.scenes = v;
        }
        if let Some(v) = d.qa_per_scene {
            cfg.qa_per_scene = v;
        }
        if let Some(v) = d.proposals {
            cfg.proposals = v;
        }
    }
    if let Some(v) = a.scenes {
        cfg.scenes = v;
    }
    if let Some(v) = a.qa_per_scene {
        cfg.qa_per_scene = v;
    }
    if let Some(v) = a.proposals {
        cfg.proposals = v;
    }
    let summary = gen_dataset(&a.out, &cfg).context("generating dataset")?;
    verify_dataset(&a.out).context("verifying freshly written dataset")?;
    println!(
        "wrote {} scenes, {} questions ({} yes / {} no), {} captions, {} files to {}",
        summary.scenes,
        summary.qa_items,
        summary.yes_items,
        summary.no_items,
        summary.caption_items,
        summary.files,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let fc = load_config(&a.config)?;
    let mut cfg = ExperimentConfig {
        seed: a.seed,
        verbose: !a.quiet,
        ..ExperimentConfig::default()
    };
    if let Some(f) = &fc {
        cfg = config::apply_file(cfg, f);
        cfg.seed = a.seed;
        cfg.verbose = !a.quiet;
    }
    if let Some(v) = a.scenes {
        cfg.train_scenes = v;
    }
    if let Some(v) = a.eval_scenes {
        cfg.eval_scenes = v;
    }
    if let Some(v) = a.qa_per_scene {
        cfg.qa_per_scene = v;
    }
    if let Some(v) = a.proposals {
        cfg.proposals = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.stage1_epochs {
        cfg.stage1_epochs = v;
    }
    if let Some(v) = a.stage2_epochs {
        cfg.stage2_epochs = v;
    }
    if let Some(v) = a.stage1_lr {
        cfg.stage1_lr = v;
    }
    if let Some(v) = a.stage2_lr {
        cfg.stage2_lr = v;
    }
    if let Some(v) = a.caption_scenes {
        cfg.caption_eval = v;
    }
    let resolved = config::finish(cfg, fc.as_ref()).context("resolving configuration")?;
    let exp = driver::run_training(&resolved, &a.out).context("training")?;
    let results = driver::evaluate_all(&exp, &resolved, &a.out).context("evaluating")?;
    print!("{}", human_table(&results));
    println!("run directory: {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let (exp, _info) = driver::load_run(&a.run, !a.quiet).context("loading run")?;
    let plan = driver::find_plan(&exp, &a.plan)?;
    let (scores, tokens) = exp.eval_plan(&plan)?;
    let row = mgvt_bench::report::EvalRow::from_scores(
        "eval",
        &a.plan,
        &scores,
        tokens,
        exp.cfg.rr_reference,
        exp.main_checksum(),
        0,
    );
    let mut results = Results::new();
    results.rows.push(row);
    print!("{}", human_table(&results));
    Ok(())
}

fn cmd_sweep(a: RunArgs) -> anyhow::Result<()> {
    let (exp, info) = driver::load_run(&a.run, !a.quiet).context("loading run")?;
    let resolved = config::finish(info.to_experiment(!a.quiet), None)?;
    let mut results = read_results(&a.run).unwrap_or_else(|_| Results::new());
    let rows = driver::eval_plans_section(&exp, &resolved.plans)?;
    results.replace_section("plan", rows);
    results.caption_exact = mgvt_bench::report::finite(exp.caption_exact_match(exp.cfg.caption_eval)?);
    write_results(&a.run, &results)?;
    print!("{}", human_table(&results));
    Ok(())
}

fn cmd_ablate(a: RunArgs) -> anyhow::Result<()> {
    let (exp, _info) = driver::load_run(&a.run, !a.quiet).context("loading run")?;
    let mut results = read_results(&a.run).unwrap_or_else(|_| Results::new());
    results.replace_section("ablation", driver::eval_ablation_section(&exp)?);
    write_results(&a.run, &results)?;
    results.replace_section("family", driver::eval_family_section(&exp.cfg)?);
    write_results(&a.run, &results)?;
    print!("{}", human_table(&results));
    Ok(())
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    let results = read_results(&a.run).context("reading results")?;
    print!("{}", human_table(&results));
    if let Some(path) = a.csv {
        std::fs::write(&path, to_csv(&results.rows))
            .with_context(|| format!("writing {}", path.display()))?;
        println!("csv written to {}", path.display());
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Report(a) => cmd_report(a),
    }
}
