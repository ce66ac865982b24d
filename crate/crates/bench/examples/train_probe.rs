//! Scratch probe: evaluate a saved run's models on its own TRAINING scenes
//! (by pointing the eval window at low indices) vs the held-out window.

use mgvt_bench::experiment::{desk_plans, ExperimentConfig, TrainedExperiment};
use mgvt_core::vlm::load_checkpoint;
use std::path::Path;

fn eval_window(dir: &Path, start: usize, n: usize, label: &str) -> anyhow::Result<()> {
    let main = load_checkpoint(dir.join("checkpoint.bin"))?;
    let patch = load_checkpoint(dir.join("control.bin"))?;
    let cfg = ExperimentConfig {
        train_scenes: start.max(1),
        eval_scenes: n,
        seed: 7,
        ..ExperimentConfig::default()
    };
    let exp = TrainedExperiment::from_checkpoints(&cfg, main, patch)?;
    let plans = desk_plans(&exp.cfg);
    let (full, _) = exp.eval_plan(&plans[0].1)?;
    let (reduced, _) = exp.eval_plan(&plans[2].1)?;
    let (pf, _) = exp.eval_patch_full()?;
    println!("{label}: scenes {}..{}", cfg.train_scenes, cfg.train_scenes + n);
    for (name, s) in [("main-full", &full), ("main-22", &reduced), ("patch-full", &pf)] {
        print!("  {name:10}");
        for k in mgvt_bench::qa::QaKind::QUESTIONS {
            let ks = s.kind(k);
            print!("  {}={:.4}", k.name(), ks.acc());
        }
        println!("  macro={:.4}", s.macro_avg());
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let dir = Path::new(args.get(1).map(String::as_str).unwrap_or("/tmp/cal600b"));
    let train_n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(150);
    eval_window(dir, 1, train_n, "TRAIN window")?;
    eval_window(dir, 600, 150, "EVAL window")?;
    Ok(())
}
