//! Run configuration: a small versioned TOML schema, merged with
//! command-line overrides, plus the `run.json` record a training run leaves
//! behind so later evaluation commands can rebuild its exact setup without
//! retraining.

use std::fs;
use std::path::Path;

use mgvt_core::numerics::Rng;
use mgvt_core::tokens::{PatchStrategy, ReductionPlan};
use mgvt_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::experiment::{desk_plans, ExperimentConfig};

pub const CONFIG_VERSION: u32 = 1;

/// The config file. Every knob is optional — absent values keep the
/// defaults — but the version tag is mandatory so stale files fail loudly.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub version: u32,
    pub dataset: Option<DatasetSection>,
    pub tokens: Option<TokensSection>,
    pub train: Option<TrainSection>,
    pub eval: Option<EvalSection>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub scenes: Option<usize>,
    pub eval_scenes: Option<usize>,
    pub qa_per_scene: Option<usize>,
    pub proposals: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokensSection {
    pub pool_kernel: Option<usize>,
    pub rr_reference: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stage1_epochs: Option<usize>,
    pub stage2_epochs: Option<usize>,
    pub stage1_lr: Option<f64>,
    pub stage2_lr: Option<f64>,
    pub batch: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub caption_scenes: Option<usize>,
    /// Training/held-out scene counts for the per-family models of the
    /// mask-source comparison.
    pub family_scenes: Option<usize>,
    pub family_eval_scenes: Option<usize>,
    /// Baseline rows to include: "patch-only", "random-patch-drop",
    /// "patch-cls". Defaults to all three.
    pub baselines: Option<Vec<String>>,
    /// Reduction plans to sweep. Defaults to the built-in five-budget
    /// ladder.
    #[serde(rename = "plan")]
    pub plans: Option<Vec<PlanTable>>,
}

/// One declarative reduction plan in the config file. `locals` is a small
/// strategy string: "keep", "pool:K", "maxpool:K", "topk:K", "random:K".
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanTable {
    pub name: String,
    pub locals: Option<String>,
    pub objects: usize,
    pub global: Option<bool>,
}

fn parse_locals(spec: &str, seed: u64) -> Result<PatchStrategy> {
    let bad = || Error::Config(format!("unrecognized locals strategy {spec:?}"));
    if spec == "keep" {
        return Ok(PatchStrategy::KeepAll);
    }
    let (head, arg) = spec.split_once(':').ok_or_else(bad)?;
    let k: usize = arg.parse().map_err(|_| bad())?;
    match head {
        "pool" => Ok(PatchStrategy::Pool { kernel: k }),
        "maxpool" => Ok(PatchStrategy::MaxPool { kernel: k }),
        "topk" => Ok(PatchStrategy::PruneTopKNorm { keep: k }),
        "random" => Ok(PatchStrategy::PruneRandom { keep: k, seed }),
        _ => Err(bad()),
    }
}

impl PlanTable {
    pub fn resolve(&self, experiment_seed: u64, index: usize) -> Result<(String, ReductionPlan)> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("plan name must be nonempty".into()));
        }
        let seed = Rng::from_seed(experiment_seed)
            .child(30)
            .child(index as u64)
            .seed();
        let strategy = parse_locals(self.locals.as_deref().unwrap_or("keep"), seed)?;
        Ok((
            self.name.clone(),
            ReductionPlan {
                patch_strategy: strategy,
                object_keep: self.objects,
                use_global: self.global.unwrap_or(true),
            },
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    PatchOnly,
    RandomPatchDrop,
    PatchCls,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [
        Baseline::PatchOnly,
        Baseline::RandomPatchDrop,
        Baseline::PatchCls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::PatchOnly => "patch-only",
            Baseline::RandomPatchDrop => "random-patch-drop",
            Baseline::PatchCls => "patch-cls",
        }
    }

    pub fn parse(s: &str) -> Result<Baseline> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline {s:?}")))
    }
}

/// Everything `train` resolves before running: the experiment knobs plus
/// the requested evaluation surface.
#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub experiment: ExperimentConfig,
    pub plans: Vec<(String, ReductionPlan)>,
    pub baselines: Vec<Baseline>,
}

pub fn load_file(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path)?;
    let fc: FileConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    if fc.version != CONFIG_VERSION {
        return Err(Error::Config(format!(
            "config version {} unsupported (expected {CONFIG_VERSION})",
            fc.version
        )));
    }
    Ok(fc)
}

/// Merge a config file (optional) over the defaults, producing the resolved
/// experiment config plus plan and baseline lists. Flag overrides are
/// applied by the caller afterwards, then `finish` derives the plan list.
pub fn apply_file(base: ExperimentConfig, fc: &FileConfig) -> ExperimentConfig {
    let mut cfg = base;
    if let Some(d) = &fc.dataset {
        if let Some(v) = d.scenes {
            cfg.train_scenes = v;
        }
        if let Some(v) = d.eval_scenes {
            cfg.eval_scenes = v;
        }
        if let Some(v) = d.qa_per_scene {
            cfg.qa_per_scene = v;
        }
        if let Some(v) = d.proposals {
            cfg.proposals = v;
        }
    }
    if let Some(t) = &fc.tokens {
        if let Some(v) = t.pool_kernel {
            cfg.pool_kernel = v;
        }
        if let Some(v) = t.rr_reference {
            cfg.rr_reference = v;
        }
    }
    if let Some(t) = &fc.train {
        if let Some(v) = t.stage1_epochs {
            cfg.stage1_epochs = v;
        }
        if let Some(v) = t.stage2_epochs {
            cfg.stage2_epochs = v;
        }
        if let Some(v) = t.stage1_lr {
            cfg.stage1_lr = v;
        }
        if let Some(v) = t.stage2_lr {
            cfg.stage2_lr = v;
        }
        if let Some(v) = t.batch {
            cfg.batch = v;
        }
    }
    if let Some(e) = &fc.eval {
        if let Some(v) = e.caption_scenes {
            cfg.caption_eval = v;
        }
        if let Some(v) = e.family_scenes {
            cfg.family_scenes = v;
        }
        if let Some(v) = e.family_eval_scenes {
            cfg.family_eval_scenes = v;
        }
    }
    cfg
}

/// Derive the plan and baseline lists once the experiment config is final.
pub fn finish(cfg: ExperimentConfig, fc: Option<&FileConfig>) -> Result<ResolvedConfig> {
    cfg.validate()?;
    let plans = match fc.and_then(|f| f.eval.as_ref()).and_then(|e| e.plans.as_ref()) {
        Some(tables) if !tables.is_empty() => tables
            .iter()
            .enumerate()
            .map(|(i, t)| t.resolve(cfg.seed, i))
            .collect::<Result<Vec<_>>>()?,
        _ => desk_plans(&cfg),
    };
    let baselines = match fc.and_then(|f| f.eval.as_ref()).and_then(|e| e.baselines.as_ref()) {
        Some(names) => names
            .iter()
            .map(|s| Baseline::parse(s))
            .collect::<Result<Vec<_>>>()?,
        None => Baseline::ALL.to_vec(),
    };
    Ok(ResolvedConfig {
        experiment: cfg,
        plans,
        baselines,
    })
}

/// The record a run leaves next to its checkpoints: enough to rebuild the
/// evaluation pipeline (scenes are regenerated from the seed) and to verify
/// the checkpoints are the ones this run produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub version: u32,
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub qa_per_scene: usize,
    pub proposals: usize,
    pub pool_kernel: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub batch: usize,
    pub rr_reference: usize,
    pub caption_eval: usize,
    pub family_scenes: usize,
    pub family_eval_scenes: usize,
    pub main_checksum: String,
    pub patch_checksum: String,
}

impl RunInfo {
    pub fn new(cfg: &ExperimentConfig, main_checksum: u64, patch_checksum: u64) -> RunInfo {
        RunInfo {
            version: CONFIG_VERSION,
            seed: cfg.seed,
            train_scenes: cfg.train_scenes,
            eval_scenes: cfg.eval_scenes,
            qa_per_scene: cfg.qa_per_scene,
            proposals: cfg.proposals,
            pool_kernel: cfg.pool_kernel,
            stage1_epochs: cfg.stage1_epochs,
            stage2_epochs: cfg.stage2_epochs,
            stage1_lr: cfg.stage1_lr,
            stage2_lr: cfg.stage2_lr,
            batch: cfg.batch,
            rr_reference: cfg.rr_reference,
            caption_eval: cfg.caption_eval,
            family_scenes: cfg.family_scenes,
            family_eval_scenes: cfg.family_eval_scenes,
            main_checksum: format!("{main_checksum:016x}"),
            patch_checksum: format!("{patch_checksum:016x}"),
        }
    }

    pub fn to_experiment(&self, verbose: bool) -> ExperimentConfig {
        ExperimentConfig {
            train_scenes: self.train_scenes,
            eval_scenes: self.eval_scenes,
            qa_per_scene: self.qa_per_scene,
            proposals: self.proposals,
            pool_kernel: self.pool_kernel,
            stage1_epochs: self.stage1_epochs,
            stage2_epochs: self.stage2_epochs,
            stage1_lr: self.stage1_lr,
            stage2_lr: self.stage2_lr,
            batch: self.batch,
            rr_reference: self.rr_reference,
            caption_eval: self.caption_eval,
            family_scenes: self.family_scenes,
            family_eval_scenes: self.family_eval_scenes,
            seed: self.seed,
            verbose,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Corrupt(format!("run record encoding failed: {e}")))?;
        Ok(fs::write(path, bytes)?)
    }

    pub fn load(path: &Path) -> Result<RunInfo> {
        let bytes = fs::read(path)?;
        let info: RunInfo = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Corrupt(format!("run record {}: {e}", path.display())))?;
        if info.version != CONFIG_VERSION {
            return Err(Error::Corrupt(format!(
                "run record version {} unsupported (expected {CONFIG_VERSION})",
                info.version
            )));
        }
        Ok(info)
    }
}
