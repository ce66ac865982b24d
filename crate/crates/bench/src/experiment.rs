//! The end-to-end desk experiment: sample scenes, build multi-granularity
//! token bundles, train one model on the full oversampled bundle, then
//! evaluate many reduction plans and baselines on held-out scenes without
//! ever retraining — the protocol under study is that token budgets are a
//! test-time knob.

use std::time::Instant;

use mgvt_core::encoder::{Encoder, EncoderConfig, ImageFeatureSet};
use mgvt_core::inversion::{attach_position, invert_all, positional_embedding, InversionConfig};
use mgvt_core::masks::{add_background, bbox_masks, tiled_masks, MaskSet};
use mgvt_core::numerics::{avg_pool_2d, Grid2D, Rng, Vector};
use mgvt_core::scene::{Scene, SceneSpec};
use mgvt_core::tokens::{
    assemble, reduce, PatchStrategy, ReductionPlan, ScaleMode, TokenBundle,
};
use mgvt_core::vlm::{
    train_stage1, train_stage2, Checkpoint, DecoderConfig, Example, Projector, ToyDecoder,
    TrainConfig, TrainLog, Vocab,
};
use mgvt_core::{Error, Result};
use rayon::prelude::*;

use crate::dataset::{build_proposals, build_questions, build_scene};
use crate::qa::{caption, QaItem, QaKind};

/// Everything the experiment needs to be reproducible from one seed.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub qa_per_scene: usize,
    /// Jittered object proposals per scene; the background complement is
    /// always added on top, so the full bundle carries `proposals + 1`
    /// object tokens.
    pub proposals: usize,
    pub pool_kernel: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub batch: usize,
    /// Token count the reduction-ratio column is quoted against.
    pub rr_reference: usize,
    /// Scenes scored for caption exact match (a report metric only).
    pub caption_eval: usize,
    /// Training scenes for each mask-family model. The family comparison
    /// retrains one model per mask source with identical hyperparameters, so
    /// it gets its own (smaller) scale knob.
    pub family_scenes: usize,
    pub family_eval_scenes: usize,
    pub seed: u64,
    /// Print stage progress to stderr.
    pub verbose: bool,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            train_scenes: 2400,
            eval_scenes: 600,
            qa_per_scene: 4,
            proposals: 24,
            pool_kernel: 2,
            stage1_epochs: 3,
            stage2_epochs: 6,
            stage1_lr: 2e-3,
            stage2_lr: 1e-3,
            batch: 16,
            rr_reference: 64,
            caption_eval: 200,
            family_scenes: 600,
            family_eval_scenes: 150,
            seed: 7,
            verbose: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return Err(Error::Config("need at least one train and eval scene".into()));
        }
        if self.family_scenes == 0 || self.family_eval_scenes == 0 {
            return Err(Error::Config(
                "need at least one family train and eval scene".into(),
            ));
        }
        if self.qa_per_scene == 0 || self.qa_per_scene > QaKind::QUESTIONS.len() {
            return Err(Error::Config(format!(
                "qa_per_scene must be 1..={}",
                QaKind::QUESTIONS.len()
            )));
        }
        if self.proposals == 0 {
            return Err(Error::Config("proposal count must be positive".into()));
        }
        let grid = EncoderConfig::desk(0).grid_side();
        if self.pool_kernel == 0 || grid % self.pool_kernel != 0 {
            return Err(Error::Config(format!(
                "pool kernel {} must divide the {grid}-patch grid side",
                self.pool_kernel
            )));
        }
        if self.rr_reference == 0 {
            return Err(Error::Config("reduction-ratio reference must be positive".into()));
        }
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.stage1_lr.is_finite() && self.stage2_lr.is_finite()) {
            return Err(Error::Config("learning rates must be finite".into()));
        }
        Ok(())
    }

    /// Token count of the full assembled bundle.
    pub fn full_tokens(&self) -> usize {
        let grid = EncoderConfig::desk(0).grid_side() / self.pool_kernel;
        1 + grid * grid + self.proposals + 1
    }

    /// Object tokens in the full bundle (proposals plus background).
    pub fn full_objects(&self) -> usize {
        self.proposals + 1
    }
}

/// The five test-time budgets the sweep reports, from the untouched bundle
/// down to pooled locals with a handful of object tokens. Object keeps
/// count the background token.
pub fn desk_plans(cfg: &ExperimentConfig) -> Vec<(String, ReductionPlan)> {
    vec![
        (
            "full".into(),
            ReductionPlan {
                patch_strategy: PatchStrategy::KeepAll,
                object_keep: cfg.full_objects(),
                use_global: true,
            },
        ),
        (
            "obj-12".into(),
            ReductionPlan {
                patch_strategy: PatchStrategy::KeepAll,
                object_keep: 12,
                use_global: true,
            },
        ),
        (
            "obj-5".into(),
            ReductionPlan {
                patch_strategy: PatchStrategy::KeepAll,
                object_keep: 5,
                use_global: true,
            },
        ),
        (
            "loc-10-obj-5".into(),
            ReductionPlan {
                patch_strategy: PatchStrategy::PruneTopKNorm { keep: 10 },
                object_keep: 5,
                use_global: true,
            },
        ),
        (
            "loc-4-obj-5".into(),
            ReductionPlan {
                patch_strategy: PatchStrategy::Pool { kernel: 2 },
                object_keep: 5,
                use_global: true,
            },
        ),
    ]
}

/// The plan whose budget matches the paper-protocol question "how far can
/// tokens drop at test time": pooled locals, global, five object tokens.
pub fn reduced_plan() -> ReductionPlan {
    ReductionPlan {
        patch_strategy: PatchStrategy::KeepAll,
        object_keep: 5,
        use_global: true,
    }
}

/// Token-composition ablation rows, all evaluated zero-shot on the one
/// trained model by dropping token kinds at test time.
pub fn ablation_plans(cfg: &ExperimentConfig) -> Vec<(String, ReductionPlan)> {
    vec![
        (
            "locals".into(),
            ReductionPlan {
                patch_strategy: PatchStrategy::KeepAll,
                object_keep: 0,
                use_global: false,
            },
        ),
        (
            "locals-global".into(),
            ReductionPlan {
                patch_strategy: PatchStrategy::KeepAll,
                object_keep: 0,
                use_global: true,
            },
        ),
        (
            "locals-global-objects".into(),
            ReductionPlan {
                patch_strategy: PatchStrategy::KeepAll,
                object_keep: cfg.full_objects(),
                use_global: true,
            },
        ),
    ]
}

/// Which mask source feeds the object-token pipeline. The family comparison
/// trains one model per source and compares them at an equal reduced budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskFamily {
    /// Jittered object proposals, the detector-plus-segmenter stand-in.
    Synthetic,
    /// The same proposals coarsened to filled bounding boxes.
    Bbox,
    /// A fixed mix of 2x2, 3x3 and 4x4 tilings, ignorant of scene content.
    Tiled,
}

impl MaskFamily {
    pub const ALL: [MaskFamily; 3] = [MaskFamily::Synthetic, MaskFamily::Bbox, MaskFamily::Tiled];

    pub fn name(self) -> &'static str {
        match self {
            MaskFamily::Synthetic => "synthetic",
            MaskFamily::Bbox => "bbox",
            MaskFamily::Tiled => "tiled",
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct KindScore {
    pub correct: usize,
    pub total: usize,
}

impl KindScore {
    pub fn acc(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Exact-match accuracy split by question kind.
#[derive(Clone, Copy, Debug, Default)]
pub struct Scores {
    pub existence: KindScore,
    pub count: KindScore,
    pub color: KindScore,
    pub position: KindScore,
}

impl Scores {
    pub fn kind(&self, kind: QaKind) -> KindScore {
        match kind {
            QaKind::Existence => self.existence,
            QaKind::Count => self.count,
            QaKind::Color => self.color,
            QaKind::Position => self.position,
            QaKind::Caption => KindScore::default(),
        }
    }

    fn kind_mut(&mut self, kind: QaKind) -> Option<&mut KindScore> {
        match kind {
            QaKind::Existence => Some(&mut self.existence),
            QaKind::Count => Some(&mut self.count),
            QaKind::Color => Some(&mut self.color),
            QaKind::Position => Some(&mut self.position),
            QaKind::Caption => None,
        }
    }

    /// Mean of the per-kind accuracies over kinds that appeared.
    pub fn macro_avg(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for kind in QaKind::QUESTIONS {
            let k = self.kind(kind);
            if k.total > 0 {
                sum += k.acc();
                n += 1;
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }
}

/// One held-out scene with everything evaluation needs: the frozen encoder
/// features (for re-running inversion under other mask families), the full
/// assembled bundle, the raw patch grid, and the questions.
pub struct EvalScene {
    pub index: usize,
    pub spec: SceneSpec,
    pub features: ImageFeatureSet,
    pub locals: Grid2D<Vector>,
    pub mask_set: MaskSet,
    pub bundle: TokenBundle,
    pub patch_bundle: TokenBundle,
    pub qa: Vec<QaItem>,
    pub cap: QaItem,
}

#[derive(Clone, Debug)]
pub struct ExperimentLogs {
    pub stage1: TrainLog,
    pub stage2: TrainLog,
    pub patch_stage1: TrainLog,
    pub patch_stage2: TrainLog,
    /// (label, seconds) per pipeline stage.
    pub timings: Vec<(String, f64)>,
}

/// One fully trained experiment: the main model (trained on full bundles),
/// the patch-only control model, and the prepared held-out scenes. All plan
/// evaluations run against these frozen weights.
pub struct TrainedExperiment {
    pub cfg: ExperimentConfig,
    pub vocab: Vocab,
    pub encoder: Encoder,
    pub main_projector: Projector,
    pub main_decoder: ToyDecoder,
    pub patch_projector: Projector,
    pub patch_decoder: ToyDecoder,
    pub eval: Vec<EvalScene>,
    pub logs: ExperimentLogs,
}

fn derived_seed(seed: u64, stream: u64) -> u64 {
    Rng::from_seed(seed).child(stream).seed()
}

/// Build every token view of one scene. Returns the full multi-granularity
/// bundle (scaled), the raw patch bundle (unscaled), and the artifacts the
/// evaluation-time mask families need.
fn prepare_scene(
    encoder: &Encoder,
    cfg: &ExperimentConfig,
    index: usize,
) -> Result<EvalScene> {
    let scene = build_scene(cfg.seed, index)?;
    let features = encoder.encode(&scene.pixels)?;
    let mask_set = build_proposals(cfg.seed, index, &scene, cfg.proposals)?;
    let bundle = bundle_from_masks(&features, &mask_set, cfg.pool_kernel)?;
    let patch_bundle = assemble(None, &features.patches, &[], false, ScaleMode::default())?;
    let locals = avg_pool_2d(&features.patches, cfg.pool_kernel)?;
    let qa = build_questions(cfg.seed, index, &scene, cfg.qa_per_scene)?;
    let cap = caption(&scene.spec, index);
    Ok(EvalScene {
        index,
        spec: scene.spec,
        features,
        locals,
        mask_set,
        bundle,
        patch_bundle,
        qa,
        cap,
    })
}

/// The token pipeline shared by training, evaluation, and the mask-family
/// ablation: invert every mask against the frozen features, attach bbox
/// positional embeddings, pool the patch grid, and assemble with norm
/// scaling on.
pub fn bundle_from_masks(
    features: &ImageFeatureSet,
    set: &MaskSet,
    pool_kernel: usize,
) -> Result<TokenBundle> {
    let inv_cfg = InversionConfig::default();
    let tokens = invert_all(set, features, &inv_cfg)?;
    let side = features.config.image_side;
    let dim = features.config.embed_dim;
    let mut pairs = Vec::with_capacity(tokens.len());
    for (token, member) in tokens.iter().zip(set.members()) {
        let pe = positional_embedding(&member.bbox, side, dim)?;
        pairs.push((attach_position(token, &pe)?, member.confidence));
    }
    let locals = avg_pool_2d(&features.patches, pool_kernel)?;
    assemble(
        Some(&features.cls),
        &locals,
        &pairs,
        true,
        ScaleMode::default(),
    )
}

fn bundle_vectors(bundle: &TokenBundle) -> Vec<Vector> {
    bundle.tokens.iter().map(|t| t.embedding.clone()).collect()
}

fn qa_example(vocab: &Vocab, visual: &[Vector], item: &QaItem) -> Result<Example> {
    let mut prompt = vocab.encode(&item.prompt)?;
    prompt.push(vocab.id("<ans>")?);
    Ok(Example {
        visual: visual.to_vec(),
        prompt,
        target: vec![vocab.id(&item.answer)?],
    })
}

fn caption_example(vocab: &Vocab, visual: &[Vector], item: &QaItem) -> Result<Example> {
    let mut target = vocab.encode(&item.answer)?;
    target.push(vocab.id("<eos>")?);
    Ok(Example {
        visual: visual.to_vec(),
        prompt: vec![vocab.id("<cap>")?],
        target,
    })
}

/// Ask one constrained question: encode the prompt, append the answer
/// marker, pick the best token among the kind's legal answers.
fn answer_question(
    decoder: &ToyDecoder,
    vocab: &Vocab,
    visual: &[Vector],
    item: &QaItem,
) -> Result<bool> {
    let mut prompt = vocab.encode(&item.prompt)?;
    prompt.push(vocab.id("<ans>")?);
    let allowed: Vec<u32> = item
        .kind
        .answers()
        .iter()
        .map(|w| vocab.id(w))
        .collect::<Result<_>>()?;
    let picked = decoder.next_token_constrained(visual, &prompt, &allowed)?;
    Ok(picked == vocab.id(&item.answer)?)
}

fn score_scene(
    decoder: &ToyDecoder,
    vocab: &Vocab,
    visual: &[Vector],
    qa: &[QaItem],
    scores: &mut Scores,
) -> Result<()> {
    for item in qa {
        let ok = answer_question(decoder, vocab, visual, item)?;
        if let Some(k) = scores.kind_mut(item.kind) {
            k.total += 1;
            k.correct += ok as usize;
        }
    }
    Ok(())
}

/// One scene distilled to exactly what model fitting needs: the token view
/// the model trains on plus its questions and caption.
struct FitScene {
    bundle: TokenBundle,
    qa: Vec<QaItem>,
    cap: QaItem,
}

/// Two-stage fit of one projector/decoder pair: pretrain the projector on
/// captions with the decoder frozen, then finetune both on the instruction
/// (question/answer) set. Seeds derive from the config seed through the two
/// streams so every model in a run gets independent, reproducible
/// initialization.
fn fit_model(
    scenes: &[FitScene],
    vocab: &Vocab,
    cfg: &ExperimentConfig,
    label: &str,
    proj_stream: u64,
    dec_stream: u64,
    timings: &mut Vec<(String, f64)>,
) -> Result<(Projector, ToyDecoder, TrainLog, TrainLog)> {
    let say = |msg: &str| {
        if cfg.verbose {
            eprintln!("[experiment] {msg}");
        }
    };
    let dec_cfg = DecoderConfig::desk(vocab.len(), derived_seed(cfg.seed, dec_stream));
    let embed = EncoderConfig::desk(0).embed_dim;
    let hidden = 2 * dec_cfg.model_dim;
    let mut projector = Projector::new(
        embed,
        hidden,
        dec_cfg.model_dim,
        derived_seed(cfg.seed, proj_stream),
    );
    let mut decoder = ToyDecoder::new(dec_cfg)?;

    let mut captions = Vec::with_capacity(scenes.len());
    for fs in scenes {
        let vis = bundle_vectors(&fs.bundle);
        captions.push(caption_example(vocab, &vis, &fs.cap)?);
    }
    let t0 = Instant::now();
    let s1 = train_stage1(
        &captions,
        &mut projector,
        &decoder,
        &TrainConfig::pretrain(
            cfg.stage1_lr,
            cfg.batch,
            cfg.stage1_epochs,
            derived_seed(cfg.seed, proj_stream ^ 0x51),
        ),
    )?;
    timings.push((format!("{label}-stage1"), t0.elapsed().as_secs_f64()));
    say(&format!(
        "{label} stage1 loss {:.4} -> {:.4}",
        s1.initial_loss, s1.final_loss
    ));

    let mut examples = Vec::with_capacity(scenes.len() * 4);
    for fs in scenes {
        let vis = bundle_vectors(&fs.bundle);
        for item in &fs.qa {
            examples.push(qa_example(vocab, &vis, item)?);
        }
    }
    let t0 = Instant::now();
    let s2 = train_stage2(
        &examples,
        &mut projector,
        &mut decoder,
        &TrainConfig::finetune(
            cfg.stage2_lr,
            cfg.batch,
            cfg.stage2_epochs,
            derived_seed(cfg.seed, proj_stream ^ 0x52),
        ),
    )?;
    timings.push((format!("{label}-stage2"), t0.elapsed().as_secs_f64()));
    say(&format!(
        "{label} stage2 loss {:.4} -> {:.4}",
        s2.initial_loss, s2.final_loss
    ));
    Ok((projector, decoder, s1, s2))
}

impl TrainedExperiment {
    /// Run the whole training pipeline: prepare scenes, pretrain the
    /// projector on captions with the decoder frozen, then finetune both on
    /// questions plus captions; repeat for the patch-only control model.
    pub fn train(cfg: &ExperimentConfig) -> Result<TrainedExperiment> {
        cfg.validate()?;
        let vocab = Vocab::synthetic();
        let encoder = Encoder::new(EncoderConfig::desk(derived_seed(cfg.seed, 10)))?;
        let mut timings: Vec<(String, f64)> = Vec::new();
        let say = |v: bool, msg: &str| {
            if v {
                eprintln!("[experiment] {msg}");
            }
        };

        // Held-out scenes keep their features and mask sets for the
        // evaluation-time ablations; training scenes are distilled straight
        // into examples and dropped.
        let t0 = Instant::now();
        let eval: Vec<EvalScene> = (cfg.train_scenes..cfg.train_scenes + cfg.eval_scenes)
            .into_par_iter()
            .map(|i| prepare_scene(&encoder, cfg, i))
            .collect::<Result<_>>()?;
        timings.push(("prepare-eval".into(), t0.elapsed().as_secs_f64()));
        say(cfg.verbose, &format!("prepared {} eval scenes", eval.len()));

        let t0 = Instant::now();
        let train: Vec<(FitScene, FitScene)> = (0..cfg.train_scenes)
            .into_par_iter()
            .map(|i| {
                let p = prepare_scene(&encoder, cfg, i)?;
                let main = FitScene {
                    bundle: p.bundle,
                    qa: p.qa.clone(),
                    cap: p.cap.clone(),
                };
                let patch = FitScene {
                    bundle: p.patch_bundle,
                    qa: p.qa,
                    cap: p.cap,
                };
                Ok((main, patch))
            })
            .collect::<Result<_>>()?;
        timings.push(("prepare-train".into(), t0.elapsed().as_secs_f64()));
        say(cfg.verbose, &format!("prepared {} train scenes", train.len()));
        let (main_scenes, patch_scenes): (Vec<FitScene>, Vec<FitScene>) =
            train.into_iter().unzip();

        // Every sweep plan must be satisfiable by the bundles we just built.
        let probe = &main_scenes[0].bundle;
        for (name, plan) in desk_plans(cfg).iter().chain(ablation_plans(cfg).iter()) {
            mgvt_core::tokens::predicted_count(probe, plan).map_err(|e| {
                Error::Config(format!("plan {name} infeasible for this layout: {e}"))
            })?;
        }

        let (main_projector, main_decoder, stage1, stage2) =
            fit_model(&main_scenes, &vocab, cfg, "main", 11, 12, &mut timings)?;
        let (patch_projector, patch_decoder, patch_stage1, patch_stage2) =
            fit_model(&patch_scenes, &vocab, cfg, "patch", 15, 16, &mut timings)?;

        Ok(TrainedExperiment {
            cfg: cfg.clone(),
            vocab,
            encoder,
            main_projector,
            main_decoder,
            patch_projector,
            patch_decoder,
            eval,
            logs: ExperimentLogs {
                stage1,
                stage2,
                patch_stage1,
                patch_stage2,
                timings,
            },
        })
    }

    /// Fingerprint of the frozen weights an evaluation row ran against.
    pub fn main_checksum(&self) -> u64 {
        self.main_projector.checksum()
            ^ self.main_decoder.checksum().rotate_left(17)
            ^ self.encoder.weight_checksum().rotate_left(34)
    }

    pub fn patch_checksum(&self) -> u64 {
        self.patch_projector.checksum()
            ^ self.patch_decoder.checksum().rotate_left(17)
            ^ self.encoder.weight_checksum().rotate_left(34)
    }

    /// Package the main model for persistence.
    pub fn main_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            encoder: self.encoder.config,
            encoder_checksum: self.encoder.weight_checksum(),
            vocab: self.vocab.clone(),
            projector: self.main_projector.clone(),
            decoder: self.main_decoder.clone(),
        }
    }

    pub fn patch_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            encoder: self.encoder.config,
            encoder_checksum: self.encoder.weight_checksum(),
            vocab: self.vocab.clone(),
            projector: self.patch_projector.clone(),
            decoder: self.patch_decoder.clone(),
        }
    }

    /// Rebuild a ready-to-evaluate experiment from saved checkpoints: the
    /// encoder is regenerated from its config and verified against the
    /// stored weight checksum, and the held-out scenes are regenerated from
    /// the config seed. No training happens here.
    pub fn from_checkpoints(
        cfg: &ExperimentConfig,
        main: Checkpoint,
        patch: Checkpoint,
    ) -> Result<TrainedExperiment> {
        cfg.validate()?;
        if main.encoder != patch.encoder || main.encoder_checksum != patch.encoder_checksum {
            return Err(Error::Config(
                "main and control checkpoints disagree about the encoder".into(),
            ));
        }
        if main.vocab.words() != patch.vocab.words() {
            return Err(Error::Config(
                "main and control checkpoints use different vocabularies".into(),
            ));
        }
        let encoder = Encoder::new(main.encoder)?;
        if encoder.weight_checksum() != main.encoder_checksum {
            return Err(Error::Corrupt(format!(
                "regenerated encoder checksum {:016x} does not match checkpoint {:016x}",
                encoder.weight_checksum(),
                main.encoder_checksum
            )));
        }
        let eval: Vec<EvalScene> = (cfg.train_scenes..cfg.train_scenes + cfg.eval_scenes)
            .into_par_iter()
            .map(|i| prepare_scene(&encoder, cfg, i))
            .collect::<Result<_>>()?;
        let empty = || TrainLog {
            initial_loss: f64::NAN,
            final_loss: f64::NAN,
            epoch_losses: vec![],
        };
        Ok(TrainedExperiment {
            cfg: cfg.clone(),
            vocab: main.vocab,
            encoder,
            main_projector: main.projector,
            main_decoder: main.decoder,
            patch_projector: patch.projector,
            patch_decoder: patch.decoder,
            eval,
            logs: ExperimentLogs {
                stage1: empty(),
                stage2: empty(),
                patch_stage1: empty(),
                patch_stage2: empty(),
                timings: vec![],
            },
        })
    }

    /// Evaluate the main model with bundles reduced by `plan`. Returns the
    /// scores and the (constant) post-reduction token count.
    pub fn eval_plan(&self, plan: &ReductionPlan) -> Result<(Scores, usize)> {
        let mut scores = Scores::default();
        let mut tokens = 0usize;
        for es in &self.eval {
            let reduced = reduce(&es.bundle, plan)?;
            if tokens == 0 {
                tokens = reduced.len();
            } else if tokens != reduced.len() {
                return Err(Error::Shape(format!(
                    "plan produced {} tokens on one scene and {tokens} on another",
                    reduced.len()
                )));
            }
            let vis = self.main_projector.project(&reduced)?;
            score_scene(&self.main_decoder, &self.vocab, &vis, &es.qa, &mut scores)?;
        }
        Ok((scores, tokens))
    }

    /// Evaluate the patch-only control model on its full 64-patch view.
    pub fn eval_patch_full(&self) -> Result<(Scores, usize)> {
        let mut scores = Scores::default();
        let mut tokens = 0usize;
        for es in &self.eval {
            let vis = self.patch_projector.project(&es.patch_bundle)?;
            tokens = vis.len();
            score_scene(&self.patch_decoder, &self.vocab, &vis, &es.qa, &mut scores)?;
        }
        Ok((scores, tokens))
    }

    /// The equal-budget control: the patch-only model with a random subset
    /// of patches kept, drawn per scene from `seed`.
    pub fn eval_patch_random(&self, keep: usize, seed: u64) -> Result<(Scores, usize)> {
        let mut scores = Scores::default();
        let mut tokens = 0usize;
        for es in &self.eval {
            let plan = ReductionPlan {
                patch_strategy: PatchStrategy::PruneRandom {
                    keep,
                    seed: seed.wrapping_add(es.index as u64),
                },
                object_keep: 0,
                use_global: false,
            };
            let reduced = reduce(&es.patch_bundle, &plan)?;
            tokens = reduced.len();
            let vis = self.patch_projector.project(&reduced)?;
            score_scene(&self.patch_decoder, &self.vocab, &vis, &es.qa, &mut scores)?;
        }
        Ok((scores, tokens))
    }

    /// Caption exact-match rate over the first `n` held-out scenes, full
    /// bundle, greedy decoding to the end-of-sequence token.
    pub fn caption_exact_match(&self, n: usize) -> Result<f64> {
        let n = n.min(self.eval.len());
        if n == 0 {
            return Ok(f64::NAN);
        }
        let cap_id = self.vocab.id("<cap>")?;
        let eos = self.vocab.id("<eos>")?;
        let mut hits = 0usize;
        for es in self.eval.iter().take(n) {
            let vis = self.main_projector.project(&es.bundle)?;
            let want = self.vocab.encode(&es.cap.answer)?;
            let got = self
                .main_decoder
                .generate(&vis, &[cap_id], want.len() + 2, Some(eos))?;
            hits += (got == want) as usize;
        }
        Ok(hits as f64 / n as f64)
    }
}

/// The oversampled mask set a family feeds the token pipeline. Synthetic and
/// bbox share the jittered proposal stream (bbox coarsens every proposal to
/// its filled box), so their object counts match; tiled is a fixed
/// content-blind mix of 2x2, 3x3 and 4x4 partitions, oversampled the same
/// way the proposal families are.
fn family_mask_set(
    family: MaskFamily,
    seed: u64,
    index: usize,
    scene: &Scene,
    proposals: usize,
) -> Result<MaskSet> {
    match family {
        MaskFamily::Synthetic => build_proposals(seed, index, scene, proposals),
        MaskFamily::Bbox => Ok(bbox_masks(&build_proposals(seed, index, scene, proposals)?)),
        MaskFamily::Tiled => {
            let side = scene.pixels.rows();
            let mut all = Vec::new();
            for grid in [2usize, 3, 4] {
                all.extend(tiled_masks(side, grid)?.proposals);
            }
            Ok(add_background(&MaskSet {
                proposals: all,
                background: None,
                side,
            }))
        }
    }
}

/// One row of the mask-family comparison: a model trained on that family's
/// own full bundle, scored at the shared reduced budget.
pub struct FamilyRun {
    pub family: MaskFamily,
    /// Token count of the full training-time bundle (families differ here,
    /// by design; the comparison point is the reduced budget).
    pub full_tokens: usize,
    /// Token count at the comparison point, equal across families.
    pub tokens: usize,
    pub scores: Scores,
    pub stage2: TrainLog,
}

/// Train one model per mask family on that family's own oversampled bundle —
/// identical encoder, hyperparameters, scenes and questions — then evaluate
/// every model at the same reduced plan on the same held-out scenes. The
/// robustness claim under test is that the mask source barely matters.
pub fn family_comparison(cfg: &ExperimentConfig) -> Result<Vec<FamilyRun>> {
    cfg.validate()?;
    let vocab = Vocab::synthetic();
    let encoder = Encoder::new(EncoderConfig::desk(derived_seed(cfg.seed, 10)))?;
    let mut rows = Vec::with_capacity(MaskFamily::ALL.len());
    for (fx, family) in MaskFamily::ALL.into_iter().enumerate() {
        let build = |index: usize| -> Result<FitScene> {
            let scene = build_scene(cfg.seed, index)?;
            let features = encoder.encode(&scene.pixels)?;
            let set = family_mask_set(family, cfg.seed, index, &scene, cfg.proposals)?;
            let bundle = bundle_from_masks(&features, &set, cfg.pool_kernel)?;
            let qa = build_questions(cfg.seed, index, &scene, cfg.qa_per_scene)?;
            let cap = caption(&scene.spec, index);
            Ok(FitScene { bundle, qa, cap })
        };
        let train: Vec<FitScene> = (0..cfg.family_scenes)
            .into_par_iter()
            .map(build)
            .collect::<Result<_>>()?;
        let eval: Vec<FitScene> = (cfg.family_scenes..cfg.family_scenes + cfg.family_eval_scenes)
            .into_par_iter()
            .map(build)
            .collect::<Result<_>>()?;
        let plan = reduced_plan();
        let full_tokens = train[0].bundle.len();
        mgvt_core::tokens::predicted_count(&train[0].bundle, &plan).map_err(|e| {
            Error::Config(format!(
                "reduced plan infeasible for the {} family: {e}",
                family.name()
            ))
        })?;

        let mut timings = Vec::new();
        let (projector, decoder, _s1, s2) = fit_model(
            &train,
            &vocab,
            cfg,
            family.name(),
            60 + 2 * fx as u64,
            61 + 2 * fx as u64,
            &mut timings,
        )?;

        let mut scores = Scores::default();
        let mut tokens = 0usize;
        for fs in &eval {
            let reduced = reduce(&fs.bundle, &plan)?;
            tokens = reduced.len();
            let vis = projector.project(&reduced)?;
            score_scene(&decoder, &vocab, &vis, &fs.qa, &mut scores)?;
        }
        rows.push(FamilyRun {
            family,
            full_tokens,
            tokens,
            scores,
            stage2: s2,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            train_scenes: 8,
            eval_scenes: 3,
            stage1_epochs: 1,
            stage2_epochs: 1,
            caption_eval: 2,
            seed: 5,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn full_bundle_has_the_expected_layout() {
        let cfg = tiny_cfg();
        assert_eq!(cfg.full_tokens(), 42);
        assert_eq!(cfg.full_objects(), 25);
        let encoder = Encoder::new(EncoderConfig::desk(3)).unwrap();
        let es = prepare_scene(&encoder, &cfg, 0).unwrap();
        assert_eq!(es.bundle.len(), 42);
        assert_eq!(es.bundle.globals().count(), 1);
        assert_eq!(es.bundle.locals().count(), 16);
        assert_eq!(es.bundle.objects().count(), 25);
        assert_eq!(es.patch_bundle.len(), 64);
        assert!(es.bundle.scaled);
        assert!(!es.patch_bundle.scaled);
    }

    #[test]
    fn tiny_experiment_trains_and_evaluates() {
        let exp = TrainedExperiment::train(&tiny_cfg()).unwrap();
        let (scores, tokens) = exp.eval_plan(&reduced_plan()).unwrap();
        assert_eq!(tokens, 22);
        assert!(scores.existence.total >= exp.eval.len());
        let (_, t) = exp.eval_patch_random(22, 9).unwrap();
        assert_eq!(t, 22);
        let (_, t) = exp.eval_patch_full().unwrap();
        assert_eq!(t, 64);
        let cap = exp.caption_exact_match(2).unwrap();
        assert!((0.0..=1.0).contains(&cap));
    }

    #[test]
    fn family_models_share_the_reduced_budget() {
        let cfg = ExperimentConfig {
            family_scenes: 6,
            family_eval_scenes: 2,
            ..tiny_cfg()
        };
        let rows = family_comparison(&cfg).unwrap();
        assert_eq!(rows.len(), 3);
        for row in &rows {
            assert_eq!(row.tokens, 22, "family {} budget", row.family.name());
            assert!(row.scores.existence.total >= 2);
        }
        // Synthetic and bbox share the proposal stream; tiled oversamples a
        // fixed 4 + 9 + 16 partition mix plus the (empty) background.
        assert_eq!(rows[0].full_tokens, 42);
        assert_eq!(rows[1].full_tokens, 42);
        assert_eq!(rows[2].full_tokens, 47);
    }

    #[test]
    fn experiment_is_deterministic_for_a_seed() {
        let a = TrainedExperiment::train(&tiny_cfg()).unwrap();
        let b = TrainedExperiment::train(&tiny_cfg()).unwrap();
        assert_eq!(a.main_checksum(), b.main_checksum());
        assert_eq!(a.patch_checksum(), b.patch_checksum());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_cfg();
        cfg.pool_kernel = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.eval_scenes = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.qa_per_scene = 9;
        assert!(cfg.validate().is_err());
    }
}
