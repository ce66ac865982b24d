//! Two-stage training for the projector/decoder pair.
//!
//! Stage one adapts only the projector to a frozen decoder (the decoder is
//! taken by shared reference, so freezing is enforced by the type system).
//! Stage two updates projector and decoder jointly. Visual features are
//! supplied pre-encoded at the projector's input width; the image encoder
//! itself is never trained.
//!
//! Batch gradients are accumulated over fixed-size chunks that are processed
//! in parallel and then folded in index order, so results are bit-identical
//! regardless of how many worker threads rayon uses.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Vector};
use crate::vlm::decoder::ToyDecoder;
use crate::vlm::projector::Projector;

/// Fixed accumulation granularity; changing it changes the floating-point
/// fold order and therefore the exact trained weights.
const PAR_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Projector-only alignment against a frozen decoder.
    Pretrain,
    /// Joint projector + decoder updates.
    Finetune,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn pretrain(lr: f64, batch: usize, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            stage: Stage::Pretrain,
            lr,
            batch,
            epochs,
            seed,
        }
    }

    pub fn finetune(lr: f64, batch: usize, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            stage: Stage::Finetune,
            lr,
            batch,
            epochs,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epoch count must be at least 1".into()));
        }
        Ok(())
    }
}

/// One training example: pre-encoded visual tokens (projector input width)
/// plus a prompt and the target continuation, both as vocabulary ids.
#[derive(Clone, Debug)]
pub struct Example {
    pub visual: Vec<Vector>,
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct TrainLog {
    /// Mean loss of the very first batch, under the starting parameters.
    pub initial_loss: f64,
    /// Mean loss of the last epoch.
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize, lr: f64) -> Adam {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t as i32);
        let c2 = 1.0 - Self::B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Forward + backward for one example; accumulates projector gradients into
/// `pg` and, when `dg` is nonempty, decoder gradients into `dg`.
fn example_pass(
    projector: &Projector,
    decoder: &ToyDecoder,
    ex: &Example,
    pg: &mut [f64],
    dg: &mut [f64],
) -> Result<f64> {
    let mut projected = Vec::with_capacity(ex.visual.len());
    let mut caches = Vec::with_capacity(ex.visual.len());
    for v in &ex.visual {
        let (p, c) = projector.forward_cached(v)?;
        projected.push(p);
        caches.push(c);
    }
    let (loss, dec_grad, vis_grads) = decoder.backward(&projected, &ex.prompt, &ex.target)?;
    if !dg.is_empty() {
        for (a, b) in dg.iter_mut().zip(&dec_grad) {
            *a += b;
        }
    }
    for (cache, vg) in caches.iter().zip(&vis_grads) {
        projector.backward(cache, vg.as_slice(), pg);
    }
    Ok(loss)
}

/// Summed (not yet averaged) gradients and loss over one batch of indices.
fn batch_pass(
    examples: &[Example],
    batch: &[usize],
    projector: &Projector,
    decoder: &ToyDecoder,
    want_decoder_grad: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let dec_len = if want_decoder_grad {
        decoder.param_count()
    } else {
        0
    };
    let parts: Vec<Result<(f64, Vec<f64>, Vec<f64>)>> = batch
        .par_chunks(PAR_CHUNK)
        .map(|chunk| {
            let mut pg = vec![0.0; projector.params.len()];
            let mut dg = vec![0.0; dec_len];
            let mut loss = 0.0;
            for &ix in chunk {
                loss += example_pass(projector, decoder, &examples[ix], &mut pg, &mut dg)?;
            }
            Ok((loss, pg, dg))
        })
        .collect();
    let mut loss = 0.0;
    let mut pg = vec![0.0; projector.params.len()];
    let mut dg = vec![0.0; dec_len];
    for part in parts {
        let (l, p, d) = part?;
        loss += l;
        for (a, b) in pg.iter_mut().zip(&p) {
            *a += b;
        }
        for (a, b) in dg.iter_mut().zip(&d) {
            *a += b;
        }
    }
    Ok((loss, pg, dg))
}

fn run_training(
    examples: &[Example],
    projector: &mut Projector,
    decoder: &mut ToyDecoder,
    train_decoder: bool,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("training needs at least one example".into()));
    }
    for (i, ex) in examples.iter().enumerate() {
        if ex.visual.iter().any(|v| v.dim() != projector.in_dim) {
            return Err(Error::Shape(format!(
                "example {i} has a visual token that does not match the projector input width {}",
                projector.in_dim
            )));
        }
    }
    if projector.out_dim != decoder.config().model_dim {
        return Err(Error::Shape(format!(
            "projector output width {} does not match decoder model_dim {}",
            projector.out_dim,
            decoder.config().model_dim
        )));
    }

    let mut adam_p = Adam::new(projector.params.len(), cfg.lr);
    let mut adam_d = Adam::new(
        if train_decoder {
            decoder.param_count()
        } else {
            0
        },
        cfg.lr,
    );
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let base = Rng::from_seed(cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = None;
    for epoch in 0..cfg.epochs {
        let mut rng = base.child(epoch as u64);
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            let (loss_sum, pg, dg) = batch_pass(examples, batch, projector, decoder, train_decoder)?;
            if !loss_sum.is_finite() {
                return Err(Error::NonFinite(format!("batch loss in epoch {epoch}")));
            }
            let bsz = batch.len() as f64;
            if initial_loss.is_none() {
                initial_loss = Some(loss_sum / bsz);
            }
            sum += loss_sum;
            let pg: Vec<f64> = pg.iter().map(|g| g / bsz).collect();
            adam_p.step(&mut projector.params, &pg);
            if train_decoder {
                let dg: Vec<f64> = dg.iter().map(|g| g / bsz).collect();
                adam_d.step(decoder.params_mut(), &dg);
            }
        }
        let mean = sum / examples.len() as f64;
        epoch_losses.push(mean);
        let init = initial_loss.expect("at least one batch ran");
        if mean > 10.0 * init && mean > init + 1.0 {
            return Err(Error::Diverged(format!(
                "epoch {epoch} mean loss {mean:.4} against initial {init:.4}"
            )));
        }
    }
    Ok(TrainLog {
        initial_loss: initial_loss.expect("at least one epoch ran"),
        final_loss: *epoch_losses.last().expect("at least one epoch ran"),
        epoch_losses,
    })
}

/// Stage one: align the projector to a frozen decoder. The decoder is shared,
/// so its weights cannot change; only the projector moves.
pub fn train_stage1(
    examples: &[Example],
    projector: &mut Projector,
    decoder: &ToyDecoder,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if cfg.stage != Stage::Pretrain {
        return Err(Error::Config(
            "stage-one training requires a Pretrain config".into(),
        ));
    }
    let mut scratch = decoder.clone();
    let before = scratch.checksum();
    let log = run_training(examples, projector, &mut scratch, false, cfg)?;
    debug_assert_eq!(scratch.checksum(), before, "frozen decoder moved");
    Ok(log)
}

/// Stage two: joint projector and decoder updates.
pub fn train_stage2(
    examples: &[Example],
    projector: &mut Projector,
    decoder: &mut ToyDecoder,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if cfg.stage != Stage::Finetune {
        return Err(Error::Config(
            "stage-two training requires a Finetune config".into(),
        ));
    }
    run_training(examples, projector, decoder, true, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::decoder::DecoderConfig;

    fn mini_decoder(seed: u64) -> ToyDecoder {
        ToyDecoder::new(DecoderConfig {
            vocab: 9,
            model_dim: 8,
            layers: 1,
            heads: 2,
            context: 32,
            seed,
        })
        .unwrap()
    }

    /// Four distinguishable visual patterns, each answered by its own token.
    fn toy_task() -> Vec<Example> {
        (0..4usize)
            .map(|i| {
                let mut v = vec![-0.5; 6];
                v[i] = 2.0;
                Example {
                    visual: vec![Vector::new(v.clone()), Vector::new(v)],
                    prompt: vec![1],
                    target: vec![(i + 4) as u32],
                }
            })
            .collect()
    }

    #[test]
    fn joint_training_reduces_loss() {
        let examples = toy_task();
        let mut proj = Projector::new(6, 8, 8, 3);
        let mut dec = mini_decoder(4);
        let cfg = TrainConfig::finetune(0.02, 2, 60, 5);
        let log = train_stage2(&examples, &mut proj, &mut dec, &cfg).unwrap();
        assert!(
            log.final_loss < 0.5 * log.initial_loss,
            "initial {} final {}",
            log.initial_loss,
            log.final_loss
        );
        // The trained pair answers the toy task.
        let answers: Vec<u32> = (4..8).collect();
        let mut correct = 0;
        for ex in &examples {
            let projected: Vec<Vector> = ex
                .visual
                .iter()
                .map(|v| proj.forward(v).unwrap())
                .collect();
            let got = dec
                .next_token_constrained(&projected, &ex.prompt, &answers)
                .unwrap();
            if got == ex.target[0] {
                correct += 1;
            }
        }
        assert!(correct >= 3, "only {correct}/4 toy answers correct");
    }

    #[test]
    fn projector_only_training_reduces_loss_and_freezes_decoder() {
        let examples = toy_task();
        let mut proj = Projector::new(6, 8, 8, 13);
        let dec = mini_decoder(14);
        let before = dec.checksum();
        let cfg = TrainConfig::pretrain(0.02, 2, 80, 15);
        let log = train_stage1(&examples, &mut proj, &dec, &cfg).unwrap();
        assert_eq!(dec.checksum(), before);
        assert!(
            log.final_loss < 0.95 * log.initial_loss,
            "initial {} final {}",
            log.initial_loss,
            log.final_loss
        );
    }

    #[test]
    fn training_is_invariant_to_worker_count() {
        let examples = toy_task();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let mut proj = Projector::new(6, 8, 8, 23);
                let mut dec = mini_decoder(24);
                let cfg = TrainConfig::finetune(0.01, 3, 4, 25);
                let log = train_stage2(&examples, &mut proj, &mut dec, &cfg).unwrap();
                (proj.checksum(), dec.checksum(), log.final_loss)
            })
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.0, b.0, "projector weights depend on worker count");
        assert_eq!(a.1, b.1, "decoder weights depend on worker count");
        assert_eq!(a.2.to_bits(), b.2.to_bits());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let examples = toy_task();
        let mut proj = Projector::new(6, 8, 8, 33);
        let mut dec = mini_decoder(34);
        let (p0, d0) = (proj.checksum(), dec.checksum());
        let cfg = TrainConfig::finetune(0.0, 4, 3, 35);
        let log = train_stage2(&examples, &mut proj, &mut dec, &cfg).unwrap();
        assert_eq!(proj.checksum(), p0);
        assert_eq!(dec.checksum(), d0);
        for l in &log.epoch_losses {
            assert!((l - log.initial_loss).abs() < 1e-12);
        }
    }

    #[test]
    fn stage_mismatch_is_rejected() {
        let examples = toy_task();
        let mut proj = Projector::new(6, 8, 8, 43);
        let mut dec = mini_decoder(44);
        let wrong1 = TrainConfig::finetune(0.01, 2, 1, 45);
        assert!(train_stage1(&examples, &mut proj, &dec, &wrong1).is_err());
        let wrong2 = TrainConfig::pretrain(0.01, 2, 1, 45);
        assert!(train_stage2(&examples, &mut proj, &mut dec, &wrong2).is_err());
    }

    #[test]
    fn runaway_learning_rate_reports_divergence() {
        let examples = toy_task();
        let mut proj = Projector::new(6, 8, 8, 53);
        let mut dec = mini_decoder(54);
        let cfg = TrainConfig::finetune(1e4, 2, 30, 55);
        match train_stage2(&examples, &mut proj, &mut dec, &cfg) {
            Err(Error::Diverged(_)) => {}
            Err(Error::NonFinite(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let mut proj = Projector::new(6, 8, 8, 63);
        let mut dec = mini_decoder(64);
        let cfg = TrainConfig::finetune(0.01, 2, 1, 65);
        assert!(train_stage2(&[], &mut proj, &mut dec, &cfg).is_err());
        let bad_dim = vec![Example {
            visual: vec![Vector::zeros(5)],
            prompt: vec![1],
            target: vec![2],
        }];
        assert!(train_stage2(&bad_dim, &mut proj, &mut dec, &cfg).is_err());
        let mut bad_cfg = cfg;
        bad_cfg.batch = 0;
        let ok = toy_task();
        assert!(train_stage2(&ok, &mut proj, &mut dec, &bad_cfg).is_err());
        let mut neg = cfg;
        neg.lr = -1.0;
        assert!(train_stage2(&ok, &mut proj, &mut dec, &neg).is_err());
        // Projector/decoder width mismatch.
        let mut wide = Projector::new(6, 8, 9, 66);
        assert!(train_stage2(&ok, &mut wide, &mut dec, &cfg).is_err());
    }
}
