//! Object tokens by inversion: optimize a query embedding until its
//! explainability map over the patch grid matches a pixel mask.
//!
//! The loss is convex in the query (log-sum-exp of an affine map, plus an
//! optional quadratic pull toward the initialization), so plain gradient
//! descent with a backtracking line search is enough. A whole mask set is
//! inverted as one batch per step — the joint loss is a sum of independent
//! per-token terms, so the batched gradients equal the per-mask runs
//! exactly, and tokens can be distributed across threads freely.

use rayon::prelude::*;

use crate::encoder::{explain, explain_backward, ImageFeatureSet};
use crate::error::{Error, Result};
use crate::masks::{BBox, MaskSet};
use crate::numerics::{sinusoid, Grid2D, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Cls,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Clone, Copy, Debug)]
pub struct InversionConfig {
    pub steps: usize,
    /// Initial step size for each descent step; the line search halves it on
    /// loss increase (up to 10 times). Zero is allowed as an explicit null
    /// update.
    pub step_size: f64,
    pub init: Init,
    /// Weight of the quadratic pull toward the initialization.
    pub reg_weight: f64,
    pub loss: LossKind,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            steps: 50,
            // The scores s = Kq/√d compress query-space gradients by roughly
            // 1/d, so useful steps are on the order of the embedding dim.
            // Overshoot is absorbed by the line search.
            step_size: 64.0,
            init: Init::Cls,
            reg_weight: 1e-3,
            loss: LossKind::CrossEntropy,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("inversion needs at least 1 step".into()));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("bad step size {}", self.step_size)));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::Config(format!("bad reg weight {}", self.reg_weight)));
        }
        Ok(())
    }
}

/// An optimized mask embedding plus its optimization diagnostics.
#[derive(Clone, Debug)]
pub struct ObjectToken {
    pub embedding: Vector,
    pub pos_embedding: Vector,
    /// Index of the source mask within the set it came from.
    pub source_mask_id: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Explainability mass inside the mask support, before/after optimizing.
    pub mass_before: f64,
    pub mass_after: f64,
    /// IoU between the top-|support| map cells and the support itself.
    pub map_iou_after: f64,
    /// Accepted descent steps before convergence or budget exhaustion.
    pub steps_used: usize,
}

/// Coverage fraction of each patch cell: 1 = fully inside the mask.
pub fn downsample_mask(mask: &Grid2D<bool>, p: usize) -> Result<Grid2D<f64>> {
    let side = mask.rows();
    if mask.cols() != side {
        return Err(Error::Shape("mask must be square".into()));
    }
    if p == 0 || side % p != 0 {
        return Err(Error::Shape(format!(
            "patch grid {p} does not divide mask side {side}"
        )));
    }
    let cell = side / p;
    let area = (cell * cell) as f64;
    Ok(Grid2D::from_fn(p, p, |pr, pc| {
        let mut covered = 0usize;
        for r in 0..cell {
            for c in 0..cell {
                covered += mask[(pr * cell + r, pc * cell + c)] as usize;
            }
        }
        covered as f64 / area
    }))
}

/// Turn coverage fractions into a target distribution (sum 1). An all-zero
/// mask targets the uniform distribution.
pub fn normalize_target(fractions: &Grid2D<f64>) -> Grid2D<f64> {
    let total: f64 = fractions.iter().sum();
    if total == 0.0 {
        let n = fractions.len() as f64;
        fractions.map(|_| 1.0 / n)
    } else {
        fractions.map(|&f| f / total)
    }
}

/// Loss only — used by the line search, and exposed so external gradient
/// checks can difference the exact objective the optimizer descends.
pub fn eval_loss(
    features: &ImageFeatureSet,
    q: &Vector,
    target: &[f64],
    q_init: &Vector,
    cfg: &InversionConfig,
) -> f64 {
    let d = features.config.embed_dim as f64;
    let scale = 1.0 / d.sqrt();
    let s: Vec<f64> = features.keys.iter().map(|k| q.dot(k) * scale).collect();
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let data = match cfg.loss {
        LossKind::CrossEntropy => {
            // CE against softmax(s) with a normalized target t reduces to
            // lse(s) − t·s, which stays finite however peaked the map gets.
            lse - s.iter().zip(target).map(|(v, t)| v * t).sum::<f64>()
        }
        LossKind::Mse => {
            let z: f64 = s.iter().map(|v| (v - max).exp()).sum();
            s.iter()
                .zip(target)
                .map(|(v, t)| {
                    let w = (v - max).exp() / z;
                    (w - t) * (w - t)
                })
                .sum()
        }
    };
    let diff = q.sub(q_init);
    data + cfg.reg_weight * diff.dot(&diff)
}

/// Loss and its exact gradient in the query.
pub fn eval_grad(
    features: &ImageFeatureSet,
    q: &Vector,
    target: &[f64],
    q_init: &Vector,
    cfg: &InversionConfig,
) -> Result<(f64, Vector)> {
    let d = features.config.embed_dim as f64;
    let scale = 1.0 / d.sqrt();
    let loss = eval_loss(features, q, target, q_init, cfg);
    let mut grad = match cfg.loss {
        LossKind::CrossEntropy => {
            // d(lse − t·s)/ds = softmax(s) − t; pull back through s = Kq/√d.
            let map = explain(features, q)?;
            let mut g = Vector::zeros(q.dim());
            for ((w, t), k) in map.weights.iter().zip(target).zip(features.keys.iter()) {
                g.axpy(scale * (w - t), k);
            }
            g
        }
        LossKind::Mse => {
            // Upstream dL/dw = 2(w − t), routed through the map's backward.
            let map = explain(features, q)?;
            let upstream = Grid2D::from_vec(
                map.weights.rows(),
                map.weights.cols(),
                map.weights
                    .iter()
                    .zip(target)
                    .map(|(w, t)| 2.0 * (w - t))
                    .collect(),
            )?;
            explain_backward(features, q, &upstream)?
        }
    };
    grad.axpy(2.0 * cfg.reg_weight, &q.sub(q_init));
    Ok((loss, grad))
}

/// Mass the map places on the mask's support cells.
fn support_mass(weights: &Grid2D<f64>, support: &[bool]) -> f64 {
    weights
        .iter()
        .zip(support)
        .filter(|(_, &s)| s)
        .map(|(w, _)| w)
        .sum()
}

/// IoU between the top-n map cells (n = |support|) and the support.
fn top_cells_iou(weights: &Grid2D<f64>, support: &[bool]) -> f64 {
    let n = support.iter().filter(|&&s| s).count();
    if n == 0 {
        return 0.0;
    }
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| {
        weights.as_slice()[b]
            .partial_cmp(&weights.as_slice()[a])
            .expect("finite weights")
            .then(a.cmp(&b))
    });
    let mut inter = 0usize;
    for &i in idx.iter().take(n) {
        inter += support[i] as usize;
    }
    // |top| = |support| = n, so the union is 2n − intersection.
    inter as f64 / (2 * n - inter) as f64
}

/// One token's full optimization, shared by the single and batched paths so
/// the two are identical float-op for float-op.
fn optimize(
    features: &ImageFeatureSet,
    mask: &Grid2D<bool>,
    cfg: &InversionConfig,
) -> Result<ObjectToken> {
    let p = features.patches.rows();
    let fractions = downsample_mask(mask, p)?;
    let target_grid = normalize_target(&fractions);
    let target = target_grid.as_slice();
    let support: Vec<bool> = fractions.iter().map(|&f| f > 0.0).collect();

    let q_init = match cfg.init {
        Init::Cls => features.cls.clone(),
        Init::Zero => Vector::zeros(features.config.embed_dim),
    };
    let initial_map = explain(features, &q_init)?;
    let mass_before = support_mass(&initial_map.weights, &support);

    let mut q = q_init.clone();
    let mut loss = eval_loss(features, &q, target, &q_init, cfg);
    let initial_loss = loss;
    if !loss.is_finite() {
        return Err(Error::NonFinite("inversion loss non-finite at step 0".into()));
    }
    let mut steps_used = 0usize;
    for step in 0..cfg.steps {
        let (l, grad) = eval_grad(features, &q, target, &q_init, cfg)?;
        if !l.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite(format!(
                "inversion loss or gradient non-finite at step {step}"
            )));
        }
        let mut alpha = cfg.step_size;
        let mut accepted = false;
        for _ in 0..=10 {
            let mut trial = q.clone();
            trial.axpy(-alpha, &grad);
            let lt = eval_loss(features, &trial, target, &q_init, cfg);
            if lt.is_finite() && lt <= l {
                q = trial;
                loss = lt;
                accepted = true;
                break;
            }
            alpha /= 2.0;
        }
        if accepted {
            steps_used += 1;
        } else {
            // No descent even at step_size/2^10: we are at the bottom.
            break;
        }
    }

    let final_map = explain(features, &q)?;
    let mass_after = support_mass(&final_map.weights, &support);
    let map_iou_after = top_cells_iou(&final_map.weights, &support);
    let dim = q.dim();
    Ok(ObjectToken {
        embedding: q,
        pos_embedding: Vector::zeros(dim),
        source_mask_id: 0,
        initial_loss,
        final_loss: loss,
        mass_before,
        mass_after,
        map_iou_after,
        steps_used,
    })
}

/// Invert one mask against an image's frozen features.
pub fn invert_mask(
    mask: &Grid2D<bool>,
    features: &ImageFeatureSet,
    cfg: &InversionConfig,
) -> Result<ObjectToken> {
    cfg.validate()?;
    if mask.rows() != features.config.image_side || mask.cols() != features.config.image_side {
        return Err(Error::Shape(format!(
            "mask is {}x{}, image is {}px",
            mask.rows(),
            mask.cols(),
            features.config.image_side
        )));
    }
    optimize(features, mask, cfg)
}

/// Invert every member of a set (proposals first, then background) in one
/// batched pass. Results are identical to independent [`invert_mask`] calls
/// and do not depend on how rayon schedules the tokens.
pub fn invert_all(
    set: &MaskSet,
    features: &ImageFeatureSet,
    cfg: &InversionConfig,
) -> Result<Vec<ObjectToken>> {
    cfg.validate()?;
    if set.member_count() == 0 {
        return Err(Error::Config("cannot invert an empty mask set".into()));
    }
    if set.side != features.config.image_side {
        return Err(Error::Shape(format!(
            "mask set is {}px, image is {}px",
            set.side, features.config.image_side
        )));
    }
    let masks: Vec<&Grid2D<bool>> = set.members().map(|m| &m.mask).collect();
    let mut tokens: Vec<ObjectToken> = masks
        .par_iter()
        .map(|mask| optimize(features, mask, cfg))
        .collect::<Result<Vec<_>>>()?;
    for (i, t) in tokens.iter_mut().enumerate() {
        t.source_mask_id = i;
    }
    Ok(tokens)
}

/// Fixed sinusoidal embedding of a bbox center: the first half of the vector
/// encodes the normalized x coordinate, the second half y.
pub fn positional_embedding(bbox: &BBox, image_side: usize, dim: usize) -> Result<Vector> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!(
            "positional embedding dim {dim} must be even"
        )));
    }
    let (cx, cy) = bbox.center(image_side);
    let mut v = sinusoid(cx, dim / 2);
    v.extend(sinusoid(cy, dim / 2));
    Ok(Vector::new(v))
}

/// Add a positional embedding into a token's embedding (addition keeps the
/// embedding dimension uniform across token kinds) and record it.
pub fn attach_position(token: &ObjectToken, pe: &Vector) -> Result<ObjectToken> {
    if pe.dim() != token.embedding.dim() {
        return Err(Error::Shape(format!(
            "positional dim {} vs embedding dim {}",
            pe.dim(),
            token.embedding.dim()
        )));
    }
    let mut out = token.clone();
    out.embedding = token.embedding.add(pe);
    out.pos_embedding = pe.clone();
    Ok(out)
}
