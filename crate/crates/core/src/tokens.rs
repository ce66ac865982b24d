//! Token bundles: the ordered [global, locals, objects] sequence fed to the
//! language model, with norm scaling and declarative test-time reduction.
//!
//! Scaling exists because inverted object embeddings and the CLS token live
//! on a different norm scale than pooled patch tokens; the default mode
//! rescales each one's norm to the mean patch-token norm along its original
//! direction. The alternative `LiteralAffine` mode standardizes a token's
//! entries and maps them to the patch-token entry statistics instead. Both
//! are exposed because the two readings disagree and downstream code picks
//! one explicitly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::inversion::ObjectToken;
use crate::numerics::{avg_pool_2d, max_pool_2d, Grid2D, Rng, Vector};
use crate::wire::{Reader, Writer};

#[derive(Clone, Debug, PartialEq)]
pub enum TokenKind {
    Global,
    Local { row: usize, col: usize },
    Object { mask_id: usize, confidence: f64 },
}

#[derive(Clone, Debug)]
pub struct Token {
    pub kind: TokenKind,
    pub embedding: Vector,
}

/// Norm and entry statistics of one image's pooled patch tokens.
/// Population convention (divide by n) throughout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchStats {
    pub norm_mu: f64,
    pub norm_sigma: f64,
    pub entry_mu: f64,
    pub entry_sigma: f64,
}

impl PatchStats {
    /// Constant-norm patch grids give sigma 0; scaling then targets the
    /// mean only.
    pub fn is_degenerate(&self) -> bool {
        self.norm_sigma == 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScaleMode {
    /// Rescale the token's norm to `norm_mu + z·norm_sigma` along its own
    /// direction. `z = 0` (the default) targets the mean patch norm exactly.
    NormRetarget { z: f64 },
    /// Standardize the token's entries by its own mean/std, then map
    /// entrywise onto the patch-token entry statistics.
    LiteralAffine,
}

impl Default for ScaleMode {
    fn default() -> Self {
        ScaleMode::NormRetarget { z: 0.0 }
    }
}

#[derive(Clone)]
pub struct TokenBundle {
    pub tokens: Vec<Token>,
    /// Grid shape of the stored local tokens, while the structure survives.
    /// Pruning strategies destroy it; pooling shrinks it.
    pub local_grid: Option<(usize, usize)>,
    pub scaled: bool,
    /// Present whenever the bundle was assembled from ≥ 2 local tokens.
    pub patch_stats: Option<PatchStats>,
}

impl TokenBundle {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn globals(&self) -> impl Iterator<Item = &Token> {
        self.tokens
            .iter()
            .filter(|t| matches!(t.kind, TokenKind::Global))
    }

    pub fn locals(&self) -> impl Iterator<Item = &Token> {
        self.tokens
            .iter()
            .filter(|t| matches!(t.kind, TokenKind::Local { .. }))
    }

    pub fn objects(&self) -> impl Iterator<Item = &Token> {
        self.tokens
            .iter()
            .filter(|t| matches!(t.kind, TokenKind::Object { .. }))
    }

    pub fn dim(&self) -> Option<usize> {
        self.tokens.first().map(|t| t.embedding.dim())
    }
}

/// Patch-strategy half of a reduction plan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PatchStrategy {
    KeepAll,
    Pool { kernel: usize },
    MaxPool { kernel: usize },
    PruneRandom { keep: usize, seed: u64 },
    PruneTopKNorm { keep: usize },
}

/// Declarative test-time token budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReductionPlan {
    pub patch_strategy: PatchStrategy,
    pub object_keep: usize,
    pub use_global: bool,
}

/// Mean and population-std of the local-token norms, plus the same over all
/// their entries (for the entrywise scaling mode).
pub fn compute_patch_stats(locals: &[Vector]) -> Result<PatchStats> {
    if locals.len() < 2 {
        return Err(Error::Shape(format!(
            "patch statistics need at least 2 local tokens, got {}",
            locals.len()
        )));
    }
    let n = locals.len() as f64;
    let norms: Vec<f64> = locals.iter().map(|t| t.norm()).collect();
    let norm_mu = norms.iter().sum::<f64>() / n;
    let norm_sigma = (norms.iter().map(|v| (v - norm_mu).powi(2)).sum::<f64>() / n).sqrt();
    let total_entries: usize = locals.iter().map(|t| t.dim()).sum();
    let ne = total_entries as f64;
    let entry_mu = locals
        .iter()
        .flat_map(|t| t.as_slice())
        .sum::<f64>()
        / ne;
    let entry_sigma = (locals
        .iter()
        .flat_map(|t| t.as_slice())
        .map(|v| (v - entry_mu).powi(2))
        .sum::<f64>()
        / ne)
        .sqrt();
    Ok(PatchStats {
        norm_mu,
        norm_sigma,
        entry_mu,
        entry_sigma,
    })
}

/// Bring one token onto the patch-token scale. See [`ScaleMode`].
pub fn scale_token(t: &Vector, stats: &PatchStats, mode: ScaleMode) -> Result<Vector> {
    match mode {
        ScaleMode::NormRetarget { z } => {
            let norm = t.norm();
            if norm == 0.0 {
                return Err(Error::NonFinite(
                    "cannot direction-normalize a zero-norm token".into(),
                ));
            }
            let target = stats.norm_mu + z * stats.norm_sigma;
            Ok(t.scaled(target / norm))
        }
        ScaleMode::LiteralAffine => {
            let n = t.dim() as f64;
            let mu = t.as_slice().iter().sum::<f64>() / n;
            let sigma =
                (t.as_slice().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
            if sigma == 0.0 {
                return Err(Error::NonFinite(
                    "cannot standardize a constant token".into(),
                ));
            }
            Ok(Vector::new(
                t.as_slice()
                    .iter()
                    .map(|v| (v - mu) / sigma * stats.entry_sigma + stats.entry_mu)
                    .collect(),
            ))
        }
    }
}

/// Build the canonical token sequence: global first, then locals row-major,
/// then object tokens in descending confidence (ties by input order). With
/// `do_scale`, the global and object embeddings are rescaled against this
/// image's patch statistics; local tokens are never rescaled.
pub fn assemble(
    global: Option<&Vector>,
    locals: &Grid2D<Vector>,
    objects: &[(ObjectToken, f64)],
    do_scale: bool,
    mode: ScaleMode,
) -> Result<TokenBundle> {
    let dim = global
        .map(|g| g.dim())
        .or_else(|| locals.iter().next().map(|t| t.dim()))
        .or_else(|| objects.first().map(|(t, _)| t.embedding.dim()));
    let Some(dim) = dim else {
        return Ok(TokenBundle {
            tokens: vec![],
            local_grid: None,
            scaled: do_scale,
            patch_stats: None,
        });
    };
    for t in locals.iter() {
        if t.dim() != dim {
            return Err(Error::Shape(format!(
                "local token dim {} vs bundle dim {dim}",
                t.dim()
            )));
        }
    }
    for (t, conf) in objects {
        if t.embedding.dim() != dim {
            return Err(Error::Shape(format!(
                "object token dim {} vs bundle dim {dim}",
                t.embedding.dim()
            )));
        }
        if !conf.is_finite() {
            return Err(Error::NonFinite("non-finite object confidence".into()));
        }
    }

    let patch_stats = if locals.len() >= 2 {
        Some(compute_patch_stats(locals.as_slice())?)
    } else {
        None
    };
    if do_scale && patch_stats.is_none() && (global.is_some() || !objects.is_empty()) {
        return Err(Error::Shape(
            "scaling requested but fewer than 2 local tokens to take statistics from".into(),
        ));
    }

    let mut tokens = Vec::with_capacity(1 + locals.len() + objects.len());
    if let Some(g) = global {
        let embedding = if do_scale {
            scale_token(g, patch_stats.as_ref().unwrap(), mode)?
        } else {
            g.clone()
        };
        tokens.push(Token {
            kind: TokenKind::Global,
            embedding,
        });
    }
    for (r, c, t) in locals.enumerate() {
        tokens.push(Token {
            kind: TokenKind::Local { row: r, col: c },
            embedding: t.clone(),
        });
    }
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| {
        objects[b].1
            .partial_cmp(&objects[a].1)
            .expect("finite confidence")
            .then(a.cmp(&b))
    });
    for i in order {
        let (tok, conf) = &objects[i];
        let embedding = if do_scale {
            scale_token(&tok.embedding, patch_stats.as_ref().unwrap(), mode)?
        } else {
            tok.embedding.clone()
        };
        tokens.push(Token {
            kind: TokenKind::Object {
                mask_id: tok.source_mask_id,
                confidence: *conf,
            },
            embedding,
        });
    }
    Ok(TokenBundle {
        tokens,
        local_grid: (!locals.is_empty()).then(|| (locals.rows(), locals.cols())),
        scaled: do_scale,
        patch_stats,
    })
}

/// Token count a plan will produce on a bundle, without applying it.
/// Errors exactly when [`reduce`] would.
pub fn predicted_count(bundle: &TokenBundle, plan: &ReductionPlan) -> Result<usize> {
    let n_locals = bundle.locals().count();
    let n_objects = bundle.objects().count();
    let has_global = bundle.globals().count() > 0;
    let locals_after = match plan.patch_strategy {
        PatchStrategy::KeepAll => n_locals,
        PatchStrategy::Pool { kernel } | PatchStrategy::MaxPool { kernel } => {
            let (r, c) = bundle.local_grid.ok_or_else(|| {
                Error::Config("pooling needs the local grid structure, which this bundle lost".into())
            })?;
            if kernel == 0 || r % kernel != 0 || c % kernel != 0 {
                return Err(Error::Shape(format!(
                    "pool kernel {kernel} does not divide the {r}x{c} local grid"
                )));
            }
            (r / kernel) * (c / kernel)
        }
        PatchStrategy::PruneRandom { keep, .. } | PatchStrategy::PruneTopKNorm { keep } => {
            if keep > n_locals {
                return Err(Error::Infeasible {
                    what: "local tokens".into(),
                    available: n_locals,
                    requested: keep,
                });
            }
            keep
        }
    };
    if plan.object_keep > n_objects {
        return Err(Error::Infeasible {
            what: "object tokens".into(),
            available: n_objects,
            requested: plan.object_keep,
        });
    }
    if plan.use_global && !has_global {
        return Err(Error::Infeasible {
            what: "global token".into(),
            available: 0,
            requested: 1,
        });
    }
    Ok(locals_after + plan.object_keep + plan.use_global as usize)
}

/// Apply a reduction plan: cut object tokens to the first `object_keep` in
/// stored (descending-confidence) order, shrink or prune the locals, drop
/// the global if unwanted. Never rescales; surviving tokens keep their
/// embeddings bit-for-bit.
pub fn reduce(bundle: &TokenBundle, plan: &ReductionPlan) -> Result<TokenBundle> {
    let expected = predicted_count(bundle, plan)?;

    let global: Vec<Token> = if plan.use_global {
        bundle.globals().cloned().collect()
    } else {
        vec![]
    };
    let locals: Vec<Token> = bundle.locals().cloned().collect();
    let objects: Vec<Token> = bundle.objects().take(plan.object_keep).cloned().collect();

    let (new_locals, new_grid) = match plan.patch_strategy {
        PatchStrategy::KeepAll => (locals, bundle.local_grid),
        PatchStrategy::Pool { kernel } | PatchStrategy::MaxPool { kernel } => {
            let (r, c) = bundle.local_grid.expect("checked by predicted_count");
            let grid = Grid2D::from_vec(
                r,
                c,
                locals.into_iter().map(|t| t.embedding).collect(),
            )?;
            let pooled = match plan.patch_strategy {
                PatchStrategy::Pool { .. } => avg_pool_2d(&grid, kernel)?,
                _ => max_pool_2d(&grid, kernel)?,
            };
            let dims = (pooled.rows(), pooled.cols());
            let toks = pooled
                .enumerate()
                .map(|(row, col, emb)| Token {
                    kind: TokenKind::Local { row, col },
                    embedding: emb.clone(),
                })
                .collect();
            (toks, Some(dims))
        }
        PatchStrategy::PruneRandom { keep, seed } => {
            let mut rng = Rng::from_seed(seed);
            let chosen = rng.sample_indices(locals.len(), keep);
            let toks = chosen.into_iter().map(|i| locals[i].clone()).collect();
            (toks, None)
        }
        PatchStrategy::PruneTopKNorm { keep } => {
            let mut idx: Vec<usize> = (0..locals.len()).collect();
            idx.sort_by(|&a, &b| {
                locals[b]
                    .embedding
                    .norm()
                    .partial_cmp(&locals[a].embedding.norm())
                    .expect("finite norms")
                    .then(a.cmp(&b))
            });
            let mut chosen: Vec<usize> = idx.into_iter().take(keep).collect();
            chosen.sort_unstable(); // survivors stay in row-major order
            let toks = chosen.into_iter().map(|i| locals[i].clone()).collect();
            (toks, None)
        }
    };

    let mut tokens = global;
    tokens.extend(new_locals);
    tokens.extend(objects);
    debug_assert_eq!(tokens.len(), expected);
    Ok(TokenBundle {
        tokens,
        local_grid: new_grid,
        scaled: bundle.scaled,
        patch_stats: bundle.patch_stats,
    })
}

// ---------------------------------------------------------------------------
// Bundle file format.

const BUNDLE_MAGIC: &[u8; 4] = b"MGTB";
const BUNDLE_VERSION: u16 = 1;

pub fn write_bundle(bundle: &TokenBundle, path: &Path) -> Result<()> {
    let dim = bundle.dim().unwrap_or(0);
    let mut w = Writer::frame(BUNDLE_MAGIC, BUNDLE_VERSION);
    w.u32(dim as u32);
    w.u8(bundle.scaled as u8);
    match &bundle.patch_stats {
        Some(s) => {
            w.u8(1);
            w.f64(s.norm_mu);
            w.f64(s.norm_sigma);
            w.f64(s.entry_mu);
            w.f64(s.entry_sigma);
        }
        None => w.u8(0),
    }
    match bundle.local_grid {
        Some((r, c)) => {
            w.u8(1);
            w.u32(r as u32);
            w.u32(c as u32);
        }
        None => w.u8(0),
    }
    w.u32(bundle.tokens.len() as u32);
    for t in &bundle.tokens {
        match &t.kind {
            TokenKind::Global => w.u8(0),
            TokenKind::Local { row, col } => {
                w.u8(1);
                w.u32(*row as u32);
                w.u32(*col as u32);
            }
            TokenKind::Object { mask_id, confidence } => {
                w.u8(2);
                w.u32(*mask_id as u32);
                w.f64(*confidence);
            }
        }
        w.f64s(t.embedding.as_slice());
    }
    fs::write(path, w.finish())?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<TokenBundle> {
    let bytes = fs::read(path)?;
    let mut r = Reader::frame(&bytes, BUNDLE_MAGIC, BUNDLE_VERSION)?;
    let dim = r.u32()? as usize;
    if dim > 1 << 20 {
        return Err(Error::Corrupt(format!("unreasonable embedding dim {dim}")));
    }
    let scaled = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(Error::Corrupt(format!("scaled flag {v} not 0/1"))),
    };
    let patch_stats = match r.u8()? {
        0 => None,
        1 => {
            let s = PatchStats {
                norm_mu: r.f64()?,
                norm_sigma: r.f64()?,
                entry_mu: r.f64()?,
                entry_sigma: r.f64()?,
            };
            if !(s.norm_mu.is_finite()
                && s.norm_sigma.is_finite()
                && s.entry_mu.is_finite()
                && s.entry_sigma.is_finite())
            {
                return Err(Error::Corrupt("non-finite patch statistics".into()));
            }
            Some(s)
        }
        v => return Err(Error::Corrupt(format!("stats flag {v} not 0/1"))),
    };
    let local_grid = match r.u8()? {
        0 => None,
        1 => Some((r.u32()? as usize, r.u32()? as usize)),
        v => return Err(Error::Corrupt(format!("grid flag {v} not 0/1"))),
    };
    let n = r.count(1 + dim * 8)?;
    let mut tokens = Vec::with_capacity(n);
    // Phases enforce the canonical order: global? locals* objects*.
    let mut phase = 0u8;
    let mut last_conf = f64::INFINITY;
    for i in 0..n {
        let kind = match r.u8()? {
            0 => {
                if i != 0 {
                    return Err(Error::Corrupt("global token not first".into()));
                }
                TokenKind::Global
            }
            1 => {
                if phase > 1 {
                    return Err(Error::Corrupt("local token after object tokens".into()));
                }
                phase = 1;
                TokenKind::Local {
                    row: r.u32()? as usize,
                    col: r.u32()? as usize,
                }
            }
            2 => {
                phase = 2;
                let mask_id = r.u32()? as usize;
                let confidence = r.f64()?;
                if !confidence.is_finite() || confidence > last_conf {
                    return Err(Error::Corrupt(
                        "object confidences not in descending order".into(),
                    ));
                }
                last_conf = confidence;
                TokenKind::Object { mask_id, confidence }
            }
            v => return Err(Error::Corrupt(format!("unknown token kind {v}"))),
        };
        let embedding = Vector::checked(r.f64s(dim)?)
            .map_err(|_| Error::Corrupt("non-finite token embedding".into()))?;
        tokens.push(Token { kind, embedding });
    }
    r.finish()?;
    let bundle = TokenBundle {
        tokens,
        local_grid,
        scaled,
        patch_stats,
    };
    if let Some((gr, gc)) = bundle.local_grid {
        if bundle.locals().count() != gr * gc {
            return Err(Error::Corrupt(format!(
                "grid says {gr}x{gc} but {} local tokens stored",
                bundle.locals().count()
            )));
        }
    }
    Ok(bundle)
}
