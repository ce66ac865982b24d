//! Frozen vision encoder: a compact ViT that turns an RGB image into a CLS
//! token, a patch-token grid, and an aligned grid of key projections.
//!
//! The weights are seeded at construction and never change — training only
//! ever touches the projector and decoder. The key grid feeds `explain`,
//! which scores every patch against an arbitrary query embedding via scaled
//! dot products and a softmax; `explain_backward` is the matching
//! hand-written Jacobian-vector product, the differentiable core that mask
//! inversion optimizes through.

use crate::error::{Error, Result};
use crate::numerics::{gelu, sinusoid, Grid2D, Mat, Rng, Vector};
use crate::wire::fnv64_f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// The scale everything in this crate runs at by default: 64 px images,
    /// 8 px patches (an 8×8 patch grid), 32-dim embeddings.
    pub fn desk(seed: u64) -> EncoderConfig {
        EncoderConfig {
            image_side: 64,
            patch_size: 8,
            embed_dim: 32,
            layers: 2,
            heads: 4,
            seed,
        }
    }

    /// Patch-grid side length P.
    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} does not divide image side {}",
                self.patch_size, self.image_side
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim == 0 || self.layers == 0 {
            return Err(Error::Config("zero embed dim or layer count".into()));
        }
        Ok(())
    }
}

struct LayerNorm {
    gamma: Vector,
    beta: Vector,
}

impl LayerNorm {
    fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Vector::new(vec![1.0; dim]),
            beta: Vector::zeros(dim),
        }
    }

    fn apply(&self, x: &Vector) -> Vector {
        let n = x.dim() as f64;
        let mean = x.as_slice().iter().sum::<f64>() / n;
        let var = x.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        Vector::new(
            x.as_slice()
                .iter()
                .zip(self.gamma.as_slice())
                .zip(self.beta.as_slice())
                .map(|((v, g), b)| (v - mean) * inv * g + b)
                .collect(),
        )
    }
}

struct Attention {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
}

struct Mlp {
    w1: Mat,
    b1: Vector,
    w2: Mat,
    b2: Vector,
}

struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Frozen features of one image.
#[derive(Clone)]
pub struct ImageFeatureSet {
    pub cls: Vector,
    pub patches: Grid2D<Vector>,
    pub keys: Grid2D<Vector>,
    pub config: EncoderConfig,
}

/// Softmax relevance field over the patch grid for one query.
#[derive(Clone)]
pub struct ExplainabilityMap {
    pub weights: Grid2D<f64>,
    pub query: Vector,
}

pub struct Encoder {
    pub config: EncoderConfig,
    patch_embed: Mat,
    patch_bias: Vector,
    pos: Vec<Vector>,
    cls_embed: Vector,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    key_proj: Mat,
    key_bias: Vector,
}

fn linear(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    // Variance-preserving fan-in scaling keeps activations O(1) through the
    // frozen stack, which is what makes random features usable downstream.
    Mat::gaussian(rows, cols, 1.0 / (cols as f64).sqrt(), rng)
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Encoder> {
        config.validate()?;
        let d = config.embed_dim;
        let p = config.grid_side();
        let patch_in = config.patch_size * config.patch_size * 3;
        let mut rng = Rng::from_seed(config.seed).child(0xE0C0DE);

        let patch_embed = linear(d, patch_in, &mut rng);
        let patch_bias = Vector::zeros(d);
        // Fixed 2-D sinusoid: first half encodes x (column), second half y.
        let mut pos = Vec::with_capacity(p * p);
        for r in 0..p {
            for c in 0..p {
                let x = (c as f64 + 0.5) / p as f64;
                let y = (r as f64 + 0.5) / p as f64;
                let mut v = sinusoid(x, d / 2);
                v.extend(sinusoid(y, d - d / 2));
                pos.push(Vector::new(v).scaled(0.5));
            }
        }
        let cls_embed = Vector::new((0..d).map(|_| rng.normal() * 0.5).collect());
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(Block {
                ln1: LayerNorm::new(d),
                attn: Attention {
                    wq: linear(d, d, &mut rng),
                    wk: linear(d, d, &mut rng),
                    wv: linear(d, d, &mut rng),
                    wo: linear(d, d, &mut rng),
                },
                ln2: LayerNorm::new(d),
                mlp: Mlp {
                    w1: linear(4 * d, d, &mut rng),
                    b1: Vector::zeros(4 * d),
                    w2: linear(d, 4 * d, &mut rng),
                    b2: Vector::zeros(d),
                },
            });
        }
        let ln_f = LayerNorm::new(d);
        let key_proj = linear(d, d, &mut rng);
        let key_bias = Vector::zeros(d);
        Ok(Encoder {
            config,
            patch_embed,
            patch_bias,
            pos,
            cls_embed,
            blocks,
            ln_f,
            key_proj,
            key_bias,
        })
    }

    /// FNV-64 over every parameter in a fixed order. The frozen-encoder
    /// contract is asserted by taking this before and after a training run.
    pub fn weight_checksum(&self) -> u64 {
        let mut all: Vec<f64> = Vec::new();
        all.extend_from_slice(self.patch_embed.data());
        all.extend_from_slice(self.patch_bias.as_slice());
        for p in &self.pos {
            all.extend_from_slice(p.as_slice());
        }
        all.extend_from_slice(self.cls_embed.as_slice());
        for b in &self.blocks {
            for ln in [&b.ln1, &b.ln2] {
                all.extend_from_slice(ln.gamma.as_slice());
                all.extend_from_slice(ln.beta.as_slice());
            }
            for m in [&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo] {
                all.extend_from_slice(m.data());
            }
            all.extend_from_slice(b.mlp.w1.data());
            all.extend_from_slice(b.mlp.b1.as_slice());
            all.extend_from_slice(b.mlp.w2.data());
            all.extend_from_slice(b.mlp.b2.as_slice());
        }
        all.extend_from_slice(self.ln_f.gamma.as_slice());
        all.extend_from_slice(self.ln_f.beta.as_slice());
        all.extend_from_slice(self.key_proj.data());
        all.extend_from_slice(self.key_bias.as_slice());
        fnv64_f64(&all)
    }

    fn self_attention(&self, block: &Block, tokens: &[Vector]) -> Vec<Vector> {
        let d = self.config.embed_dim;
        let heads = self.config.heads;
        let hd = d / heads;
        let n = tokens.len();
        let normed: Vec<Vector> = tokens.iter().map(|t| block.ln1.apply(t)).collect();
        let qs: Vec<Vector> = normed.iter().map(|t| block.attn.wq.matvec(t)).collect();
        let ks: Vec<Vector> = normed.iter().map(|t| block.attn.wk.matvec(t)).collect();
        let vs: Vec<Vector> = normed.iter().map(|t| block.attn.wv.matvec(t)).collect();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut mixed = vec![0.0; d];
            for h in 0..heads {
                let lo = h * hd;
                let hi = lo + hd;
                let qi = &qs[i].as_slice()[lo..hi];
                // Softmax over all tokens (fully bidirectional).
                let mut logits = Vec::with_capacity(n);
                for k in ks.iter() {
                    let kj = &k.as_slice()[lo..hi];
                    logits.push(qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale);
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exp.iter().sum();
                for e in &mut exp {
                    *e /= z;
                }
                for (j, v) in vs.iter().enumerate() {
                    let vj = &v.as_slice()[lo..hi];
                    for (t, &vv) in vj.iter().enumerate() {
                        mixed[lo + t] += exp[j] * vv;
                    }
                }
            }
            let proj = block.attn.wo.matvec(&Vector::new(mixed));
            out.push(tokens[i].add(&proj));
        }
        out
    }

    fn mlp(&self, block: &Block, tokens: &[Vector]) -> Vec<Vector> {
        tokens
            .iter()
            .map(|t| {
                let normed = block.ln2.apply(t);
                let mut hidden = block.mlp.w1.matvec(&normed);
                hidden.axpy(1.0, &block.mlp.b1);
                let acted = Vector::new(hidden.as_slice().iter().map(|&v| gelu(v)).collect());
                let mut out = block.mlp.w2.matvec(&acted);
                out.axpy(1.0, &block.mlp.b2);
                t.add(&out)
            })
            .collect()
    }

    pub fn encode(&self, pixels: &Grid2D<[f64; 3]>) -> Result<ImageFeatureSet> {
        let side = self.config.image_side;
        if pixels.rows() != side || pixels.cols() != side {
            return Err(Error::Shape(format!(
                "image is {}x{}, encoder expects {side}x{side}",
                pixels.rows(),
                pixels.cols()
            )));
        }
        let ps = self.config.patch_size;
        let p = self.config.grid_side();
        // Tokens: CLS first, then patches row-major.
        let mut tokens = Vec::with_capacity(1 + p * p);
        tokens.push(self.cls_embed.clone());
        for pr in 0..p {
            for pc in 0..p {
                let mut flat = Vec::with_capacity(ps * ps * 3);
                for r in 0..ps {
                    for c in 0..ps {
                        let px = pixels[(pr * ps + r, pc * ps + c)];
                        flat.extend_from_slice(&px);
                    }
                }
                let mut emb = self.patch_embed.matvec(&Vector::new(flat));
                emb.axpy(1.0, &self.patch_bias);
                emb.axpy(1.0, &self.pos[pr * p + pc]);
                tokens.push(emb);
            }
        }
        for block in &self.blocks {
            tokens = self.self_attention(block, &tokens);
            tokens = self.mlp(block, &tokens);
        }
        let final_tokens: Vec<Vector> = tokens.iter().map(|t| self.ln_f.apply(t)).collect();
        let cls = final_tokens[0].clone();
        let patches = Grid2D::from_vec(p, p, final_tokens[1..].to_vec())?;
        let keys = patches.map(|t| {
            let mut k = self.key_proj.matvec(t);
            k.axpy(1.0, &self.key_bias);
            k
        });
        for t in final_tokens.iter() {
            if !t.is_finite() {
                return Err(Error::NonFinite("encoder produced non-finite token".into()));
            }
        }
        Ok(ImageFeatureSet {
            cls,
            patches,
            keys,
            config: self.config,
        })
    }
}

/// Softmax over scaled query–key dot products: the relevance of each patch
/// cell to the query. Differentiable in the query; see [`explain_backward`].
pub fn explain(features: &ImageFeatureSet, query: &Vector) -> Result<ExplainabilityMap> {
    let d = features.config.embed_dim;
    if query.dim() != d {
        return Err(Error::Shape(format!(
            "query dim {} vs embed dim {d}",
            query.dim()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = features.keys.iter().map(|k| query.dot(k) * scale).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    for v in &mut w {
        *v /= z;
    }
    let p = features.keys.rows();
    Ok(ExplainabilityMap {
        weights: Grid2D::from_vec(p, features.keys.cols(), w)?,
        query: query.clone(),
    })
}

/// Gradient of any scalar loss through the map back to the query.
///
/// With w = softmax(s), s_j = (q·k_j)/√d and upstream g_j = ∂L/∂w_j:
///   ∂L/∂s_j = w_j (g_j − Σ_t g_t w_t),  ∂L/∂q = (1/√d) Σ_j (∂L/∂s_j) k_j.
pub fn explain_backward(
    features: &ImageFeatureSet,
    query: &Vector,
    upstream: &Grid2D<f64>,
) -> Result<Vector> {
    let map = explain(features, query)?;
    if upstream.rows() != map.weights.rows() || upstream.cols() != map.weights.cols() {
        return Err(Error::Shape(format!(
            "upstream grad is {}x{}, map is {}x{}",
            upstream.rows(),
            upstream.cols(),
            map.weights.rows(),
            map.weights.cols()
        )));
    }
    let d = features.config.embed_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let dot_gw: f64 = upstream
        .iter()
        .zip(map.weights.iter())
        .map(|(g, w)| g * w)
        .sum();
    let mut grad = Vector::zeros(d);
    for ((g, w), k) in upstream
        .iter()
        .zip(map.weights.iter())
        .zip(features.keys.iter())
    {
        grad.axpy(scale * w * (g - dot_gw), k);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, rel_error};
    use crate::scene::{Color, ObjectSpec, SceneSpec, Shape};

    fn demo_features(seed: u64) -> ImageFeatureSet {
        let scene = SceneSpec {
            side: 64,
            objects: vec![
                ObjectSpec {
                    shape: Shape::Square,
                    color: Color::Red,
                    cx: 18.0,
                    cy: 18.0,
                    size: 14.0,
                },
                ObjectSpec {
                    shape: Shape::Circle,
                    color: Color::Blue,
                    cx: 44.0,
                    cy: 44.0,
                    size: 16.0,
                },
            ],
        }
        .render();
        let enc = Encoder::new(EncoderConfig::desk(seed)).unwrap();
        enc.encode(&scene.pixels).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(Encoder::new(EncoderConfig {
            image_side: 64,
            patch_size: 7,
            ..EncoderConfig::desk(1)
        })
        .is_err());
        assert!(Encoder::new(EncoderConfig {
            heads: 5,
            ..EncoderConfig::desk(1)
        })
        .is_err());
    }

    #[test]
    fn desk_scale_shapes() {
        let f = demo_features(1);
        assert_eq!(f.patches.rows(), 8);
        assert_eq!(f.patches.cols(), 8);
        assert_eq!(f.cls.dim(), 32);
        assert_eq!(f.keys.len(), 64);
    }

    #[test]
    fn paper_scale_grid_is_576_patches() {
        let cfg = EncoderConfig {
            image_side: 48,
            patch_size: 2,
            embed_dim: 16,
            layers: 1,
            heads: 2,
            seed: 2,
        };
        assert_eq!(cfg.grid_side(), 24);
        let enc = Encoder::new(cfg).unwrap();
        let img = Grid2D::fill(48, 48, [0.5, 0.25, 0.75]);
        let f = enc.encode(&img).unwrap();
        assert_eq!(f.patches.len(), 576);
    }

    #[test]
    fn encode_is_deterministic_bitwise() {
        let a = demo_features(7);
        let b = demo_features(7);
        assert_eq!(
            a.cls.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.cls.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        for (x, y) in a.patches.iter().zip(b.patches.iter()) {
            assert!(x
                .as_slice()
                .iter()
                .zip(y.as_slice())
                .all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        let c = demo_features(8);
        assert!(a.cls.as_slice() != c.cls.as_slice(), "seed ignored");
    }

    #[test]
    fn wrong_image_side_is_shape_error() {
        let enc = Encoder::new(EncoderConfig::desk(1)).unwrap();
        let img = Grid2D::fill(32, 32, [0.0, 0.0, 0.0]);
        assert!(enc.encode(&img).is_err());
    }

    #[test]
    fn checksum_stable_and_seed_sensitive() {
        let a = Encoder::new(EncoderConfig::desk(3)).unwrap();
        let b = Encoder::new(EncoderConfig::desk(3)).unwrap();
        let c = Encoder::new(EncoderConfig::desk(4)).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
        assert_ne!(a.weight_checksum(), c.weight_checksum());
    }

    #[test]
    fn map_sums_to_one_and_is_nonnegative() {
        let f = demo_features(5);
        let mut rng = Rng::from_seed(50);
        for _ in 0..20 {
            let q = Vector::new((0..32).map(|_| rng.normal() * 3.0).collect());
            let map = explain(&f, &q).unwrap();
            let sum: f64 = map.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(map.weights.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn zero_query_gives_uniform_map() {
        let f = demo_features(5);
        let map = explain(&f, &Vector::zeros(32)).unwrap();
        for &w in map.weights.iter() {
            assert!((w - 1.0 / 64.0).abs() < 1e-12);
        }
    }

    #[test]
    fn query_orthogonal_to_all_keys_gives_uniform_map() {
        // Small config: 4 keys in an 8-dim space leave room for a vector
        // orthogonal to all of them (Gram-Schmidt the key span away).
        let cfg = EncoderConfig {
            image_side: 16,
            patch_size: 8,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            seed: 11,
        };
        let enc = Encoder::new(cfg).unwrap();
        let img = Grid2D::from_fn(16, 16, |r, c| {
            [r as f64 / 16.0, c as f64 / 16.0, ((r + c) % 2) as f64]
        });
        let f = enc.encode(&img).unwrap();
        // Orthonormalize the key span, then project the probe against the
        // basis (twice, for numerical hygiene).
        let mut basis: Vec<Vector> = Vec::new();
        for k in f.keys.iter() {
            let mut v = k.clone();
            for b in &basis {
                let c = v.dot(b);
                v.axpy(-c, b);
            }
            if v.norm() > 1e-10 {
                let n = v.norm();
                basis.push(v.scaled(1.0 / n));
            }
        }
        let mut rng = Rng::from_seed(12);
        let mut q = Vector::new((0..8).map(|_| rng.normal()).collect());
        for _ in 0..2 {
            for b in &basis {
                let c = q.dot(b);
                q.axpy(-c, b);
            }
        }
        for k in f.keys.iter() {
            assert!(q.dot(k).abs() < 1e-9, "projection failed");
        }
        assert!(q.norm() > 1e-6, "keys span the whole space for this seed");
        let map = explain(&f, &q).unwrap();
        for &w in map.weights.iter() {
            assert!((w - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn scaled_key_query_concentrates_on_its_patch() {
        // Keys built directly (random directions are well separated in
        // 32-dim space), so a query aligned with one key and scaled hard
        // must put essentially all mass on that key's cell.
        let mut rng = Rng::from_seed(6);
        let keys = Grid2D::from_fn(8, 8, |_, _| {
            Vector::new((0..32).map(|_| rng.normal()).collect())
        });
        let f = ImageFeatureSet {
            cls: Vector::zeros(32),
            patches: keys.clone(),
            keys,
            config: EncoderConfig::desk(6),
        };
        let target = 27usize; // arbitrary fixed cell
        let k = f.keys.as_slice()[target].clone();
        let q = k.scaled(400.0 / k.dot(&k));
        let map = explain(&f, &q).unwrap();
        let w = map.weights.as_slice();
        assert!(
            w[target] > 0.999,
            "weight on its own patch only {}",
            w[target]
        );
    }

    #[test]
    fn sharpening_never_lowers_the_max_weight() {
        let f = demo_features(9);
        let mut rng = Rng::from_seed(90);
        for _ in 0..30 {
            let q = Vector::new((0..32).map(|_| rng.normal() * 2.0).collect());
            let m1 = explain(&f, &q).unwrap();
            let m2 = explain(&f, &q.scaled(2.0)).unwrap();
            let max1 = m1.weights.iter().cloned().fold(0.0f64, f64::max);
            let max2 = m2.weights.iter().cloned().fold(0.0f64, f64::max);
            assert!(max2 >= max1 - 1e-12, "sharpening lowered max: {max1} -> {max2}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let f = demo_features(5);
        let q = Vector::new((0..32).map(|i| (i as f64).sin()).collect());
        let g = explain_backward(&f, &q, &Grid2D::fill(8, 8, 0.0)).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let f = demo_features(13);
        let mut rng = Rng::from_seed(130);
        for case in 0..20 {
            let q = Vector::new((0..32).map(|_| rng.normal()).collect());
            let coef: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
            let upstream = Grid2D::from_vec(8, 8, coef.clone()).unwrap();
            let analytic = explain_backward(&f, &q, &upstream).unwrap();
            let mut loss = |x: &Vector| {
                let m = explain(&f, x).unwrap();
                m.weights.iter().zip(&coef).map(|(w, c)| w * c).sum()
            };
            let fd = finite_diff_grad(&mut loss, &q, 1e-5).unwrap();
            let err = rel_error(analytic.as_slice(), fd.as_slice());
            assert!(err < 1e-4, "case {case}: rel err {err}");
        }
    }
}
