//! A small autoregressive transformer decoder over a mixed sequence: a
//! visual-token prefix followed by text tokens.
//!
//! Attention uses a prefix mask: text positions are causal, but every pair of
//! visual positions attends bidirectionally. Visual tokens carry no sequence
//! positional encoding (their content already encodes identity and, where it
//! matters, spatial position), so the model is order-invariant over the
//! prefix. Text positions get a sinusoidal encoding indexed from the first
//! text token, which keeps text embeddings independent of how many visual
//! tokens precede them — prefixes of different sizes stay comparable.

use crate::error::{Error, Result};
use crate::numerics::{gelu, gelu_prime, sinusoid, Rng, Vector};
use crate::vlm::flat::{cross_entropy, matvec, outer_acc, t_matvec_acc};
use crate::wire::fnv64_f64;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub seed: u64,
}

impl DecoderConfig {
    /// The scale used throughout the experiment harness.
    pub fn desk(vocab: usize, seed: u64) -> DecoderConfig {
        DecoderConfig {
            vocab,
            model_dim: 64,
            layers: 2,
            heads: 4,
            context: 256,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0
            || self.model_dim == 0
            || self.layers == 0
            || self.heads == 0
            || self.context == 0
        {
            return Err(Error::Config(
                "decoder dimensions must all be nonzero".into(),
            ));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// One contiguous range of the flat parameter buffer.
#[derive(Clone, Copy, Debug)]
struct Seg {
    off: usize,
    len: usize,
}

fn take(off: &mut usize, len: usize) -> Seg {
    let s = Seg { off: *off, len };
    *off += len;
    s
}

#[derive(Clone, Debug)]
struct BlockSegs {
    ln1_g: Seg,
    ln1_b: Seg,
    wq: Seg,
    bq: Seg,
    wk: Seg,
    bk: Seg,
    wv: Seg,
    bv: Seg,
    wo: Seg,
    bo: Seg,
    ln2_g: Seg,
    ln2_b: Seg,
    w1: Seg,
    b1: Seg,
    w2: Seg,
    b2: Seg,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_embed: Seg,
    blocks: Vec<BlockSegs>,
    ln_f_g: Seg,
    ln_f_b: Seg,
    unembed: Seg,
    total: usize,
}

impl Layout {
    fn new(cfg: &DecoderConfig) -> Layout {
        let d = cfg.model_dim;
        let f = 4 * d;
        let v = cfg.vocab;
        let mut off = 0usize;
        let tok_embed = take(&mut off, v * d);
        let blocks = (0..cfg.layers)
            .map(|_| BlockSegs {
                ln1_g: take(&mut off, d),
                ln1_b: take(&mut off, d),
                wq: take(&mut off, d * d),
                bq: take(&mut off, d),
                wk: take(&mut off, d * d),
                bk: take(&mut off, d),
                wv: take(&mut off, d * d),
                bv: take(&mut off, d),
                wo: take(&mut off, d * d),
                bo: take(&mut off, d),
                ln2_g: take(&mut off, d),
                ln2_b: take(&mut off, d),
                w1: take(&mut off, f * d),
                b1: take(&mut off, f),
                w2: take(&mut off, d * f),
                b2: take(&mut off, d),
            })
            .collect();
        let ln_f_g = take(&mut off, d);
        let ln_f_b = take(&mut off, d);
        let unembed = take(&mut off, v * d);
        Layout {
            tok_embed,
            blocks,
            ln_f_g,
            ln_f_b,
            unembed,
            total: off,
        }
    }
}

#[derive(Clone)]
pub struct ToyDecoder {
    config: DecoderConfig,
    layout: Layout,
    params: Vec<f64>,
}

struct LnCache {
    xhat: Vec<f64>,
    inv: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    h: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    w: Vec<f64>, // heads × n × n attention weights, masked entries zero
    concat: Vec<f64>,
    ln2: LnCache,
    h2: Vec<f64>,
    m1: Vec<f64>,
    act: Vec<f64>,
}

struct Cache {
    n: usize,
    n_vis: usize,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    y: Vec<f64>,
}

fn allowed(i: usize, j: usize, n_vis: usize) -> bool {
    j <= i || (i < n_vis && j < n_vis)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn ln_forward(x: &[f64], n: usize, d: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LnCache) {
    let mut out = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv[i] = s;
        for k in 0..d {
            let xh = (row[k] - mu) * s;
            xhat[i * d + k] = xh;
            out[i * d + k] = gamma[k] * xh + beta[k];
        }
    }
    (out, LnCache { xhat, inv })
}

/// Accumulates parameter gradients into `grad` (at `g_seg`/`b_seg`) and input
/// gradients into `d_x` (caller pre-seeds `d_x` with any residual-path term).
#[allow(clippy::too_many_arguments)]
fn ln_backward(
    d_out: &[f64],
    cache: &LnCache,
    n: usize,
    d: usize,
    gamma: &[f64],
    grad: &mut [f64],
    g_seg: Seg,
    b_seg: Seg,
    d_x: &mut [f64],
) {
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dout = &d_out[i * d..(i + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for k in 0..d {
            grad[g_seg.off + k] += dout[k] * xh[k];
            grad[b_seg.off + k] += dout[k];
            let dxh = dout[k] * gamma[k];
            dxhat[k] = dxh;
            m1 += dxh;
            m2 += dxh * xh[k];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let s = cache.inv[i];
        for k in 0..d {
            d_x[i * d + k] += s * (dxhat[k] - m1 - xh[k] * m2);
        }
    }
}

fn seg_mut(buf: &mut [f64], s: Seg) -> &mut [f64] {
    &mut buf[s.off..s.off + s.len]
}

impl ToyDecoder {
    pub fn new(config: DecoderConfig) -> Result<ToyDecoder> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = Rng::from_seed(config.seed).child(0xDEC0DE);
        let mut params = vec![0.0; layout.total];
        let d = config.model_dim;
        let f = 4 * d;
        let se = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        let fill_normal = |params: &mut Vec<f64>, s: Seg, std: f64, rng: &mut Rng| {
            for t in s.off..s.off + s.len {
                params[t] = rng.normal() * std;
            }
        };
        let fill_one = |params: &mut Vec<f64>, s: Seg| {
            for t in s.off..s.off + s.len {
                params[t] = 1.0;
            }
        };
        fill_normal(&mut params, layout.tok_embed, se, &mut rng);
        for bs in &layout.blocks {
            fill_one(&mut params, bs.ln1_g);
            fill_normal(&mut params, bs.wq, se, &mut rng);
            fill_normal(&mut params, bs.wk, se, &mut rng);
            fill_normal(&mut params, bs.wv, se, &mut rng);
            fill_normal(&mut params, bs.wo, se, &mut rng);
            fill_one(&mut params, bs.ln2_g);
            fill_normal(&mut params, bs.w1, se, &mut rng);
            fill_normal(&mut params, bs.w2, sf, &mut rng);
        }
        fill_one(&mut params, layout.ln_f_g);
        fill_normal(&mut params, layout.unembed, se, &mut rng);
        Ok(ToyDecoder {
            config,
            layout,
            params,
        })
    }

    /// Rebuild a decoder from a saved parameter buffer.
    pub fn from_params(config: DecoderConfig, params: Vec<f64>) -> Result<ToyDecoder> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "decoder parameter buffer holds {} values but the layout needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(ToyDecoder {
            config,
            layout,
            params,
        })
    }

    pub fn expected_param_count(config: &DecoderConfig) -> usize {
        Layout::new(config).total
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn checksum(&self) -> u64 {
        fnv64_f64(&self.params)
    }

    fn seg(&self, s: Seg) -> &[f64] {
        &self.params[s.off..s.off + s.len]
    }

    fn run(&self, visual: &[Vector], text: &[u32]) -> Result<Cache> {
        let cfg = &self.config;
        let d = cfg.model_dim;
        let n_vis = visual.len();
        let n = n_vis + text.len();
        if n == 0 {
            return Err(Error::Shape("decoder got an empty sequence".into()));
        }
        if n > cfg.context {
            return Err(Error::Config(format!(
                "sequence length {n} exceeds the decoder context {}",
                cfg.context
            )));
        }
        for (i, v) in visual.iter().enumerate() {
            if v.dim() != d {
                return Err(Error::Shape(format!(
                    "visual token {i} has dim {} but the decoder expects {d}",
                    v.dim()
                )));
            }
        }
        for &t in text {
            if t as usize >= cfg.vocab {
                return Err(Error::Config(format!(
                    "token id {t} is outside the vocabulary (size {})",
                    cfg.vocab
                )));
            }
        }
        let heads = cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let f = 4 * d;

        let mut x = vec![0.0; n * d];
        for (i, v) in visual.iter().enumerate() {
            x[i * d..(i + 1) * d].copy_from_slice(v.as_slice());
        }
        let te = self.seg(self.layout.tok_embed);
        for (j, &t) in text.iter().enumerate() {
            let row = &te[t as usize * d..(t as usize + 1) * d];
            let pe = sinusoid(j as f64, d);
            let dst = &mut x[(n_vis + j) * d..(n_vis + j + 1) * d];
            for (k, slot) in dst.iter_mut().enumerate() {
                *slot = row[k] + pe[k];
            }
        }

        let mut blocks = Vec::with_capacity(cfg.layers);
        let mut srow = vec![f64::NEG_INFINITY; n];
        for bs in &self.layout.blocks {
            let (h, ln1) = ln_forward(&x, n, d, self.seg(bs.ln1_g), self.seg(bs.ln1_b));
            let mut q = vec![0.0; n * d];
            let mut k = vec![0.0; n * d];
            let mut v = vec![0.0; n * d];
            for i in 0..n {
                let hi = &h[i * d..(i + 1) * d];
                matvec(self.seg(bs.wq), d, d, hi, &mut q[i * d..(i + 1) * d]);
                matvec(self.seg(bs.wk), d, d, hi, &mut k[i * d..(i + 1) * d]);
                matvec(self.seg(bs.wv), d, d, hi, &mut v[i * d..(i + 1) * d]);
                let (bq, bk, bv) = (self.seg(bs.bq), self.seg(bs.bk), self.seg(bs.bv));
                for t in 0..d {
                    q[i * d + t] += bq[t];
                    k[i * d + t] += bk[t];
                    v[i * d + t] += bv[t];
                }
            }
            let mut w = vec![0.0; heads * n * n];
            let mut concat = vec![0.0; n * d];
            for a in 0..heads {
                let col = a * dh;
                for i in 0..n {
                    let qi = &q[i * d + col..i * d + col + dh];
                    srow.iter_mut().for_each(|s| *s = f64::NEG_INFINITY);
                    let mut smax = f64::NEG_INFINITY;
                    for j in 0..n {
                        if !allowed(i, j, n_vis) {
                            continue;
                        }
                        let s = scale * dot(qi, &k[j * d + col..j * d + col + dh]);
                        srow[j] = s;
                        if s > smax {
                            smax = s;
                        }
                    }
                    let wrow = &mut w[a * n * n + i * n..a * n * n + (i + 1) * n];
                    let mut z = 0.0;
                    for j in 0..n {
                        if srow[j] > f64::NEG_INFINITY {
                            let e = (srow[j] - smax).exp();
                            wrow[j] = e;
                            z += e;
                        }
                    }
                    for ww in wrow.iter_mut() {
                        *ww /= z;
                    }
                    for j in 0..n {
                        let wij = wrow[j];
                        if wij == 0.0 {
                            continue;
                        }
                        let vj = &v[j * d + col..j * d + col + dh];
                        for t in 0..dh {
                            concat[i * d + col + t] += wij * vj[t];
                        }
                    }
                }
            }
            let mut x_attn = x.clone();
            for i in 0..n {
                let mut attn = vec![0.0; d];
                matvec(self.seg(bs.wo), d, d, &concat[i * d..(i + 1) * d], &mut attn);
                let bo = self.seg(bs.bo);
                for t in 0..d {
                    x_attn[i * d + t] += attn[t] + bo[t];
                }
            }
            let (h2, ln2) = ln_forward(&x_attn, n, d, self.seg(bs.ln2_g), self.seg(bs.ln2_b));
            let mut m1 = vec![0.0; n * f];
            let mut act = vec![0.0; n * f];
            let mut x_out = x_attn;
            for i in 0..n {
                matvec(
                    self.seg(bs.w1),
                    f,
                    d,
                    &h2[i * d..(i + 1) * d],
                    &mut m1[i * f..(i + 1) * f],
                );
                let b1 = self.seg(bs.b1);
                for t in 0..f {
                    m1[i * f + t] += b1[t];
                    act[i * f + t] = gelu(m1[i * f + t]);
                }
                let mut m2 = vec![0.0; d];
                matvec(self.seg(bs.w2), d, f, &act[i * f..(i + 1) * f], &mut m2);
                let b2 = self.seg(bs.b2);
                for t in 0..d {
                    x_out[i * d + t] += m2[t] + b2[t];
                }
            }
            blocks.push(BlockCache {
                ln1,
                h,
                q,
                k,
                v,
                w,
                concat,
                ln2,
                h2,
                m1,
                act,
            });
            x = x_out;
        }
        let (y, ln_f) = ln_forward(
            &x,
            n,
            d,
            self.seg(self.layout.ln_f_g),
            self.seg(self.layout.ln_f_b),
        );
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder activations".into()));
        }
        Ok(Cache {
            n,
            n_vis,
            blocks,
            ln_f,
            y,
        })
    }

    fn check_loss_inputs(&self, prompt: &[u32], target: &[u32]) -> Result<()> {
        if prompt.is_empty() {
            return Err(Error::Config("prompt must be nonempty".into()));
        }
        if target.is_empty() {
            return Err(Error::Config("target must be nonempty".into()));
        }
        Ok(())
    }

    /// Mean cross-entropy over the target tokens, each predicted from the
    /// position immediately before it in [visual | prompt | target].
    pub fn forward_loss(&self, visual: &[Vector], prompt: &[u32], target: &[u32]) -> Result<f64> {
        self.check_loss_inputs(prompt, target)?;
        let text: Vec<u32> = prompt.iter().chain(target.iter()).copied().collect();
        let cache = self.run(visual, &text)?;
        let d = self.config.model_dim;
        let vocab = self.config.vocab;
        let mut logits = vec![0.0; vocab];
        let mut scratch = vec![0.0; vocab];
        let mut loss = 0.0;
        for (kk, &tgt) in target.iter().enumerate() {
            let pos = visual.len() + prompt.len() + kk - 1;
            matvec(
                self.seg(self.layout.unembed),
                vocab,
                d,
                &cache.y[pos * d..(pos + 1) * d],
                &mut logits,
            );
            loss += cross_entropy(&logits, tgt as usize, &mut scratch);
        }
        loss /= target.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("decoder loss".into()));
        }
        Ok(loss)
    }

    /// Loss plus gradients: (loss, d/d(params) flat buffer, d/d(visual tokens)).
    pub fn backward(
        &self,
        visual: &[Vector],
        prompt: &[u32],
        target: &[u32],
    ) -> Result<(f64, Vec<f64>, Vec<Vector>)> {
        self.check_loss_inputs(prompt, target)?;
        let text: Vec<u32> = prompt.iter().chain(target.iter()).copied().collect();
        let cache = self.run(visual, &text)?;
        let d = self.config.model_dim;
        let f = 4 * d;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = cache.n;
        let n_vis = cache.n_vis;
        let vocab = self.config.vocab;
        let mcount = target.len() as f64;

        let mut grad = vec![0.0; self.layout.total];
        let mut d_y = vec![0.0; n * d];
        let mut logits = vec![0.0; vocab];
        let mut d_logits = vec![0.0; vocab];
        let mut loss = 0.0;
        for (kk, &tgt) in target.iter().enumerate() {
            let pos = n_vis + prompt.len() + kk - 1;
            let yp = &cache.y[pos * d..(pos + 1) * d];
            matvec(self.seg(self.layout.unembed), vocab, d, yp, &mut logits);
            loss += cross_entropy(&logits, tgt as usize, &mut d_logits);
            for g in d_logits.iter_mut() {
                *g /= mcount;
            }
            outer_acc(
                seg_mut(&mut grad, self.layout.unembed),
                vocab,
                d,
                &d_logits,
                yp,
            );
            t_matvec_acc(
                self.seg(self.layout.unembed),
                vocab,
                d,
                &d_logits,
                &mut d_y[pos * d..(pos + 1) * d],
            );
        }
        loss /= mcount;
        if !loss.is_finite() {
            return Err(Error::NonFinite("decoder loss".into()));
        }

        let mut dx = vec![0.0; n * d];
        ln_backward(
            &d_y,
            &cache.ln_f,
            n,
            d,
            self.seg(self.layout.ln_f_g),
            &mut grad,
            self.layout.ln_f_g,
            self.layout.ln_f_b,
            &mut dx,
        );

        let mut dwrow = vec![0.0; n];
        for (bi, bs) in self.layout.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[bi];

            // Feed-forward branch; dx is the gradient at this block's output.
            let mut d_act = vec![0.0; n * f];
            for i in 0..n {
                let dm2 = &dx[i * d..(i + 1) * d];
                outer_acc(
                    seg_mut(&mut grad, bs.w2),
                    d,
                    f,
                    dm2,
                    &bc.act[i * f..(i + 1) * f],
                );
                for (gb, dv) in seg_mut(&mut grad, bs.b2).iter_mut().zip(dm2) {
                    *gb += dv;
                }
                t_matvec_acc(self.seg(bs.w2), d, f, dm2, &mut d_act[i * f..(i + 1) * f]);
            }
            let mut d_m1 = d_act;
            for (t, dm) in d_m1.iter_mut().enumerate() {
                *dm *= gelu_prime(bc.m1[t]);
            }
            let mut d_h2 = vec![0.0; n * d];
            for i in 0..n {
                let dm1 = &d_m1[i * f..(i + 1) * f];
                outer_acc(
                    seg_mut(&mut grad, bs.w1),
                    f,
                    d,
                    dm1,
                    &bc.h2[i * d..(i + 1) * d],
                );
                for (gb, dv) in seg_mut(&mut grad, bs.b1).iter_mut().zip(dm1) {
                    *gb += dv;
                }
                t_matvec_acc(self.seg(bs.w1), f, d, dm1, &mut d_h2[i * d..(i + 1) * d]);
            }
            let mut d_x_attn = dx.clone();
            ln_backward(
                &d_h2,
                &bc.ln2,
                n,
                d,
                self.seg(bs.ln2_g),
                &mut grad,
                bs.ln2_g,
                bs.ln2_b,
                &mut d_x_attn,
            );

            // Attention branch; d_x_attn is the gradient at the attention
            // residual output.
            let mut d_concat = vec![0.0; n * d];
            for i in 0..n {
                let da = &d_x_attn[i * d..(i + 1) * d];
                outer_acc(
                    seg_mut(&mut grad, bs.wo),
                    d,
                    d,
                    da,
                    &bc.concat[i * d..(i + 1) * d],
                );
                for (gb, dv) in seg_mut(&mut grad, bs.bo).iter_mut().zip(da) {
                    *gb += dv;
                }
                t_matvec_acc(self.seg(bs.wo), d, d, da, &mut d_concat[i * d..(i + 1) * d]);
            }

            let mut d_q = vec![0.0; n * d];
            let mut d_k = vec![0.0; n * d];
            let mut d_v = vec![0.0; n * d];
            for a in 0..heads {
                let col = a * dh;
                for i in 0..n {
                    let dout = &d_concat[i * d + col..i * d + col + dh];
                    let wrow = &bc.w[a * n * n + i * n..a * n * n + (i + 1) * n];
                    let mut sumk = 0.0;
                    for j in 0..n {
                        if !allowed(i, j, n_vis) {
                            dwrow[j] = 0.0;
                            continue;
                        }
                        let vj = &bc.v[j * d + col..j * d + col + dh];
                        let dwij = dot(dout, vj);
                        dwrow[j] = dwij;
                        sumk += wrow[j] * dwij;
                        for t in 0..dh {
                            d_v[j * d + col + t] += wrow[j] * dout[t];
                        }
                    }
                    for j in 0..n {
                        if !allowed(i, j, n_vis) {
                            continue;
                        }
                        let ds = wrow[j] * (dwrow[j] - sumk) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for t in 0..dh {
                            d_q[i * d + col + t] += ds * bc.k[j * d + col + t];
                            d_k[j * d + col + t] += ds * bc.q[i * d + col + t];
                        }
                    }
                }
            }

            let mut d_h = vec![0.0; n * d];
            for i in 0..n {
                let dqi = &d_q[i * d..(i + 1) * d];
                let dki = &d_k[i * d..(i + 1) * d];
                let dvi = &d_v[i * d..(i + 1) * d];
                let hi = &bc.h[i * d..(i + 1) * d];
                outer_acc(seg_mut(&mut grad, bs.wq), d, d, dqi, hi);
                outer_acc(seg_mut(&mut grad, bs.wk), d, d, dki, hi);
                outer_acc(seg_mut(&mut grad, bs.wv), d, d, dvi, hi);
                for t in 0..d {
                    grad[bs.bq.off + t] += dqi[t];
                    grad[bs.bk.off + t] += dki[t];
                    grad[bs.bv.off + t] += dvi[t];
                }
                let dhi = &mut d_h[i * d..(i + 1) * d];
                t_matvec_acc(self.seg(bs.wq), d, d, dqi, dhi);
                t_matvec_acc(self.seg(bs.wk), d, d, dki, dhi);
                t_matvec_acc(self.seg(bs.wv), d, d, dvi, dhi);
            }

            let mut d_x_in = d_x_attn;
            ln_backward(
                &d_h,
                &bc.ln1,
                n,
                d,
                self.seg(bs.ln1_g),
                &mut grad,
                bs.ln1_g,
                bs.ln1_b,
                &mut d_x_in,
            );
            dx = d_x_in;
        }

        let mut visual_grads = Vec::with_capacity(n_vis);
        for i in 0..n_vis {
            visual_grads.push(Vector::new(dx[i * d..(i + 1) * d].to_vec()));
        }
        for (j, &t) in text.iter().enumerate() {
            let src = (n_vis + j) * d;
            let dst = self.layout.tok_embed.off + t as usize * d;
            for k in 0..d {
                grad[dst + k] += dx[src + k];
            }
        }
        Ok((loss, grad, visual_grads))
    }

    fn next_logits(&self, visual: &[Vector], text: &[u32]) -> Result<Vec<f64>> {
        let cache = self.run(visual, text)?;
        let d = self.config.model_dim;
        let pos = cache.n - 1;
        let mut logits = vec![0.0; self.config.vocab];
        matvec(
            self.seg(self.layout.unembed),
            self.config.vocab,
            d,
            &cache.y[pos * d..(pos + 1) * d],
            &mut logits,
        );
        Ok(logits)
    }

    /// Greedy decoding. Returns the generated ids, excluding `stop` if hit.
    /// Ties resolve to the lowest token id, so generation is deterministic.
    pub fn generate(
        &self,
        visual: &[Vector],
        prompt: &[u32],
        max_len: usize,
        stop: Option<u32>,
    ) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Config("generation prompt must be nonempty".into()));
        }
        if visual.len() + prompt.len() + max_len > self.config.context {
            return Err(Error::Config(format!(
                "prompt plus {max_len} generated tokens would exceed context {}",
                self.config.context
            )));
        }
        let mut text = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_len {
            let logits = self.next_logits(visual, &text)?;
            let mut best = 0usize;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            let tok = best as u32;
            if stop == Some(tok) {
                break;
            }
            out.push(tok);
            text.push(tok);
        }
        Ok(out)
    }

    /// Pick the highest-logit token among `allowed` for the next position.
    /// Ties resolve to the earliest candidate in the list.
    pub fn next_token_constrained(
        &self,
        visual: &[Vector],
        prompt: &[u32],
        allowed: &[u32],
    ) -> Result<u32> {
        if prompt.is_empty() {
            return Err(Error::Config("generation prompt must be nonempty".into()));
        }
        if allowed.is_empty() {
            return Err(Error::Config(
                "constrained decoding needs a nonempty candidate set".into(),
            ));
        }
        for &t in allowed {
            if t as usize >= self.config.vocab {
                return Err(Error::Config(format!(
                    "candidate id {t} is outside the vocabulary (size {})",
                    self.config.vocab
                )));
            }
        }
        let logits = self.next_logits(visual, prompt)?;
        let mut best = allowed[0];
        let mut best_l = logits[allowed[0] as usize];
        for &t in &allowed[1..] {
            if logits[t as usize] > best_l {
                best_l = logits[t as usize];
                best = t;
            }
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, rel_error};

    fn mini() -> DecoderConfig {
        DecoderConfig {
            vocab: 9,
            model_dim: 8,
            layers: 1,
            heads: 2,
            context: 32,
            seed: 7,
        }
    }

    fn rand_visual(count: usize, dim: usize, rng: &mut Rng) -> Vec<Vector> {
        (0..count)
            .map(|_| Vector::new((0..dim).map(|_| rng.normal()).collect()))
            .collect()
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = mini();
        c.model_dim = 10; // not divisible by heads = 2? 10 % 2 == 0, use heads 3
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut z = mini();
        z.layers = 0;
        assert!(z.validate().is_err());
    }

    #[test]
    fn zero_parameters_give_uniform_loss() {
        let mut dec = ToyDecoder::new(mini()).unwrap();
        dec.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let mut rng = Rng::from_seed(1);
        let visual = rand_visual(3, 8, &mut rng);
        let loss = dec.forward_loss(&visual, &[1, 2], &[3, 4]).unwrap();
        assert!(
            (loss - (9.0f64).ln()).abs() < 1e-12,
            "loss {loss} vs ln(9) {}",
            (9.0f64).ln()
        );
    }

    #[test]
    fn construction_is_deterministic() {
        let a = ToyDecoder::new(mini()).unwrap();
        let b = ToyDecoder::new(mini()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let mut other = mini();
        other.seed = 8;
        let c = ToyDecoder::new(other).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn attention_mask_shape() {
        let dec = ToyDecoder::new(mini()).unwrap();
        let mut rng = Rng::from_seed(2);
        let visual = rand_visual(3, 8, &mut rng);
        let cache = dec.run(&visual, &[1, 2, 3]).unwrap();
        let n = cache.n;
        let n_vis = cache.n_vis;
        assert_eq!(n, 6);
        for a in 0..2 {
            for i in 0..n {
                for j in 0..n {
                    let w = cache.blocks[0].w[a * n * n + i * n + j];
                    if allowed(i, j, n_vis) {
                        assert!(w > 0.0, "head {a} weight ({i},{j}) should be attended");
                    } else {
                        assert_eq!(w, 0.0, "head {a} weight ({i},{j}) should be masked");
                    }
                }
            }
        }
        // Spot checks: visual prefix is bidirectional, text is causal.
        assert!(allowed(0, 2, 3), "visual 0 must see visual 2");
        assert!(!allowed(3, 4, 3), "text at 3 must not see text at 4");
        // Rows sum to one over the attended set.
        for a in 0..2 {
            for i in 0..n {
                let sum: f64 = cache.blocks[0].w[a * n * n + i * n..a * n * n + (i + 1) * n]
                    .iter()
                    .sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn future_text_does_not_change_past_logits() {
        let dec = ToyDecoder::new(mini()).unwrap();
        let mut rng = Rng::from_seed(3);
        let visual = rand_visual(2, 8, &mut rng);
        let a = dec.run(&visual, &[1, 2, 3]).unwrap();
        let b = dec.run(&visual, &[1, 7, 8]).unwrap();
        // Position of the shared first text token: index n_vis.
        let d = 8;
        let pos = 2;
        assert_eq!(
            &a.y[pos * d..(pos + 1) * d],
            &b.y[pos * d..(pos + 1) * d],
            "representation of a token must not depend on later tokens"
        );
    }

    #[test]
    fn visual_order_does_not_matter() {
        let cfg = DecoderConfig {
            vocab: 12,
            model_dim: 16,
            layers: 2,
            heads: 4,
            context: 64,
            seed: 11,
        };
        let dec = ToyDecoder::new(cfg).unwrap();
        let mut rng = Rng::from_seed(4);
        let mut visual = rand_visual(10, 16, &mut rng);
        let base = dec.forward_loss(&visual, &[1, 2], &[3]).unwrap();
        rng.shuffle(&mut visual);
        let shuffled = dec.forward_loss(&visual, &[1, 2], &[3]).unwrap();
        assert!(
            (base - shuffled).abs() < 1e-6,
            "losses {base} vs {shuffled} diverge under prefix permutation"
        );
    }

    #[test]
    fn loss_is_finite_at_experiment_scale() {
        let dec = ToyDecoder::new(DecoderConfig::desk(30, 5)).unwrap();
        let mut rng = Rng::from_seed(5);
        let visual = rand_visual(42, 64, &mut rng);
        let loss = dec.forward_loss(&visual, &[1, 2, 3, 4], &[5, 6]).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut rng = Rng::from_seed(6);
        for case in 0..20 {
            let mut cfg = mini();
            cfg.seed = 100 + case;
            let dec = ToyDecoder::new(cfg).unwrap();
            let visual = rand_visual(3, 8, &mut rng);
            let prompt = vec![rng.int_in(0, 8) as u32, rng.int_in(0, 8) as u32];
            let target = vec![rng.int_in(0, 8) as u32, rng.int_in(0, 8) as u32];
            let (_, analytic, _) = dec.backward(&visual, &prompt, &target).unwrap();
            let theta = Vector::new(dec.params().to_vec());
            let mut f = |p: &Vector| {
                let probe = ToyDecoder::from_params(*dec.config(), p.as_slice().to_vec()).unwrap();
                probe.forward_loss(&visual, &prompt, &target).unwrap()
            };
            let fd = finite_diff_grad(&mut f, &theta, 1e-5).unwrap();
            let err = rel_error(&analytic, fd.as_slice());
            assert!(err < 1e-4, "case {case}: rel err {err}");
        }
    }

    #[test]
    fn visual_gradient_matches_finite_differences() {
        let mut rng = Rng::from_seed(9);
        let dec = ToyDecoder::new(mini()).unwrap();
        for case in 0..20 {
            let visual = rand_visual(3, 8, &mut rng);
            let prompt = vec![rng.int_in(0, 8) as u32];
            let target = vec![rng.int_in(0, 8) as u32, rng.int_in(0, 8) as u32];
            let (_, _, vis_grads) = dec.backward(&visual, &prompt, &target).unwrap();
            let analytic: Vec<f64> = vis_grads
                .iter()
                .flat_map(|g| g.as_slice().to_vec())
                .collect();
            let flat: Vec<f64> = visual.iter().flat_map(|v| v.as_slice().to_vec()).collect();
            let mut f = |x: &Vector| {
                let vis: Vec<Vector> = x
                    .as_slice()
                    .chunks(8)
                    .map(|c| Vector::new(c.to_vec()))
                    .collect();
                dec.forward_loss(&vis, &prompt, &target).unwrap()
            };
            let fd = finite_diff_grad(&mut f, &Vector::new(flat), 1e-5).unwrap();
            let err = rel_error(&analytic, fd.as_slice());
            assert!(err < 1e-4, "case {case}: rel err {err}");
        }
    }

    #[test]
    fn gradient_of_frozen_prompt_positions_flows_into_embeddings() {
        // Every text token's embedding row must receive gradient, including
        // prompt rows (they feed the positions that predict targets).
        let dec = ToyDecoder::new(mini()).unwrap();
        let mut rng = Rng::from_seed(12);
        let visual = rand_visual(2, 8, &mut rng);
        let (_, grad, _) = dec.backward(&visual, &[4], &[5]).unwrap();
        let d = 8;
        let row4 = &grad[dec.layout.tok_embed.off + 4 * d..dec.layout.tok_embed.off + 5 * d];
        assert!(row4.iter().any(|g| *g != 0.0), "prompt row got no gradient");
        // An id never used gets none.
        let row7 = &grad[dec.layout.tok_embed.off + 7 * d..dec.layout.tok_embed.off + 8 * d];
        assert!(row7.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn generation_is_deterministic_and_respects_stop() {
        let dec = ToyDecoder::new(mini()).unwrap();
        let mut rng = Rng::from_seed(10);
        let visual = rand_visual(3, 8, &mut rng);
        let a = dec.generate(&visual, &[1], 5, None).unwrap();
        let b = dec.generate(&visual, &[1], 5, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        // Stopping on the first generated token yields an empty output.
        let c = dec.generate(&visual, &[1], 5, Some(a[0])).unwrap();
        assert!(c.is_empty());
        // Zero-parameter decoder emits id 0 forever (ties resolve low).
        let mut zero = ToyDecoder::new(mini()).unwrap();
        zero.params_mut().iter_mut().for_each(|p| *p = 0.0);
        assert_eq!(zero.generate(&visual, &[1], 3, None).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn constrained_choice_stays_in_the_candidate_set() {
        let dec = ToyDecoder::new(mini()).unwrap();
        let mut rng = Rng::from_seed(13);
        let visual = rand_visual(3, 8, &mut rng);
        let t = dec
            .next_token_constrained(&visual, &[1], &[2, 5, 8])
            .unwrap();
        assert!([2, 5, 8].contains(&t));
        assert_eq!(dec.next_token_constrained(&visual, &[1], &[6]).unwrap(), 6);
        assert!(dec.next_token_constrained(&visual, &[1], &[]).is_err());
        assert!(dec.next_token_constrained(&visual, &[1], &[99]).is_err());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let dec = ToyDecoder::new(mini()).unwrap();
        let mut rng = Rng::from_seed(14);
        let visual = rand_visual(3, 8, &mut rng);
        assert!(dec.forward_loss(&visual, &[], &[1]).is_err());
        assert!(dec.forward_loss(&visual, &[1], &[]).is_err());
        assert!(dec.forward_loss(&visual, &[1], &[99]).is_err());
        let wrong = rand_visual(1, 7, &mut rng);
        assert!(dec.forward_loss(&wrong, &[1], &[2]).is_err());
        let long = rand_visual(40, 8, &mut rng);
        assert!(dec.forward_loss(&long, &[1], &[2]).is_err(), "context is 32");
        assert!(ToyDecoder::from_params(mini(), vec![0.0; 3]).is_err());
    }
}
