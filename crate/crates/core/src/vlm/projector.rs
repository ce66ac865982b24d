//! The projector: two affine layers with a nonlinearity between, lifting
//! encoder-dim token embeddings into the decoder's model dimension.

use crate::error::{Error, Result};
use crate::numerics::{gelu, gelu_prime, Rng, Vector};
use crate::tokens::TokenBundle;
use crate::vlm::flat::{matvec, outer_acc, t_matvec_acc};
use crate::wire::fnv64_f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    /// No nonlinearity — used by the identity construction and tests.
    Identity,
}

/// Layout inside the flat parameter buffer:
/// [w1 (hidden×in) | b1 (hidden) | w2 (out×hidden) | b2 (out)].
#[derive(Clone)]
pub struct Projector {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub params: Vec<f64>,
}

/// Intermediate activations of one forward pass, kept for the backward.
pub struct ProjectorCache {
    input: Vec<f64>,
    pre_act: Vec<f64>,
    post_act: Vec<f64>,
}

impl Projector {
    pub fn param_count(in_dim: usize, hidden: usize, out_dim: usize) -> usize {
        hidden * in_dim + hidden + out_dim * hidden + out_dim
    }

    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Projector {
        let mut rng = Rng::from_seed(seed).child(0x9107EC);
        let mut params = Vec::with_capacity(Self::param_count(in_dim, hidden, out_dim));
        let s1 = 1.0 / (in_dim as f64).sqrt();
        params.extend((0..hidden * in_dim).map(|_| rng.normal() * s1));
        params.extend(std::iter::repeat(0.0).take(hidden));
        let s2 = 1.0 / (hidden as f64).sqrt();
        params.extend((0..out_dim * hidden).map(|_| rng.normal() * s2));
        params.extend(std::iter::repeat(0.0).take(out_dim));
        Projector {
            in_dim,
            hidden,
            out_dim,
            activation: Activation::Gelu,
            params,
        }
    }

    /// Square projector that maps every input to itself exactly.
    pub fn identity(dim: usize) -> Projector {
        let mut params = vec![0.0; Self::param_count(dim, dim, dim)];
        let (w1, rest) = params.split_at_mut(dim * dim);
        let w2 = &mut rest[dim..dim + dim * dim];
        for i in 0..dim {
            w1[i * dim + i] = 1.0;
            w2[i * dim + i] = 1.0;
        }
        Projector {
            in_dim: dim,
            hidden: dim,
            out_dim: dim,
            activation: Activation::Identity,
            params,
        }
    }

    fn w1(&self) -> &[f64] {
        &self.params[..self.hidden * self.in_dim]
    }
    fn b1(&self) -> &[f64] {
        let o = self.hidden * self.in_dim;
        &self.params[o..o + self.hidden]
    }
    fn w2(&self) -> &[f64] {
        let o = self.hidden * self.in_dim + self.hidden;
        &self.params[o..o + self.out_dim * self.hidden]
    }
    fn b2(&self) -> &[f64] {
        let o = self.hidden * self.in_dim + self.hidden + self.out_dim * self.hidden;
        &self.params[o..o + self.out_dim]
    }

    fn act(&self, x: f64) -> f64 {
        match self.activation {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    fn act_prime(&self, x: f64) -> f64 {
        match self.activation {
            Activation::Gelu => gelu_prime(x),
            Activation::Identity => 1.0,
        }
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Vector) -> Result<(Vector, ProjectorCache)> {
        if x.dim() != self.in_dim {
            return Err(Error::Shape(format!(
                "projector input dim {} vs expected {}",
                x.dim(),
                self.in_dim
            )));
        }
        let mut pre = vec![0.0; self.hidden];
        matvec(self.w1(), self.hidden, self.in_dim, x.as_slice(), &mut pre);
        for (p, b) in pre.iter_mut().zip(self.b1()) {
            *p += b;
        }
        let post: Vec<f64> = pre.iter().map(|&v| self.act(v)).collect();
        let mut out = vec![0.0; self.out_dim];
        matvec(self.w2(), self.out_dim, self.hidden, &post, &mut out);
        for (o, b) in out.iter_mut().zip(self.b2()) {
            *o += b;
        }
        Ok((
            Vector::new(out),
            ProjectorCache {
                input: x.as_slice().to_vec(),
                pre_act: pre,
                post_act: post,
            },
        ))
    }

    /// Accumulate parameter gradients for one token into `grad` (same layout
    /// as `params`) and return the gradient w.r.t. the input.
    pub fn backward(&self, cache: &ProjectorCache, upstream: &[f64], grad: &mut [f64]) -> Vector {
        debug_assert_eq!(upstream.len(), self.out_dim);
        debug_assert_eq!(grad.len(), self.params.len());
        let o_w1 = 0;
        let o_b1 = self.hidden * self.in_dim;
        let o_w2 = o_b1 + self.hidden;
        let o_b2 = o_w2 + self.out_dim * self.hidden;

        // Through the second affine layer.
        outer_acc(
            &mut grad[o_w2..o_b2],
            self.out_dim,
            self.hidden,
            upstream,
            &cache.post_act,
        );
        for (g, u) in grad[o_b2..].iter_mut().zip(upstream) {
            *g += u;
        }
        let mut d_post = vec![0.0; self.hidden];
        t_matvec_acc(self.w2(), self.out_dim, self.hidden, upstream, &mut d_post);
        // Through the activation.
        let d_pre: Vec<f64> = d_post
            .iter()
            .zip(&cache.pre_act)
            .map(|(d, &p)| d * self.act_prime(p))
            .collect();
        // Through the first affine layer.
        outer_acc(
            &mut grad[o_w1..o_b1],
            self.hidden,
            self.in_dim,
            &d_pre,
            &cache.input,
        );
        for (g, d) in grad[o_b1..o_w2].iter_mut().zip(&d_pre) {
            *g += d;
        }
        let mut d_input = vec![0.0; self.in_dim];
        t_matvec_acc(self.w1(), self.hidden, self.in_dim, &d_pre, &mut d_input);
        Vector::new(d_input)
    }

    /// Project every token of a bundle, order preserved.
    pub fn project(&self, bundle: &TokenBundle) -> Result<Vec<Vector>> {
        bundle.tokens.iter().map(|t| self.forward(&t.embedding)).collect()
    }

    pub fn checksum(&self) -> u64 {
        fnv64_f64(&self.params)
    }
}
