//! Parameterised layers shared by the encoder, extractor and decoder.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Standard deviation of the Gaussian weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self::with_std(store, name, fan_in, fan_out, INIT_STD, rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[fan_in, fan_out], std, rng);
        let b = store.add_full(format!("{name}.b"), &[fan_out], 0.0);
        Self { w, b, fan_in, fan_out }
    }

    /// `[n, fan_in] -> [n, fan_out]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_full(format!("{name}.gamma"), &[dim], 1.0),
            beta: store.add_full(format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

/// How the rows of a `[groups * len, dim]` input may attend.
#[derive(Clone, Debug)]
pub enum AttnMask {
    /// Every token sees every token of its group.
    Full,
    /// `allowed[q * len + k]`, shared by all groups and heads.
    Allowed(Arc<Vec<bool>>),
}

/// Multi-head self-attention over independent groups of equal length.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// `[groups*len, 3*dim]` rows to `[groups*heads, len, dh]` for part `which` (0=q, 1=k, 2=v).
fn split_heads_index(groups: usize, len: usize, heads: usize, dh: usize, which: usize) -> Arc<Vec<usize>> {
    let dim = heads * dh;
    let mut idx = Vec::with_capacity(groups * len * dim);
    for b in 0..groups {
        for h in 0..heads {
            for l in 0..len {
                let base = (b * len + l) * 3 * dim + which * dim + h * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    Arc::new(idx)
}

/// `[groups*heads, len, dh]` back to `[groups*len, dim]`.
fn merge_heads_index(groups: usize, len: usize, heads: usize, dh: usize) -> Arc<Vec<usize>> {
    let dim = heads * dh;
    let mut idx = Vec::with_capacity(groups * len * dim);
    for b in 0..groups {
        for l in 0..len {
            for h in 0..heads {
                let base = ((b * heads + h) * len + l) * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    Arc::new(idx)
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by heads {heads}")));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// `x` is `[groups*len, dim]`; `bias`, if any, is `[groups*heads, len, len]`
    /// and is added to the scaled scores.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        groups: usize,
        len: usize,
        mask: &AttnMask,
        bias: Option<Var>,
    ) -> Result<Var> {
        let (h, dh) = (self.heads, self.dim / self.heads);
        if g.shape(x) != [groups * len, self.dim] {
            return Err(Error::contract(
                "attention",
                format!("input {:?} is not [{groups}*{len}, {}]", g.shape(x), self.dim),
            ));
        }
        let qkv = self.qkv.forward(g, x)?;
        let shape = [groups * h, len, dh];
        let q = g.gather(qkv, split_heads_index(groups, len, h, dh, 0), &shape)?;
        let k = g.gather(qkv, split_heads_index(groups, len, h, dh, 1), &shape)?;
        let v = g.gather(qkv, split_heads_index(groups, len, h, dh, 2), &shape)?;
        let s = g.bmm_nt(q, k)?;
        let mut s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
        if let Some(b) = bias {
            s = g.add(s, b)?;
        }
        let p = match mask {
            AttnMask::Full => g.softmax(s)?,
            AttnMask::Allowed(a) => g.softmax_masked(s, a)?,
        };
        let o = g.bmm(p, v)?;
        let o = g.gather(o, merge_heads_index(groups, len, h, dh), &[groups * len, self.dim])?;
        self.proj.forward(g, o)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        groups: usize,
        len: usize,
        mask: &AttnMask,
        bias: Option<Var>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, groups, len, mask, bias)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}
