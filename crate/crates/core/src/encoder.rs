//! Patch-embedding transformer backbone with windowed attention, periodic
//! global blocks, relative position bias and a five-level simple pyramid.
//!
//! Feature maps are channels-last `[H, W, C]`; images are `[3, H, W]`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttnMask, Block, LayerNorm, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub window: usize,
    pub global_blocks: Vec<usize>,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            window: 4,
            global_blocks: vec![1, 3],
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    /// `n` global blocks spread evenly, the last one being the final block.
    pub fn evenly_spaced_globals(depth: usize, n: usize) -> Vec<usize> {
        if n == 0 || depth == 0 {
            return Vec::new();
        }
        let step = depth / n;
        (1..=n).map(|i| i * step - 1 + depth % n).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.depth == 0 || self.window == 0 || self.mlp_ratio == 0 {
            return bad("encoder sizes must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} is not divisible by heads {}", self.embed_dim, self.heads));
        }
        let g = &self.global_blocks;
        if g.windows(2).any(|w| w[0] >= w[1]) || g.iter().any(|&i| i >= self.depth) {
            return bad(format!("global_blocks {g:?} must be increasing and below depth {}", self.depth));
        }
        if g.len() >= 2 {
            let step = g[1] - g[0];
            if g.windows(2).any(|w| w[1] - w[0] != step) {
                return bad(format!("global_blocks {g:?} are not evenly spaced"));
            }
        }
        Ok(())
    }

    /// Smallest multiple image sides must have: patch size times window,
    /// raised so the base map survives three halvings.
    pub fn side_multiple(&self) -> usize {
        self.patch_size * lcm(self.window, 8)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Pyramid level labels, finest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Hi,
    Base,
    Low1,
    Low2,
    Low3,
}

impl Level {
    pub const ALL: [Level; 5] = [Level::Hi, Level::Base, Level::Low1, Level::Low2, Level::Low3];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Scale of this level relative to the base map.
    pub fn relative_scale(self) -> f64 {
        [2.0, 1.0, 0.5, 0.25, 0.125][self.index()]
    }
}

/// Five channels-last maps on a tape; `strides[l]` is pixels per cell.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 5],
    pub sides: [(usize, usize); 5],
    pub strides: [f64; 5],
    pub channels: usize,
    /// The input image as a channels-last `[H, W, 3]` map.
    pub pixels: Var,
}

impl FeaturePyramid {
    pub fn level(&self, l: Level) -> Var {
        self.levels[l.index()]
    }
}

/// Row-major window gather order for a `h x w` grid: window by window, then
/// row-major inside the window.
pub fn window_order(h: usize, w: usize, win: usize) -> Result<Vec<usize>> {
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(Error::contract(
            "window_partition",
            format!("map {h}x{w} is not divisible by window {win}"),
        ));
    }
    let mut order = Vec::with_capacity(h * w);
    for wy in 0..h / win {
        for wx in 0..w / win {
            for y in 0..win {
                for x in 0..win {
                    order.push((wy * win + y) * w + wx * win + x);
                }
            }
        }
    }
    Ok(order)
}

fn row_index(order: &[usize], c: usize) -> Arc<Vec<usize>> {
    Arc::new(order.iter().flat_map(|&r| r * c..(r + 1) * c).collect())
}

fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

/// `[H,W,C]` to `[nW, win*win, C]` in row-major window order.
pub fn window_partition(g: &mut Graph<'_>, feat: Var, win: usize) -> Result<Var> {
    let s = g.shape(feat).to_vec();
    if s.len() != 3 {
        return Err(Error::contract("window_partition", format!("expects [H,W,C], got {s:?}")));
    }
    let order = window_order(s[0], s[1], win)?;
    let n = s[0] * s[1] / (win * win);
    g.gather(feat, row_index(&order, s[2]), &[n, win * win, s[2]])
}

/// Inverse of [`window_partition`] for an `h x w` map.
pub fn window_reverse(g: &mut Graph<'_>, windows: Var, h: usize, w: usize, win: usize) -> Result<Var> {
    let c = *g.shape(windows).last().unwrap_or(&0);
    let order = window_order(h, w, win)?;
    g.gather(windows, row_index(&inverse(&order), c), &[h, w, c])
}

/// Gather index expanding a `[(2w-1)^2, heads]` table into `[groups*heads, w^2, w^2]`.
pub fn relative_bias_index(win: usize, heads: usize, groups: usize) -> Arc<Vec<usize>> {
    let t = win * win;
    let span = 2 * win - 1;
    let mut one = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for i in 0..t {
            for j in 0..t {
                let dr = i / win + win - 1 - j / win;
                let dc = i % win + win - 1 - j % win;
                one.push((dr * span + dc) * heads + h);
            }
        }
    }
    let mut idx = Vec::with_capacity(groups * one.len());
    for _ in 0..groups {
        idx.extend_from_slice(&one);
    }
    Arc::new(idx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMode {
    Windowed,
    Global,
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub block: Block,
    pub mode: AttnMode,
    pub rel_bias: Option<ParamId>,
}

impl EncoderBlock {
    /// Applies the block to a `[h*w, C]` token grid (row-major).
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, h: usize, w: usize, win: usize) -> Result<Var> {
        let c = g.shape(x)[1];
        match self.mode {
            AttnMode::Global => self.block.forward(g, x, 1, h * w, &AttnMask::Full, None),
            AttnMode::Windowed => {
                let order = window_order(h, w, win)?;
                let groups = h * w / (win * win);
                let xw = g.gather(x, row_index(&order, c), &[h * w, c])?;
                let heads = self.block.attn.heads;
                let bias = match self.rel_bias {
                    Some(id) => {
                        let table = g.param(id);
                        let span = 2 * win - 1;
                        if g.shape(table) != [span * span, heads] {
                            return Err(Error::contract(
                                "attention_block",
                                format!(
                                    "bias table {:?} does not fit window {win} with {heads} heads",
                                    g.shape(table)
                                ),
                            ));
                        }
                        let t = win * win;
                        Some(g.gather(table, relative_bias_index(win, heads, groups), &[groups * heads, t, t])?)
                    }
                    None => None,
                };
                let y = self.block.forward(g, xw, groups, win * win, &AttnMask::Full, bias)?;
                g.gather(y, row_index(&inverse(&order), c), &[h * w, c])
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub level_proj: Vec<(Linear, LayerNorm)>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let p = cfg.patch_size;
        let patch = Linear::new(store, "encoder.patch", 3 * p * p, d, rng);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let name = format!("encoder.block{i}");
            let block = Block::new(store, &name, d, cfg.heads, cfg.mlp_ratio, rng)?;
            let global = cfg.global_blocks.contains(&i);
            let rel_bias = (!global).then(|| {
                let span = 2 * cfg.window - 1;
                store.add_full(format!("{name}.rel_bias"), &[span * span, cfg.heads], 0.0)
            });
            blocks.push(EncoderBlock {
                block,
                mode: if global { AttnMode::Global } else { AttnMode::Windowed },
                rel_bias,
            });
        }
        let norm = LayerNorm::new(store, "encoder.norm", d);
        let level_proj = Level::ALL
            .iter()
            .map(|l| {
                let name = format!("encoder.level{}", l.index());
                (Linear::new(store, &format!("{name}.proj"), d, d, rng), LayerNorm::new(store, &format!("{name}.ln"), d))
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            patch,
            blocks,
            norm,
            level_proj,
        })
    }

    /// `[3,H,W]` image to `[Hp*Wp, embed_dim]` patch tokens, row-major.
    pub fn patchify(&self, g: &mut Graph<'_>, image: Var) -> Result<(Var, usize, usize)> {
        let s = g.shape(image).to_vec();
        let p = self.cfg.patch_size;
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::contract("patchify", format!("image must be [3,H,W], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        if h % p != 0 || w % p != 0 {
            return Err(Error::contract(
                "patchify",
                format!("image {h}x{w} sides must be multiples of the patch size {p}"),
            ));
        }
        let (hp, wp) = (h / p, w / p);
        let mut idx = Vec::with_capacity(3 * h * w);
        for py in 0..hp {
            for px in 0..wp {
                for c in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            idx.push((c * h + py * p + y) * w + px * p + x);
                        }
                    }
                }
            }
        }
        let patches = g.gather(image, Arc::new(idx), &[hp * wp, 3 * p * p])?;
        Ok((self.patch.forward(g, patches)?, hp, wp))
    }

    /// Runs all blocks and returns the normalised base map `[Hp, Wp, C]`.
    pub fn base_map(&self, g: &mut Graph<'_>, image: Var) -> Result<Var> {
        let (mut x, hp, wp) = self.patchify(g, image)?;
        let win = self.cfg.window;
        if hp % win != 0 || wp % win != 0 {
            return Err(Error::contract(
                "encode",
                format!(
                    "base map {hp}x{wp} is not divisible by window {win}; image sides must be multiples of {}",
                    self.cfg.side_multiple()
                ),
            ));
        }
        for b in &self.blocks {
            x = b.forward(g, x, hp, wp, win)?;
        }
        let x = self.norm.forward(g, x)?;
        g.reshape(x, &[hp, wp, self.cfg.embed_dim])
    }

    /// Full encoder: image to five-level pyramid.
    pub fn encode(&self, g: &mut Graph<'_>, image: Var) -> Result<FeaturePyramid> {
        let base = self.base_map(g, image)?;
        let (hp, wp) = (g.shape(base)[0], g.shape(base)[1]);
        if hp % 8 != 0 || wp % 8 != 0 {
            return Err(Error::contract(
                "encode",
                format!("base map {hp}x{wp} must be divisible by 8 for the pyramid"),
            ));
        }
        let hi = g.resize_bilinear(base, 2 * hp, 2 * wp)?;
        let low1 = g.avg_pool2(base)?;
        let low2 = g.avg_pool2(low1)?;
        let low3 = g.avg_pool2(low2)?;
        let raw = [hi, base, low1, low2, low3];
        let d = self.cfg.embed_dim;
        let mut levels = raw;
        let mut sides = [(0, 0); 5];
        for (i, &r) in raw.iter().enumerate() {
            let (h, w) = (g.shape(r)[0], g.shape(r)[1]);
            let flat = g.reshape(r, &[h * w, d])?;
            let (proj, ln) = &self.level_proj[i];
            let y = proj.forward(g, flat)?;
            let y = ln.forward(g, y)?;
            levels[i] = g.reshape(y, &[h, w, d])?;
            sides[i] = (h, w);
        }
        let p = self.cfg.patch_size as f64;
        let (ih, iw) = (g.shape(image)[1], g.shape(image)[2]);
        let hwc: Vec<usize> = (0..ih * iw).flat_map(|i| (0..3).map(move |c| c * ih * iw + i)).collect();
        let pixels = g.gather(image, Arc::new(hwc), &[ih, iw, 3])?;
        Ok(FeaturePyramid {
            pixels,
            levels,
            sides,
            strides: Level::ALL.map(|l| p / l.relative_scale()),
            channels: d,
        })
    }
}
