//! Autoregressive region-to-text decoder over object tokens and a task
//! begin token, with greedy and branch-first generation.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::extractor::{roi_crop_batch, BBox};
use crate::nn::{AttnMask, Block, LayerNorm, Linear, INIT_STD};
use crate::tensor::{Graph, ParamId, ParamStore, Var};
use crate::tokenizer::{TokenId, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub max_tokens: usize,
    pub crop_side: usize,
    pub mlp_ratio: usize,
    pub label_smoothing: f64,
    /// Appends one token embedding the normalised box geometry to the
    /// cropped object tokens.
    pub geometry_token: bool,
    /// Input-pixel samples per crop token side added to each crop token
    /// (0 disables the pixel path).
    pub pixel_sub: usize,
    /// Every task starts from the first task token (the single-begin-token
    /// ablation); the task still selects the training text.
    pub single_begin_token: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 64,
            heads: 4,
            max_tokens: 20,
            crop_side: 4,
            mlp_ratio: 4,
            label_smoothing: 0.1,
            geometry_token: true,
            pixel_sub: 4,
            single_begin_token: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens < 2 || self.crop_side == 0 || self.layers == 0 {
            return Err(Error::Config("decoder needs max_tokens >= 2, crop_side >= 1 and layers >= 1".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("decoder dim {} is not divisible by heads {}", self.dim, self.heads)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Object tokens per region.
    pub fn object_tokens(&self) -> usize {
        self.crop_side * self.crop_side + usize::from(self.geometry_token)
    }
}

/// Pixel-coordinate sample points of a `side x side` token grid over `b`,
/// each token holding a `sub x sub` block of samples (token-major).
pub fn pixel_points(b: &BBox, side: usize, sub: usize) -> Vec<(f64, f64)> {
    let n = (side * sub) as f64;
    let mut pts = Vec::with_capacity(side * side * sub * sub);
    for ti in 0..side {
        for tj in 0..side {
            for si in 0..sub {
                for sj in 0..sub {
                    let y = b.y1 + ((ti * sub + si) as f64 + 0.5) * b.height() / n;
                    let x = b.x1 + ((tj * sub + sj) as f64 + 0.5) * b.width() / n;
                    pts.push((y - 0.5, x - 0.5));
                }
            }
        }
    }
    pts
}

/// `(m+n) x (m+n)` row-major mask: object rows see object columns only; text
/// row `m+i` sees columns `0..=m+i`.
pub fn build_seq2seq_mask(m: usize, n: usize) -> Vec<bool> {
    let t = m + n;
    let mut mask = vec![false; t * t];
    for i in 0..t {
        let limit = if i < m { m } else { i + 1 };
        for j in 0..limit {
            mask[i * t + j] = true;
        }
    }
    mask
}

/// A generated description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptionCandidate {
    /// Generated ids, without the begin token and without `[EOS]`.
    pub token_ids: Vec<TokenId>,
    /// Probability of each emitted token, `[EOS]` included when emitted.
    pub token_scores: Vec<f64>,
    pub desc_score: f64,
    /// Generation hit `max_tokens` before `[EOS]`.
    pub truncated: bool,
}

impl DescriptionCandidate {
    pub fn from_scores(token_ids: Vec<TokenId>, token_scores: Vec<f64>, truncated: bool) -> Self {
        let desc_score = mean(&token_scores);
        Self {
            token_ids,
            token_scores,
            desc_score,
            truncated,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Composite detection score `sqrt(objectness) * sqrt(desc_score)`.
pub fn score_object(objectness: f64, desc_score: f64) -> f64 {
    objectness.sqrt() * desc_score.sqrt()
}

/// A detection with its generated descriptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub bbox: BBox,
    pub objectness: f64,
    pub candidates: Vec<DescriptionCandidate>,
    pub final_scores: Vec<f64>,
    pub task_id: usize,
}

impl DetectedObject {
    pub fn new(bbox: BBox, objectness: f64, candidates: Vec<DescriptionCandidate>, task_id: usize) -> Self {
        let final_scores = candidates.iter().map(|c| score_object(objectness, c.desc_score)).collect();
        Self {
            bbox,
            objectness,
            candidates,
            final_scores,
            task_id,
        }
    }
}

/// One teacher-forced training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTarget {
    /// Content ids `y_1..y_N` (no specials).
    pub ids: Vec<TokenId>,
    /// 1-based task index selecting the begin token.
    pub task: usize,
}

#[derive(Clone, Debug)]
pub struct TextDecoder {
    pub cfg: DecoderConfig,
    pub vocab_size: usize,
    pub obj_proj: Linear,
    pub obj_ln: LayerNorm,
    pub geom: Option<Linear>,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    /// `[crop_side², D]` position embedding of the crop grid tokens.
    pub crop_pos: ParamId,
    pub pix_proj: Option<Linear>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub out: Linear,
}

/// Normalised geometry features of a box in a `w x h` frame.
pub fn box_geometry(b: &BBox, w: f64, h: f64) -> [f64; 6] {
    [b.x1 / w, b.y1 / h, b.x2 / w, b.y2 / h, b.width() / w, b.height() / h]
}

impl TextDecoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        feat_channels: usize,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        Ok(Self {
            cfg: cfg.clone(),
            vocab_size,
            obj_proj: Linear::new(store, "decoder.obj_proj", feat_channels, d, rng),
            obj_ln: LayerNorm::new(store, "decoder.obj_ln", d),
            geom: cfg
                .geometry_token
                .then(|| Linear::with_std(store, "decoder.geom", 6, d, 1.0, rng)),
            tok_emb: store.add_normal("decoder.tok_emb", &[vocab_size, d], INIT_STD, rng),
            pos_emb: store.add_normal("decoder.pos_emb", &[cfg.max_tokens, d], INIT_STD, rng),
            crop_pos: store.add_normal("decoder.crop_pos", &[cfg.crop_side * cfg.crop_side, d], INIT_STD, rng),
            pix_proj: (cfg.pixel_sub > 0)
                .then(|| Linear::new(store, "decoder.pix_proj", 3 * cfg.pixel_sub * cfg.pixel_sub, d, rng)),
            blocks: (0..cfg.layers)
                .map(|i| Block::new(store, &format!("decoder.block{i}"), d, cfg.heads, cfg.mlp_ratio, rng))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(store, "decoder.norm", d),
            out: Linear::new(store, "decoder.out", d, vocab_size, rng),
        })
    }

    /// Object tokens for `boxes`: `[R * m, dim]`, region-major.
    pub fn object_tokens(
        &self,
        g: &mut Graph<'_>,
        pyr: &FeaturePyramid,
        boxes: &[BBox],
        level_base: f64,
        img_w: f64,
        img_h: f64,
    ) -> Result<Var> {
        let r = boxes.len();
        let s2 = self.cfg.crop_side * self.cfg.crop_side;
        let crops = roi_crop_batch(g, pyr, boxes, self.cfg.crop_side, level_base, img_w, img_h)?;
        let crops = g.reshape(crops, &[r * s2, pyr.channels])?;
        let x = self.obj_proj.forward(g, crops)?;
        let x = self.obj_ln.forward(g, x)?;
        let pos_table = g.param(self.crop_pos);
        let positions: Vec<usize> = (0..r).flat_map(|_| 0..s2).collect();
        let pos = g.embedding(pos_table, &positions)?;
        let mut x = g.add(x, pos)?;
        if let Some(pp) = &self.pix_proj {
            let sub = self.cfg.pixel_sub;
            let pts: Vec<(f64, f64)> = boxes
                .iter()
                .flat_map(|b| pixel_points(&b.clipped(img_w, img_h), self.cfg.crop_side, sub))
                .collect();
            let px = g.bilinear_sample(pyr.pixels, &pts)?;
            let px = g.reshape(px, &[r * s2, 3 * sub * sub])?;
            let px = pp.forward(g, px)?;
            x = g.add(x, px)?;
        }
        let Some(geom) = &self.geom else { return Ok(x) };
        let feats: Vec<f64> = boxes.iter().flat_map(|b| box_geometry(b, img_w, img_h)).collect();
        let f = g.constant(crate::tensor::Tensor::new(&[r, 6], feats)?)?;
        let gt = geom.forward(g, f)?;
        let both = g.concat(&[x, gt], 0)?;
        let m = s2 + 1;
        let mut idx = Vec::with_capacity(r * m);
        for i in 0..r {
            idx.extend(i * s2..(i + 1) * s2);
            idx.push(r * s2 + i);
        }
        g.select_rows(both, &idx)
    }

    /// Final hidden states of the text rows: `[R*L, dim]` for `R` regions
    /// whose object tokens are `obj` (`[R*m, dim]`) and whose prefixes all
    /// have length `L`.
    fn text_states(&self, g: &mut Graph<'_>, obj: Var, prefixes: &[Vec<TokenId>]) -> Result<Var> {
        let r = prefixes.len();
        let l = prefixes.first().map_or(0, Vec::len);
        if r == 0 || l == 0 || prefixes.iter().any(|p| p.len() != l) {
            return Err(Error::contract("decode_step", "prefixes must be non-empty and of equal length"));
        }
        if l > self.cfg.max_tokens {
            return Err(Error::contract(
                "decode_step",
                format!("prefix length {l} exceeds max_tokens {}", self.cfg.max_tokens),
            ));
        }
        let d = self.cfg.dim;
        let rows = g.shape(obj)[0];
        if rows % r != 0 || g.shape(obj)[1] != d {
            return Err(Error::contract(
                "decode_step",
                format!("object tokens {:?} do not split into {r} regions of width {d}", g.shape(obj)),
            ));
        }
        let m = rows / r;
        let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
        for &id in &ids {
            if id >= self.vocab_size {
                return Err(Error::Index { op: "decode_step", index: id, len: self.vocab_size });
            }
        }
        let table = g.param(self.tok_emb);
        let tok = g.embedding(table, &ids)?;
        let pos_table = g.param(self.pos_emb);
        let positions: Vec<usize> = (0..r).flat_map(|_| 0..l).collect();
        let pos = g.embedding(pos_table, &positions)?;
        let text = g.add(tok, pos)?;
        let both = g.concat(&[obj, text], 0)?;
        let t = m + l;
        let mut order = Vec::with_capacity(r * t);
        for i in 0..r {
            order.extend(i * m..(i + 1) * m);
            order.extend(r * m + i * l..r * m + (i + 1) * l);
        }
        let mut x = g.select_rows(both, &order)?;
        let mask = AttnMask::Allowed(Arc::new(build_seq2seq_mask(m, l)));
        for b in &self.blocks {
            x = b.forward(g, x, r, t, &mask, None)?;
        }
        let text_rows: Vec<usize> = (0..r).flat_map(|i| i * t + m..(i + 1) * t).collect();
        let x = g.select_rows(x, &text_rows)?;
        self.norm.forward(g, x)
    }

    /// Begin token of `task` (1-based).
    pub fn begin_token(&self, vocab: &Vocabulary, task: usize) -> Result<TokenId> {
        if !self.cfg.single_begin_token {
            return vocab.task_id(task);
        }
        if task == 0 {
            return Err(Error::Index { op: "task_token", index: 0, len: vocab.num_tasks() + 1 });
        }
        vocab.task_id(1)
    }

    /// Next-token logits at every text position: `[R*L, V]`.
    pub fn logits(&self, g: &mut Graph<'_>, obj: Var, prefixes: &[Vec<TokenId>]) -> Result<Var> {
        let h = self.text_states(g, obj, prefixes)?;
        self.out.forward(g, h)
    }

    /// Next-token probabilities after `prefix` (which starts with a begin
    /// token) for a single region's object tokens `[m, dim]`.
    pub fn decode_step(&self, g: &mut Graph<'_>, obj: Var, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.step_probs(g, obj, &[prefix.to_vec()])?.remove(0))
    }

    /// Last-position probabilities for each prefix (equal lengths).
    fn step_probs(&self, g: &mut Graph<'_>, obj: Var, prefixes: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        let l = prefixes[0].len();
        let h = self.text_states(g, obj, prefixes)?;
        let last: Vec<usize> = (0..prefixes.len()).map(|i| i * l + l - 1).collect();
        let h = g.select_rows(h, &last)?;
        let z = self.out.forward(g, h)?;
        let p = g.softmax(z)?;
        let v = self.vocab_size;
        Ok(g.data(p).chunks(v).map(<[f64]>::to_vec).collect())
    }

    /// Label-smoothed teacher-forced loss, averaged over the `N+1` steps of
    /// each region (content tokens plus `[EOS]`) and then over regions.
    pub fn lm_loss(&self, g: &mut Graph<'_>, obj: Var, targets: &[TextTarget], vocab: &Vocabulary) -> Result<Var> {
        let r = targets.len();
        if r == 0 {
            return Err(Error::contract("lm_loss", "no regions"));
        }
        let cap = self.cfg.max_tokens - 1;
        let mut seqs = Vec::with_capacity(r);
        for t in targets {
            if t.ids.is_empty() {
                return Err(Error::contract("lm_loss", "empty target description"));
            }
            if let Some(&s) = t.ids.iter().find(|&&id| vocab.is_special(id)) {
                return Err(Error::contract("lm_loss", format!("target contains special token id {s}")));
            }
            let ids = &t.ids[..t.ids.len().min(cap)];
            seqs.push((self.begin_token(vocab, t.task)?, ids));
        }
        let l = seqs.iter().map(|s| s.1.len() + 1).max().unwrap_or(1);
        let prefixes: Vec<Vec<TokenId>> = seqs
            .iter()
            .map(|(b, ids)| {
                let mut p = vec![*b];
                p.extend_from_slice(ids);
                p.resize(l, vocab.pad_id());
                p
            })
            .collect();
        let h = self.text_states(g, obj, &prefixes)?;
        let mut per_region = Vec::with_capacity(r);
        for (i, (_, ids)) in seqs.iter().enumerate() {
            let n = ids.len() + 1;
            let rows: Vec<usize> = (i * l..i * l + n).collect();
            let hs = g.select_rows(h, &rows)?;
            let z = self.out.forward(g, hs)?;
            let mut y: Vec<TokenId> = ids.to_vec();
            y.push(vocab.eos_id());
            per_region.push(g.cross_entropy_smoothed(z, &y, self.cfg.label_smoothing)?);
        }
        let mut total = per_region[0];
        for &p in &per_region[1..] {
            total = g.add(total, p)?;
        }
        g.scale(total, 1.0 / r as f64)
    }

    /// Decodes every prefix greedily in lockstep until `[EOS]` or the length
    /// cap. `scores[i]` holds the probabilities already emitted for `i`.
    fn continue_greedy(
        &self,
        g: &mut Graph<'_>,
        obj_rows: &[Var],
        mut prefixes: Vec<Vec<TokenId>>,
        mut scores: Vec<Vec<f64>>,
        mut done: Vec<bool>,
        eos: TokenId,
    ) -> Result<Vec<DescriptionCandidate>> {
        loop {
            let active: Vec<usize> = (0..prefixes.len())
                .filter(|&i| !done[i] && prefixes[i].len() < self.cfg.max_tokens)
                .collect();
            if active.is_empty() {
                break;
            }
            let objs: Vec<Var> = active.iter().map(|&i| obj_rows[i]).collect();
            let obj = if objs.len() == 1 { objs[0] } else { g.concat(&objs, 0)? };
            let ps: Vec<Vec<TokenId>> = active.iter().map(|&i| prefixes[i].clone()).collect();
            let probs = self.step_probs(g, obj, &ps)?;
            for (k, &i) in active.iter().enumerate() {
                let (tok, p) = argmax(&probs[k]);
                scores[i].push(p);
                prefixes[i].push(tok);
                if tok == eos {
                    done[i] = true;
                }
            }
        }
        Ok(prefixes
            .into_iter()
            .zip(scores)
            .zip(done)
            .map(|((p, s), finished)| {
                let mut ids: Vec<TokenId> = p[1..].to_vec();
                if finished {
                    ids.pop();
                }
                DescriptionCandidate::from_scores(ids, s, !finished)
            })
            .collect())
    }

    /// Greedy decoding of each region; `obj` is `[R*m, dim]`.
    pub fn generate_greedy(
        &self,
        g: &mut Graph<'_>,
        obj: Var,
        regions: usize,
        task: usize,
        vocab: &Vocabulary,
    ) -> Result<Vec<DescriptionCandidate>> {
        Ok(self
            .generate_branch_first(g, obj, regions, task, 1, vocab)?
            .into_iter()
            .map(|mut c| c.remove(0))
            .collect())
    }

    /// Branch-first beam: the top-`k` first tokens of each region, each
    /// continued greedily. Returns `k` candidates per region (fewer if
    /// `k > V`), ordered by first-token probability.
    pub fn generate_branch_first(
        &self,
        g: &mut Graph<'_>,
        obj: Var,
        regions: usize,
        task: usize,
        k: usize,
        vocab: &Vocabulary,
    ) -> Result<Vec<Vec<DescriptionCandidate>>> {
        if k == 0 {
            return Err(Error::Config("beam size k must be at least 1".into()));
        }
        if regions == 0 {
            return Ok(Vec::new());
        }
        let begin = self.begin_token(vocab, task)?;
        let eos = vocab.eos_id();
        let rows = g.shape(obj)[0];
        let m = rows / regions;
        let per_region: Vec<Var> = (0..regions)
            .map(|i| g.select_rows(obj, &(i * m..(i + 1) * m).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        let first = self.step_probs(g, obj, &vec![vec![begin]; regions])?;
        let mut obj_rows = Vec::new();
        let mut prefixes = Vec::new();
        let mut scores = Vec::new();
        let mut done = Vec::new();
        let mut counts = Vec::with_capacity(regions);
        for (i, p) in first.iter().enumerate() {
            let top = top_k(p, k);
            counts.push(top.len());
            for (tok, prob) in top {
                obj_rows.push(per_region[i]);
                prefixes.push(vec![begin, tok]);
                scores.push(vec![prob]);
                done.push(tok == eos);
            }
        }
        let flat = self.continue_greedy(g, &obj_rows, prefixes, scores, done, eos)?;
        let mut it = flat.into_iter();
        Ok(counts.iter().map(|&c| it.by_ref().take(c).collect()).collect())
    }
}

/// Highest probability entry, lowest id on ties.
fn argmax(p: &[f64]) -> (TokenId, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in p.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// `k` largest entries by probability, lowest id first on ties.
fn top_k(p: &[f64], k: usize) -> Vec<(TokenId, f64)> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, p[i])).collect()
}
