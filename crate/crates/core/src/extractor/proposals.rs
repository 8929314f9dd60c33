use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::boxes::BBox;
use super::roi::level_for_box;
use crate::encoder::{FeaturePyramid, Level};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Graph, ParamStore, Var};

/// Initial heat logit, a foreground prior of about 0.1.
const HEAT_PRIOR_LOGIT: f64 = -2.19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub level: Level,
}

/// Shared per-position head over every pyramid cell: heat logit, sub-cell
/// offset (x, y) and log size (w, h) in units of the level stride.
#[derive(Clone, Debug)]
pub struct ProposalHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Head outputs for all levels, rows in level-major, row-major order.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// `[cells]` heat logits.
    pub heat: Var,
    /// `[cells, 4]` offset and log-size regressions.
    pub reg: Var,
    /// First row of each level.
    pub offsets: [usize; 5],
}

impl ProposalHead {
    pub fn new(store: &mut ParamStore, channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let fc1 = Linear::new(store, "proposal.fc1", channels, hidden, rng);
        let fc2 = Linear::new(store, "proposal.fc2", hidden, 5, rng);
        store.get_mut(fc2.b).data_mut()[0] = HEAT_PRIOR_LOGIT;
        Self { fc1, fc2 }
    }

    pub fn forward(&self, g: &mut Graph<'_>, pyr: &FeaturePyramid) -> Result<HeadOutput> {
        let c = pyr.channels;
        let mut flat = Vec::with_capacity(5);
        let mut offsets = [0; 5];
        let mut total = 0;
        for (i, &lv) in pyr.levels.iter().enumerate() {
            let (h, w) = pyr.sides[i];
            offsets[i] = total;
            total += h * w;
            flat.push(g.reshape(lv, &[h * w, c])?);
        }
        let x = g.concat(&flat, 0)?;
        let hdn = self.fc1.forward(g, x)?;
        let hdn = g.gelu(hdn)?;
        let out = self.fc2.forward(g, hdn)?;
        let heat_idx: Vec<usize> = (0..total).map(|r| r * 5).collect();
        let reg_idx: Vec<usize> = (0..total).flat_map(|r| r * 5 + 1..r * 5 + 5).collect();
        let heat = g.gather(out, Arc::new(heat_idx), &[total])?;
        let reg = g.gather(out, Arc::new(reg_idx), &[total, 4])?;
        Ok(HeadOutput { heat, reg, offsets })
    }
}

/// Ground-truth heat splats and regression targets for all levels.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatTargets {
    /// Heat per cell (exactly 1 at object centres).
    pub heat: Vec<f64>,
    /// `(row, [dx, dy, log w, log h])` for each object's centre cell.
    pub regression: Vec<(usize, [f64; 4])>,
}

fn centre_cell(cx: f64, cy: f64, stride: f64, h: usize, w: usize) -> (usize, usize, f64, f64) {
    let fx = cx / stride - 0.5;
    let fy = cy / stride - 0.5;
    let j = fx.round().clamp(0.0, (w - 1) as f64);
    let i = fy.round().clamp(0.0, (h - 1) as f64);
    (i as usize, j as usize, fx - j, fy - i)
}

/// Gaussian splats on the level chosen by box size, with centre cells set
/// to exactly 1.
pub fn heat_targets(pyr_sides: &[(usize, usize); 5], strides: &[f64; 5], gts: &[BBox], level_base: f64) -> HeatTargets {
    let mut offsets = [0; 5];
    let mut total = 0;
    for i in 0..5 {
        offsets[i] = total;
        total += pyr_sides[i].0 * pyr_sides[i].1;
    }
    let mut heat = vec![0.0f64; total];
    let mut centres = Vec::new();
    let mut regression = Vec::new();
    for b in gts {
        let l = level_for_box(b, level_base).index();
        let (h, w) = pyr_sides[l];
        let s = strides[l];
        let (cx, cy) = b.center();
        let (ci, cj, ox, oy) = centre_cell(cx, cy, s, h, w);
        let sigma = ((b.width() / s) * (b.height() / s)).sqrt() / 6.0;
        let sigma = sigma.max(0.5);
        for i in 0..h {
            for j in 0..w {
                let d2 = (i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                let cell = &mut heat[offsets[l] + i * w + j];
                *cell = cell.max(v);
            }
        }
        let row = offsets[l] + ci * w + cj;
        centres.push(row);
        regression.push((row, [ox, oy, (b.width() / s).ln(), (b.height() / s).ln()]));
    }
    for r in centres {
        heat[r] = 1.0;
    }
    HeatTargets { heat, regression }
}

/// Box encoded by the regression at a cell.
pub fn decode_cell(i: usize, j: usize, stride: f64, reg: &[f64]) -> BBox {
    let cx = (j as f64 + 0.5 + reg[0]) * stride;
    let cy = (i as f64 + 0.5 + reg[1]) * stride;
    let w = reg[2].min(8.0).exp() * stride;
    let h = reg[3].min(8.0).exp() * stride;
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

/// Top-`k` local maxima (3x3 neighbourhood, per level) of the heat
/// probabilities across all levels, each decoded into a clipped box.
/// Ties keep level-major, row-major order.
#[allow(clippy::too_many_arguments)]
pub fn top_peaks(
    heat: &[f64],
    reg: &[f64],
    sides: &[(usize, usize); 5],
    strides: &[f64; 5],
    k: usize,
    img_w: f64,
    img_h: f64,
) -> Result<Vec<Proposal>> {
    if k == 0 {
        return Err(Error::Config("proposal count k must be positive".into()));
    }
    let mut cands: Vec<(f64, usize, usize, usize, usize)> = Vec::new();
    let mut off = 0;
    for (l, &(h, w)) in sides.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                let v = heat[off + i * w + j];
                let mut is_peak = true;
                'n: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if (di, dj) == (0, 0) || ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                            continue;
                        }
                        if heat[off + ni as usize * w + nj as usize] > v {
                            is_peak = false;
                            break 'n;
                        }
                    }
                }
                if is_peak {
                    cands.push((v, l, i, j, off + i * w + j));
                }
            }
        }
        off += h * w;
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(cands
        .into_iter()
        .take(k)
        .map(|(v, l, i, j, row)| Proposal {
            bbox: decode_cell(i, j, strides[l], &reg[row * 4..row * 4 + 4]).clip_to_frame(img_w, img_h),
            score: v.clamp(0.0, 1.0),
            level: Level::ALL[l],
        })
        .collect())
}
