use super::boxes::BBox;
use crate::encoder::{FeaturePyramid, Level};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Pyramid level for a box: `floor(log2(sqrt(area) / base))`, clamped to
/// the available levels (finest first).
pub fn level_for_box(b: &BBox, base: f64) -> Level {
    let s = b.area().sqrt().max(1e-9);
    let l = (s / base).log2().floor();
    Level::ALL[l.clamp(0.0, 4.0) as usize]
}

/// Sample points (feature coordinates) of an `out x out` grid of sub-pixel
/// centres inside `b` on a map of the given stride.
pub fn crop_points(b: &BBox, out: usize, stride: f64) -> Vec<(f64, f64)> {
    let (bw, bh) = (b.width(), b.height());
    let mut pts = Vec::with_capacity(out * out);
    for i in 0..out {
        let y = b.y1 + (i as f64 + 0.5) * bh / out as f64;
        for j in 0..out {
            let x = b.x1 + (j as f64 + 0.5) * bw / out as f64;
            pts.push((y / stride - 0.5, x / stride - 0.5));
        }
    }
    pts
}

/// Tolerance on the one-pixel minimum area, absorbing rounding in boxes
/// clipped to the minimum side.
const AREA_EPS: f64 = 1e-9;

/// Whether `b`, clipped to the frame, covers at least one pixel of area.
pub fn is_croppable(b: &BBox, img_w: f64, img_h: f64) -> bool {
    b.clipped(img_w, img_h).area() >= 1.0 - AREA_EPS
}

fn checked(b: &BBox, img_w: f64, img_h: f64) -> Result<BBox> {
    let c = b.clipped(img_w, img_h);
    if c.area() < 1.0 - AREA_EPS {
        return Err(Error::DegenerateRegion { area: c.area() });
    }
    Ok(c)
}

/// Bilinear crop of a `[H,W,C]` map of the given stride: `[out*out, C]`.
pub fn roi_crop(g: &mut Graph<'_>, feat: Var, stride: f64, b: &BBox, out: usize, img_w: f64, img_h: f64) -> Result<Var> {
    if out == 0 {
        return Err(Error::Config("crop side must be at least 1".into()));
    }
    let c = checked(b, img_w, img_h)?;
    g.bilinear_sample(feat, &crop_points(&c, out, stride))
}

/// Crops every box from its area-selected level: `[n, out*out*C]` in input
/// order. One sampling op is recorded per level used.
pub fn roi_crop_batch(
    g: &mut Graph<'_>,
    pyr: &FeaturePyramid,
    boxes: &[BBox],
    out: usize,
    level_base: f64,
    img_w: f64,
    img_h: f64,
) -> Result<Var> {
    if boxes.is_empty() || out == 0 {
        return Err(Error::contract("roi_crop", "need at least one box and a positive crop side"));
    }
    let clipped: Vec<BBox> = boxes.iter().map(|b| checked(b, img_w, img_h)).collect::<Result<_>>()?;
    let mut parts = Vec::new();
    let mut placed = Vec::with_capacity(boxes.len());
    for lvl in Level::ALL {
        let members: Vec<usize> = (0..boxes.len())
            .filter(|&i| level_for_box(&clipped[i], level_base) == lvl)
            .collect();
        if members.is_empty() {
            continue;
        }
        let stride = pyr.strides[lvl.index()];
        let pts: Vec<(f64, f64)> = members
            .iter()
            .flat_map(|&i| crop_points(&clipped[i], out, stride))
            .collect();
        parts.push(g.bilinear_sample(pyr.level(lvl), &pts)?);
        placed.extend(members);
    }
    let stacked = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
    let width = out * out * pyr.channels;
    let stacked = g.reshape(stacked, &[boxes.len(), width])?;
    let mut pos = vec![0; boxes.len()];
    for (slot, &i) in placed.iter().enumerate() {
        pos[i] = slot;
    }
    if pos.iter().enumerate().all(|(i, &p)| i == p) {
        return Ok(stacked);
    }
    g.select_rows(stacked, &pos)
}
