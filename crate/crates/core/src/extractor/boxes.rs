use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest side a decoded box may have, in pixels.
pub const MIN_SIDE: f64 = 1.0;

/// Upper clamp on log-scale deltas before exponentiation.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000/16)

/// Axis-aligned box in image pixels, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::contract("box", format!("invalid box [{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Intersection with the frame `[0, w] x [0, h]`; may be degenerate.
    pub fn clipped(&self, w: f64, h: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    /// Clips to the frame and widens any side shorter than [`MIN_SIDE`].
    pub fn clip_to_frame(&self, w: f64, h: f64) -> BBox {
        let mut b = self.clipped(w, h);
        fix_side(&mut b.x1, &mut b.x2, w);
        fix_side(&mut b.y1, &mut b.y2, h);
        b
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

fn fix_side(lo: &mut f64, hi: &mut f64, limit: f64) {
    if *hi - *lo >= MIN_SIDE {
        return;
    }
    let c = (0.5 * (*lo + *hi)).clamp(0.5 * MIN_SIDE, limit - 0.5 * MIN_SIDE);
    *lo = c - 0.5 * MIN_SIDE;
    *hi = c + 0.5 * MIN_SIDE;
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Per-coordinate normalisation applied to regression deltas.
pub type DeltaStds = [f64; 4];

/// `(dx, dy, dw, dh)` taking `anchor` to `target`, divided by `stds`:
/// centre shift relative to anchor size and log size ratio.
pub fn encode_deltas(target: &BBox, anchor: &BBox, stds: &DeltaStds) -> [f64; 4] {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    [
        (tcx - acx) / aw / stds[0],
        (tcy - acy) / ah / stds[1],
        (target.width() / aw).ln() / stds[2],
        (target.height() / ah).ln() / stds[3],
    ]
}

/// Inverse of [`encode_deltas`] without clipping. Zero deltas return the
/// anchor bit for bit.
pub fn apply_deltas(anchor: &BBox, deltas: &[f64], stds: &DeltaStds) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let dx = deltas[0] * stds[0];
    let dy = deltas[1] * stds[1];
    let sw = (deltas[2] * stds[2]).min(MAX_LOG_SCALE).exp();
    let sh = (deltas[3] * stds[3]).min(MAX_LOG_SCALE).exp();
    let gx = 0.5 * aw * (1.0 - sw);
    let gy = 0.5 * ah * (1.0 - sh);
    BBox {
        x1: anchor.x1 + dx * aw + gx,
        y1: anchor.y1 + dy * ah + gy,
        x2: anchor.x2 + dx * aw - gx,
        y2: anchor.y2 + dy * ah - gy,
    }
}

/// [`apply_deltas`] followed by clipping to a `w x h` frame.
pub fn decode_deltas(anchor: &BBox, deltas: &[f64], stds: &DeltaStds, w: f64, h: f64) -> BBox {
    apply_deltas(anchor, deltas, stds).clip_to_frame(w, h)
}
