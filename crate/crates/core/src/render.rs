//! SVG annotation overlays: the image as an embedded PNG plus one labelled
//! rectangle per prediction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use base64::Engine;

use crate::data::{Dataset, PredictionRecord, RgbImage};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderReport {
    pub written: Vec<PathBuf>,
    /// Prediction image ids with no image in the dataset.
    pub skipped: Vec<u64>,
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Parse(format!("png: {e}")))?;
        w.write_image_data(&image.pixels).map_err(|e| Error::Parse(format!("png: {e}")))?;
    }
    Ok(buf)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// SVG document for one image and its records (all drawn).
pub fn svg_document(image: &RgbImage, records: &[&PredictionRecord]) -> Result<String> {
    let png = base64::engine::general_purpose::STANDARD.encode(encode_png(image)?);
    let (w, h) = (image.width, image.height);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {w} {h}">"#,
        w * 8,
        h * 8
    );
    let _ = writeln!(
        s,
        r#"<image x="0" y="0" width="{w}" height="{h}" style="image-rendering:pixelated" href="data:image/png;base64,{png}"/>"#
    );
    for r in records {
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="lime" stroke-width="0.4"/>"#,
            r.x1,
            r.y1,
            r.x2 - r.x1,
            r.y2 - r.y1
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="2.5" fill="white" stroke="black" stroke-width="0.1">{} ({:.2})</text>"#,
            r.x1,
            (r.y1 - 0.5).max(2.5),
            escape(&r.text),
            r.score
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `<image id>.svg` into `out_dir` for every dataset image, drawing
/// records scoring at least `threshold`.
pub fn render(preds: &[PredictionRecord], data: &Dataset, out_dir: &Path, threshold: f64) -> Result<RenderReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let known: BTreeSet<u64> = data.images.iter().map(|im| im.id).collect();
    let mut by_image: BTreeMap<u64, Vec<&PredictionRecord>> = BTreeMap::new();
    let mut skipped = BTreeSet::new();
    for r in preds {
        if !known.contains(&r.image_id) {
            skipped.insert(r.image_id);
        } else if r.score >= threshold {
            by_image.entry(r.image_id).or_default().push(r);
        }
    }
    let mut report = RenderReport {
        written: Vec::new(),
        skipped: skipped.into_iter().collect(),
    };
    for s in data.samples()? {
        let recs = by_image.remove(&s.id).unwrap_or_default();
        let doc = svg_document(&s.image, &recs)?;
        let path = out_dir.join(format!("{}.svg", s.id));
        fs::write(&path, doc).map_err(|e| Error::io(&path, e))?;
        report.written.push(path);
    }
    Ok(report)
}
