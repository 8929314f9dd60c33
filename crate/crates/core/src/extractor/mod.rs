//! Class-agnostic foreground extraction: centre-heatmap proposals, a
//! multi-stage cascade with binary foreground heads, and soft-NMS.

pub mod assign;
pub mod boxes;
pub mod cascade;
pub mod nms;
pub mod proposals;
pub mod roi;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Var};

pub use assign::{assign_targets, assign_with_threshold, Assignment, STAGE_IOU};
pub use boxes::{decode_deltas, encode_deltas, iou, BBox, DeltaStds};
pub use cascade::{objectness, CascadeStage, ForegroundObject};
pub use nms::{nms, soft_nms, Scored};
pub use proposals::{heat_targets, top_peaks, Proposal, ProposalHead};
pub use roi::{is_croppable, level_for_box, roi_crop, roi_crop_batch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub head_hidden: usize,
    pub proposals_train: usize,
    pub proposals_test: usize,
    pub roi_side: usize,
    pub stage_hidden: usize,
    pub stage_iou: Vec<f64>,
    pub stage_stds: Vec<DeltaStds>,
    pub rois_per_image: usize,
    pub fg_fraction: f64,
    /// Box side (sqrt area) that maps to the finest pyramid level.
    pub level_base: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub soft_nms_sigma: f64,
    pub score_floor: f64,
    pub max_detections: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            head_hidden: 64,
            proposals_train: 256,
            proposals_test: 64,
            roi_side: 4,
            stage_hidden: 64,
            stage_iou: STAGE_IOU.to_vec(),
            stage_stds: vec![
                [0.1, 0.1, 0.2, 0.2],
                [0.05, 0.05, 0.1, 0.1],
                [0.033, 0.033, 0.067, 0.067],
            ],
            rois_per_image: 32,
            fg_fraction: 0.25,
            level_base: 8.0,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            soft_nms_sigma: nms::SOFT_NMS_SIGMA,
            score_floor: nms::SOFT_NMS_FLOOR,
            max_detections: 16,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_iou.is_empty() || self.stage_iou.len() != self.stage_stds.len() {
            return Err(Error::Config(format!(
                "cascade needs one delta std per stage ({} thresholds, {} stds)",
                self.stage_iou.len(),
                self.stage_stds.len()
            )));
        }
        if self.proposals_train == 0 || self.proposals_test == 0 {
            return Err(Error::Config("proposal counts must be positive".into()));
        }
        if self.roi_side == 0 || self.rois_per_image == 0 || self.max_detections == 0 {
            return Err(Error::Config("roi_side, rois_per_image and max_detections must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) || self.soft_nms_sigma <= 0.0 {
            return Err(Error::Config("fg_fraction must lie in [0,1] and soft_nms_sigma be positive".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.stage_iou.len()
    }
}

/// Discrete training-time decisions of one forward pass. Replaying a plan
/// makes the loss a smooth function of the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorPlan {
    /// Input boxes of every stage; `stage_boxes[0]` are the sampled RoIs.
    pub stage_boxes: Vec<Vec<BBox>>,
    /// Output boxes of the last stage.
    pub final_boxes: Vec<BBox>,
}

/// Loss terms of the extractor on one image.
#[derive(Clone, Debug)]
pub struct ExtractorLoss {
    pub total: Var,
    pub heat: Var,
    pub size: Option<Var>,
    pub stage_cls: Vec<Var>,
    pub stage_box: Vec<Option<Var>>,
}

#[derive(Clone, Debug)]
pub struct Extractor {
    pub cfg: ExtractorConfig,
    pub proposal: ProposalHead,
    pub stages: Vec<CascadeStage>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Extractor {
    pub fn new(store: &mut ParamStore, cfg: &ExtractorConfig, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let proposal = ProposalHead::new(store, channels, cfg.head_hidden, rng);
        let input = cfg.roi_side * cfg.roi_side * channels;
        let stages = (0..cfg.stages())
            .map(|s| CascadeStage::new(store, &format!("cascade{s}"), input, cfg.stage_hidden, rng))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            proposal,
            stages,
        })
    }

    /// Top-`k` proposals of a pyramid.
    pub fn generate_proposals(
        &self,
        g: &mut Graph<'_>,
        pyr: &FeaturePyramid,
        k: usize,
        img_w: f64,
        img_h: f64,
    ) -> Result<Vec<Proposal>> {
        let head = self.proposal.forward(g, pyr)?;
        let heat: Vec<f64> = g.data(head.heat).iter().map(|&z| sigmoid(z)).collect();
        top_peaks(&heat, g.data(head.reg), &pyr.sides, &pyr.strides, k, img_w, img_h)
    }

    /// Runs every stage on `boxes`, feeding each stage's decoded boxes to the
    /// next. Objectness is the mean stage probability; the box comes from the
    /// last stage.
    pub fn cascade_refine(
        &self,
        g: &mut Graph<'_>,
        pyr: &FeaturePyramid,
        boxes: &[BBox],
        img_w: f64,
        img_h: f64,
    ) -> Result<Vec<ForegroundObject>> {
        if boxes.is_empty() {
            return Err(Error::contract("cascade_refine", "no proposals"));
        }
        let mut cur = boxes.to_vec();
        let mut scores = vec![Vec::with_capacity(self.stages.len()); boxes.len()];
        for (t, stage) in self.stages.iter().enumerate() {
            let crops = roi_crop_batch(g, pyr, &cur, self.cfg.roi_side, self.cfg.level_base, img_w, img_h)?;
            let out = stage.forward(g, crops)?;
            let d = g.data(out.deltas);
            for (i, z) in g.data(out.logits).iter().enumerate() {
                scores[i].push(sigmoid(*z));
            }
            let stds = &self.cfg.stage_stds[t];
            cur = cur
                .iter()
                .enumerate()
                .map(|(i, b)| decode_deltas(b, &d[i * 4..i * 4 + 4], stds, img_w, img_h))
                .collect();
        }
        cur.into_iter()
            .zip(scores)
            .map(|(b, s)| ForegroundObject::new(b, s))
            .collect()
    }

    /// Inference: proposals, cascade, soft-NMS and the detection cap.
    pub fn detect(&self, g: &mut Graph<'_>, pyr: &FeaturePyramid, img_w: f64, img_h: f64) -> Result<Vec<ForegroundObject>> {
        let props = self.generate_proposals(g, pyr, self.cfg.proposals_test, img_w, img_h)?;
        let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        let objs = self.cascade_refine(g, pyr, &boxes, img_w, img_h)?;
        let mut kept = soft_nms(objs, self.cfg.soft_nms_sigma, self.cfg.score_floor);
        kept.truncate(self.cfg.max_detections);
        Ok(kept)
    }

    /// Samples stage-0 RoIs from proposals plus ground truth: up to
    /// `fg_fraction` foreground, the rest background.
    fn sample_rois(&self, proposals: &[BBox], gts: &[BBox], rng: &mut impl Rng) -> Vec<BBox> {
        let mut cands: Vec<BBox> = proposals.to_vec();
        cands.extend_from_slice(gts);
        let labels = assign_with_threshold(&cands, gts, self.cfg.stage_iou[0]);
        let mut fg: Vec<usize> = (0..cands.len()).filter(|&i| labels[i].is_foreground()).collect();
        let mut bg: Vec<usize> = (0..cands.len()).filter(|&i| !labels[i].is_foreground()).collect();
        fg.shuffle(rng);
        bg.shuffle(rng);
        let n = self.cfg.rois_per_image;
        let n_fg = fg.len().min((self.cfg.fg_fraction * n as f64).round() as usize);
        let n_bg = bg.len().min(n - n_fg);
        fg.truncate(n_fg);
        bg.truncate(n_bg);
        fg.extend(bg);
        fg.into_iter().map(|i| cands[i]).collect()
    }

    /// Extractor loss on one image: focal heat loss and size regression on
    /// the proposal head, then per-stage binary cross-entropy and smooth-L1
    /// box regression. With `plan` the recorded boxes are reused, otherwise
    /// they are derived from this forward pass (and `rng` for sampling).
    #[allow(clippy::too_many_arguments)]
    pub fn training_loss(
        &self,
        g: &mut Graph<'_>,
        pyr: &FeaturePyramid,
        gts: &[BBox],
        img_w: f64,
        img_h: f64,
        plan: Option<&ExtractorPlan>,
        rng: &mut impl Rng,
    ) -> Result<(ExtractorLoss, ExtractorPlan)> {
        let cfg = &self.cfg;
        let head = self.proposal.forward(g, pyr)?;
        let targets = heat_targets(&pyr.sides, &pyr.strides, gts, cfg.level_base);
        let npos = targets.regression.len().max(1) as f64;
        let focal = g.focal_loss(head.heat, &targets.heat, cfg.focal_alpha, cfg.focal_beta)?;
        let heat = g.scale(focal, 1.0 / npos)?;
        let size = if targets.regression.is_empty() {
            None
        } else {
            let rows: Vec<usize> = targets.regression.iter().map(|r| r.0).collect();
            let want: Vec<f64> = targets.regression.iter().flat_map(|r| r.1).collect();
            let pred = g.select_rows(head.reg, &rows)?;
            let l = g.smooth_l1(pred, &want, 0.1)?;
            let l = g.sum(l)?;
            Some(g.scale(l, 1.0 / npos)?)
        };

        let rois = match plan {
            Some(p) => p.stage_boxes[0].clone(),
            None => {
                let probs: Vec<f64> = g.data(head.heat).iter().map(|&z| sigmoid(z)).collect();
                let props = top_peaks(&probs, g.data(head.reg), &pyr.sides, &pyr.strides, cfg.proposals_train, img_w, img_h)?;
                let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
                self.sample_rois(&boxes, gts, rng)
            }
        };

        let mut stage_boxes = vec![rois];
        let mut stage_cls = Vec::new();
        let mut stage_box = Vec::new();
        let mut final_boxes = Vec::new();
        for (t, stage) in self.stages.iter().enumerate() {
            let cur = stage_boxes[t].clone();
            let n = cur.len();
            let crops = roi_crop_batch(g, pyr, &cur, cfg.roi_side, cfg.level_base, img_w, img_h)?;
            let out = stage.forward(g, crops)?;
            let labels = assign_with_threshold(&cur, gts, cfg.stage_iou[t]);
            let y: Vec<f64> = labels.iter().map(|a| f64::from(u8::from(a.is_foreground()))).collect();
            stage_cls.push(g.bce_with_logits(out.logits, &y, None)?);
            let stds = &cfg.stage_stds[t];
            let fg: Vec<usize> = (0..n).filter(|&i| labels[i].is_foreground()).collect();
            stage_box.push(if fg.is_empty() {
                None
            } else {
                let want: Vec<f64> = fg
                    .iter()
                    .flat_map(|&i| encode_deltas(&gts[labels[i].gt().unwrap_or(0)], &cur[i], stds))
                    .collect();
                let pred = g.select_rows(out.deltas, &fg)?;
                let l = g.smooth_l1(pred, &want, 1.0)?;
                let l = g.sum(l)?;
                Some(g.scale(l, 1.0 / n as f64)?)
            });
            let next = match plan {
                Some(p) if t + 1 < p.stage_boxes.len() => p.stage_boxes[t + 1].clone(),
                Some(p) => p.final_boxes.clone(),
                None => {
                    let d = g.data(out.deltas);
                    cur.iter()
                        .enumerate()
                        .map(|(i, b)| decode_deltas(b, &d[i * 4..i * 4 + 4], stds, img_w, img_h))
                        .collect()
                }
            };
            if t + 1 < self.stages.len() {
                stage_boxes.push(next);
            } else {
                final_boxes = next;
            }
        }

        let mut terms = vec![heat];
        terms.extend(size);
        terms.extend(stage_cls.iter().copied());
        terms.extend(stage_box.iter().flatten().copied());
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        Ok((
            ExtractorLoss {
                total,
                heat,
                size,
                stage_cls,
                stage_box,
            },
            ExtractorPlan {
                stage_boxes,
                final_boxes,
            },
        ))
    }
}
