//! The full region-to-text model: encoder, foreground extractor and text
//! decoder over one parameter store.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PredictionRecord, RgbImage};
use crate::decoder::{DecoderConfig, DetectedObject, TextDecoder, TextTarget};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::extractor::{iou, is_croppable, BBox, Extractor, ExtractorConfig, ExtractorLoss, ExtractorPlan};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::tokenizer::{TokenId, Vocabulary};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub extractor: ExtractorConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.extractor.validate()?;
        self.decoder.validate()
    }
}

/// Weights of the two loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub object: f64,
    pub text: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { object: 1.0, text: 1.0 }
    }
}

/// A ground-truth object with tokenised descriptions.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetObject {
    pub bbox: BBox,
    /// `(task, ids)` pairs.
    pub texts: Vec<(usize, Vec<TokenId>)>,
}

/// Everything random in one image's loss: the extractor's sampled boxes
/// and the decoder's regions and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPlan {
    pub extractor: ExtractorPlan,
    pub regions: Vec<BBox>,
    pub targets: Vec<TextTarget>,
}

/// Scalar loss nodes of one image.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub object: ExtractorLoss,
    pub text: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub extractor: Extractor,
    pub decoder: TextDecoder,
}

impl Model {
    /// Fresh parameters drawn from `seed`. Parameter names and order are a
    /// pure function of the config and vocabulary size.
    pub fn new(cfg: &ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &cfg.encoder, &mut rng)?;
        let c = cfg.encoder.embed_dim;
        let extractor = Extractor::new(&mut store, &cfg.extractor, c, &mut rng)?;
        let decoder = TextDecoder::new(&mut store, &cfg.decoder, c, vocab.len(), &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            store,
            encoder,
            extractor,
            decoder,
        })
    }

    pub fn encode(&self, g: &mut Graph<'_>, image: &Tensor) -> Result<FeaturePyramid> {
        let x = g.constant(image.clone())?;
        self.encoder.encode(g, x)
    }

    /// Tokenises every description of `objects`.
    pub fn targets(&self, objects: &[crate::data::Object]) -> Vec<TargetObject> {
        objects
            .iter()
            .map(|o| TargetObject {
                bbox: o.bbox,
                texts: o
                    .texts
                    .iter()
                    .map(|(t, s)| (*t, self.vocab.encode(s)))
                    .filter(|(_, ids)| !ids.is_empty())
                    .collect(),
            })
            .collect()
    }

    /// Draws the decoder regions: every ground-truth box plus up to `extra`
    /// final-stage boxes overlapping a ground truth by at least the last
    /// stage threshold. Each region takes one of its object's descriptions,
    /// with the task drawn from `mixture` (renormalised over the tasks the
    /// object has).
    fn plan_regions(
        &self,
        objects: &[TargetObject],
        final_boxes: &[BBox],
        extra: usize,
        mixture: &[f64],
        frame: (f64, f64),
        rng: &mut impl Rng,
    ) -> (Vec<BBox>, Vec<TextTarget>) {
        let gts: Vec<BBox> = objects.iter().map(|o| o.bbox).collect();
        let thresh = *self.cfg.extractor.stage_iou.last().unwrap_or(&0.7);
        let mut owners: Vec<(BBox, usize)> = (0..objects.len()).map(|i| (gts[i], i)).collect();
        let mut matched: Vec<(BBox, usize)> = final_boxes
            .iter()
            .filter_map(|b| {
                let (best, v) = gts
                    .iter()
                    .enumerate()
                    .map(|(i, g)| (i, iou(b, g)))
                    .fold((0, -1.0), |a, x| if x.1 > a.1 { x } else { a });
                (v >= thresh && is_croppable(b, frame.0, frame.1)).then_some((*b, best))
            })
            .collect();
        matched.shuffle(rng);
        matched.truncate(extra);
        owners.extend(matched);
        let mut regions = Vec::new();
        let mut targets = Vec::new();
        for (b, i) in owners {
            let texts = &objects[i].texts;
            let weights: Vec<f64> = texts.iter().map(|(t, _)| mixture.get(t - 1).copied().unwrap_or(0.0)).collect();
            let sum: f64 = weights.iter().sum();
            if sum <= 0.0 {
                continue;
            }
            let mut u = rng.gen::<f64>() * sum;
            let mut pick = texts.len() - 1;
            for (k, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = k;
                    break;
                }
                u -= w;
            }
            regions.push(b);
            targets.push(TextTarget { ids: texts[pick].1.clone(), task: texts[pick].0 });
        }
        (regions, targets)
    }

    /// Weighted `L_o + L_t` for one image. With `plan` every sampled box,
    /// region and task is reused, making the loss a deterministic function
    /// of the parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn image_loss(
        &self,
        g: &mut Graph<'_>,
        image: &Tensor,
        objects: &[TargetObject],
        weights: LossWeights,
        mixture: &[f64],
        extra_regions: usize,
        plan: Option<&LossPlan>,
        rng: &mut impl Rng,
    ) -> Result<(LossTerms, LossPlan)> {
        let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
        let pyr = self.encode(g, image)?;
        let gts: Vec<BBox> = objects.iter().map(|o| o.bbox).collect();
        let (object, ext_plan) = self.extractor.training_loss(g, &pyr, &gts, w, h, plan.map(|p| &p.extractor), rng)?;
        let (regions, targets) = match plan {
            Some(p) => (p.regions.clone(), p.targets.clone()),
            None if weights.text == 0.0 || objects.is_empty() => (Vec::new(), Vec::new()),
            None => self.plan_regions(objects, &ext_plan.final_boxes, extra_regions, mixture, (w, h), rng),
        };
        let mut total = g.scale(object.total, weights.object)?;
        let text = if regions.is_empty() {
            None
        } else {
            let obj = self
                .decoder
                .object_tokens(g, &pyr, &regions, self.cfg.extractor.level_base, w, h)?;
            let lt = self.decoder.lm_loss(g, obj, &targets, &self.vocab)?;
            let weighted = g.scale(lt, weights.text)?;
            total = g.add(total, weighted)?;
            Some(lt)
        };
        Ok((
            LossTerms { total, object, text },
            LossPlan {
                extractor: ext_plan,
                regions,
                targets,
            },
        ))
    }

    /// Full inference on one image: detection, then branch-first generation
    /// with the begin token of `task` for every kept box.
    pub fn detect_and_describe(&self, image: &RgbImage, task: usize, beam: usize) -> Result<Vec<DetectedObject>> {
        self.decoder.begin_token(&self.vocab, task)?;
        if beam == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        let mut g = Graph::inference(&self.store);
        let t = image.to_tensor();
        let (w, h) = (image.width as f64, image.height as f64);
        let pyr = self.encode(&mut g, &t)?;
        let objs = self.extractor.detect(&mut g, &pyr, w, h)?;
        let objs: Vec<_> = objs.into_iter().filter(|o| is_croppable(&o.bbox, w, h)).collect();
        if objs.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<BBox> = objs.iter().map(|o| o.bbox).collect();
        let tokens = self
            .decoder
            .object_tokens(&mut g, &pyr, &boxes, self.cfg.extractor.level_base, w, h)?;
        let cands = self
            .decoder
            .generate_branch_first(&mut g, tokens, boxes.len(), task, beam, &self.vocab)?;
        Ok(objs
            .into_iter()
            .zip(cands)
            .map(|(o, c)| DetectedObject::new(o.bbox, o.objectness, c, task))
            .collect())
    }

    /// One prediction record per (box, candidate).
    /// Greedy descriptions of the given boxes under `task`.
    pub fn describe_boxes(&self, image: &RgbImage, boxes: &[BBox], task: usize) -> Result<Vec<String>> {
        self.decoder.begin_token(&self.vocab, task)?;
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference(&self.store);
        let (w, h) = (image.width as f64, image.height as f64);
        let pyr = self.encode(&mut g, &image.to_tensor())?;
        let tokens = self
            .decoder
            .object_tokens(&mut g, &pyr, boxes, self.cfg.extractor.level_base, w, h)?;
        let cands = self.decoder.generate_greedy(&mut g, tokens, boxes.len(), task, &self.vocab)?;
        cands.iter().map(|c| self.vocab.decode(&c.token_ids)).collect()
    }

    pub fn predict(&self, image_id: u64, image: &RgbImage, task: usize, beam: usize) -> Result<Vec<PredictionRecord>> {
        let mut out = Vec::new();
        for d in self.detect_and_describe(image, task, beam)? {
            for (c, &score) in d.candidates.iter().zip(&d.final_scores) {
                out.push(PredictionRecord {
                    image_id,
                    x1: d.bbox.x1,
                    y1: d.bbox.y1,
                    x2: d.bbox.x2,
                    y2: d.bbox.y2,
                    score,
                    text: self.vocab.decode(&c.token_ids)?,
                    task,
                });
            }
        }
        Ok(out)
    }
}
