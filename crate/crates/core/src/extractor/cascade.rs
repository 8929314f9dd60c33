use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::boxes::BBox;
use super::nms::Scored;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Graph, ParamStore, Var};

/// Init std of the output layer; keeps initial deltas near zero.
const OUT_STD: f64 = 0.001;

/// A refined class-agnostic detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForegroundObject {
    pub bbox: BBox,
    pub objectness: f64,
    pub stage_scores: Vec<f64>,
}

impl ForegroundObject {
    pub fn new(bbox: BBox, stage_scores: Vec<f64>) -> Result<Self> {
        if stage_scores.is_empty() {
            return Err(Error::contract("cascade_refine", "at least one stage score is required"));
        }
        Ok(Self {
            bbox,
            objectness: objectness(&stage_scores),
            stage_scores,
        })
    }
}

/// Mean of per-stage foreground probabilities.
pub fn objectness(stage_scores: &[f64]) -> f64 {
    stage_scores.iter().sum::<f64>() / stage_scores.len() as f64
}

impl Scored for ForegroundObject {
    fn bbox(&self) -> &BBox {
        &self.bbox
    }
    fn score(&self) -> f64 {
        self.objectness
    }
    fn set_score(&mut self, s: f64) {
        self.objectness = s;
    }
}

/// One cascade stage: two hidden layers over the flattened crop, then a
/// foreground logit and four box deltas.
#[derive(Clone, Debug)]
pub struct CascadeStage {
    pub fc1: Linear,
    pub fc2: Linear,
    pub out: Linear,
}

/// Stage outputs for `n` boxes.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    /// `[n]` foreground logits.
    pub logits: Var,
    /// `[n, 4]` normalised deltas.
    pub deltas: Var,
}

impl CascadeStage {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, hidden, rng),
            out: Linear::with_std(store, &format!("{name}.out"), hidden, 5, OUT_STD, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, crops: Var) -> Result<StageOutput> {
        let n = g.shape(crops)[0];
        let h = self.fc1.forward(g, crops)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, h)?;
        let h = g.gelu(h)?;
        let o = self.out.forward(g, h)?;
        let logits = g.gather(o, Arc::new((0..n).map(|r| r * 5).collect()), &[n])?;
        let deltas = g.gather(o, Arc::new((0..n).flat_map(|r| r * 5 + 1..r * 5 + 5).collect()), &[n, 4])?;
        Ok(StageOutput { logits, deltas })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objectness_is_stage_mean() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let o = ForegroundObject::new(b, vec![0.9, 0.8, 0.7]).unwrap();
        assert!((o.objectness - 0.8).abs() < 1e-15);
        assert!(ForegroundObject::new(b, vec![]).is_err());
    }
}
