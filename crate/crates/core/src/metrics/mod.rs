//! Detection AP/AR, exact-match METEOR and dense-captioning mAP.

pub mod ap;
pub mod densecap;
pub mod meteor;

use serde::{Deserialize, Serialize};

use crate::extractor::boxes::BBox;

pub use ap::{detection_ap, interpolated_ap, DetectionMetrics};
pub use densecap::{densecap_map, localization_ap, DenseCapMetrics, ThresholdGrid};
pub use meteor::meteor;

/// A scored predicted region with its generated text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: u64,
    pub bbox: BBox,
    pub text: String,
    pub score: f64,
}

/// A reference region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: BBox,
    pub text: String,
}
