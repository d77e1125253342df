//! JSON payloads of the HTTP API.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use born_core::engine::{self, CounterfactualResult, MapStats};
use born_core::networks::TargetCondition;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub dataset: String,
    pub classes: Vec<String>,
    /// `[height, width, channels]`.
    pub image_shape: [usize; 3],
    pub checkpoint: String,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    /// Base64 PNG.
    pub thumbnail: String,
    /// Base64 little-endian float32 pixels (channel-major), with `raw=true`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesResponse {
    pub split: String,
    pub total: usize,
    pub offset: usize,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct SamplesQuery {
    pub split: Option<String>,
    pub limit: Option<usize>,
    pub offset: Option<usize>,
    pub raw: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateRequest {
    #[serde(default)]
    pub sample_id: Option<String>,
    /// Base64 PNG used when no `sample_id` is given.
    #[serde(default)]
    pub image_b64: Option<String>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpolateRequest {
    pub sample_id: String,
    pub target_a: Vec<f64>,
    pub target_b: Vec<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratePayload {
    pub source_id: String,
    pub condition: TargetCondition,
    /// Base64 little-endian float32 map, channel-major.
    pub map_b64: String,
    /// `[channels, height, width]` of the raw map.
    pub map_shape: [usize; 3],
    /// Base64 PNG of the map under a symmetric blue-white-red colormap.
    pub map_png_b64: String,
    /// Base64 PNG of the synthesized image, clamped to [0, 1].
    pub synthesized_b64: String,
    pub logits_before: TargetCondition,
    pub logits_after: TargetCondition,
    pub map_stats: MapStats,
}

impl GeneratePayload {
    pub fn from_result(r: &CounterfactualResult) -> born_core::Result<Self> {
        let s = r.map.values.shape();
        Ok(Self {
            source_id: r.map.source_id.clone(),
            condition: r.map.condition.clone(),
            map_b64: B64.encode(engine::f32_blob(r.map.values.pixels())),
            map_shape: [s.channels, s.height, s.width],
            map_png_b64: B64.encode(engine::map_png(&r.map.values)?),
            synthesized_b64: B64.encode(engine::image_png(&r.synthesized)?),
            logits_before: r.logits_before.clone(),
            logits_after: r.logits_after.clone(),
            map_stats: r.map_stats(),
        })
    }

    /// Decodes the raw map.
    pub fn map_values(&self) -> born_core::Result<Vec<f32>> {
        let bytes = B64
            .decode(&self.map_b64)
            .map_err(|e| born_core::Error::Contract(format!("map_b64: {e}")))?;
        engine::f32_from_blob(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
