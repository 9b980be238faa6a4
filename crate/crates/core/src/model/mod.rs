//! End-to-end recognizer: a grouped-convolution residual backbone with either
//! a 64x13 classification head or a 32-query relative-detection head,
//! trained from scratch with hand-written backward passes.

mod checkpoint;
pub mod layers;
mod net;
mod synthetic;
pub mod optim;
mod train;

pub use checkpoint::{Checkpoint, CheckpointError, Provenance, StopReason};
pub use net::{feature_size, Network};
pub use synthetic::synthetic_samples;
pub use optim::{OptimizerKind, OptimizerSpec, Schedule};
pub use train::{
    evaluate_samples, load_training_data, train, EarlyStopping, EpochLog, LossKind, Sample, TrainError, TrainOptions, TrainRecipe,
    TrainingData,
};

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::chess::{placement_field, BoardState};
use crate::targets::{
    decode_classification, decode_detection, encode_classification, softmax, ClassTable, PredictionGrid, PredictionSet, QueryPrediction, DEFAULT_DETECTION_THRESHOLD,
    NUM_CLASSES, NUM_SQUARES,
};
use layers::Act;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    #[default]
    Classification,
    /// Experimental set-prediction head.
    RelativeDetection,
}

/// How backbone features reach the output projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadLayout {
    /// Global average pool, then one linear layer.
    #[default]
    GlobalPool,
    /// 1x1 conv to `channels`, ReLU, flatten the whole map, one linear layer.
    /// Keeps the spatial layout that pooling discards.
    Flatten { channels: usize },
    /// 1x1 conv to `channels`, ReLU, a learned map pooling locations into
    /// each output slot (square or query), then one linear layer shared by
    /// all slots. Recognition weights are shared across positions.
    Factorized { channels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    /// Bottleneck width: cardinality times the width per group.
    pub width: usize,
    pub out_channels: usize,
    /// Stride of the first block's grouped convolution.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub cardinality: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// 3x3 stride-2 max pooling after the stem.
    pub stem_pool: bool,
    pub stages: Vec<StageSpec>,
    /// Upper bound on the total parameter count, head included.
    #[serde(default)]
    pub parameter_budget: Option<usize>,
}

impl BackboneSpec {
    /// Stages of 32x`width_per_group`d style networks: bottleneck width
    /// doubles per stage, outputs are `4 * 64 * 2^i`.
    fn resnext(cardinality: usize, width_per_group: usize, blocks: &[usize]) -> Vec<StageSpec> {
        blocks
            .iter()
            .enumerate()
            .map(|(i, &b)| StageSpec {
                blocks: b,
                width: cardinality * width_per_group << i,
                out_channels: 256 << i,
                stride: if i == 0 { 1 } else { 2 },
            })
            .collect()
    }

    /// The 101-layer, cardinality 32, width 8 network.
    pub fn resnext101_32x8d() -> BackboneSpec {
        BackboneSpec {
            cardinality: 32,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            stages: Self::resnext(32, 8, &[3, 4, 23, 3]),
            parameter_budget: Some(88_800_000),
        }
    }

    /// Small network with the same block structure (cardinality 8, width 4
    /// per group) for CPU-scale runs.
    pub fn desk() -> BackboneSpec {
        BackboneSpec {
            cardinality: 8,
            stem_channels: 24,
            stem_kernel: 3,
            stem_stride: 2,
            stem_pool: false,
            stages: vec![
                StageSpec { blocks: 1, width: 32, out_channels: 48, stride: 2 },
                StageSpec { blocks: 1, width: 64, out_channels: 96, stride: 2 },
                StageSpec { blocks: 1, width: 128, out_channels: 160, stride: 2 },
            ],
            parameter_budget: Some(5_000_000),
        }
    }

    /// Weighted layers: stem, three per block, and the output projection.
    pub fn depth(&self) -> usize {
        2 + 3 * self.stages.iter().map(|s| s.blocks).sum::<usize>()
    }

    pub fn width_per_group(&self) -> usize {
        self.stages.first().map_or(0, |s| s.width / self.cardinality)
    }

    fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.out_channels)
    }

    fn parameter_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize, g: usize| o * (i / g) * k * k + o;
        let mut n = conv(3, self.stem_channels, self.stem_kernel, 1);
        let mut in_c = self.stem_channels;
        for st in &self.stages {
            for b in 0..st.blocks {
                n += conv(in_c, st.width, 1, 1) + conv(st.width, st.width, 3, self.cardinality) + conv(st.width, st.out_channels, 1, 1);
                if (b == 0 && st.stride != 1) || in_c != st.out_channels {
                    n += conv(in_c, st.out_channels, 1, 1);
                }
                in_c = st.out_channels;
            }
        }
        n
    }
}

/// Per-channel normalization applied to `[0, 1]` pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub head: HeadType,
    pub head_layout: HeadLayout,
    pub backbone: BackboneSpec,
    /// Square input side in pixels.
    pub input_resolution: u32,
    /// Query slots of the detection head.
    pub queries: usize,
    pub normalization: Normalization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            head: HeadType::Classification,
            head_layout: HeadLayout::GlobalPool,
            backbone: BackboneSpec::resnext101_32x8d(),
            input_resolution: 512,
            queries: crate::targets::NUM_QUERIES,
            normalization: Normalization::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input is {got_w}x{got_h}, the model expects {expected}x{expected}")]
    Resolution { expected: u32, got_w: u32, got_h: u32 },
    #[error("checkpoint has a {0:?} head")]
    WrongHead(HeadType),
    #[error("cannot read image {path}: {message}")]
    Image { path: String, message: String },
}

impl ModelConfig {
    /// Desk-scale classification model at `resolution` pixels.
    pub fn desk(resolution: u32) -> ModelConfig {
        ModelConfig {
            backbone: BackboneSpec::desk(),
            head_layout: HeadLayout::Factorized { channels: 64 },
            input_resolution: resolution,
            ..ModelConfig::default()
        }
    }

    pub fn output_dim(&self) -> usize {
        net::output_dim(self)
    }

    pub fn parameter_count(&self) -> usize {
        let feat = self.backbone.out_channels();
        let out = self.output_dim();
        let head = match self.head_layout {
            HeadLayout::GlobalPool => feat * out + out,
            HeadLayout::Flatten { channels } => {
                let s = feature_size(&self.backbone, self.input_resolution as usize);
                feat * channels + channels + channels * s * s * out + out
            }
            HeadLayout::Factorized { channels } => {
                let s = feature_size(&self.backbone, self.input_resolution as usize);
                let (slots, per_slot) = match self.head {
                    HeadType::Classification => (NUM_SQUARES, NUM_CLASSES),
                    HeadType::RelativeDetection => (self.queries, NUM_CLASSES + 2),
                };
                feat * channels + channels + slots * s * s + channels * per_slot + per_slot + slots * per_slot
            }
        };
        self.backbone.parameter_count() + head
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        let b = &self.backbone;
        if self.input_resolution == 0 {
            return err("input_resolution must be positive".into());
        }
        if self.head == HeadType::RelativeDetection && self.queries != crate::targets::NUM_QUERIES {
            return err(format!("the detection head uses exactly {} queries, got {}", crate::targets::NUM_QUERIES, self.queries));
        }
        if b.cardinality == 0 || b.stem_channels == 0 || b.stem_kernel == 0 || b.stem_stride == 0 {
            return err("backbone sizes must be positive".into());
        }
        for (i, s) in b.stages.iter().enumerate() {
            if s.blocks == 0 || s.width == 0 || s.out_channels == 0 || s.stride == 0 {
                return err(format!("stage {i}: sizes must be positive"));
            }
            if s.width % b.cardinality != 0 {
                return err(format!("stage {i}: width {} is not divisible by cardinality {}", s.width, b.cardinality));
            }
        }
        if let HeadLayout::Flatten { channels: 0 } | HeadLayout::Factorized { channels: 0 } = self.head_layout {
            return err("the head needs at least one channel".into());
        }
        if (self.input_resolution as usize) < b.stem_kernel {
            return err("input_resolution is smaller than the stem kernel".into());
        }
        if let Some(budget) = b.parameter_budget {
            let n = self.parameter_count();
            if n > budget {
                return err(format!("{n} parameters exceed the budget of {budget}"));
            }
        }
        Ok(())
    }
}

/// Square resize to the model input, a no-op when the size already matches.
pub fn preprocess_image(image: &RgbImage, resolution: u32) -> RgbImage {
    if image.width() == resolution && image.height() == resolution {
        image.clone()
    } else {
        image::imageops::resize(image, resolution, resolution, FilterType::Triangle)
    }
}

/// Interleaved RGB bytes of equal-sized square images to a normalized NCHW
/// batch.
pub(crate) fn to_input(images: &[&[u8]], resolution: usize, norm: &Normalization) -> Act {
    let hw = resolution * resolution;
    let mut act = Act::zeros(images.len(), 3, resolution, resolution);
    for (i, px) in images.iter().enumerate() {
        debug_assert_eq!(px.len(), hw * 3);
        let dst = &mut act.data[i * 3 * hw..(i + 1) * 3 * hw];
        for c in 0..3 {
            let (m, s) = (norm.mean[c], norm.std[c]);
            for (j, d) in dst[c * hw..(c + 1) * hw].iter_mut().enumerate() {
                *d = (px[j * 3 + c] as f32 / 255.0 - m) / s;
            }
        }
    }
    act
}

/// Raw detection outputs to query predictions; coordinates pass through a
/// sigmoid scaled to the `[0, 7]` grid.
pub(crate) fn queries_from_raw(raw: &[f32]) -> PredictionSet {
    let stride = NUM_CLASSES + 2;
    let queries = raw
        .chunks(stride)
        .map(|q| {
            let mut class_scores = [0.0; NUM_CLASSES];
            class_scores.copy_from_slice(&q[..NUM_CLASSES]);
            let sig = |z: f32| 7.0 / (1.0 + (-z).exp());
            QueryPrediction { class_scores, coord: [sig(q[NUM_CLASSES]), sig(q[NUM_CLASSES + 1])] }
        })
        .collect();
    PredictionSet::new(queries).expect("head emits 32 queries")
}

fn check_input(image: &RgbImage, ckpt: &Checkpoint, head: HeadType) -> Result<(), ModelError> {
    if ckpt.config.head != head {
        return Err(ModelError::WrongHead(ckpt.config.head));
    }
    let r = ckpt.config.input_resolution;
    if image.width() != r || image.height() != r {
        return Err(ModelError::Resolution { expected: r, got_w: image.width(), got_h: image.height() });
    }
    Ok(())
}

/// Raw outputs for a batch of already preprocessed images.
pub fn forward_batch(ckpt: &Checkpoint, images: &[&RgbImage]) -> Vec<Vec<f32>> {
    let pixels: Vec<&[u8]> = images.iter().map(|i| i.as_raw().as_slice()).collect();
    let out = ckpt.network.forward(to_input(&pixels, ckpt.config.input_resolution as usize, &ckpt.config.normalization));
    out.chunks(ckpt.network.out_dim).map(<[f32]>::to_vec).collect()
}

/// 64x13 square scores for an image already at the model resolution.
pub fn forward_classification(image: &RgbImage, ckpt: &Checkpoint) -> Result<PredictionGrid, ModelError> {
    check_input(image, ckpt, HeadType::Classification)?;
    let raw = forward_batch(ckpt, &[image]).remove(0);
    Ok(PredictionGrid::new(raw).expect("head emits 64x13 scores"))
}

/// 32 query predictions for an image already at the model resolution.
pub fn forward_detection(image: &RgbImage, ckpt: &Checkpoint) -> Result<PredictionSet, ModelError> {
    check_input(image, ckpt, HeadType::RelativeDetection)?;
    Ok(queries_from_raw(&forward_batch(ckpt, &[image])[0]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// FEN piece-placement field.
    pub placement: String,
    /// Full FEN with default bookkeeping fields; side to move is not
    /// observable from the image and always reads white.
    pub fen: String,
    pub side_to_move_known: bool,
    /// Canonical class id per square in grid order (a8 first).
    pub labels: Vec<u8>,
    /// Whether the placement satisfies the board invariants.
    pub valid: bool,
    /// Per square in grid order (a8 first): probability of the chosen class.
    pub max_probabilities: Vec<f32>,
    pub mean_confidence: f32,
    pub min_confidence: f32,
}

fn summarize(board: &BoardState, valid: bool, max_probabilities: Vec<f32>) -> Prediction {
    let placement = placement_field(board);
    let n = max_probabilities.len() as f32;
    Prediction {
        fen: format!("{placement} w - - 0 1"),
        placement,
        labels: encode_classification(board, &ClassTable::canonical()).labels.to_vec(),
        side_to_move_known: false,
        valid,
        mean_confidence: max_probabilities.iter().sum::<f32>() / n,
        min_confidence: max_probabilities.iter().copied().fold(f32::INFINITY, f32::min),
        max_probabilities,
    }
}

/// Decodes raw head outputs into a prediction summary.
pub fn decode_output(raw: &[f32], ckpt: &Checkpoint) -> Prediction {
    let table: &ClassTable = &ckpt.class_table;
    match ckpt.config.head {
        HeadType::Classification => {
            let grid = PredictionGrid::new(raw.to_vec()).expect("head emits 64x13 scores");
            let d = decode_classification(&grid, table);
            summarize(&d.board, d.valid, grid.max_probabilities().to_vec())
        }
        HeadType::RelativeDetection => {
            let set = queries_from_raw(raw);
            let d = decode_detection(&set, table, DEFAULT_DETECTION_THRESHOLD);
            // A cell's confidence is the best surviving query on it; cells no
            // query claims count as confidently empty.
            let mut probs = vec![1.0f32; NUM_SQUARES];
            let mut claimed = [false; NUM_SQUARES];
            for q in set.queries() {
                let p = softmax(&q.class_scores);
                let best = p.iter().copied().fold(0.0, f32::max);
                let cell = crate::chess::GridCoord { x: crate::targets::round_coord(q.coord[0]), y: crate::targets::round_coord(q.coord[1]) }.flat();
                probs[cell] = if claimed[cell] { probs[cell].max(best) } else { best };
                claimed[cell] = true;
            }
            summarize(&d.board, d.valid, probs)
        }
    }
}

/// Reads, resizes and decodes one image.
pub fn predict(ckpt: &Checkpoint, image_path: &Path) -> Result<Prediction, ModelError> {
    let img = image::open(image_path)
        .map_err(|e| ModelError::Image { path: image_path.display().to_string(), message: e.to_string() })?
        .to_rgb8();
    let img = preprocess_image(&img, ckpt.config.input_resolution);
    let raw = forward_batch(ckpt, &[&img]).remove(0);
    Ok(decode_output(&raw, ckpt))
}
