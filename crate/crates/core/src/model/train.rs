use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Provenance, StopReason};
use super::net::Network;
use super::optim::{clip_grad_norm, Adam, OptimizerKind, OptimizerSpec, Schedule};
use super::{preprocess_image, queries_from_raw, to_input, HeadType, ModelConfig, ModelError};
use crate::dataset::{AnnotationSet, SplitLabel};
use crate::eval::{incorrect_squares, MetricCounts};
use crate::matching::{set_loss_with_gradient, LossWeights};
use crate::targets::{board_from_target, encode_classification, ClassTable, ClassificationTarget, DetectionTargetSet, NUM_CLASSES, NUM_SQUARES};

/// One preprocessed image and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: u64,
    pub game_id: u64,
    pub move_index: u32,
    /// Interleaved RGB at the training resolution.
    pub pixels: Vec<u8>,
    pub target: ClassificationTarget,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingData {
    pub resolution: u32,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    /// Cross-entropy summed over the 64 squares, averaged over the batch.
    CrossEntropySum,
    /// Bipartite set-matching loss of the detection head.
    SetMatching { weights: LossWeights },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopping {
    /// Epochs without a new best validation per-square error rate.
    pub patience: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRecipe {
    pub epochs: u32,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub schedule: Schedule,
    /// Written as `false` when off, since TOML has no null.
    #[serde(with = "switchable")]
    pub early_stopping: Option<EarlyStopping>,
    /// Global gradient-norm threshold.
    pub grad_clip: Option<f64>,
    pub loss: LossKind,
}

mod switchable {
    use super::EarlyStopping;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Flag(bool),
        On(EarlyStopping),
    }

    pub fn serialize<S: Serializer>(v: &Option<EarlyStopping>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(e) => e.serialize(s),
            None => s.serialize_bool(false),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<EarlyStopping>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None | Some(Repr::Flag(false)) => Ok(None),
            Some(Repr::Flag(true)) => Err(serde::de::Error::custom("early_stopping = true needs a patience; give a table instead")),
            Some(Repr::On(e)) => Ok(Some(e)),
        }
    }
}

impl Default for TrainRecipe {
    fn default() -> Self {
        TrainRecipe::classification()
    }
}

impl TrainRecipe {
    pub fn classification() -> TrainRecipe {
        TrainRecipe {
            epochs: 200,
            batch_size: 8,
            optimizer: OptimizerSpec::default(),
            schedule: Schedule::MultiStep { milestones: vec![100], gamma: 0.1 },
            early_stopping: Some(EarlyStopping { patience: 20 }),
            grad_clip: None,
            loss: LossKind::CrossEntropySum,
        }
    }

    pub fn detection() -> TrainRecipe {
        TrainRecipe {
            epochs: 800,
            batch_size: 8,
            optimizer: OptimizerSpec { kind: OptimizerKind::AdamW, lr_backbone: 1e-6, lr_head: 1e-5, weight_decay: 1e-4, ..Default::default() },
            schedule: Schedule::StepEvery { every: 300, gamma: 0.1 },
            early_stopping: Some(EarlyStopping { patience: 20 }),
            grad_clip: Some(0.1),
            loss: LossKind::SetMatching { weights: LossWeights::default() },
        }
    }

    pub fn validate(&self, head: HeadType) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Recipe(m.to_owned()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        let o = &self.optimizer;
        if !(o.lr_backbone > 0.0 && o.lr_head > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        match (head, self.loss) {
            (HeadType::Classification, LossKind::CrossEntropySum) | (HeadType::RelativeDetection, LossKind::SetMatching { .. }) => Ok(()),
            _ => bad("loss kind does not fit the head type"),
        }
    }

    pub fn learning_rates(&self, epoch: u32) -> (f64, f64) {
        let f = self.schedule.factor(epoch);
        (self.optimizer.lr_backbone * f, self.optimizer.lr_head * f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub train_loss: f64,
    /// Measured on the batches as they were trained on.
    pub train_no_mistakes: f64,
    pub val_loss: Option<f64>,
    pub val_per_square_error: Option<f64>,
    pub val_no_mistakes: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid recipe: {0}")]
    Recipe(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("sample {image_id} has {got} bytes, expected {expected} for the training resolution")]
    SampleSize { image_id: u64, got: usize, expected: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (images {image_ids:?}); last finite loss {last_finite:?}")]
    NonFinite { epoch: u32, batch: usize, image_ids: Vec<u64>, last_finite: Option<f64> },
    #[error("cannot read image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("resumed checkpoint was trained with a different model config")]
    ResumeMismatch,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub seed: u64,
    /// Wall-clock limit; training stops after the batch that crosses it.
    pub time_budget: Option<Duration>,
    pub dataset_hash: Option<String>,
    /// Continue a previous run: its weights and log are kept, optimizer
    /// moments restart from zero.
    pub resume: Option<Checkpoint>,
}

/// Images of the train and val splits, resized to the model input.
pub fn load_training_data(set: &AnnotationSet, root: &Path, resolution: u32) -> Result<TrainingData, TrainError> {
    let targets = set.classification_targets();
    let load = |split: SplitLabel| -> Result<Vec<Sample>, TrainError> {
        set.images_in(split)
            .map(|img| {
                let path = root.join(&img.file_path);
                let pic = image::open(&path).map_err(|e| TrainError::Image { path: path.clone(), message: e.to_string() })?.to_rgb8();
                Ok(Sample {
                    image_id: img.id,
                    game_id: img.game_id,
                    move_index: img.move_index,
                    pixels: preprocess_image(&pic, resolution).into_raw(),
                    target: targets[&img.id],
                })
            })
            .collect()
    };
    Ok(TrainingData { resolution, train: load(SplitLabel::Train)?, val: load(SplitLabel::Val)? })
}

/// Loss and output gradient for one batch of raw outputs.
fn batch_loss(config: &ModelConfig, loss: &LossKind, raw: &[f32], targets: &[&ClassificationTarget], grad: &mut [f32]) -> f64 {
    let n = targets.len();
    let dim = config.output_dim();
    let mut total = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let out = &raw[i * dim..(i + 1) * dim];
        let g = &mut grad[i * dim..(i + 1) * dim];
        match loss {
            LossKind::CrossEntropySum => {
                for sq in 0..NUM_SQUARES {
                    let logits = &out[sq * NUM_CLASSES..(sq + 1) * NUM_CLASSES];
                    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let z: f64 = logits.iter().map(|&l| (l as f64 - max).exp()).sum();
                    let label = t.labels[sq] as usize;
                    total += max + z.ln() - logits[label] as f64;
                    for k in 0..NUM_CLASSES {
                        let p = (logits[k] as f64 - max).exp() / z;
                        g[sq * NUM_CLASSES + k] = ((p - f64::from(k == label as usize)) / n as f64) as f32;
                    }
                }
            }
            LossKind::SetMatching { weights } => {
                let pred = queries_from_raw(out);
                let target = DetectionTargetSet::new(t.to_items()).expect("classification targets hold one item per cell");
                let (b, gr) = set_loss_with_gradient(&pred, &target, weights);
                total += b.total;
                let stride = NUM_CLASSES + 2;
                for (q, qp) in pred.queries().iter().enumerate() {
                    for k in 0..NUM_CLASSES {
                        g[q * stride + k] = (gr.class_scores[q][k] / n as f64) as f32;
                    }
                    for k in 0..2 {
                        let c = qp.coord[k] as f64;
                        g[q * stride + NUM_CLASSES + k] = (gr.coords[q][k] * c * (7.0 - c) / 7.0 / n as f64) as f32;
                    }
                }
            }
        }
    }
    total / n as f64
}

fn predicted_target(raw: &[f32], ckpt_like: &(ModelConfig, ClassTable)) -> ClassificationTarget {
    let (config, table) = ckpt_like;
    match config.head {
        HeadType::Classification => {
            let mut labels = [0u8; NUM_SQUARES];
            for (sq, l) in labels.iter_mut().enumerate() {
                *l = crate::targets::argmax(&raw[sq * NUM_CLASSES..(sq + 1) * NUM_CLASSES]) as u8;
            }
            let canonical = ClassTable::canonical();
            if *table == canonical {
                ClassificationTarget { labels }
            } else {
                encode_classification(&board_from_target(&ClassificationTarget { labels }, table), &canonical)
            }
        }
        HeadType::RelativeDetection => {
            let d = crate::targets::decode_detection(&queries_from_raw(raw), table, crate::targets::DEFAULT_DETECTION_THRESHOLD);
            encode_classification(&d.board, &ClassTable::canonical())
        }
    }
}

/// Inference over samples in chunks; returns the predicted grid per sample
/// and the mean loss.
fn run_inference(network: &Network, config: &ModelConfig, loss: &LossKind, samples: &[Sample]) -> (Vec<ClassificationTarget>, f64) {
    let ctx = (config.clone(), ClassTable::canonical());
    let dim = config.output_dim();
    let mut preds = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0;
    for chunk in samples.chunks(16) {
        let pixels: Vec<&[u8]> = chunk.iter().map(|s| s.pixels.as_slice()).collect();
        let raw = network.forward(to_input(&pixels, config.input_resolution as usize, &config.normalization));
        let targets: Vec<&ClassificationTarget> = chunk.iter().map(|s| &s.target).collect();
        let mut scratch = vec![0.0; raw.len()];
        loss_sum += batch_loss(config, loss, &raw, &targets, &mut scratch) * chunk.len() as f64;
        preds.extend(raw.chunks(dim).map(|r| predicted_target(r, &ctx)));
    }
    (preds, loss_sum / samples.len().max(1) as f64)
}

/// Metric counts of a checkpoint over labelled samples, predictions mapped
/// to canonical class ids before comparison.
pub fn evaluate_samples(ckpt: &Checkpoint, samples: &[Sample]) -> MetricCounts {
    let ctx = (ckpt.config.clone(), ckpt.class_table.clone());
    let mut counts = MetricCounts::default();
    for chunk in samples.chunks(16) {
        let pixels: Vec<&[u8]> = chunk.iter().map(|s| s.pixels.as_slice()).collect();
        let raw = ckpt.network.forward(to_input(&pixels, ckpt.config.input_resolution as usize, &ckpt.config.normalization));
        for (r, s) in raw.chunks(ckpt.network.out_dim).zip(chunk) {
            counts.add(incorrect_squares(&predicted_target(r, &ctx), &s.target));
        }
    }
    counts
}

fn check_samples(samples: &[Sample], resolution: u32) -> Result<(), TrainError> {
    let expected = (resolution * resolution * 3) as usize;
    match samples.iter().find(|s| s.pixels.len() != expected) {
        Some(s) => Err(TrainError::SampleSize { image_id: s.image_id, got: s.pixels.len(), expected }),
        None => Ok(()),
    }
}

/// Trains from scratch (or resumes) and returns the checkpoint holding the
/// best-validation weights, or the last weights when there is no validation
/// split.
pub fn train(config: &ModelConfig, recipe: &TrainRecipe, data: &TrainingData, opts: TrainOptions) -> Result<Checkpoint, TrainError> {
    config.validate()?;
    recipe.validate(config.head)?;
    if data.resolution != config.input_resolution {
        return Err(ModelError::Resolution { expected: config.input_resolution, got_w: data.resolution, got_h: data.resolution }.into());
    }
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if recipe.early_stopping.is_some() && data.val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    check_samples(&data.train, data.resolution)?;
    check_samples(&data.val, data.resolution)?;

    let start = Instant::now();
    let (mut network, mut log, mut best) = match opts.resume {
        Some(ckpt) => {
            if &ckpt.config != config {
                return Err(TrainError::ResumeMismatch);
            }
            if ckpt.is_finished() || ckpt.log.len() as u32 >= recipe.epochs {
                log::info!("checkpoint already finished ({:?}), nothing to resume", ckpt.provenance.stop_reason);
                return Ok(ckpt);
            }
            let best = ckpt.provenance.best_epoch.and_then(|e| {
                let err = ckpt.log.iter().find(|l| l.epoch == e)?.val_per_square_error?;
                Some((err, e, ckpt.network.clone()))
            });
            (ckpt.network, ckpt.log, best)
        }
        None => (Network::new(config, opts.seed), Vec::new(), None),
    };
    let mut optimizer = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0f_7a1e);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let dim = config.output_dim();
    let ctx = (config.clone(), ClassTable::canonical());
    let mut last_finite = None;
    let mut stop = StopReason::EpochsCompleted;
    let first_epoch = log.len() as u32 + 1;
    // Replay the shuffles of completed epochs so a resumed run sees the same
    // batch order it would have seen uninterrupted.
    for _ in 1..first_epoch {
        order.shuffle(&mut rng);
    }

    for epoch in first_epoch..=recipe.epochs {
        let epoch_start = Instant::now();
        let (lr_b, lr_h) = recipe.learning_rates(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut perfect = 0usize;
        let mut out_of_time = false;
        for (bi, idx) in order.chunks(recipe.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data.train[i]).collect();
            let pixels: Vec<&[u8]> = batch.iter().map(|s| s.pixels.as_slice()).collect();
            let (raw, tape) = network.forward_tape(to_input(&pixels, config.input_resolution as usize, &config.normalization));
            let targets: Vec<&ClassificationTarget> = batch.iter().map(|s| &s.target).collect();
            let mut grad = vec![0.0f32; raw.len()];
            let loss = batch_loss(config, &recipe.loss, &raw, &targets, &mut grad);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { epoch, batch: bi, image_ids: batch.iter().map(|s| s.image_id).collect(), last_finite });
            }
            last_finite = Some(loss);
            for (r, t) in raw.chunks(dim).zip(&targets) {
                perfect += usize::from(incorrect_squares(&predicted_target(r, &ctx), t) == 0);
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();

            network.zero_grad();
            network.backward(&tape, &grad);
            let mut params = network.params_mut();
            if let Some(c) = recipe.grad_clip {
                clip_grad_norm(&mut params, c);
            }
            optimizer.step(&mut params, &recipe.optimizer, lr_b, lr_h);
            if opts.time_budget.is_some_and(|b| start.elapsed() > b) {
                out_of_time = true;
                break;
            }
        }

        let mut entry = EpochLog {
            epoch,
            lr_backbone: lr_b,
            lr_head: lr_h,
            train_loss: loss_sum / seen as f64,
            train_no_mistakes: 100.0 * perfect as f64 / seen as f64,
            val_loss: None,
            val_per_square_error: None,
            val_no_mistakes: None,
            seconds: 0.0,
        };
        if !data.val.is_empty() {
            let (preds, val_loss) = run_inference(&network, config, &recipe.loss, &data.val);
            let mut counts = MetricCounts::default();
            for (p, s) in preds.iter().zip(&data.val) {
                counts.add(incorrect_squares(p, &s.target));
            }
            let report = counts.report().expect("val split is non-empty");
            entry.val_loss = Some(val_loss);
            entry.val_per_square_error = Some(report.per_square_error_rate);
            entry.val_no_mistakes = Some(report.pct_no_mistakes);
            if best.as_ref().is_none_or(|(err, _, _)| report.per_square_error_rate < *err) {
                best = Some((report.per_square_error_rate, epoch, network.clone()));
            }
        }
        entry.seconds = epoch_start.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}/{}: loss {:.4}, train perfect {:.1}%, val error {:?}, val perfect {:?}, {:.1}s",
            recipe.epochs,
            entry.train_loss,
            entry.train_no_mistakes,
            entry.val_per_square_error,
            entry.val_no_mistakes,
            entry.seconds
        );
        log.push(entry);

        if out_of_time {
            stop = StopReason::TimeBudget;
            break;
        }
        if let (Some(es), Some((_, best_epoch, _))) = (recipe.early_stopping, &best) {
            if epoch - best_epoch >= es.patience {
                stop = StopReason::EarlyStopped;
                break;
            }
        }
    }

    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, weights)) = best {
        network = weights;
    }
    Ok(Checkpoint {
        config: config.clone(),
        recipe: recipe.clone(),
        class_table: ClassTable::canonical(),
        log,
        provenance: Provenance {
            seed: opts.seed,
            dataset_hash: opts.dataset_hash,
            best_epoch,
            stop_reason: stop,
            train_images: data.train.len(),
            val_images: data.val.len(),
            train_seconds: start.elapsed().as_secs_f64(),
            extra: Default::default(),
        },
        network,
    })
}
