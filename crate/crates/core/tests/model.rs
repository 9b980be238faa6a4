//! Model sizing, checkpoint round trips and the single-image predict path.

use chessrec_core::chess::{parse_fen_with, placement_field, FenMode};
use chessrec_core::dataset::{render_synthetic, RenderConfig};
use chessrec_core::eval::{incorrect_squares, MetricCounts};
use chessrec_core::model::{
    decode_output, evaluate_samples, forward_batch, predict, preprocess_image, synthetic_samples, train, BackboneSpec, Checkpoint,
    HeadLayout, HeadType, ModelConfig, Network, Sample, StageSpec, TrainOptions, TrainRecipe, TrainingData,
};
use chessrec_core::targets::{encode_classification, ClassTable, ClassificationTarget};
use chessrec_core::BoardState;
use image::RgbImage;

/// Frozen from `fixtures/param_oracle.py`: torchvision's ResNeXt-101 32x8d
/// convolutions, one bias per convolution output channel in place of batch
/// norm, plus a linear head on the pooled 2048 features.
const ORACLE_CLASSIFICATION: usize = 88_345_664;
const ORACLE_DETECTION: usize = 87_624_416;

#[test]
fn full_scale_parameter_counts_match_torchvision() {
    let cls = ModelConfig::default();
    assert_eq!(cls.parameter_count(), ORACLE_CLASSIFICATION);
    let det = ModelConfig { head: HeadType::RelativeDetection, ..ModelConfig::default() };
    assert_eq!(det.parameter_count(), ORACLE_DETECTION);
}

#[test]
fn built_networks_agree_with_the_analytic_count() {
    for head in [HeadType::Classification, HeadType::RelativeDetection] {
        let config = ModelConfig { head, ..ModelConfig::desk(96) };
        assert_eq!(Network::new(&config, 0).parameter_count(), config.parameter_count());
    }
}

const RES: u32 = 64;

fn tiny() -> ModelConfig {
    ModelConfig {
        head_layout: HeadLayout::Factorized { channels: 16 },
        input_resolution: RES,
        backbone: BackboneSpec {
            cardinality: 2,
            stem_channels: 8,
            stem_kernel: 3,
            stem_stride: 2,
            stem_pool: false,
            stages: vec![StageSpec { blocks: 1, width: 16, out_channels: 32, stride: 2 }],
            parameter_budget: None,
        },
        ..ModelConfig::default()
    }
}

fn render() -> RenderConfig {
    let mut r = RenderConfig { orientations: vec![0], ..RenderConfig::default() };
    r.style.size = RES;
    r
}

fn initial_image() -> RgbImage {
    let r = render_synthetic(&BoardState::initial(), &render().camera(3, 0), &render().style);
    preprocess_image(&r.image, RES)
}

/// A tiny model memorizing the initial position and three random ones.
fn overfit() -> (Checkpoint, Vec<Sample>) {
    let mut samples = synthetic_samples(1..4, 3, 60, &render(), RES);
    samples.insert(
        0,
        Sample {
            image_id: 0,
            game_id: 0,
            move_index: 0,
            pixels: initial_image().into_raw(),
            target: encode_classification(&BoardState::initial(), &ClassTable::canonical()),
        },
    );
    let recipe = TrainRecipe { epochs: 300, batch_size: 4, early_stopping: None, ..TrainRecipe::classification() };
    let data = TrainingData { resolution: RES, train: samples.clone(), val: vec![] };
    let ckpt = train(&tiny(), &recipe, &data, TrainOptions { seed: 5, ..Default::default() }).unwrap();
    (ckpt, samples)
}

#[test]
fn predicts_a_memorized_board_from_disk() {
    let (ckpt, _) = overfit();
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("model.ckpt");
    ckpt.save(&ckpt_path).unwrap();
    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    let image_path = dir.path().join("initial.png");
    initial_image().save(&image_path).unwrap();

    let p = predict(&ckpt, &image_path).unwrap();
    assert_eq!(p.placement, placement_field(&BoardState::initial()));
    assert!(p.valid);
    assert!(!p.side_to_move_known);
    let (board, violations) = parse_fen_with(&p.fen, FenMode::Lenient).unwrap();
    assert!(violations.is_empty());
    assert_eq!(placement_field(&board), p.placement);
    assert_eq!(p.labels, encode_classification(&board, &ClassTable::canonical()).labels.to_vec());
    assert_eq!(p.max_probabilities.len(), 64);
    assert!(p.max_probabilities.iter().all(|&q| (0.0..=1.0).contains(&q)));
    assert!(p.min_confidence <= p.mean_confidence && p.mean_confidence <= 1.0);

    let missing = predict(&ckpt, &dir.path().join("absent.png"));
    assert!(missing.is_err());
}

#[test]
fn per_image_predictions_agree_with_batch_evaluation() {
    let (ckpt, mut samples) = overfit();
    // Unseen boards make the comparison cover mistakes too.
    samples.extend(synthetic_samples(100..106, 9, 60, &render(), RES));
    let mut counts = MetricCounts::default();
    for s in &samples {
        let img = RgbImage::from_raw(RES, RES, s.pixels.clone()).unwrap();
        let raw = forward_batch(&ckpt, &[&img]).remove(0);
        let labels = decode_output(&raw, &ckpt).labels;
        let pred = ClassificationTarget { labels: labels.try_into().unwrap() };
        counts.add(incorrect_squares(&pred, &s.target));
    }
    assert_eq!(counts, evaluate_samples(&ckpt, &samples));
}
