use criterion::{black_box, criterion_group, criterion_main, Criterion};

use chessrec_bench::{board_pairs, five_games, prediction_set, FIVE_GAMES};
use chessrec_core::chess::{parse_pgn, BoardState};
use chessrec_core::dataset::{build_annotations, render_synthetic, BuildOptions, RenderConfig};
use chessrec_core::eval::{ablation_report, best_orientation_metrics, compute_metrics, OrientationScope, PhaseBoundaries};
use chessrec_core::matching::{match_cost, set_loss_with_gradient, solve_assignment, LossWeights};
use chessrec_core::model::{layers::Act, synthetic_samples, train, ModelConfig, Network, TrainOptions, TrainRecipe, TrainingData};
use chessrec_core::targets::{encode_classification, encode_detection, ClassTable};

fn notation(c: &mut Criterion) {
    c.bench_function("parse_pgn/five_games", |b| b.iter(|| parse_pgn(black_box(FIVE_GAMES)).unwrap()));
    let games = five_games();
    c.bench_function("build_annotations/five_games", |b| b.iter(|| build_annotations(black_box(&games), &BuildOptions::default())));
}

fn rendering(c: &mut Criterion) {
    let cfg = RenderConfig::default();
    let board = BoardState::initial();
    let mut i = 0;
    c.bench_function("render_synthetic/128px", |b| {
        b.iter(|| {
            i += 1;
            render_synthetic(&board, &cfg.camera(0, i), &cfg.style)
        })
    });
}

fn matching(c: &mut Criterion) {
    let table = ClassTable::canonical();
    let target = encode_detection(&BoardState::initial(), &table);
    let pred = prediction_set();
    let w = LossWeights::default();
    let cost = match_cost(&pred, &target, &w);
    c.bench_function("solve_assignment/32x32", |b| b.iter(|| solve_assignment(black_box(&cost)).unwrap()));
    c.bench_function("set_loss_with_gradient/initial", |b| b.iter(|| set_loss_with_gradient(black_box(&pred), &target, &w)));
}

fn metrics(c: &mut Criterion) {
    let truth = encode_classification(&BoardState::initial(), &ClassTable::canonical());
    let pairs = board_pairs(2129, truth);
    c.bench_function("compute_metrics/2129", |b| b.iter(|| compute_metrics(black_box(&pairs)).unwrap()));
    c.bench_function("best_orientation/2129", |b| b.iter(|| best_orientation_metrics(black_box(&pairs), OrientationScope::Board).unwrap()));
    c.bench_function("ablation_report/2129", |b| b.iter(|| ablation_report(black_box(&pairs), &PhaseBoundaries::default()).unwrap()));
}

fn model(c: &mut Criterion) {
    let config = ModelConfig::desk(128);
    let net = Network::new(&config, 0);
    let mut x = Act::zeros(8, 3, 128, 128);
    x.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 97) as f32 / 97.0) - 0.5);
    let mut g = c.benchmark_group("desk_model");
    g.sample_size(10);
    g.bench_function("forward/batch8", |b| b.iter(|| net.forward(black_box(x.clone()))));
    let data = TrainingData { resolution: 128, train: synthetic_samples(0..16, 0, 60, &RenderConfig::default(), 128), val: vec![] };
    let recipe = TrainRecipe { epochs: 1, early_stopping: None, ..TrainRecipe::classification() };
    g.bench_function("train_epoch/16_images", |b| b.iter(|| train(&config, &recipe, &data, TrainOptions::default()).unwrap()));
    g.finish();
}

criterion_group!(benches, notation, rendering, matching, metrics, model);
criterion_main!(benches);
