//! Deterministic inputs shared by the pipeline benchmarks.

use chessrec_core::chess::{parse_pgn, GameRecord};
use chessrec_core::eval::BoardPair;
use chessrec_core::targets::{ClassificationTarget, PredictionSet, QueryPrediction, NUM_CLASSES, NUM_QUERIES};

pub const FIVE_GAMES: &str = include_str!("../../core/tests/fixtures/five_games.pgn");

pub fn five_games() -> Vec<GameRecord> {
    parse_pgn(FIVE_GAMES).expect("fixture parses")
}

/// Cheap reproducible noise in [0, 1).
fn hash01(i: usize) -> f32 {
    let mut x = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 29;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 32;
    (x >> 40) as f32 / (1u64 << 24) as f32
}

/// A full prediction set with scattered coordinates and noisy logits.
pub fn prediction_set() -> PredictionSet {
    let queries = (0..NUM_QUERIES)
        .map(|q| QueryPrediction {
            class_scores: std::array::from_fn(|c| 4.0 * hash01(q * NUM_CLASSES + c) - 2.0),
            coord: [7.0 * hash01(1000 + 2 * q), 7.0 * hash01(1001 + 2 * q)],
        })
        .collect();
    PredictionSet::new(queries).expect("32 queries")
}

/// `n` pairs whose predictions differ from the truth on a few squares.
pub fn board_pairs(n: usize, truth: ClassificationTarget) -> Vec<BoardPair> {
    (0..n)
        .map(|i| {
            let mut predicted = truth;
            for k in 0..(i % 4) {
                predicted.labels[(i * 11 + k * 17) % 64] = (hash01(i * 4 + k) * 13.0) as u8;
            }
            BoardPair { image_id: i as u64, predicted, ground_truth: truth, move_index: Some((i % 120) as u32), game_id: Some((i / 60) as u64) }
        })
        .collect()
}
