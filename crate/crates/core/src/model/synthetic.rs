use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::Sample;
use super::preprocess_image;
use crate::chess::random_position;
use crate::dataset::{render_synthetic, RenderConfig};
use crate::targets::{encode_classification, ClassTable};

/// Renders `count` random positions (random legal games of up to
/// `max_plies` half-moves) into labelled samples. Sample `i` is a pure
/// function of `(seed, i)`, so disjoint index ranges give disjoint held-out
/// sets.
pub fn synthetic_samples(range: std::ops::Range<u64>, seed: u64, max_plies: usize, render: &RenderConfig, resolution: u32) -> Vec<Sample> {
    let table = ClassTable::canonical();
    range
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            let plies = rng.gen_range(0..=max_plies);
            let board = random_position(&mut rng, plies);
            let r = render_synthetic(&board, &render.camera(seed, i), &render.style);
            Sample {
                image_id: i,
                game_id: i,
                move_index: plies as u32,
                pixels: preprocess_image(&r.image, resolution).into_raw(),
                target: encode_classification(&board, &table),
            }
        })
        .collect()
}
