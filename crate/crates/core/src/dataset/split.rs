use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotationSet, SplitLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.6, val: 0.2, test: 0.2 }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SplitError {
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitWarning {
    /// The device has fewer games than splits with a non-zero ratio, so some
    /// split gets none of its games.
    SparseDevice { device: String, games: usize, nonzero_splits: usize },
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier split.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[k] > 0.0 {
            counts[k] += 1;
            left -= 1;
        }
    }
    counts
}

/// Assigns whole games to train/val/test, stratified by device tag; image
/// labels follow their game.
pub fn split_games(
    set: &AnnotationSet,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(AnnotationSet, Vec<SplitWarning>), SplitError> {
    let r = ratios.as_array();
    if r.iter().any(|&x| !(x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SplitError::BadRatios(r));
    }
    let nonzero = r.iter().filter(|&&x| x > 0.0).count();
    let mut by_device: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for (game, device) in set.game_devices() {
        by_device.entry(device).or_default().push(game);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut label_of: BTreeMap<u64, SplitLabel> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (device, mut games) in by_device {
        if games.len() < nonzero {
            log::warn!("device {device:?} has {} games for {nonzero} splits", games.len());
            warnings.push(SplitWarning::SparseDevice { device: device.clone(), games: games.len(), nonzero_splits: nonzero });
        }
        games.shuffle(&mut rng);
        let counts = apportion(games.len(), r);
        let mut it = games.into_iter();
        for (label, n) in SplitLabel::ASSIGNED.into_iter().zip(counts) {
            for g in it.by_ref().take(n) {
                label_of.insert(g, label);
            }
        }
    }
    let mut out = set.clone();
    for img in &mut out.images {
        img.split = label_of.get(&img.game_id).copied().unwrap_or_default();
    }
    Ok((out, warnings))
}
