use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chess::GameRecord;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SampleError {
    #[error("ECO volume {volume} has {available} codes with games, {requested} requested")]
    VolumeTooSmall { volume: char, available: usize, requested: usize },
}

/// Volume letter A-E of an ECO code such as `C41`.
pub fn eco_volume(code: &str) -> Option<char> {
    let c = code.trim().chars().next()?.to_ascii_uppercase();
    ('A'..='E').contains(&c).then_some(c)
}

/// Groups games by their ECO header; games without one are skipped.
pub fn eco_index(games: &[GameRecord]) -> BTreeMap<String, Vec<GameRecord>> {
    let mut index: BTreeMap<String, Vec<GameRecord>> = BTreeMap::new();
    for g in games {
        if let Some(eco) = g.eco() {
            index.entry(eco.trim().to_ascii_uppercase()).or_default().push(g.clone());
        }
    }
    index
}

/// Draws `per_volume` distinct codes from each volume A-E, then one game per
/// code. Output is grouped by volume in A-E order.
pub fn sample_games(
    index: &BTreeMap<String, Vec<GameRecord>>,
    per_volume: usize,
    seed: u64,
) -> Result<Vec<GameRecord>, SampleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    if per_volume == 0 {
        return Ok(out);
    }
    for volume in 'A'..='E' {
        let codes: Vec<&String> =
            index.iter().filter(|(code, games)| eco_volume(code) == Some(volume) && !games.is_empty()).map(|(c, _)| c).collect();
        if codes.len() < per_volume {
            return Err(SampleError::VolumeTooSmall { volume, available: codes.len(), requested: per_volume });
        }
        for code in codes.choose_multiple(&mut rng, per_volume) {
            out.push(index[*code].choose(&mut rng).unwrap().clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(codes_per_volume: usize) -> BTreeMap<String, Vec<GameRecord>> {
        let mut idx = BTreeMap::new();
        for v in ['A', 'B', 'C', 'D', 'E'] {
            for n in 0..codes_per_volume {
                let code = format!("{v}{n:02}");
                let games = (0..3)
                    .map(|k| {
                        let mut g = GameRecord::default();
                        g.set_header("ECO", code.clone());
                        g.set_header("Event", format!("{code}-{k}"));
                        g
                    })
                    .collect();
                idx.insert(code, games);
            }
        }
        idx
    }

    #[test]
    fn twenty_per_volume() {
        let idx = index(30);
        let games = sample_games(&idx, 20, 5).unwrap();
        assert_eq!(games.len(), 100);
        for (i, g) in games.iter().enumerate() {
            assert_eq!(eco_volume(g.eco().unwrap()), Some("ABCDE".as_bytes()[i / 20] as char));
        }
        let mut codes: Vec<_> = games.iter().map(|g| g.eco().unwrap().to_owned()).collect();
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), 100);
        assert_eq!(games, sample_games(&idx, 20, 5).unwrap());
        assert_ne!(games, sample_games(&idx, 20, 6).unwrap());
    }

    #[test]
    fn degenerate_requests() {
        assert!(sample_games(&BTreeMap::new(), 0, 1).unwrap().is_empty());
        let err = sample_games(&index(3), 4, 1).unwrap_err();
        assert_eq!(err, SampleError::VolumeTooSmall { volume: 'A', available: 3, requested: 4 });
    }
}
