//! Board-level recognition metrics, orientation search and game-phase
//! breakdowns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::chess::Orientation;
use crate::targets::{ClassificationTarget, Rotate, NUM_SQUARES};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoardPair {
    pub image_id: u64,
    pub predicted: ClassificationTarget,
    pub ground_truth: ClassificationTarget,
    /// Half-moves played before the image was captured.
    pub move_index: Option<u32>,
    pub game_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no board pairs to evaluate")]
    Empty,
    #[error("image {0} has no move index; phase breakdown needs one for every pair")]
    MissingMoveIndex(u64),
}

/// Number of the 64 cells whose class ids differ.
pub fn incorrect_squares(pred: &ClassificationTarget, gt: &ClassificationTarget) -> u32 {
    pred.labels.iter().zip(&gt.labels).filter(|(a, b)| a != b).count() as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_incorrect_squares: f64,
    pub pct_no_mistakes: f64,
    pub pct_at_most_one_mistake: f64,
    pub per_square_error_rate: f64,
    pub board_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_phase: Option<BTreeMap<GamePhase, PhaseReport>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub sample_count: usize,
    /// `None` when no pair fell into the phase.
    pub report: Option<EvalReport>,
}

/// Running totals; reports are a pure function of these, so partial results
/// over disjoint pair lists combine by addition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MetricCounts {
    pub boards: u64,
    pub incorrect: u64,
    pub perfect: u64,
    pub at_most_one: u64,
}

impl MetricCounts {
    pub fn add(&mut self, incorrect: u32) {
        self.boards += 1;
        self.incorrect += incorrect as u64;
        self.perfect += (incorrect == 0) as u64;
        self.at_most_one += (incorrect <= 1) as u64;
    }

    pub fn merge(self, other: MetricCounts) -> MetricCounts {
        MetricCounts {
            boards: self.boards + other.boards,
            incorrect: self.incorrect + other.incorrect,
            perfect: self.perfect + other.perfect,
            at_most_one: self.at_most_one + other.at_most_one,
        }
    }

    pub fn report(&self) -> Result<EvalReport, EvalError> {
        if self.boards == 0 {
            return Err(EvalError::Empty);
        }
        let n = self.boards as f64;
        let mean = self.incorrect as f64 / n;
        Ok(EvalReport {
            mean_incorrect_squares: mean,
            pct_no_mistakes: 100.0 * self.perfect as f64 / n,
            pct_at_most_one_mistake: 100.0 * self.at_most_one as f64 / n,
            // Dividing by 64 is exact, so rate * 64 == mean * 100 bit for bit.
            per_square_error_rate: mean * 100.0 / NUM_SQUARES as f64,
            board_count: self.boards as usize,
            per_phase: None,
        })
    }
}

pub fn compute_metrics(pairs: &[BoardPair]) -> Result<EvalReport, EvalError> {
    let mut counts = MetricCounts::default();
    for p in pairs {
        counts.add(incorrect_squares(&p.predicted, &p.ground_truth));
    }
    counts.report()
}

/// Whether each board picks its own best orientation, or every board of a game
/// shares one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientationScope {
    #[default]
    Board,
    Game,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientationSearch {
    pub report: EvalReport,
    /// Quarter turns applied to each prediction, in input order.
    pub chosen: Vec<Orientation>,
}

fn errors_per_orientation(p: &BoardPair) -> [u32; 4] {
    Orientation::ALL.map(|o| incorrect_squares(&p.predicted.rotate(o), &p.ground_truth))
}

fn best_of(errors: &[u32; 4]) -> Orientation {
    let k = (0..4).min_by_key(|&k| errors[k]).unwrap();
    Orientation::new(k as i32)
}

/// Scores each prediction under all four grid orientations and keeps the
/// minimum; with [`OrientationScope::Game`] the minimum is taken per game.
pub fn best_orientation_metrics(
    pairs: &[BoardPair],
    scope: OrientationScope,
) -> Result<OrientationSearch, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let errors: Vec<[u32; 4]> = pairs.iter().map(errors_per_orientation).collect();
    let chosen: Vec<Orientation> = match scope {
        OrientationScope::Board => errors.iter().map(best_of).collect(),
        OrientationScope::Game => {
            // Pairs without a game id form a group of their own.
            let group = |p: &BoardPair| match p.game_id {
                Some(g) => (true, g),
                None => (false, p.image_id),
            };
            let mut per_game: BTreeMap<(bool, u64), [u32; 4]> = BTreeMap::new();
            for (p, e) in pairs.iter().zip(&errors) {
                let acc = per_game.entry(group(p)).or_default();
                for k in 0..4 {
                    acc[k] += e[k];
                }
            }
            pairs.iter().map(|p| best_of(&per_game[&group(p)])).collect()
        }
    };
    let mut counts = MetricCounts::default();
    for (e, o) in errors.iter().zip(&chosen) {
        counts.add(e[o.quarter_turns() as usize]);
    }
    Ok(OrientationSearch { report: counts.report()?, chosen })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GamePhase {
    Early,
    Mid,
    End,
}

impl GamePhase {
    pub const ALL: [GamePhase; 3] = [GamePhase::Early, GamePhase::Mid, GamePhase::End];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoveUnit {
    /// Half-moves: one per image in a recorded game.
    #[default]
    Plies,
    /// Full moves (a White move plus the Black reply).
    Moves,
}

/// Early below `early_below`, End above `end_above`, Mid otherwise; both
/// boundary values fall in Mid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseBoundaries {
    pub early_below: u32,
    pub end_above: u32,
    pub unit: MoveUnit,
}

impl Default for PhaseBoundaries {
    fn default() -> Self {
        PhaseBoundaries { early_below: 30, end_above: 75, unit: MoveUnit::Plies }
    }
}

impl PhaseBoundaries {
    pub fn phase_of(&self, move_index: u32) -> GamePhase {
        let n = match self.unit {
            MoveUnit::Plies => move_index,
            MoveUnit::Moves => move_index / 2,
        };
        if n < self.early_below {
            GamePhase::Early
        } else if n > self.end_above {
            GamePhase::End
        } else {
            GamePhase::Mid
        }
    }
}

/// Phase under the default boundaries (30 / 75 half-moves).
pub fn phase_of(move_index: u32) -> GamePhase {
    PhaseBoundaries::default().phase_of(move_index)
}

/// Overall metrics plus one sub-report per game phase.
pub fn ablation_report(pairs: &[BoardPair], bounds: &PhaseBoundaries) -> Result<EvalReport, EvalError> {
    let mut overall = MetricCounts::default();
    let mut per: BTreeMap<GamePhase, MetricCounts> = GamePhase::ALL.iter().map(|&p| (p, MetricCounts::default())).collect();
    for p in pairs {
        let idx = p.move_index.ok_or(EvalError::MissingMoveIndex(p.image_id))?;
        let wrong = incorrect_squares(&p.predicted, &p.ground_truth);
        overall.add(wrong);
        per.get_mut(&bounds.phase_of(idx)).unwrap().add(wrong);
    }
    let mut report = overall.report()?;
    report.per_phase = Some(
        per.into_iter()
            .map(|(phase, c)| {
                (phase, PhaseReport { sample_count: c.boards as usize, report: c.report().ok() })
            })
            .collect(),
    );
    Ok(report)
}
