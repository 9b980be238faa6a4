use serde::{Deserialize, Serialize};

use super::{AnnotationSet, GameEntry, ImageRecord, PieceAnnotation, SplitLabel};
use crate::chess::pgn::{replay_from, start_position};
use crate::chess::GameRecord;
use crate::targets::ClassTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildOptions {
    /// Nominal image size recorded for not-yet-rendered images.
    pub image_size: u32,
    /// Used for games without a device tag.
    pub default_device: String,
    pub extension: String,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { image_size: 128, default_device: "unknown".to_owned(), extension: "png".to_owned() }
    }
}

/// A game whose moves could not be replayed; the rest of the build goes on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildFailure {
    pub game_index: usize,
    pub event: Option<String>,
    /// 1-based half-move that failed, 0 for a bad start position.
    pub ply: usize,
    pub san: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub set: AnnotationSet,
    pub failures: Vec<BuildFailure>,
}

pub fn image_path(game_id: u64, move_index: u32, extension: &str) -> String {
    format!("images/{game_id}/G{game_id:03}_IMG{move_index:03}.{extension}")
}

/// One image per half-move: image `k` of a game shows the position after
/// half-move `k` and has `move_index = k`. Game ids are input positions, so a
/// failed game leaves a gap rather than renumbering the others.
pub fn build_annotations(games: &[GameRecord], opts: &BuildOptions) -> BuildOutput {
    let table = ClassTable::canonical();
    let mut set = AnnotationSet { categories: table.clone(), ..AnnotationSet::default() };
    let mut failures = Vec::new();
    for (gi, game) in games.iter().enumerate() {
        let fail = |ply: usize, san: Option<String>, reason: String| BuildFailure {
            game_index: gi,
            event: game.header("Event").map(str::to_owned),
            ply,
            san,
            reason,
        };
        let states = match start_position(game) {
            Err(e) => Err(fail(0, None, e.to_string())),
            Ok(start) => replay_from(start, &game.moves).map_err(|e| fail(e.ply, Some(e.san.clone()), e.to_string())),
        };
        let states = match states {
            Ok(s) => s,
            Err(f) => {
                log::warn!("game {gi} skipped: {}", f.reason);
                failures.push(f);
                continue;
            }
        };
        let game_id = gi as u64;
        let device = game.device_tag.clone().unwrap_or_else(|| opts.default_device.clone());
        set.games.push(GameEntry {
            id: game_id,
            device: device.clone(),
            eco: game.eco().map(str::to_owned),
            plies: states.len() as u32,
        });
        for (k, board) in states.iter().enumerate() {
            let move_index = k as u32 + 1;
            let image_id = set.images.len() as u64;
            set.images.push(ImageRecord {
                id: image_id,
                file_path: image_path(game_id, move_index, &opts.extension),
                game_id,
                move_index,
                device: device.clone(),
                width: opts.image_size,
                height: opts.image_size,
                split: SplitLabel::Unassigned,
            });
            for (square, piece) in board.pieces() {
                set.pieces.push(PieceAnnotation {
                    id: set.pieces.len() as u64,
                    image_id,
                    category_id: table.class_of(Some(piece)),
                    square,
                    bbox: None,
                });
            }
        }
    }
    BuildOutput { set, failures }
}
