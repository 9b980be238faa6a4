//! ChessReD-style datasets: building annotations from recorded games, game-level
//! splits, validation, loading the published archive, synthetic rendering and
//! archive download.

mod build;
mod fetch;
mod load;
mod render;
mod sample;
mod schema;
mod split;
mod validate;

pub use build::{build_annotations, BuildFailure, BuildOptions, BuildOutput};
pub use fetch::{fetch_dataset, ChecksumPolicy, FetchError, FetchItem};
pub use load::{load_chessred, LoadError, LoadOptions, Loaded, Subset};
pub use render::{render_synthetic, Camera, RenderConfig, RenderStyle, Rendered};
pub use sample::{eco_index, eco_volume, sample_games, SampleError};
pub use schema::{dataset_hash, read_annotations, write_annotations, SchemaError, ANNOTATION_FILE};
pub use split::{split_games, SplitError, SplitRatios, SplitWarning};
pub use validate::{validate_annotations, SplitStats, ValidationReport, Violation, ViolationKind};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::chess::{BoardState, Square};
use crate::targets::{encode_classification, ClassTable, ClassificationTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl SplitLabel {
    pub const ASSIGNED: [SplitLabel; 3] = [SplitLabel::Train, SplitLabel::Val, SplitLabel::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitLabel::Train => "train",
            SplitLabel::Val => "val",
            SplitLabel::Test => "test",
            SplitLabel::Unassigned => "unassigned",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    /// Relative to the dataset root.
    pub file_path: String,
    pub game_id: u64,
    /// Half-moves played before the image was captured.
    pub move_index: u32,
    pub device: String,
    pub width: u32,
    pub height: u32,
    pub split: SplitLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PieceAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u8,
    pub square: Square,
    /// Present for the box-annotated subset only.
    pub bbox: Option<BBox>,
}

/// Board corners in pixels, named from White's side of the board.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corners {
    pub bottom_left: [f32; 2],
    pub bottom_right: [f32; 2],
    pub top_left: [f32; 2],
    pub top_right: [f32; 2],
}

impl Corners {
    pub fn points(&self) -> [[f32; 2]; 4] {
        [self.bottom_left, self.bottom_right, self.top_left, self.top_right]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CornerAnnotation {
    pub image_id: u64,
    pub corners: Corners,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameEntry {
    pub id: u64,
    pub device: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eco: Option<String>,
    #[serde(default)]
    pub plies: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    pub categories: ClassTable,
    pub images: Vec<ImageRecord>,
    pub pieces: Vec<PieceAnnotation>,
    pub corners: Vec<CornerAnnotation>,
    pub games: Vec<GameEntry>,
    /// Free-form metadata carried through unchanged (seed, provenance, ...).
    pub info: BTreeMap<String, serde_json::Value>,
}

impl AnnotationSet {
    /// Placement per image id, rebuilt from the piece annotations.
    pub fn boards(&self) -> BTreeMap<u64, BoardState> {
        let mut boards: BTreeMap<u64, BoardState> =
            self.images.iter().map(|i| (i.id, BoardState::empty())).collect();
        for p in &self.pieces {
            if let (Some(board), Some(piece)) = (boards.get_mut(&p.image_id), self.categories.piece_of_checked(p.category_id)) {
                board.set(p.square, Some(piece));
            }
        }
        boards
    }

    pub fn classification_targets(&self) -> BTreeMap<u64, ClassificationTarget> {
        let canonical = ClassTable::canonical();
        self.boards().into_iter().map(|(id, b)| (id, encode_classification(&b, &canonical))).collect()
    }

    pub fn images_in(&self, split: SplitLabel) -> impl Iterator<Item = &ImageRecord> {
        self.images.iter().filter(move |i| i.split == split)
    }

    pub fn image_count(&self, split: SplitLabel) -> usize {
        self.images_in(split).count()
    }

    /// Device tag of each game, from the game list or else the first image
    /// of the game.
    pub fn game_devices(&self) -> BTreeMap<u64, String> {
        let mut out: BTreeMap<u64, String> = self.games.iter().map(|g| (g.id, g.device.clone())).collect();
        for img in &self.images {
            out.entry(img.game_id).or_insert_with(|| img.device.clone());
        }
        out
    }
}
