//! On-disk annotation document and the mapping between it and
//! [`AnnotationSet`].
//!
//! Field aliases (`move_id`, `camera`, ...) absorb naming differences in
//! third-party copies of the archive; unknown keys are ignored on read.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotationSet, BBox, CornerAnnotation, Corners, GameEntry, ImageRecord, PieceAnnotation, SplitLabel};
use crate::chess::Square;
use crate::targets::{Category, ClassTable, NUM_CLASSES};

pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed annotation document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad categories section: {0}")]
    Categories(String),
    #[error("bad square name {0:?} in annotation {1}")]
    Square(String, u64),
    #[error("image {image_id} listed in both {first} and {second} splits")]
    SplitConflict { image_id: u64, first: &'static str, second: &'static str },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct DocImage {
    pub id: u64,
    pub file_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default)]
    pub game_id: u64,
    #[serde(default, alias = "move_id")]
    pub move_index: u32,
    #[serde(default, alias = "camera")]
    pub device: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct DocPiece {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u8,
    pub chessboard_position: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f32; 4]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct DocCorner {
    pub image_id: u64,
    pub corners: Corners,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub(crate) struct DocAnnotations {
    #[serde(default)]
    pub pieces: Vec<DocPiece>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corners: Vec<DocCorner>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub(crate) struct DocSplit {
    #[serde(default)]
    pub image_ids: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub game_ids: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub(crate) struct DocSplits {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<DocSplit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<DocSplit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<DocSplit>,
    /// Nested subsets such as `chessred2k`, kept verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl DocSplits {
    pub fn get(&self, label: SplitLabel) -> Option<&DocSplit> {
        match label {
            SplitLabel::Train => self.train.as_ref(),
            SplitLabel::Val => self.val.as_ref(),
            SplitLabel::Test => self.test.as_ref(),
            SplitLabel::Unassigned => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Document {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub info: BTreeMap<String, serde_json::Value>,
    pub categories: Vec<Category>,
    pub images: Vec<DocImage>,
    #[serde(default)]
    pub annotations: DocAnnotations,
    #[serde(default)]
    pub splits: DocSplits,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub games: Vec<GameEntry>,
}

/// Category table of a document. Names are authoritative; if they cannot be
/// matched but the ids are exactly 0..=12 the canonical order is assumed.
pub(crate) fn class_table(categories: &[Category]) -> Result<ClassTable, SchemaError> {
    match ClassTable::try_from(categories.to_vec()) {
        Ok(t) => Ok(t),
        Err(e) => {
            let mut ids: Vec<u8> = categories.iter().map(|c| c.id).collect();
            ids.sort_unstable();
            if ids == (0..NUM_CLASSES as u8).collect::<Vec<_>>() {
                log::warn!("unrecognized category names ({e}); assuming canonical id order");
                Ok(ClassTable::canonical())
            } else {
                Err(SchemaError::Categories(e))
            }
        }
    }
}

impl Document {
    /// Split labels come from `splits` (top level, or a nested subset when
    /// `subset` names one); images listed nowhere stay unassigned.
    pub fn into_set(self, subset: Option<&str>) -> Result<AnnotationSet, SchemaError> {
        let categories = class_table(&self.categories)?;
        let splits = match subset {
            None => self.splits.clone(),
            Some(name) => match self.splits.extra.get(name) {
                Some(v) => serde_json::from_value(v.clone())?,
                None => DocSplits::default(),
            },
        };
        let mut label_of: BTreeMap<u64, SplitLabel> = BTreeMap::new();
        for label in SplitLabel::ASSIGNED {
            for &id in splits.get(label).map(|s| s.image_ids.as_slice()).unwrap_or(&[]) {
                if let Some(prev) = label_of.insert(id, label) {
                    if prev != label {
                        return Err(SchemaError::SplitConflict { image_id: id, first: prev.name(), second: label.name() });
                    }
                }
            }
        }
        let images = self
            .images
            .into_iter()
            .map(|i| ImageRecord {
                split: label_of.get(&i.id).copied().unwrap_or_default(),
                file_path: i.path.unwrap_or(i.file_name),
                id: i.id,
                game_id: i.game_id,
                move_index: i.move_index,
                device: i.device,
                width: i.width,
                height: i.height,
            })
            .collect();
        let pieces = self
            .annotations
            .pieces
            .into_iter()
            .map(|p| {
                let square: Square =
                    p.chessboard_position.parse().map_err(|_| SchemaError::Square(p.chessboard_position.clone(), p.id))?;
                Ok(PieceAnnotation {
                    id: p.id,
                    image_id: p.image_id,
                    category_id: p.category_id,
                    square,
                    bbox: p.bbox.map(|[x, y, w, h]| BBox { x, y, w, h }),
                })
            })
            .collect::<Result<_, SchemaError>>()?;
        let corners = self
            .annotations
            .corners
            .into_iter()
            .map(|c| CornerAnnotation { image_id: c.image_id, corners: c.corners })
            .collect();
        Ok(AnnotationSet { categories, images, pieces, corners, games: self.games, info: self.info })
    }

    pub fn from_set(set: &AnnotationSet) -> Document {
        let mut splits = DocSplits::default();
        for label in SplitLabel::ASSIGNED {
            let image_ids: Vec<u64> = set.images_in(label).map(|i| i.id).collect();
            if image_ids.is_empty() {
                continue;
            }
            let mut game_ids: Vec<u64> = set.images_in(label).map(|i| i.game_id).collect();
            game_ids.sort_unstable();
            game_ids.dedup();
            let entry = DocSplit { n_samples: Some(image_ids.len() as u64), image_ids, game_ids };
            match label {
                SplitLabel::Train => splits.train = Some(entry),
                SplitLabel::Val => splits.val = Some(entry),
                SplitLabel::Test => splits.test = Some(entry),
                SplitLabel::Unassigned => unreachable!(),
            }
        }
        Document {
            info: set.info.clone(),
            categories: set.categories.categories(),
            images: set
                .images
                .iter()
                .map(|i| DocImage {
                    id: i.id,
                    file_name: i.file_path.rsplit('/').next().unwrap_or(&i.file_path).to_owned(),
                    path: Some(i.file_path.clone()),
                    game_id: i.game_id,
                    move_index: i.move_index,
                    device: i.device.clone(),
                    width: i.width,
                    height: i.height,
                })
                .collect(),
            annotations: DocAnnotations {
                pieces: set
                    .pieces
                    .iter()
                    .map(|p| DocPiece {
                        id: p.id,
                        image_id: p.image_id,
                        category_id: p.category_id,
                        chessboard_position: p.square.name(),
                        bbox: p.bbox.map(|b| [b.x, b.y, b.w, b.h]),
                    })
                    .collect(),
                corners: set.corners.iter().map(|c| DocCorner { image_id: c.image_id, corners: c.corners }).collect(),
            },
            splits,
            games: set.games.clone(),
        }
    }
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet, SchemaError> {
    read_document(path)?.into_set(None)
}

pub(crate) fn read_document(path: &Path) -> Result<Document, SchemaError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| SchemaError::Io { path: path.display().to_string(), source })?;
    Ok(serde_json::from_str(&text)?)
}

fn document_text(set: &AnnotationSet) -> Result<String, SchemaError> {
    let mut text = serde_json::to_string_pretty(&Document::from_set(set))?;
    text.push('\n');
    Ok(text)
}

/// Pretty-printed with a trailing newline; key order is fixed, so equal sets
/// give byte-identical files.
pub fn write_annotations(set: &AnnotationSet, path: &Path) -> Result<(), SchemaError> {
    let text = document_text(set)?;
    std::fs::write(path, text).map_err(|source| SchemaError::Io { path: path.display().to_string(), source })
}

/// Hex SHA-256 of the document [`write_annotations`] would write, so the
/// hash of a set equals the hash of its file on disk.
pub fn dataset_hash(set: &AnnotationSet) -> String {
    use sha2::{Digest, Sha256};
    let text = document_text(set).expect("annotation sets always serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}
