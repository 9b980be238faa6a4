use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::schema::{read_document, SchemaError, ANNOTATION_FILE};
use super::{AnnotationSet, SplitLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    /// Every image, labelled by the top-level splits.
    #[default]
    Full,
    /// The box-and-corner annotated subset, labelled by its own splits; other
    /// images are dropped.
    #[serde(rename = "chessred2k")]
    ChessRed2k,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    pub subset: Subset,
    /// Also stat every image file and count the missing ones.
    pub check_files: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("no {ANNOTATION_FILE} under {0}")]
    MissingAnnotations(PathBuf),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(
        "structural errors: {dangling} annotations reference unknown images, \
         {unknown_categories} use unknown category ids, {unknown_games} images reference unknown games"
    )]
    Structure { dangling: usize, unknown_categories: usize, unknown_games: usize },
    #[error("{missing} of {total} image files are missing (first: {first})")]
    MissingImages { missing: usize, total: usize, first: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub set: AnnotationSet,
    pub split_totals: BTreeMap<SplitLabel, usize>,
}

impl Loaded {
    pub fn total(&self) -> usize {
        self.set.images.len()
    }
}

pub fn load_chessred(root: &Path, opts: &LoadOptions) -> Result<Loaded, LoadError> {
    let path = root.join(ANNOTATION_FILE);
    if !path.is_file() {
        return Err(LoadError::MissingAnnotations(root.to_owned()));
    }
    let doc = read_document(&path)?;
    let set = match opts.subset {
        Subset::Full => doc.into_set(None)?,
        Subset::ChessRed2k => {
            let mut s = doc.into_set(Some("chessred2k"))?;
            let keep: BTreeSet<u64> = s.images.iter().filter(|i| i.split != SplitLabel::Unassigned).map(|i| i.id).collect();
            s.images.retain(|i| keep.contains(&i.id));
            s.pieces.retain(|p| keep.contains(&p.image_id));
            s.corners.retain(|c| keep.contains(&c.image_id));
            s
        }
    };

    let ids: BTreeSet<u64> = set.images.iter().map(|i| i.id).collect();
    let dangling = set.pieces.iter().filter(|p| !ids.contains(&p.image_id)).count()
        + set.corners.iter().filter(|c| !ids.contains(&c.image_id)).count();
    let unknown_categories = set.pieces.iter().filter(|p| set.categories.piece_of_checked(p.category_id).is_none()).count();
    let games: BTreeSet<u64> = set.games.iter().map(|g| g.id).collect();
    let unknown_games =
        if games.is_empty() { 0 } else { set.images.iter().filter(|i| !games.contains(&i.game_id)).count() };
    if dangling + unknown_categories + unknown_games > 0 {
        return Err(LoadError::Structure { dangling, unknown_categories, unknown_games });
    }

    if opts.check_files {
        let missing: Vec<&str> =
            set.images.iter().filter(|i| !root.join(&i.file_path).is_file()).map(|i| i.file_path.as_str()).collect();
        if let Some(first) = missing.first() {
            return Err(LoadError::MissingImages { missing: missing.len(), total: set.images.len(), first: first.to_string() });
        }
    }

    let mut split_totals = BTreeMap::new();
    for img in &set.images {
        *split_totals.entry(img.split).or_insert(0) += 1;
    }
    log::info!(
        "loaded {} images: train {} / val {} / test {}",
        set.images.len(),
        split_totals.get(&SplitLabel::Train).unwrap_or(&0),
        split_totals.get(&SplitLabel::Val).unwrap_or(&0),
        split_totals.get(&SplitLabel::Test).unwrap_or(&0)
    );
    Ok(Loaded { set, split_totals })
}
