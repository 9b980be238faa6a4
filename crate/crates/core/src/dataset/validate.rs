use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{AnnotationSet, SplitLabel};
use crate::chess::{Color, PieceType};
use crate::targets::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    KingCount { color: Color, count: usize },
    TooManyPawns { color: Color, count: usize },
    TooManyPieces { count: usize },
    DuplicateSquare { square: String },
    UnknownCategory { category_id: u8 },
    DanglingImageId { annotation_id: u64 },
    UnknownGame { game_id: u64 },
    SplitMixedInGame { game_id: u64 },
    /// Per split: kings of one color differ from the number of images.
    SplitKingCount { split: SplitLabel, color: Color, kings: usize, images: usize },
    BoxOutOfBounds { annotation_id: u64 },
    CornerOutOfBounds,
    BadImageSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<u64>,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub images: usize,
    pub games: usize,
    /// Annotation count per category id 0..11.
    pub category_counts: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub images_checked: usize,
    pub violations: Vec<Violation>,
    pub per_split: BTreeMap<SplitLabel, SplitStats>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, pred: impl Fn(&ViolationKind) -> bool) -> usize {
        self.violations.iter().filter(|v| pred(&v.kind)).count()
    }

    /// Category counts per split, one row per category plus image and game
    /// totals.
    pub fn summary_table(&self, set: &AnnotationSet) -> String {
        let splits: Vec<SplitLabel> = self.per_split.keys().copied().collect();
        let mut out = format!("{:<14}", "category");
        for s in &splits {
            let _ = write!(out, "{:>10}", s.name());
        }
        let _ = writeln!(out, "{:>10}", "total");
        let row = |out: &mut String, name: &str, values: Vec<usize>| {
            let _ = write!(out, "{name:<14}");
            for v in &values {
                let _ = write!(out, "{v:>10}");
            }
            let _ = writeln!(out, "{:>10}", values.iter().sum::<usize>());
        };
        for class in 0..(NUM_CLASSES as u8 - 1) {
            let values = splits.iter().map(|s| self.per_split[s].category_counts[class as usize]).collect();
            row(&mut out, &set.categories.category_name(class), values);
        }
        row(&mut out, "images", splits.iter().map(|s| self.per_split[s].images).collect());
        row(&mut out, "games", splits.iter().map(|s| self.per_split[s].games).collect());
        out
    }
}

fn inside(p: [f32; 2], w: u32, h: u32) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= w as f32 && p[1] <= h as f32
}

/// Structural and chess-level checks; never aborts, every problem is listed.
pub fn validate_annotations(set: &AnnotationSet) -> ValidationReport {
    let mut report = ValidationReport { images_checked: set.images.len(), ..Default::default() };
    let mut push = |image_id: Option<u64>, kind: ViolationKind| report.violations.push(Violation { image_id, kind });

    let images: BTreeMap<u64, &super::ImageRecord> = set.images.iter().map(|i| (i.id, i)).collect();
    let known_games: BTreeSet<u64> = set.games.iter().map(|g| g.id).collect();

    let mut per_image: BTreeMap<u64, Vec<&super::PieceAnnotation>> = images.keys().map(|&id| (id, Vec::new())).collect();
    for p in &set.pieces {
        match per_image.get_mut(&p.image_id) {
            Some(v) => v.push(p),
            None => push(Some(p.image_id), ViolationKind::DanglingImageId { annotation_id: p.id }),
        }
    }

    let mut split_of_game: BTreeMap<u64, SplitLabel> = BTreeMap::new();
    let mut mixed: BTreeSet<u64> = BTreeSet::new();
    let mut stats: BTreeMap<SplitLabel, (SplitStats, BTreeSet<u64>, [usize; 2])> = BTreeMap::new();
    for img in &set.images {
        if img.width == 0 || img.height == 0 {
            push(Some(img.id), ViolationKind::BadImageSize);
        }
        if !known_games.is_empty() && !known_games.contains(&img.game_id) {
            push(Some(img.id), ViolationKind::UnknownGame { game_id: img.game_id });
        }
        if *split_of_game.entry(img.game_id).or_insert(img.split) != img.split && mixed.insert(img.game_id) {
            push(None, ViolationKind::SplitMixedInGame { game_id: img.game_id });
        }

        let pieces = &per_image[&img.id];
        let entry = stats.entry(img.split).or_insert_with(|| {
            (SplitStats { category_counts: vec![0; NUM_CLASSES - 1], ..Default::default() }, BTreeSet::new(), [0, 0])
        });
        entry.0.images += 1;
        entry.1.insert(img.game_id);

        let mut squares = BTreeSet::new();
        let mut kings = [0usize; 2];
        let mut pawns = [0usize; 2];
        for p in pieces {
            if !squares.insert(p.square) {
                push(Some(img.id), ViolationKind::DuplicateSquare { square: p.square.name() });
            }
            if let Some(b) = p.bbox {
                if !(b.w > 0.0 && b.h > 0.0 && inside([b.x, b.y], img.width, img.height) && inside([b.x + b.w, b.y + b.h], img.width, img.height)) {
                    push(Some(img.id), ViolationKind::BoxOutOfBounds { annotation_id: p.id });
                }
            }
            match set.categories.piece_of_checked(p.category_id) {
                None => push(Some(img.id), ViolationKind::UnknownCategory { category_id: p.category_id }),
                Some(piece) => {
                    entry.0.category_counts[p.category_id as usize] += 1;
                    match piece.kind {
                        PieceType::King => kings[piece.color.index()] += 1,
                        PieceType::Pawn => pawns[piece.color.index()] += 1,
                        _ => {}
                    }
                }
            }
        }
        for color in Color::ALL {
            let c = color.index();
            entry.2[c] += kings[c];
            if kings[c] != 1 {
                push(Some(img.id), ViolationKind::KingCount { color, count: kings[c] });
            }
            if pawns[c] > 8 {
                push(Some(img.id), ViolationKind::TooManyPawns { color, count: pawns[c] });
            }
        }
        // Duplicates are reported above, so count occupied squares here.
        if squares.len() > 32 {
            push(Some(img.id), ViolationKind::TooManyPieces { count: squares.len() });
        }
    }

    for c in &set.corners {
        match images.get(&c.image_id) {
            None => push(Some(c.image_id), ViolationKind::DanglingImageId { annotation_id: c.image_id }),
            Some(img) => {
                if !c.corners.points().iter().all(|&p| inside(p, img.width, img.height)) {
                    push(Some(c.image_id), ViolationKind::CornerOutOfBounds);
                }
            }
        }
    }

    for (split, (mut s, games, kings)) in stats {
        s.games = games.len();
        for color in Color::ALL {
            if kings[color.index()] != s.images {
                push(None, ViolationKind::SplitKingCount { split, color, kings: kings[color.index()], images: s.images });
            }
        }
        report.per_split.insert(split, s);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chess::GameRecord;
    use crate::dataset::{build_annotations, BuildOptions};

    fn sample() -> AnnotationSet {
        let mut g = GameRecord::default();
        g.moves = ["e4", "e5", "Nf3", "Nc6"].map(String::from).to_vec();
        build_annotations(&[g], &BuildOptions::default()).set
    }

    #[test]
    fn clean_build() {
        let set = sample();
        let r = validate_annotations(&set);
        assert!(r.is_clean(), "{:?}", r.violations);
        assert_eq!(r.per_split[&SplitLabel::Unassigned].images, 4);
        assert_eq!(r.per_split[&SplitLabel::Unassigned].category_counts[5], 4);
    }

    #[test]
    fn duplicated_square() {
        let mut set = sample();
        let knight = set.pieces.iter().find(|p| p.category_id == 2).unwrap().clone();
        set.pieces.push(super::super::PieceAnnotation { id: 999, ..knight });
        let r = validate_annotations(&set);
        assert_eq!(r.violations.len(), 1, "{:?}", r.violations);
        assert!(matches!(r.violations[0].kind, ViolationKind::DuplicateSquare { .. }));
    }

    #[test]
    fn missing_king_is_reported_per_image_and_split() {
        let mut set = sample();
        let idx = set.pieces.iter().position(|p| p.category_id == 11 && p.image_id == 0).unwrap();
        set.pieces.remove(idx);
        let r = validate_annotations(&set);
        assert_eq!(r.count(|k| matches!(k, ViolationKind::KingCount { color: Color::Black, count: 0 })), 1);
        assert_eq!(r.count(|k| matches!(k, ViolationKind::SplitKingCount { .. })), 1);
    }
}
