//! Learning targets: the 64-label classification grid and the
//! relative-detection set of `(class, grid cell)` items, plus decoding of model
//! outputs back into boards.

use serde::{Deserialize, Serialize};

use crate::chess::{grid_to_square, square_to_grid, BoardState, Color, GridCoord, Orientation, Piece, PieceType};

pub const NUM_SQUARES: usize = 64;
pub const NUM_CLASSES: usize = 13;
/// Class id of an empty square / background query.
pub const EMPTY_CLASS: u8 = 12;
pub const NUM_QUERIES: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u8,
    pub name: String,
}

/// Bijection between class ids 0..11 and (color, piece type); id 12 is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Category>", into = "Vec<Category>")]
pub struct ClassTable {
    pieces: [Piece; 12],
}

impl Default for ClassTable {
    fn default() -> Self {
        ClassTable::canonical()
    }
}

impl ClassTable {
    /// White pawn, rook, knight, bishop, queen, king = 0..5, Black likewise
    /// 6..11, empty = 12.
    pub fn canonical() -> ClassTable {
        let mut pieces = [Piece::new(Color::White, PieceType::Pawn); 12];
        for (ci, color) in Color::ALL.into_iter().enumerate() {
            for (ti, kind) in PieceType::ALL.into_iter().enumerate() {
                pieces[ci * 6 + ti] = Piece::new(color, kind);
            }
        }
        ClassTable { pieces }
    }

    pub fn from_pieces(pieces: [Piece; 12]) -> Result<ClassTable, String> {
        for (i, p) in pieces.iter().enumerate() {
            if pieces[..i].contains(p) {
                return Err(format!("piece {p} listed twice in class table"));
            }
        }
        Ok(ClassTable { pieces })
    }

    pub fn class_of(&self, piece: Option<Piece>) -> u8 {
        match piece {
            None => EMPTY_CLASS,
            Some(p) => self.pieces.iter().position(|&q| q == p).unwrap() as u8,
        }
    }

    /// `None` for the empty class; panics on ids above 12.
    pub fn piece_of(&self, class: u8) -> Option<Piece> {
        assert!((class as usize) < NUM_CLASSES, "class id {class} out of range");
        self.pieces.get(class as usize).copied()
    }

    /// Like [`ClassTable::piece_of`] but `None` for the empty class and for
    /// out-of-range ids.
    pub fn piece_of_checked(&self, class: u8) -> Option<Piece> {
        self.pieces.get(class as usize).copied()
    }

    pub fn category_name(&self, class: u8) -> String {
        match self.piece_of(class) {
            Some(p) => p.to_string(),
            None => "empty".to_owned(),
        }
    }

    pub fn categories(&self) -> Vec<Category> {
        (0..NUM_CLASSES as u8)
            .map(|id| Category { id, name: self.category_name(id) })
            .collect()
    }

    /// Maps a category name such as `white-knight` to its id under this table.
    pub fn id_for_name(&self, name: &str) -> Option<u8> {
        let norm = name.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        (0..NUM_CLASSES as u8).find(|&id| self.category_name(id) == norm)
    }
}

impl TryFrom<Vec<Category>> for ClassTable {
    type Error = String;

    fn try_from(categories: Vec<Category>) -> Result<Self, Self::Error> {
        let canonical = ClassTable::canonical();
        let mut pieces = canonical.pieces;
        let mut seen = [false; 12];
        for c in &categories {
            let Some(canon_id) = canonical.id_for_name(&c.name) else {
                return Err(format!("unknown category name {:?}", c.name));
            };
            match canonical.piece_of(canon_id) {
                None if c.id == EMPTY_CLASS => {}
                None => return Err(format!("empty category must have id 12, got {}", c.id)),
                Some(p) => {
                    let slot = c.id as usize;
                    if slot >= 12 || seen[slot] {
                        return Err(format!("bad or duplicate category id {}", c.id));
                    }
                    seen[slot] = true;
                    pieces[slot] = p;
                }
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err("class table must list all 12 piece categories".to_owned());
        }
        ClassTable::from_pieces(pieces)
    }
}

impl From<ClassTable> for Vec<Category> {
    fn from(t: ClassTable) -> Self {
        t.categories()
    }
}

/// 64 class ids in row-major grid order (`8 * y + x`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct ClassificationTarget {
    pub labels: [u8; NUM_SQUARES],
}

impl ClassificationTarget {
    pub fn empty() -> ClassificationTarget {
        ClassificationTarget { labels: [EMPTY_CLASS; NUM_SQUARES] }
    }

    pub fn from_labels(labels: &[u8]) -> Result<ClassificationTarget, String> {
        let labels: [u8; NUM_SQUARES] = labels
            .try_into()
            .map_err(|_| format!("expected {NUM_SQUARES} labels, got {}", labels.len()))?;
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(format!("class id {bad} out of range"));
        }
        Ok(ClassificationTarget { labels })
    }

    pub fn at(&self, coord: GridCoord) -> u8 {
        self.labels[coord.flat()]
    }

    pub fn occupied(&self) -> usize {
        self.labels.iter().filter(|&&l| l != EMPTY_CLASS).count()
    }

    /// Items implied by the non-empty cells.
    pub fn to_items(&self) -> Vec<DetectionItem> {
        GridCoord::all()
            .filter(|&c| self.at(c) != EMPTY_CLASS)
            .map(|coord| DetectionItem { class_id: self.at(coord), coord })
            .collect()
    }
}

impl TryFrom<Vec<u8>> for ClassificationTarget {
    type Error = String;

    fn try_from(v: Vec<u8>) -> Result<Self, Self::Error> {
        ClassificationTarget::from_labels(&v)
    }
}

impl From<ClassificationTarget> for Vec<u8> {
    fn from(t: ClassificationTarget) -> Self {
        t.labels.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DetectionItem {
    pub class_id: u8,
    pub coord: GridCoord,
}

/// At most 32 pieces, one per grid cell, never the empty class.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DetectionTargetSet {
    items: Vec<DetectionItem>,
}

impl DetectionTargetSet {
    /// Items are kept sorted by grid cell.
    pub fn new(mut items: Vec<DetectionItem>) -> Result<DetectionTargetSet, String> {
        if items.len() > NUM_QUERIES {
            return Err(format!("{} items exceed the {NUM_QUERIES}-query budget", items.len()));
        }
        items.sort_by_key(|i| i.coord.flat());
        for w in items.windows(2) {
            if w[0].coord == w[1].coord {
                return Err(format!("two items share cell {:?}", w[0].coord));
            }
        }
        if let Some(i) = items.iter().find(|i| i.class_id >= EMPTY_CLASS) {
            return Err(format!("class {} is not a piece class", i.class_id));
        }
        Ok(DetectionTargetSet { items })
    }

    pub fn items(&self) -> &[DetectionItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Per-square class scores from the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid {
    scores: Vec<f32>,
}

impl PredictionGrid {
    pub fn new(scores: Vec<f32>) -> Result<PredictionGrid, String> {
        if scores.len() != NUM_SQUARES * NUM_CLASSES {
            return Err(format!(
                "expected {}x{} scores, got {}",
                NUM_SQUARES,
                NUM_CLASSES,
                scores.len()
            ));
        }
        Ok(PredictionGrid { scores })
    }

    /// Scores with all mass on the target class of every cell.
    pub fn one_hot(target: &ClassificationTarget) -> PredictionGrid {
        let mut scores = vec![0.0; NUM_SQUARES * NUM_CLASSES];
        for (i, &l) in target.labels.iter().enumerate() {
            scores[i * NUM_CLASSES + l as usize] = 1.0;
        }
        PredictionGrid { scores }
    }

    pub fn square(&self, flat: usize) -> &[f32] {
        &self.scores[flat * NUM_CLASSES..(flat + 1) * NUM_CLASSES]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.scores
    }

    /// Per-cell argmax, lowest class id on ties.
    pub fn argmax(&self) -> ClassificationTarget {
        let mut labels = [EMPTY_CLASS; NUM_SQUARES];
        for (i, l) in labels.iter_mut().enumerate() {
            *l = argmax(self.square(i)) as u8;
        }
        ClassificationTarget { labels }
    }

    /// Softmax probability of the winning class in each cell.
    pub fn max_probabilities(&self) -> [f32; NUM_SQUARES] {
        let mut out = [0.0; NUM_SQUARES];
        for (i, o) in out.iter_mut().enumerate() {
            let p = softmax(self.square(i));
            *o = p.iter().copied().fold(f32::MIN, f32::max);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    /// Logits over the 13 classes.
    pub class_scores: [f32; NUM_CLASSES],
    /// Continuous grid position on the `[0, 7]` scale.
    pub coord: [f32; 2],
}

/// Exactly 32 query slots from the relative-detection head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    queries: Vec<QueryPrediction>,
}

impl PredictionSet {
    pub fn new(queries: Vec<QueryPrediction>) -> Result<PredictionSet, String> {
        if queries.len() != NUM_QUERIES {
            return Err(format!("expected {NUM_QUERIES} queries, got {}", queries.len()));
        }
        Ok(PredictionSet { queries })
    }

    /// Confident predictions of every target item, remaining queries on
    /// background. `logit` sets how peaked the class scores are.
    pub fn perfect(target: &DetectionTargetSet, logit: f32) -> PredictionSet {
        let mut queries = vec![
            QueryPrediction {
                class_scores: one_hot_logits(EMPTY_CLASS, logit),
                coord: [3.5, 3.5],
            };
            NUM_QUERIES
        ];
        for (q, item) in queries.iter_mut().zip(target.items()) {
            q.class_scores = one_hot_logits(item.class_id, logit);
            q.coord = [item.coord.x as f32, item.coord.y as f32];
        }
        PredictionSet { queries }
    }

    pub fn queries(&self) -> &[QueryPrediction] {
        &self.queries
    }

    pub fn queries_mut(&mut self) -> &mut [QueryPrediction] {
        &mut self.queries
    }
}

fn one_hot_logits(class: u8, logit: f32) -> [f32; NUM_CLASSES] {
    let mut s = [0.0; NUM_CLASSES];
    s[class as usize] = logit;
    s
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn encode_classification(board: &BoardState, table: &ClassTable) -> ClassificationTarget {
    let mut labels = [EMPTY_CLASS; NUM_SQUARES];
    for (square, piece) in board.pieces() {
        labels[square_to_grid(square, Orientation::CANONICAL).flat()] = table.class_of(Some(piece));
    }
    ClassificationTarget { labels }
}

/// Board whose placement follows the labels; bookkeeping fields at defaults.
pub fn board_from_target(target: &ClassificationTarget, table: &ClassTable) -> BoardState {
    BoardState::from_pieces(GridCoord::all().filter_map(|c| {
        table
            .piece_of(target.at(c))
            .map(|p| (grid_to_square(c, Orientation::CANONICAL), p))
    }))
}

/// A decoded board. Decoding never repairs legality; `valid` records whether
/// the placement satisfies the board invariants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedBoard {
    pub board: BoardState,
    pub valid: bool,
    /// Detection decoding only: surviving queries dropped because another
    /// query claimed the same cell with higher confidence.
    pub conflicts: usize,
}

pub fn decode_classification(grid: &PredictionGrid, table: &ClassTable) -> DecodedBoard {
    let board = board_from_target(&grid.argmax(), table);
    DecodedBoard { valid: board.is_valid(), board, conflicts: 0 }
}

pub fn encode_detection(board: &BoardState, table: &ClassTable) -> DetectionTargetSet {
    let items = board
        .pieces()
        .map(|(square, piece)| DetectionItem {
            class_id: table.class_of(Some(piece)),
            coord: square_to_grid(square, Orientation::CANONICAL),
        })
        .collect();
    DetectionTargetSet::new(items).expect("a board holds at most one piece per square")
}

/// Default minimum softmax probability for a query to survive decoding.
pub const DEFAULT_DETECTION_THRESHOLD: f32 = 0.5;

pub fn round_coord(v: f32) -> u8 {
    v.round().clamp(0.0, 7.0) as u8
}

pub fn decode_detection(pred: &PredictionSet, table: &ClassTable, threshold: f32) -> DecodedBoard {
    // (cell, class, confidence)
    let mut best: [Option<(u8, f32)>; NUM_SQUARES] = [None; NUM_SQUARES];
    let mut conflicts = 0;
    for q in pred.queries() {
        let probs = softmax(&q.class_scores);
        let class = argmax(&q.class_scores) as u8;
        let conf = probs[class as usize];
        if class == EMPTY_CLASS || conf < threshold {
            continue;
        }
        let cell = GridCoord { x: round_coord(q.coord[0]), y: round_coord(q.coord[1]) }.flat();
        match best[cell] {
            None => best[cell] = Some((class, conf)),
            Some((_, held)) => {
                conflicts += 1;
                if conf > held {
                    best[cell] = Some((class, conf));
                }
            }
        }
    }
    let board = BoardState::from_pieces(best.iter().enumerate().filter_map(|(i, b)| {
        let (class, _) = (*b)?;
        let coord = GridCoord::from_flat(i).unwrap();
        Some((grid_to_square(coord, Orientation::CANONICAL), table.piece_of(class)?))
    }));
    DecodedBoard { valid: board.is_valid(), board, conflicts }
}

/// Grid relabeling under an orientation; piece classes are untouched.
pub trait Rotate: Sized {
    fn rotate(&self, orientation: Orientation) -> Self;
}

impl Rotate for ClassificationTarget {
    fn rotate(&self, orientation: Orientation) -> Self {
        let mut labels = [EMPTY_CLASS; NUM_SQUARES];
        for c in GridCoord::all() {
            labels[c.rotated(orientation).flat()] = self.at(c);
        }
        ClassificationTarget { labels }
    }
}

impl Rotate for DetectionTargetSet {
    fn rotate(&self, orientation: Orientation) -> Self {
        let items = self
            .items
            .iter()
            .map(|i| DetectionItem { class_id: i.class_id, coord: i.coord.rotated(orientation) })
            .collect();
        DetectionTargetSet::new(items).expect("rotation is a bijection on cells")
    }
}

pub fn rotate_target<T: Rotate>(target: &T, quarter_turns: i32) -> T {
    target.rotate(Orientation::new(quarter_turns))
}
