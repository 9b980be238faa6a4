use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    White,
    Black,
}

impl Color {
    pub const ALL: [Color; 2] = [Color::White, Color::Black];

    pub fn opposite(self) -> Color {
        match self {
            Color::White => Color::Black,
            Color::Black => Color::White,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Rank index (0-based) of this color's back rank.
    pub fn back_rank(self) -> u8 {
        match self {
            Color::White => 0,
            Color::Black => 7,
        }
    }

    /// Direction pawns of this color advance in, as a rank delta.
    pub fn forward(self) -> i8 {
        match self {
            Color::White => 1,
            Color::Black => -1,
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Color::White => "white",
            Color::Black => "black",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PieceType {
    Pawn,
    Rook,
    Knight,
    Bishop,
    Queen,
    King,
}

impl PieceType {
    pub const ALL: [PieceType; 6] = [
        PieceType::Pawn,
        PieceType::Rook,
        PieceType::Knight,
        PieceType::Bishop,
        PieceType::Queen,
        PieceType::King,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Uppercase FEN / SAN letter.
    pub fn letter(self) -> char {
        match self {
            PieceType::Pawn => 'P',
            PieceType::Rook => 'R',
            PieceType::Knight => 'N',
            PieceType::Bishop => 'B',
            PieceType::Queen => 'Q',
            PieceType::King => 'K',
        }
    }

    pub fn from_letter(c: char) -> Option<PieceType> {
        Some(match c.to_ascii_uppercase() {
            'P' => PieceType::Pawn,
            'R' => PieceType::Rook,
            'N' => PieceType::Knight,
            'B' => PieceType::Bishop,
            'Q' => PieceType::Queen,
            'K' => PieceType::King,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            PieceType::Pawn => "pawn",
            PieceType::Rook => "rook",
            PieceType::Knight => "knight",
            PieceType::Bishop => "bishop",
            PieceType::Queen => "queen",
            PieceType::King => "king",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Piece {
    pub color: Color,
    pub kind: PieceType,
}

impl Piece {
    pub const fn new(color: Color, kind: PieceType) -> Piece {
        Piece { color, kind }
    }

    /// FEN letter: uppercase for White, lowercase for Black.
    pub fn fen_char(self) -> char {
        let c = self.kind.letter();
        match self.color {
            Color::White => c,
            Color::Black => c.to_ascii_lowercase(),
        }
    }

    pub fn from_fen_char(c: char) -> Option<Piece> {
        let kind = PieceType::from_letter(c)?;
        let color = if c.is_ascii_uppercase() {
            Color::White
        } else {
            Color::Black
        };
        Some(Piece { color, kind })
    }
}

impl fmt::Display for Piece {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.color, self.kind.name())
    }
}

/// A board square. Index is `rank * 8 + file`, so a1 = 0 and h8 = 63.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Square(u8);

impl Square {
    pub fn new(file: u8, rank: u8) -> Option<Square> {
        (file < 8 && rank < 8).then_some(Square(rank * 8 + file))
    }

    pub fn from_index(index: usize) -> Option<Square> {
        (index < 64).then_some(Square(index as u8))
    }

    pub fn all() -> impl Iterator<Item = Square> {
        (0..64u8).map(Square)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// 0..7 for files a..h.
    pub fn file(self) -> u8 {
        self.0 % 8
    }

    /// 0..7 for ranks 1..8.
    pub fn rank(self) -> u8 {
        self.0 / 8
    }

    pub fn offset(self, file_delta: i8, rank_delta: i8) -> Option<Square> {
        let f = self.file() as i8 + file_delta;
        let r = self.rank() as i8 + rank_delta;
        if (0..8).contains(&f) && (0..8).contains(&r) {
            Some(Square((r * 8 + f) as u8))
        } else {
            None
        }
    }

    pub fn name(self) -> String {
        format!("{}", self)
    }
}

impl fmt::Display for Square {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", (b'a' + self.file()) as char, self.rank() + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid square name {0:?}")]
pub struct ParseSquareError(pub String);

impl FromStr for Square {
    type Err = ParseSquareError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let b = s.as_bytes();
        if b.len() != 2 {
            return Err(ParseSquareError(s.to_owned()));
        }
        let file = b[0].wrapping_sub(b'a');
        let rank = b[1].wrapping_sub(b'1');
        Square::new(file, rank).ok_or_else(|| ParseSquareError(s.to_owned()))
    }
}

impl Serialize for Square {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Square {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Position on the 8x8 label grid. `(0, 0)` is the top-left cell, which is
/// a8 in the canonical orientation; `x` grows to the right, `y` downwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCoord {
    pub x: u8,
    pub y: u8,
}

impl GridCoord {
    pub fn new(x: u8, y: u8) -> Option<GridCoord> {
        (x < 8 && y < 8).then_some(GridCoord { x, y })
    }

    /// Row-major index `8 * y + x`.
    pub fn flat(self) -> usize {
        self.y as usize * 8 + self.x as usize
    }

    pub fn from_flat(index: usize) -> Option<GridCoord> {
        (index < 64).then(|| GridCoord {
            x: (index % 8) as u8,
            y: (index / 8) as u8,
        })
    }

    pub fn all() -> impl Iterator<Item = GridCoord> {
        (0..64).map(|i| GridCoord::from_flat(i).unwrap())
    }

    /// One clockwise quarter turn of the grid: the top-left cell moves to
    /// the top-right.
    pub fn rotate_cw(self) -> GridCoord {
        GridCoord {
            x: 7 - self.y,
            y: self.x,
        }
    }

    pub fn rotated(self, orientation: Orientation) -> GridCoord {
        (0..orientation.quarter_turns()).fold(self, |c, _| c.rotate_cw())
    }
}

/// Number of clockwise quarter turns applied to the canonical grid labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Orientation(u8);

impl Orientation {
    pub const CANONICAL: Orientation = Orientation(0);
    pub const ALL: [Orientation; 4] = [Orientation(0), Orientation(1), Orientation(2), Orientation(3)];

    /// Any integer is reduced mod 4.
    pub fn new(quarter_turns: i32) -> Orientation {
        Orientation(quarter_turns.rem_euclid(4) as u8)
    }

    pub fn quarter_turns(self) -> u8 {
        self.0
    }

    pub fn compose(self, other: Orientation) -> Orientation {
        Orientation((self.0 + other.0) % 4)
    }

    pub fn inverse(self) -> Orientation {
        Orientation((4 - self.0) % 4)
    }
}

impl TryFrom<u8> for Orientation {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        if v < 4 {
            Ok(Orientation(v))
        } else {
            Err(format!("orientation must be 0..3 quarter turns, got {v}"))
        }
    }
}

impl From<Orientation> for u8 {
    fn from(o: Orientation) -> u8 {
        o.0
    }
}

/// Grid cell of `square` under `orientation`. In the canonical orientation
/// `x` is the file index and `y = 7 - rank index`, so a8 is `(0, 0)` and h1 is
/// `(7, 7)`.
pub fn square_to_grid(square: Square, orientation: Orientation) -> GridCoord {
    GridCoord {
        x: square.file(),
        y: 7 - square.rank(),
    }
    .rotated(orientation)
}

pub fn grid_to_square(coord: GridCoord, orientation: Orientation) -> Square {
    let c = coord.rotated(orientation.inverse());
    Square::new(c.x, 7 - c.y).expect("grid coordinates are always in range")
}
