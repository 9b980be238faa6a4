use std::fmt;

use serde::{Deserialize, Serialize};

use super::types::{Color, Piece, PieceType, Square};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CastlingRights {
    pub white_king_side: bool,
    pub white_queen_side: bool,
    pub black_king_side: bool,
    pub black_queen_side: bool,
}

impl CastlingRights {
    pub const ALL: CastlingRights = CastlingRights {
        white_king_side: true,
        white_queen_side: true,
        black_king_side: true,
        black_queen_side: true,
    };

    pub const NONE: CastlingRights = CastlingRights {
        white_king_side: false,
        white_queen_side: false,
        black_king_side: false,
        black_queen_side: false,
    };

    pub fn king_side(&self, color: Color) -> bool {
        match color {
            Color::White => self.white_king_side,
            Color::Black => self.black_king_side,
        }
    }

    pub fn queen_side(&self, color: Color) -> bool {
        match color {
            Color::White => self.white_queen_side,
            Color::Black => self.black_queen_side,
        }
    }

    pub fn clear(&mut self, color: Color) {
        match color {
            Color::White => {
                self.white_king_side = false;
                self.white_queen_side = false;
            }
            Color::Black => {
                self.black_king_side = false;
                self.black_queen_side = false;
            }
        }
    }

    /// Drops whichever right depends on a rook standing on `square`.
    pub fn clear_rook_square(&mut self, square: Square) {
        match (square.file(), square.rank()) {
            (0, 0) => self.white_queen_side = false,
            (7, 0) => self.white_king_side = false,
            (0, 7) => self.black_queen_side = false,
            (7, 7) => self.black_king_side = false,
            _ => {}
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == CastlingRights::NONE
    }
}

/// A rule the placement of a [`BoardState`] breaks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoardViolation {
    KingCount { color: Color, count: usize },
    TooManyPawns { color: Color, count: usize },
    PawnOnBackRank { square: Square },
    TooManyPieces { count: usize },
}

impl fmt::Display for BoardViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoardViolation::KingCount { color, count } => {
                write!(f, "{color} has {count} kings, expected exactly 1")
            }
            BoardViolation::TooManyPawns { color, count } => {
                write!(f, "{color} has {count} pawns, at most 8 allowed")
            }
            BoardViolation::PawnOnBackRank { square } => write!(f, "pawn on {square}"),
            BoardViolation::TooManyPieces { count } => {
                write!(f, "{count} pieces on the board, at most 32 allowed")
            }
        }
    }
}

/// Full chess position.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BoardState {
    placement: [Option<Piece>; 64],
    pub side_to_move: Color,
    pub castling: CastlingRights,
    pub en_passant: Option<Square>,
    pub halfmove_clock: u32,
    pub fullmove_number: u32,
}

impl Default for BoardState {
    fn default() -> Self {
        BoardState::empty()
    }
}

impl BoardState {
    /// Board with no pieces, White to move, no castling rights.
    pub fn empty() -> BoardState {
        BoardState {
            placement: [None; 64],
            side_to_move: Color::White,
            castling: CastlingRights::NONE,
            en_passant: None,
            halfmove_clock: 0,
            fullmove_number: 1,
        }
    }

    pub fn initial() -> BoardState {
        use PieceType::*;
        let mut b = BoardState::empty();
        let back = [Rook, Knight, Bishop, Queen, King, Bishop, Knight, Rook];
        for (file, kind) in back.into_iter().enumerate() {
            let file = file as u8;
            b.set(Square::new(file, 0).unwrap(), Some(Piece::new(Color::White, kind)));
            b.set(Square::new(file, 1).unwrap(), Some(Piece::new(Color::White, Pawn)));
            b.set(Square::new(file, 6).unwrap(), Some(Piece::new(Color::Black, Pawn)));
            b.set(Square::new(file, 7).unwrap(), Some(Piece::new(Color::Black, kind)));
        }
        b.castling = CastlingRights::ALL;
        b
    }

    /// Board holding only the given pieces; all bookkeeping at defaults.
    pub fn from_pieces(pieces: impl IntoIterator<Item = (Square, Piece)>) -> BoardState {
        let mut b = BoardState::empty();
        for (s, p) in pieces {
            b.set(s, Some(p));
        }
        b
    }

    pub fn piece_at(&self, square: Square) -> Option<Piece> {
        self.placement[square.index()]
    }

    pub fn set(&mut self, square: Square, piece: Option<Piece>) {
        self.placement[square.index()] = piece;
    }

    pub fn placement(&self) -> &[Option<Piece>; 64] {
        &self.placement
    }

    pub fn pieces(&self) -> impl Iterator<Item = (Square, Piece)> + '_ {
        Square::all().filter_map(|s| self.piece_at(s).map(|p| (s, p)))
    }

    pub fn piece_count(&self) -> usize {
        self.placement.iter().flatten().count()
    }

    pub fn count(&self, piece: Piece) -> usize {
        self.placement.iter().flatten().filter(|&&p| p == piece).count()
    }

    pub fn king_square(&self, color: Color) -> Option<Square> {
        let king = Piece::new(color, PieceType::King);
        self.pieces().find(|&(_, p)| p == king).map(|(s, _)| s)
    }

    /// Same placement, bookkeeping fields ignored.
    pub fn same_placement(&self, other: &BoardState) -> bool {
        self.placement == other.placement
    }

    pub fn violations(&self) -> Vec<BoardViolation> {
        let mut out = Vec::new();
        for color in Color::ALL {
            let kings = self.count(Piece::new(color, PieceType::King));
            if kings != 1 {
                out.push(BoardViolation::KingCount { color, count: kings });
            }
            let pawns = self.count(Piece::new(color, PieceType::Pawn));
            if pawns > 8 {
                out.push(BoardViolation::TooManyPawns { color, count: pawns });
            }
        }
        for (square, piece) in self.pieces() {
            if piece.kind == PieceType::Pawn && (square.rank() == 0 || square.rank() == 7) {
                out.push(BoardViolation::PawnOnBackRank { square });
            }
        }
        let total = self.piece_count();
        if total > 32 {
            out.push(BoardViolation::TooManyPieces { count: total });
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.violations().is_empty()
    }
}

impl fmt::Display for BoardState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&super::fen::serialize_fen(self))
    }
}
