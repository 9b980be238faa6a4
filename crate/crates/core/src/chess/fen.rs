//! Forsyth-Edwards Notation.
//!
//! The strict parser requires all six fields and rejects positions that break
//! a [`BoardState`] invariant. The lenient parser accepts a bare placement
//! field (missing trailing fields default to `w - - 0 1`) and reports
//! invariant violations instead of failing, which is what validation tooling
//! needs to load broken records.

use std::fmt;

use super::board::{BoardState, BoardViolation, CastlingRights};
use super::types::{Color, Piece, Square};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FenMode {
    Strict,
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FenField {
    Placement,
    SideToMove,
    Castling,
    EnPassant,
    HalfmoveClock,
    FullmoveNumber,
    /// The string as a whole (field count, board invariants).
    Record,
}

impl fmt::Display for FenField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FenField::Placement => "placement",
            FenField::SideToMove => "side to move",
            FenField::Castling => "castling",
            FenField::EnPassant => "en passant",
            FenField::HalfmoveClock => "halfmove clock",
            FenField::FullmoveNumber => "fullmove number",
            FenField::Record => "record",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FenErrorKind {
    #[error("expected 6 space-separated fields, found {0}")]
    FieldCount(usize),
    #[error("expected 8 ranks, found {0}")]
    RankCount(usize),
    #[error("invalid piece letter {0:?}")]
    InvalidPiece(char),
    #[error("rank {rank} covers {columns} columns instead of 8")]
    RankWidth { rank: u8, columns: usize },
    #[error("invalid value {0:?}")]
    InvalidValue(String),
    #[error("board invariant broken: {0}")]
    Invariant(BoardViolation),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad FEN {field} field at byte {position}: {kind}")]
pub struct FenError {
    pub field: FenField,
    /// Byte offset into the input where the problem was found.
    pub position: usize,
    pub kind: FenErrorKind,
}

impl FenError {
    fn new(field: FenField, position: usize, kind: FenErrorKind) -> FenError {
        FenError { field, position, kind }
    }
}

/// Strict parse of a six-field FEN string.
pub fn parse_fen(text: &str) -> Result<BoardState, FenError> {
    parse_fen_with(text, FenMode::Strict).map(|(b, _)| b)
}

/// Parses under `mode`, returning the board together with any invariant
/// violations (always empty in strict mode, since those are errors there).
pub fn parse_fen_with(
    text: &str,
    mode: FenMode,
) -> Result<(BoardState, Vec<BoardViolation>), FenError> {
    let fields: Vec<(usize, &str)> = split_fields(text);
    let expected = 6;
    match mode {
        FenMode::Strict if fields.len() != expected => {
            return Err(FenError::new(FenField::Record, 0, FenErrorKind::FieldCount(fields.len())));
        }
        FenMode::Lenient if fields.is_empty() || fields.len() > expected => {
            return Err(FenError::new(FenField::Record, 0, FenErrorKind::FieldCount(fields.len())));
        }
        _ => {}
    }

    let mut board = BoardState::empty();
    let (pos, placement) = fields[0];
    parse_placement(placement, pos, &mut board)?;

    if let Some(&(pos, stm)) = fields.get(1) {
        board.side_to_move = match stm {
            "w" => Color::White,
            "b" => Color::Black,
            _ => return Err(invalid(FenField::SideToMove, pos, stm)),
        };
    }
    if let Some(&(pos, castling)) = fields.get(2) {
        board.castling = parse_castling(castling, pos)?;
    }
    if let Some(&(pos, ep)) = fields.get(3) {
        board.en_passant = match ep {
            "-" => None,
            _ => {
                let sq: Square = ep.parse().map_err(|_| invalid(FenField::EnPassant, pos, ep))?;
                if sq.rank() != 2 && sq.rank() != 5 {
                    return Err(invalid(FenField::EnPassant, pos, ep));
                }
                Some(sq)
            }
        };
    }
    if let Some(&(pos, half)) = fields.get(4) {
        board.halfmove_clock = half.parse().map_err(|_| invalid(FenField::HalfmoveClock, pos, half))?;
    }
    if let Some(&(pos, full)) = fields.get(5) {
        let n: u32 = full.parse().map_err(|_| invalid(FenField::FullmoveNumber, pos, full))?;
        board.fullmove_number = match (n, mode) {
            (0, FenMode::Lenient) => 1,
            (0, FenMode::Strict) => return Err(invalid(FenField::FullmoveNumber, pos, full)),
            (n, _) => n,
        };
    }

    let violations = board.violations();
    match (mode, violations.first()) {
        (FenMode::Strict, Some(v)) => Err(FenError::new(
            FenField::Placement,
            fields[0].0,
            FenErrorKind::Invariant(v.clone()),
        )),
        (FenMode::Strict, None) => Ok((board, Vec::new())),
        (FenMode::Lenient, _) => Ok((board, violations)),
    }
}

fn invalid(field: FenField, pos: usize, value: &str) -> FenError {
    FenError::new(field, pos, FenErrorKind::InvalidValue(value.to_owned()))
}

fn split_fields(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, &text[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &text[s..]));
    }
    out
}

fn parse_placement(field: &str, offset: usize, board: &mut BoardState) -> Result<(), FenError> {
    let ranks: Vec<&str> = field.split('/').collect();
    if ranks.len() != 8 {
        return Err(FenError::new(FenField::Placement, offset, FenErrorKind::RankCount(ranks.len())));
    }
    let mut pos = offset;
    for (i, rank_text) in ranks.iter().enumerate() {
        let rank = 7 - i as u8;
        let mut file = 0usize;
        for (j, c) in rank_text.char_indices() {
            let at = pos + j;
            if let Some(d) = c.to_digit(10) {
                if d == 0 || d > 8 {
                    return Err(FenError::new(FenField::Placement, at, FenErrorKind::InvalidPiece(c)));
                }
                file += d as usize;
            } else {
                let piece = Piece::from_fen_char(c)
                    .ok_or_else(|| FenError::new(FenField::Placement, at, FenErrorKind::InvalidPiece(c)))?;
                if file < 8 {
                    board.set(Square::new(file as u8, rank).unwrap(), Some(piece));
                }
                file += 1;
            }
            if file > 8 {
                return Err(FenError::new(
                    FenField::Placement,
                    at,
                    FenErrorKind::RankWidth { rank: rank + 1, columns: file },
                ));
            }
        }
        if file != 8 {
            return Err(FenError::new(
                FenField::Placement,
                pos,
                FenErrorKind::RankWidth { rank: rank + 1, columns: file },
            ));
        }
        pos += rank_text.len() + 1;
    }
    Ok(())
}

fn parse_castling(field: &str, pos: usize) -> Result<CastlingRights, FenError> {
    let mut rights = CastlingRights::NONE;
    if field == "-" {
        return Ok(rights);
    }
    for (i, c) in field.char_indices() {
        let slot = match c {
            'K' => &mut rights.white_king_side,
            'Q' => &mut rights.white_queen_side,
            'k' => &mut rights.black_king_side,
            'q' => &mut rights.black_queen_side,
            _ => return Err(invalid(FenField::Castling, pos + i, field)),
        };
        if *slot {
            return Err(invalid(FenField::Castling, pos + i, field));
        }
        *slot = true;
    }
    Ok(rights)
}

/// Just the first FEN field, e.g. `4k3/8/8/8/8/8/8/4K3`.
pub fn placement_field(board: &BoardState) -> String {
    let mut out = String::with_capacity(71);
    for rank in (0..8u8).rev() {
        let mut run = 0;
        for file in 0..8u8 {
            match board.piece_at(Square::new(file, rank).unwrap()) {
                Some(p) => {
                    if run > 0 {
                        out.push(char::from_digit(run, 10).unwrap());
                        run = 0;
                    }
                    out.push(p.fen_char());
                }
                None => run += 1,
            }
        }
        if run > 0 {
            out.push(char::from_digit(run, 10).unwrap());
        }
        if rank > 0 {
            out.push('/');
        }
    }
    out
}

pub fn serialize_fen(board: &BoardState) -> String {
    let mut castling = String::new();
    let c = board.castling;
    for (flag, ch) in [
        (c.white_king_side, 'K'),
        (c.white_queen_side, 'Q'),
        (c.black_king_side, 'k'),
        (c.black_queen_side, 'q'),
    ] {
        if flag {
            castling.push(ch);
        }
    }
    if castling.is_empty() {
        castling.push('-');
    }
    format!(
        "{} {} {} {} {} {}",
        placement_field(board),
        match board.side_to_move {
            Color::White => 'w',
            Color::Black => 'b',
        },
        castling,
        board.en_passant.map_or_else(|| "-".to_owned(), |s| s.to_string()),
        board.halfmove_clock,
        board.fullmove_number,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chess::types::PieceType;

    const START: &str = "rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1";

    #[test]
    fn initial_position() {
        let b = parse_fen(START).unwrap();
        assert_eq!(b, BoardState::initial());
        assert_eq!(b.piece_count(), 32);
        assert_eq!(b.side_to_move, Color::White);
        for file in 0..8 {
            let sq = Square::new(file, 1).unwrap();
            assert_eq!(b.piece_at(sq), Some(Piece::new(Color::White, PieceType::Pawn)));
        }
        assert_eq!(
            b.piece_at("b1".parse().unwrap()),
            Some(Piece::new(Color::White, PieceType::Knight))
        );
        assert_eq!(serialize_fen(&b), START);
    }

    #[test]
    fn empty_board_strict_vs_lenient() {
        let text = "8/8/8/8/8/8/8/8 w - - 0 1";
        let err = parse_fen(text).unwrap_err();
        assert!(matches!(err.kind, FenErrorKind::Invariant(BoardViolation::KingCount { .. })));
        let (board, violations) = parse_fen_with(text, FenMode::Lenient).unwrap();
        assert_eq!(board.piece_count(), 0);
        assert!(!violations.is_empty());
    }

    #[test]
    fn lone_kings_placement() {
        let b = BoardState::from_pieces([
            ("e1".parse().unwrap(), Piece::new(Color::White, PieceType::King)),
            ("e8".parse().unwrap(), Piece::new(Color::Black, PieceType::King)),
        ]);
        assert_eq!(placement_field(&b), "4k3/8/8/8/8/8/8/4K3");
    }

    #[test]
    fn errors_name_field_and_position() {
        let e = parse_fen("rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq -").unwrap_err();
        assert_eq!(e.kind, FenErrorKind::FieldCount(4));

        let e = parse_fen("rnbqkbnr/ppppxppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1").unwrap_err();
        assert_eq!(e.field, FenField::Placement);
        assert_eq!(e.kind, FenErrorKind::InvalidPiece('x'));
        assert_eq!(e.position, 13);

        let e = parse_fen("rnbqkbnr/ppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1").unwrap_err();
        assert_eq!(e.kind, FenErrorKind::RankWidth { rank: 7, columns: 7 });

        let e = parse_fen("rnbqkbnr/pppppppp/9/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1").unwrap_err();
        assert_eq!(e.field, FenField::Placement);

        let e = parse_fen("rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR x KQkq - 0 1").unwrap_err();
        assert_eq!(e.field, FenField::SideToMove);
        assert_eq!(e.position, 44);

        let e = parse_fen("kk6/8/8/8/8/8/8/K7 w - - 0 1").unwrap_err();
        assert_eq!(
            e.kind,
            FenErrorKind::Invariant(BoardViolation::KingCount { color: Color::Black, count: 2 })
        );

        let e = parse_fen("4k3/8/8/8/8/8/8/4K3 w KK - 0 1").unwrap_err();
        assert_eq!(e.field, FenField::Castling);
        let e = parse_fen("4k3/8/8/8/8/8/8/4K3 w - e4 0 1").unwrap_err();
        assert_eq!(e.field, FenField::EnPassant);
    }

    #[test]
    fn lenient_accepts_placement_only() {
        let (b, v) = parse_fen_with("4k3/8/8/8/8/8/8/4K3", FenMode::Lenient).unwrap();
        assert!(v.is_empty());
        assert_eq!(serialize_fen(&b), "4k3/8/8/8/8/8/8/4K3 w - - 0 1");
    }
}
