//! Legal move generation and Standard Algebraic Notation.
//!
//! Only as much of the rules as replaying recorded games needs: generate the
//! legal moves of a position, apply one, and resolve a SAN string to exactly
//! one legal move.

use super::board::BoardState;
use super::types::{Color, Piece, PieceType, Square};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MoveKind {
    Normal,
    DoublePush,
    EnPassant,
    CastleKingSide,
    CastleQueenSide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Move {
    pub from: Square,
    pub to: Square,
    pub promotion: Option<PieceType>,
    pub kind: MoveKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SanError {
    #[error("malformed SAN {0:?}")]
    Syntax(String),
    #[error("illegal move {0:?}")]
    Illegal(String),
    #[error("ambiguous move {0:?}")]
    Ambiguous(String),
}

const KNIGHT_STEPS: [(i8, i8); 8] = [(1, 2), (2, 1), (2, -1), (1, -2), (-1, -2), (-2, -1), (-2, 1), (-1, 2)];
const KING_STEPS: [(i8, i8); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];
const ROOK_DIRS: [(i8, i8); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const BISHOP_DIRS: [(i8, i8); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];
const PROMOTIONS: [PieceType; 4] = [PieceType::Queen, PieceType::Rook, PieceType::Bishop, PieceType::Knight];

impl BoardState {
    /// True if any piece of color `by` attacks `target`.
    pub fn is_attacked(&self, target: Square, by: Color) -> bool {
        let occupied_by = |s: Square, kinds: &[PieceType]| {
            self.piece_at(s)
                .is_some_and(|p| p.color == by && kinds.contains(&p.kind))
        };
        // A pawn of `by` attacks target from one rank behind it.
        let back = -by.forward();
        for df in [-1, 1] {
            if let Some(s) = target.offset(df, back) {
                if occupied_by(s, &[PieceType::Pawn]) {
                    return true;
                }
            }
        }
        if KNIGHT_STEPS
            .iter()
            .filter_map(|&(df, dr)| target.offset(df, dr))
            .any(|s| occupied_by(s, &[PieceType::Knight]))
        {
            return true;
        }
        if KING_STEPS
            .iter()
            .filter_map(|&(df, dr)| target.offset(df, dr))
            .any(|s| occupied_by(s, &[PieceType::King]))
        {
            return true;
        }
        for (dirs, kinds) in [
            (ROOK_DIRS, [PieceType::Rook, PieceType::Queen]),
            (BISHOP_DIRS, [PieceType::Bishop, PieceType::Queen]),
        ] {
            for (df, dr) in dirs {
                let mut cur = target;
                while let Some(s) = cur.offset(df, dr) {
                    if let Some(p) = self.piece_at(s) {
                        if p.color == by && kinds.contains(&p.kind) {
                            return true;
                        }
                        break;
                    }
                    cur = s;
                }
            }
        }
        false
    }

    pub fn in_check(&self, color: Color) -> bool {
        self.king_square(color)
            .is_some_and(|k| self.is_attacked(k, color.opposite()))
    }

    fn pseudo_legal_moves(&self) -> Vec<Move> {
        let us = self.side_to_move;
        let mut out = Vec::with_capacity(48);
        for (from, piece) in self.pieces().filter(|(_, p)| p.color == us) {
            match piece.kind {
                PieceType::Pawn => self.pawn_moves(from, us, &mut out),
                PieceType::Knight => self.step_moves(from, us, &KNIGHT_STEPS, &mut out),
                PieceType::King => {
                    self.step_moves(from, us, &KING_STEPS, &mut out);
                    self.castling_moves(from, us, &mut out);
                }
                PieceType::Rook => self.slide_moves(from, us, &ROOK_DIRS, &mut out),
                PieceType::Bishop => self.slide_moves(from, us, &BISHOP_DIRS, &mut out),
                PieceType::Queen => {
                    self.slide_moves(from, us, &ROOK_DIRS, &mut out);
                    self.slide_moves(from, us, &BISHOP_DIRS, &mut out);
                }
            }
        }
        out
    }

    fn push(out: &mut Vec<Move>, from: Square, to: Square, kind: MoveKind) {
        out.push(Move { from, to, promotion: None, kind });
    }

    fn pawn_moves(&self, from: Square, us: Color, out: &mut Vec<Move>) {
        let fwd = us.forward();
        let last_rank = us.opposite().back_rank();
        let mut add = |to: Square, kind: MoveKind| {
            if to.rank() == last_rank {
                for p in PROMOTIONS {
                    out.push(Move { from, to, promotion: Some(p), kind });
                }
            } else {
                out.push(Move { from, to, promotion: None, kind });
            }
        };
        if let Some(one) = from.offset(0, fwd) {
            if self.piece_at(one).is_none() {
                add(one, MoveKind::Normal);
                let start_rank = if us == Color::White { 1 } else { 6 };
                if from.rank() == start_rank {
                    let two = one.offset(0, fwd).unwrap();
                    if self.piece_at(two).is_none() {
                        add(two, MoveKind::DoublePush);
                    }
                }
            }
        }
        for df in [-1, 1] {
            if let Some(to) = from.offset(df, fwd) {
                match self.piece_at(to) {
                    Some(p) if p.color != us => add(to, MoveKind::Normal),
                    None if self.en_passant == Some(to) => add(to, MoveKind::EnPassant),
                    _ => {}
                }
            }
        }
    }

    fn step_moves(&self, from: Square, us: Color, steps: &[(i8, i8)], out: &mut Vec<Move>) {
        for &(df, dr) in steps {
            if let Some(to) = from.offset(df, dr) {
                if self.piece_at(to).is_none_or(|p| p.color != us) {
                    Self::push(out, from, to, MoveKind::Normal);
                }
            }
        }
    }

    fn slide_moves(&self, from: Square, us: Color, dirs: &[(i8, i8)], out: &mut Vec<Move>) {
        for &(df, dr) in dirs {
            let mut cur = from;
            while let Some(to) = cur.offset(df, dr) {
                match self.piece_at(to) {
                    None => Self::push(out, from, to, MoveKind::Normal),
                    Some(p) => {
                        if p.color != us {
                            Self::push(out, from, to, MoveKind::Normal);
                        }
                        break;
                    }
                }
                cur = to;
            }
        }
    }

    fn castling_moves(&self, from: Square, us: Color, out: &mut Vec<Move>) {
        let rank = us.back_rank();
        if from != Square::new(4, rank).unwrap() || self.in_check(us) {
            return;
        }
        let them = us.opposite();
        let rook = Some(Piece::new(us, PieceType::Rook));
        let sq = |f: u8| Square::new(f, rank).unwrap();
        if self.castling.king_side(us)
            && self.piece_at(sq(7)) == rook
            && self.piece_at(sq(5)).is_none()
            && self.piece_at(sq(6)).is_none()
            && !self.is_attacked(sq(5), them)
            && !self.is_attacked(sq(6), them)
        {
            Self::push(out, from, sq(6), MoveKind::CastleKingSide);
        }
        if self.castling.queen_side(us)
            && self.piece_at(sq(0)) == rook
            && (1..=3).all(|f| self.piece_at(sq(f)).is_none())
            && !self.is_attacked(sq(3), them)
            && !self.is_attacked(sq(2), them)
        {
            Self::push(out, from, sq(2), MoveKind::CastleQueenSide);
        }
    }

    /// Applies `mv` without checking legality.
    pub fn play_unchecked(&self, mv: Move) -> BoardState {
        let mut next = self.clone();
        let us = self.side_to_move;
        let moving = self.piece_at(mv.from).expect("move from an empty square");
        let captured = self.piece_at(mv.to);

        next.set(mv.from, None);
        next.set(mv.to, Some(Piece::new(us, mv.promotion.unwrap_or(moving.kind))));
        match mv.kind {
            MoveKind::EnPassant => {
                let victim = mv.to.offset(0, -us.forward()).unwrap();
                next.set(victim, None);
            }
            MoveKind::CastleKingSide | MoveKind::CastleQueenSide => {
                let rank = us.back_rank();
                let (rook_from, rook_to) = if mv.kind == MoveKind::CastleKingSide { (7, 5) } else { (0, 3) };
                next.set(Square::new(rook_from, rank).unwrap(), None);
                next.set(Square::new(rook_to, rank).unwrap(), Some(Piece::new(us, PieceType::Rook)));
            }
            _ => {}
        }

        if moving.kind == PieceType::King {
            next.castling.clear(us);
        }
        next.castling.clear_rook_square(mv.from);
        next.castling.clear_rook_square(mv.to);

        next.en_passant = match mv.kind {
            MoveKind::DoublePush => mv.from.offset(0, us.forward()),
            _ => None,
        };
        let resets = moving.kind == PieceType::Pawn || captured.is_some();
        next.halfmove_clock = if resets { 0 } else { self.halfmove_clock + 1 };
        if us == Color::Black {
            next.fullmove_number += 1;
        }
        next.side_to_move = us.opposite();
        next
    }

    pub fn legal_moves(&self) -> Vec<Move> {
        let us = self.side_to_move;
        self.pseudo_legal_moves()
            .into_iter()
            .filter(|&mv| !self.play_unchecked(mv).in_check(us))
            .collect()
    }

    fn is_capture(&self, mv: Move) -> bool {
        mv.kind == MoveKind::EnPassant || self.piece_at(mv.to).is_some()
    }

    /// Resolves a SAN string against the legal moves of this position.
    pub fn parse_san(&self, san: &str) -> Result<Move, SanError> {
        let spec = SanSpec::parse(san)?;
        let legal = self.legal_moves();
        let mut found = legal.into_iter().filter(|&mv| spec.matches(self, mv));
        match (found.next(), found.next()) {
            (Some(mv), None) => Ok(mv),
            (None, _) => Err(SanError::Illegal(san.to_owned())),
            (Some(_), Some(_)) => Err(SanError::Ambiguous(san.to_owned())),
        }
    }

    /// Plays a SAN move, returning the resulting position.
    pub fn apply_san(&self, san: &str) -> Result<BoardState, SanError> {
        self.parse_san(san).map(|mv| self.play_unchecked(mv))
    }

    /// SAN for a legal move, with check and mate suffixes.
    pub fn to_san(&self, mv: Move) -> String {
        let mut out = match mv.kind {
            MoveKind::CastleKingSide => "O-O".to_owned(),
            MoveKind::CastleQueenSide => "O-O-O".to_owned(),
            _ => {
                let piece = self.piece_at(mv.from).expect("move from an empty square");
                let mut s = String::new();
                let capture = self.is_capture(mv);
                if piece.kind == PieceType::Pawn {
                    if capture {
                        s.push((b'a' + mv.from.file()) as char);
                    }
                } else {
                    s.push(piece.kind.letter());
                    let rivals: Vec<Move> = self
                        .legal_moves()
                        .into_iter()
                        .filter(|m| {
                            m.to == mv.to
                                && m.from != mv.from
                                && self.piece_at(m.from) == Some(piece)
                        })
                        .collect();
                    if !rivals.is_empty() {
                        let same_file = rivals.iter().any(|m| m.from.file() == mv.from.file());
                        let same_rank = rivals.iter().any(|m| m.from.rank() == mv.from.rank());
                        if !same_file {
                            s.push((b'a' + mv.from.file()) as char);
                        } else if !same_rank {
                            s.push((b'1' + mv.from.rank()) as char);
                        } else {
                            s.push_str(&mv.from.to_string());
                        }
                    }
                }
                if capture {
                    s.push('x');
                }
                s.push_str(&mv.to.to_string());
                if let Some(p) = mv.promotion {
                    s.push('=');
                    s.push(p.letter());
                }
                s
            }
        };
        let next = self.play_unchecked(mv);
        if next.in_check(next.side_to_move) {
            out.push(if next.legal_moves().is_empty() { '#' } else { '+' });
        }
        out
    }
}

/// Syntactic content of a SAN token.
#[derive(Debug, Clone, PartialEq, Eq)]
enum SanSpec {
    Castle(MoveKind),
    Piece {
        kind: PieceType,
        from_file: Option<u8>,
        from_rank: Option<u8>,
        capture: bool,
        to: Square,
        promotion: Option<PieceType>,
    },
}

impl SanSpec {
    fn parse(san: &str) -> Result<SanSpec, SanError> {
        let err = || SanError::Syntax(san.to_owned());
        let body = san.trim_end_matches(['+', '#', '!', '?']);
        match body {
            "O-O" | "0-0" => return Ok(SanSpec::Castle(MoveKind::CastleKingSide)),
            "O-O-O" | "0-0-0" => return Ok(SanSpec::Castle(MoveKind::CastleQueenSide)),
            _ => {}
        }
        let mut chars: Vec<char> = body.chars().collect();
        if chars.len() < 2 {
            return Err(err());
        }

        let mut promotion = None;
        if let Some(&last) = chars.last() {
            if "QRBN".contains(last) && chars.len() >= 3 {
                promotion = Some(PieceType::from_letter(last).unwrap());
                chars.pop();
                if chars.last() == Some(&'=') {
                    chars.pop();
                }
            }
        }

        let kind = match chars.first() {
            Some(&c) if "KQRBN".contains(c) => {
                chars.remove(0);
                PieceType::from_letter(c).unwrap()
            }
            _ => PieceType::Pawn,
        };
        if chars.len() < 2 {
            return Err(err());
        }
        let to_text: String = chars[chars.len() - 2..].iter().collect();
        let to: Square = to_text.parse().map_err(|_| err())?;
        chars.truncate(chars.len() - 2);

        let capture = chars.last() == Some(&'x');
        if capture {
            chars.pop();
        }
        let (mut from_file, mut from_rank) = (None, None);
        for c in chars {
            match c {
                'a'..='h' if from_file.is_none() && from_rank.is_none() => from_file = Some(c as u8 - b'a'),
                '1'..='8' if from_rank.is_none() => from_rank = Some(c as u8 - b'1'),
                _ => return Err(err()),
            }
        }
        if kind == PieceType::Pawn && (from_rank.is_some() || (capture && from_file.is_none())) {
            return Err(err());
        }
        if promotion.is_some() && kind != PieceType::Pawn {
            return Err(err());
        }
        Ok(SanSpec::Piece { kind, from_file, from_rank, capture, to, promotion })
    }

    fn matches(&self, board: &BoardState, mv: Move) -> bool {
        match *self {
            SanSpec::Castle(kind) => mv.kind == kind,
            SanSpec::Piece { kind, from_file, from_rank, capture, to, promotion } => {
                let Some(piece) = board.piece_at(mv.from) else {
                    return false;
                };
                matches!(mv.kind, MoveKind::Normal | MoveKind::DoublePush | MoveKind::EnPassant)
                    && piece.kind == kind
                    && mv.to == to
                    && mv.promotion == promotion
                    && from_file.is_none_or(|f| mv.from.file() == f)
                    && from_rank.is_none_or(|r| mv.from.rank() == r)
                    && (!capture || board.is_capture(mv))
            }
        }
    }
}
