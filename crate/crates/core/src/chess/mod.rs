//! Chess domain model: pieces, squares, positions, and the FEN, SAN and PGN
//! notations needed to turn recorded games into labeled positions.

pub mod board;
pub mod fen;
pub mod moves;
pub mod pgn;
pub mod types;

use rand::seq::SliceRandom;
use rand::Rng;

pub use board::{BoardState, BoardViolation, CastlingRights};
pub use fen::{parse_fen, parse_fen_with, placement_field, serialize_fen, FenError, FenMode};
pub use moves::{Move, MoveKind, SanError};
pub use pgn::{parse_pgn, replay_game, GameRecord, PgnError, ReplayError};
pub use types::{grid_to_square, square_to_grid, Color, GridCoord, Orientation, Piece, PieceType, Square};

/// Plays up to `plies` uniformly random legal moves from the initial
/// position, stopping early at mate or stalemate.
pub fn random_game<R: Rng + ?Sized>(rng: &mut R, plies: usize) -> GameRecord {
    let mut board = BoardState::initial();
    let mut moves = Vec::with_capacity(plies);
    for _ in 0..plies {
        let legal = board.legal_moves();
        let Some(&mv) = legal.choose(rng) else { break };
        moves.push(board.to_san(mv));
        board = board.play_unchecked(mv);
    }
    GameRecord {
        headers: vec![("Result".to_owned(), "*".to_owned())],
        moves,
        device_tag: None,
    }
}

/// Final position of a random game of `plies` half-moves.
pub fn random_position<R: Rng + ?Sized>(rng: &mut R, plies: usize) -> BoardState {
    let mut board = BoardState::initial();
    for _ in 0..plies {
        let legal = board.legal_moves();
        let Some(&mv) = legal.choose(rng) else { break };
        board = board.play_unchecked(mv);
    }
    board
}
