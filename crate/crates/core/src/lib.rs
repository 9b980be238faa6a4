//! Single-image chess recognition: chess notation, learning targets, dataset
//! tooling, set-prediction matching, model training and board-level
//! evaluation.

pub mod chess;
pub mod dataset;
pub mod eval;
pub mod matching;
pub mod model;
pub mod targets;

pub use chess::{BoardState, Color, GameRecord, GridCoord, Orientation, Piece, PieceType, Square};
