//! Portable Game Notation import and game replay.
//!
//! Accepts the import format: tag pairs followed by movetext, any number of
//! games per file. Comments (`{...}` and `;` to end of line), move numbers and
//! result tokens are dropped. Recursive variations and numeric annotation
//! glyphs are rejected, so corrupt or annotated sources surface as errors
//! instead of being silently flattened.

use serde::{Deserialize, Serialize};

use super::board::BoardState;
use super::fen::parse_fen;
use super::moves::SanError;

/// Header tag holding the capture-device stratum of a recorded game.
pub const DEVICE_TAG: &str = "Device";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GameRecord {
    /// Tag pairs in file order.
    pub headers: Vec<(String, String)>,
    pub moves: Vec<String>,
    pub device_tag: Option<String>,
}

impl GameRecord {
    pub fn header(&self, key: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_header(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.headers.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.headers.push((key.to_owned(), value)),
        }
    }

    pub fn eco(&self) -> Option<&str> {
        self.header("ECO")
    }

    /// Writes the game back out in export-like form.
    pub fn to_pgn(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.headers {
            let v = v.replace('\\', "\\\\").replace('"', "\\\"");
            out.push_str(&format!("[{k} \"{v}\"]\n"));
        }
        out.push('\n');
        let mut line = String::new();
        for (i, san) in self.moves.iter().enumerate() {
            if i % 2 == 0 {
                line.push_str(&format!("{}. ", i / 2 + 1));
            }
            line.push_str(san);
            line.push(' ');
            if line.len() > 72 {
                out.push_str(line.trim_end());
                out.push('\n');
                line.clear();
            }
        }
        line.push_str(self.header("Result").unwrap_or("*"));
        out.push_str(&line);
        out.push_str("\n\n");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PgnError {
    #[error("line {line}: unterminated tag pair")]
    UnterminatedHeader { line: usize },
    #[error("line {line}: malformed tag pair")]
    MalformedHeader { line: usize },
    #[error("line {line}: movetext before any tag pair")]
    MovetextBeforeHeaders { line: usize },
    #[error("line {line}: unterminated comment")]
    UnterminatedComment { line: usize },
    #[error("line {line}: variations are not supported")]
    Variation { line: usize },
    #[error("line {line}: numeric annotation glyph {glyph:?} is not supported")]
    Nag { line: usize, glyph: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("ply {ply} ({san:?}): {source}")]
pub struct ReplayError {
    /// 1-based half-move index of the failing move.
    pub ply: usize,
    pub san: String,
    #[source]
    pub source: SanError,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid FEN tag: {0}")]
pub struct StartPositionError(#[from] pub super::fen::FenError);

pub fn parse_pgn(text: &str) -> Result<Vec<GameRecord>, PgnError> {
    let mut games = Vec::new();
    let mut current: Option<GameRecord> = None;
    let mut in_movetext = false;
    let mut line = 1;
    let mut at_line_start = true;
    let mut chars = text.trim_start_matches('\u{feff}').char_indices().peekable();

    while let Some((i, c)) = chars.next() {
        let line_start = at_line_start;
        at_line_start = c == '\n';
        match c {
            '\n' => line += 1,
            c if c.is_whitespace() => {}
            '%' if line_start => skip_line(&mut chars, &mut line, &mut at_line_start),
            ';' => skip_line(&mut chars, &mut line, &mut at_line_start),
            '{' => {
                let opened = line;
                loop {
                    match chars.next() {
                        Some((_, '}')) => break,
                        Some((_, '\n')) => line += 1,
                        Some(_) => {}
                        None => return Err(PgnError::UnterminatedComment { line: opened }),
                    }
                }
            }
            '(' | ')' => return Err(PgnError::Variation { line }),
            '[' => {
                if in_movetext {
                    games.extend(current.take().map(finish));
                    in_movetext = false;
                }
                let mut raw = String::from("[");
                let mut quoted = false;
                loop {
                    match chars.next() {
                        Some((_, '\n')) | None => return Err(PgnError::UnterminatedHeader { line }),
                        Some((_, '\\')) if quoted => {
                            raw.push('\\');
                            if let Some((_, n)) = chars.next() {
                                raw.push(n);
                            }
                        }
                        Some((_, '"')) => {
                            quoted = !quoted;
                            raw.push('"');
                        }
                        Some((_, ']')) if !quoted => {
                            raw.push(']');
                            break;
                        }
                        Some((_, ch)) => raw.push(ch),
                    }
                }
                let tag = parse_tag(&raw, line)?;
                current.get_or_insert_with(GameRecord::default).headers.push(tag);
            }
            _ => {
                let mut end = i + c.len_utf8();
                while let Some(&(j, ch)) = chars.peek() {
                    if ch.is_whitespace() || "{;()[".contains(ch) {
                        break;
                    }
                    end = j + ch.len_utf8();
                    chars.next();
                }
                let token = &text.trim_start_matches('\u{feff}')[i..end];
                let Some(game) = current.as_mut() else {
                    return Err(PgnError::MovetextBeforeHeaders { line });
                };
                in_movetext = true;
                if token.starts_with('$') {
                    return Err(PgnError::Nag { line, glyph: token.to_owned() });
                }
                if is_result(token) {
                    games.extend(current.take().map(finish));
                    in_movetext = false;
                    continue;
                }
                let san = strip_move_number(token).trim_end_matches(['!', '?']);
                if !san.is_empty() {
                    game.moves.push(san.to_owned());
                }
            }
        }
    }
    games.extend(current.take().map(finish));
    Ok(games)
}

fn skip_line(
    chars: &mut std::iter::Peekable<std::str::CharIndices<'_>>,
    line: &mut usize,
    at_line_start: &mut bool,
) {
    for (_, c) in chars.by_ref() {
        if c == '\n' {
            *line += 1;
            *at_line_start = true;
            return;
        }
    }
}

fn finish(mut game: GameRecord) -> GameRecord {
    game.device_tag = game.header(DEVICE_TAG).map(str::to_owned);
    game
}

fn is_result(token: &str) -> bool {
    matches!(token, "1-0" | "0-1" | "1/2-1/2" | "*")
}

/// `12.e4` -> `e4`, `12...` -> ``, `e4` -> `e4`.
fn strip_move_number(token: &str) -> &str {
    let digits = token.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 && token[digits..].starts_with('.') {
        token[digits..].trim_start_matches('.')
    } else {
        token
    }
}

fn parse_tag(line: &str, line_no: usize) -> Result<(String, String), PgnError> {
    let inner = line
        .strip_prefix('[')
        .and_then(|l| l.trim_end().strip_suffix(']'))
        .ok_or(PgnError::UnterminatedHeader { line: line_no })?;
    let inner = inner.trim();
    let split = inner
        .find(char::is_whitespace)
        .ok_or(PgnError::MalformedHeader { line: line_no })?;
    let key = &inner[..split];
    let value = inner[split..].trim();
    let quoted = value
        .strip_prefix('"')
        .and_then(|v| v.strip_suffix('"'))
        .ok_or(PgnError::MalformedHeader { line: line_no })?;
    let mut out = String::with_capacity(quoted.len());
    let mut chars = quoted.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                out.push(n);
            }
        } else {
            out.push(c);
        }
    }
    if key.is_empty() {
        return Err(PgnError::MalformedHeader { line: line_no });
    }
    Ok((key.to_owned(), out))
}

/// Position the game starts from: the `FEN` tag if present, otherwise the
/// standard initial position.
pub fn start_position(game: &GameRecord) -> Result<BoardState, StartPositionError> {
    match game.header("FEN") {
        Some(fen) => Ok(parse_fen(fen)?),
        None => Ok(BoardState::initial()),
    }
}

/// Every position reached in the game; element `i` is the board after
/// half-move `i + 1`.
pub fn replay_game(game: &GameRecord) -> Result<Vec<BoardState>, ReplayError> {
    let start = start_position(game).unwrap_or_else(|_| BoardState::initial());
    replay_from(start, &game.moves)
}

pub fn replay_from(start: BoardState, moves: &[String]) -> Result<Vec<BoardState>, ReplayError> {
    let mut out = Vec::with_capacity(moves.len());
    let mut board = start;
    for (i, san) in moves.iter().enumerate() {
        board = board.apply_san(san).map_err(|source| ReplayError {
            ply: i + 1,
            san: san.clone(),
            source,
        })?;
        out.push(board.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chess::types::{Color, Piece, PieceType};

    #[test]
    fn minimal_game() {
        let games = parse_pgn("[Result \"*\"] 1. e4 e5 *").unwrap();
        assert_eq!(games.len(), 1);
        assert_eq!(games[0].moves, ["e4", "e5"]);
        assert_eq!(games[0].header("Result"), Some("*"));
    }

    #[test]
    fn comments_and_numbers_are_stripped() {
        let text = "[Event \"x\"]\n[ECO \"C20\"]\n\n1. e4 {king pawn\nopening} e5 2.Nf3 ; rest\nNc6 3... a6?! 1-0\n";
        let games = parse_pgn(text).unwrap();
        assert_eq!(games[0].moves, ["e4", "e5", "Nf3", "Nc6", "a6"]);
        assert_eq!(games[0].eco(), Some("C20"));
    }

    #[test]
    fn multiple_games_and_device_tag() {
        let text = "[Event \"a\"]\n[Device \"phone-1\"]\n1. d4 d5 1/2-1/2\n\n[Event \"b\"]\n1. c4 *\n";
        let games = parse_pgn(text).unwrap();
        assert_eq!(games.len(), 2);
        assert_eq!(games[0].device_tag.as_deref(), Some("phone-1"));
        assert_eq!(games[1].moves, ["c4"]);
        assert_eq!(games[1].device_tag, None);
    }

    #[test]
    fn games_without_result_token_are_split_on_headers() {
        let text = "[Event \"a\"]\n1. d4 d5\n[Event \"b\"]\n1. c4\n";
        let games = parse_pgn(text).unwrap();
        assert_eq!(games.len(), 2);
        assert_eq!(games[0].moves, ["d4", "d5"]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            parse_pgn("[Event \"a\"]\n[Site \"b\n1. e4 *"),
            Err(PgnError::UnterminatedHeader { line: 2 })
        );
        assert_eq!(parse_pgn("\n1. e4 e5 *"), Err(PgnError::MovetextBeforeHeaders { line: 2 }));
        assert_eq!(
            parse_pgn("[Event \"a\"]\n1. e4 (1. d4) e5 *"),
            Err(PgnError::Variation { line: 2 })
        );
        assert!(matches!(parse_pgn("[Event \"a\"]\n1. e4 $1 e5 *"), Err(PgnError::Nag { line: 2, .. })));
        assert_eq!(
            parse_pgn("[Event \"a\"]\n1. e4 {oops e5 *"),
            Err(PgnError::UnterminatedComment { line: 2 })
        );
    }

    #[test]
    fn escaped_tag_values() {
        let games = parse_pgn("[Event \"say \\\"hi\\\"\"]\n*").unwrap();
        assert_eq!(games[0].header("Event"), Some("say \"hi\""));
        let back = parse_pgn(&games[0].to_pgn()).unwrap();
        assert_eq!(back[0].headers, games[0].headers);
    }

    #[test]
    fn replay_two_moves() {
        let game = GameRecord {
            moves: vec!["e4".into(), "e5".into()],
            ..Default::default()
        };
        let states = replay_game(&game).unwrap();
        assert_eq!(states.len(), 2);
        let pawn = |c| Some(Piece::new(c, PieceType::Pawn));
        assert_eq!(states[1].piece_at("e4".parse().unwrap()), pawn(Color::White));
        assert_eq!(states[1].piece_at("e5".parse().unwrap()), pawn(Color::Black));
        assert!(replay_game(&GameRecord::default()).unwrap().is_empty());
    }

    #[test]
    fn replay_reports_failing_ply() {
        let game = GameRecord {
            moves: vec!["e4".into(), "e5".into(), "Ke3".into()],
            ..Default::default()
        };
        let err = replay_game(&game).unwrap_err();
        assert_eq!(err.ply, 3);
        assert_eq!(err.san, "Ke3");
    }
}
