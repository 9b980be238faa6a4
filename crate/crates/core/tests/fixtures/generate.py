#!/usr/bin/env python3
"""Regenerates the frozen oracle fixtures with python-chess.

    pip install chess==1.11.2
    python3 generate.py

Everything here is computed by python-chess, independently of the Rust move
generator; the Rust tests only read the outputs.
"""
import json
import random
from collections import Counter
from pathlib import Path

import chess
import chess.pgn

HERE = Path(__file__).parent
rng = random.Random(20240131)


def fen(board):
    # Standard FEN: en passant target after every double push.
    return board.fen(en_passant="fen")


def random_board(max_plies):
    board = chess.Board()
    for _ in range(rng.randrange(0, max_plies)):
        moves = list(board.legal_moves)
        if not moves:
            break
        board.push(rng.choice(moves))
    return board


def special(board, move):
    if board.is_castling(move):
        return "castle"
    if board.is_en_passant(move):
        return "ep"
    if move.promotion:
        return "promo"
    return None


def san_triples(n=1000):
    out, kinds = [], Counter()
    quota = {"castle": 60, "ep": 40, "promo": 60}
    # Walk random games and harvest special moves wherever they are legal.
    while any(kinds[k] < q for k, q in quota.items()):
        board = chess.Board()
        for _ in range(rng.randrange(10, 250)):
            moves = list(board.legal_moves)
            if not moves:
                break
            wanted = [m for m in moves if special(board, m) and kinds[special(board, m)] < quota[special(board, m)]]
            if wanted and rng.random() < 0.5:
                m = rng.choice(wanted)
                kinds[special(board, m)] += 1
                after = board.copy()
                after.push(m)
                out.append((fen(board), board.san(m), fen(after)))
            board.push(rng.choice(moves))
    while len(out) < n:
        board = random_board(220)
        moves = list(board.legal_moves)
        if not moves:
            continue
        move = rng.choice(moves)
        before = fen(board)
        san = board.san(move)
        board.push(move)
        out.append((before, san, fen(board)))
    rng.shuffle(out)
    (HERE / "san_triples.tsv").write_text("".join(f"{a}\t{b}\t{c}\n" for a, b, c in out))
    return kinds


def positions(n=1000):
    lines = []
    while len(lines) < n:
        b = random_board(250)
        lines.append(fen(b))
    (HERE / "fen_positions.txt").write_text("\n".join(lines) + "\n")


def random_game(plies, headers):
    board = chess.Board()
    game = chess.pgn.Game()
    for k, v in headers.items():
        game.headers[k] = v
    node = game
    for _ in range(plies):
        moves = list(board.legal_moves)
        if not moves:
            break
        m = rng.choice(moves)
        node = node.add_variation(m)
        board.push(m)
    game.headers["Result"] = "*"
    return game, board


CLASS_ORDER = [(c, t) for c in (chess.WHITE, chess.BLACK)
               for t in (chess.PAWN, chess.ROOK, chess.KNIGHT, chess.BISHOP, chess.QUEEN, chess.KING)]


def class_id(piece):
    return CLASS_ORDER.index((piece.color, piece.piece_type))


def five_games():
    devices = ["phone-a", "phone-b", "phone-c", "phone-a", "phone-b"]
    ecos = ["A04", "B12", "C41", "D35", "E60"]
    text, expected = [], {"games": []}
    totals = Counter()
    for i, (dev, eco) in enumerate(zip(devices, ecos)):
        plies = rng.randrange(20, 90)
        game, _ = random_game(plies, {"Event": f"fixture {i}", "ECO": eco, "Device": dev})
        text.append(str(game))
        board = game.board()
        per_image = []
        for move in game.mainline_moves():
            board.push(move)
            counts = [0] * 12
            for _, p in board.piece_map().items():
                counts[class_id(p)] += 1
            per_image.append(counts)
            for k, c in enumerate(counts):
                totals[k] += c
        expected["games"].append({
            "device": dev,
            "images": len(per_image),
            "per_image_class_counts": per_image,
            "final_fen": fen(board),
        })
    expected["class_totals"] = [totals[k] for k in range(12)]
    expected["images"] = sum(g["images"] for g in expected["games"])
    (HERE / "five_games.pgn").write_text("\n\n".join(text) + "\n")
    (HERE / "five_games_expected.json").write_text(json.dumps(expected, indent=1) + "\n")


def forty_ply_game():
    while True:
        game, board = random_game(40, {"Event": "forty plies", "ECO": "C20"})
        if len(list(game.mainline_moves())) == 40:
            break
    (HERE / "forty_plies.pgn").write_text(str(game) + "\n")
    (HERE / "forty_plies_final.fen").write_text(fen(board) + "\n")


def hundred_games():
    text = []
    for vol in "ABCDE":
        codes = rng.sample(range(100), 20)
        for code in codes:
            game, _ = random_game(rng.randrange(10, 60), {"Event": "ECO sample", "ECO": f"{vol}{code:02d}"})
            text.append(str(game))
    (HERE / "hundred_games.pgn").write_text("\n\n".join(text) + "\n")


if __name__ == "__main__":
    print("special moves:", san_triples())
    positions()
    five_games()
    forty_ply_game()
    hundred_games()
