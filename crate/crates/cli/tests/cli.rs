use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use chessrec_core::chess::placement_field;
use chessrec_core::dataset::{read_annotations, SplitLabel, ANNOTATION_FILE};
use chessrec_core::eval::{best_orientation_metrics, compute_metrics, BoardPair, EvalReport, OrientationScope};
use chessrec_core::targets::{rotate_target, ClassificationTarget};
use serde_json::{json, Value};

const FORTY_PLIES: &str = "[Event \"Forty\"]\n[Result \"*\"]\n\n\
1. e4 e5 2. Nf3 Nc6 3. Bb5 a6 4. Ba4 Nf6 5. O-O Be7 6. Re1 b5 7. Bb3 d6 8. c3 O-O \
9. h3 Nb8 10. d4 Nbd7 11. Nbd2 Bb7 12. Bc2 Re8 13. Nf1 Bf8 14. Ng3 g6 15. a4 c5 \
16. d5 c4 17. Bg5 h6 18. Be3 Nc5 19. Qd2 h5 20. Bg5 Be7 *\n";

const SHORT_GAME: &str = "[Event \"Short\"]\n[Result \"*\"]\n\n1. e4 e5 2. Nf3 Nc6 *\n";

/// Small enough to train in seconds; one game goes entirely to train.
const TINY: &str = r#"
seed = 3
[model]
input_resolution = 64
[model.head_layout]
kind = "factorized"
channels = 16
[model.backbone]
cardinality = 2
stem_channels = 8
stem_kernel = 3
stem_stride = 2
stem_pool = false
stages = [{ blocks = 1, width = 16, out_channels = 32, stride = 2 }]
[train]
epochs = 300
batch_size = 4
early_stopping = false
[build.split]
train = 1.0
val = 0.0
test = 0.0
[render]
orientations = [0]
[render.style]
size = 64
"#;

fn chessrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chessrec")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = chessrec(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn five_games() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/five_games.pgn")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_owned()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "png") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn build_writes_a_clean_deterministic_document() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = ok(&["build", s(&five_games()), "--seed", "5", "--out", s(&a)]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("images"), "{table}");
    ok(&["build", s(&five_games()), "--seed", "5", "--out", s(&b)]);
    let doc = fs::read(a.join(ANNOTATION_FILE)).unwrap();
    assert_eq!(doc, fs::read(b.join(ANNOTATION_FILE)).unwrap());

    let set = read_annotations(&a.join(ANNOTATION_FILE)).unwrap();
    assert_eq!(set.images.len(), 298);
    assert_eq!(set.info["seed"], json!(5));
    assert!(set.info["config"].is_object());
}

#[test]
fn build_rejects_empty_and_missing_input() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = write(tmp.path(), "empty.pgn", "");
    assert!(!chessrec(&["build", s(&empty), "--out", s(&tmp.path().join("o"))]).status.success());
    assert!(!chessrec(&["build", s(&tmp.path().join("nope.pgn")), "--out", s(&tmp.path().join("o"))]).status.success());
}

#[test]
fn render_writes_one_image_per_state_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "tiny.toml", TINY);
    let pgn = write(tmp.path(), "forty.pgn", FORTY_PLIES);
    let built = tmp.path().join("built");
    ok(&["build", s(&pgn), "--config", s(&cfg), "--out", s(&built)]);
    let ann = built.join(ANNOTATION_FILE);

    let (a, b) = (tmp.path().join("ra"), tmp.path().join("rb"));
    ok(&["render", s(&ann), "--config", s(&cfg), "--seed", "9", "--out", s(&a)]);
    ok(&["render", s(&ann), "--config", s(&cfg), "--seed", "9", "--out", s(&b)]);
    let (pa, pb) = (pngs(&a), pngs(&b));
    assert_eq!(pa.len(), 40);
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
    assert_eq!(fs::read(a.join(ANNOTATION_FILE)).unwrap(), fs::read(b.join(ANNOTATION_FILE)).unwrap());
    let rendered = read_annotations(&a.join(ANNOTATION_FILE)).unwrap();
    assert_eq!(rendered.corners.len(), 40);
    assert!(rendered.pieces.iter().all(|p| p.bbox.is_some()));
    assert_eq!(rendered.info["render_seed"], json!(9));

    let missing = tmp.path().join("none").join(ANNOTATION_FILE);
    assert!(!chessrec(&["render", s(&missing), "--out", s(&tmp.path().join("rc"))]).status.success());
}

#[test]
fn invalid_config_key_is_reported_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", "[train]\nepochz = 3\n");
    let out = chessrec(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

/// Trains the tiny model to memorize a four-position game, then exercises
/// predict, evaluate and resume on the result.
#[test]
fn train_predict_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "tiny.toml", TINY);
    let pgn = write(tmp.path(), "short.pgn", SHORT_GAME);
    let built = tmp.path().join("built");
    ok(&["build", s(&pgn), "--config", s(&cfg), "--out", s(&built)]);
    let data = tmp.path().join("data");
    ok(&["render", s(&built.join(ANNOTATION_FILE)), "--config", s(&cfg), "--out", s(&data)]);

    let run = tmp.path().join("run");
    let data_cfg = write(tmp.path(), "train.toml", &format!("{TINY}\n[paths]\ndataset_root = {:?}\n", s(&data)));
    ok(&["train", "--config", s(&data_cfg), "--out", s(&run)]);
    let ckpt = run.join("checkpoint.ckpt");
    let log: Value = serde_json::from_slice(&fs::read(run.join("train_log.json")).unwrap()).unwrap();
    assert_eq!(log["seed"], json!(3));
    assert!(log["dataset_hash"].is_string());
    assert_eq!(log["log"].as_array().unwrap().len(), 300);

    // Resuming a finished run changes nothing.
    let before = fs::read(&ckpt).unwrap();
    ok(&["train", "--config", s(&data_cfg), "--out", s(&run), "--resume"]);
    assert_eq!(fs::read(&ckpt).unwrap(), before);

    // Memorized images come back with their own placement, in stable order.
    let ann = data.join(ANNOTATION_FILE);
    let set = read_annotations(&ann).unwrap();
    let boards = set.boards();
    let image_dir = data.join("images/0");
    let out = ok(&["predict", s(&ckpt), s(&image_dir)]);
    let lines: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 4);
    let mut expected: Vec<(String, String)> = set
        .images
        .iter()
        .map(|i| (data.join(&i.file_path).display().to_string(), placement_field(&boards[&i.id])))
        .collect();
    expected.sort();
    for (line, (path, placement)) in lines.iter().zip(&expected) {
        assert_eq!(line, &format!("{path}\t{placement}"));
    }

    // A corrupt image fails the run, but --keep-going still predicts the rest.
    let mixed = tmp.path().join("mixed");
    fs::create_dir_all(&mixed).unwrap();
    fs::copy(data.join(&set.images[0].file_path), mixed.join("a.png")).unwrap();
    fs::write(mixed.join("b.png"), b"not an image").unwrap();
    fs::copy(data.join(&set.images[1].file_path), mixed.join("c.png")).unwrap();
    assert!(!chessrec(&["predict", s(&ckpt), s(&mixed)]).status.success());
    let out = chessrec(&["predict", s(&ckpt), s(&mixed), "--keep-going"]);
    assert!(!out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);

    // Dump the train split and score it.
    let dump = tmp.path().join("dump.jsonl");
    ok(&["predict", s(&ckpt), "--annotations", s(&ann), "--split", "train", "--dump", s(&dump)]);
    let eval_dir = tmp.path().join("eval");
    ok(&["evaluate", s(&dump), s(&ann), "--out", s(&eval_dir), "--seed", "3"]);
    let report: Value = serde_json::from_slice(&fs::read(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["metrics"]["pct_no_mistakes"], json!(100.0));
    assert_eq!(report["metrics"]["board_count"], json!(4));
    assert_eq!(report["seed"], json!(3));
    assert!(report["dataset_hash"].is_string());
}

fn fixture_set(tmp: &Path) -> PathBuf {
    let out = tmp.join("fixture");
    ok(&["build", s(&five_games()), "--out", s(&out)]);
    out.join(ANNOTATION_FILE)
}

fn write_dump(path: &Path, records: &[Value]) {
    let mut f = fs::File::create(path).unwrap();
    writeln!(f, "{}", json!({"header": {"seed": 0}})).unwrap();
    for r in records {
        writeln!(f, "{r}").unwrap();
    }
}

fn report_at(dir: &Path, key: &str) -> EvalReport {
    let v: Value = serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    let mut r: EvalReport = serde_json::from_value(v.pointer(key).unwrap().clone()).unwrap();
    r.per_phase = None;
    r
}

#[test]
fn evaluate_perfect_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = fixture_set(tmp.path());
    let set = read_annotations(&ann).unwrap();
    let records: Vec<Value> = set
        .classification_targets()
        .iter()
        .map(|(id, t)| json!({"image_id": id, "labels": t.labels.to_vec()}))
        .collect();
    let dump = tmp.path().join("perfect.jsonl");
    write_dump(&dump, &records);
    let out = tmp.path().join("eval");
    ok(&["evaluate", s(&dump), s(&ann), "--out", s(&out)]);
    let r = report_at(&out, "/metrics");
    assert_eq!(
        (r.mean_incorrect_squares, r.pct_no_mistakes, r.pct_at_most_one_mistake, r.per_square_error_rate),
        (0.0, 100.0, 100.0, 0.0)
    );
    assert_eq!(r.board_count, 298);
}

/// A dump with rotated and corrupted predictions scores exactly as the
/// library does, and orientation search never scores worse.
#[test]
fn evaluate_matches_the_library_and_search_dominates() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = fixture_set(tmp.path());
    let set = read_annotations(&ann).unwrap();
    let targets = set.classification_targets();
    let mut pairs = Vec::new();
    let mut records = Vec::new();
    for (n, img) in set.images.iter().enumerate() {
        let gt = targets[&img.id];
        let mut pred: ClassificationTarget = rotate_target(&gt, (n % 4) as i32);
        for k in 0..(n % 3) {
            pred.labels[(n * 7 + k * 13) % 64] = ((n + k) % 13) as u8;
        }
        // Every fifth record uses scores instead of ids.
        let rec = if n % 5 == 0 {
            let scores: Vec<f32> = pred.labels.iter().flat_map(|&l| (0..13u8).map(move |c| if c == l { 2.0 } else { -1.0 })).collect();
            json!({"image_id": img.id, "scores": scores})
        } else {
            json!({"path": format!("/elsewhere/{}", img.file_path), "labels": pred.labels.to_vec()})
        };
        records.push(rec);
        pairs.push(BoardPair { image_id: img.id, predicted: pred, ground_truth: gt, move_index: Some(img.move_index), game_id: Some(img.game_id) });
    }
    let dump = tmp.path().join("dump.jsonl");
    write_dump(&dump, &records);

    let plain = tmp.path().join("plain");
    ok(&["evaluate", s(&dump), s(&ann), "--out", s(&plain)]);
    let expected = compute_metrics(&pairs).unwrap();
    assert_eq!(report_at(&plain, "/metrics"), expected);

    let searched = tmp.path().join("searched");
    ok(&["evaluate", s(&dump), s(&ann), "--out", s(&searched), "--orientation-search"]);
    let best = report_at(&searched, "/orientation_search/report");
    assert_eq!(best, best_orientation_metrics(&pairs, OrientationScope::Board).unwrap().report);
    assert!(best.mean_incorrect_squares <= expected.mean_incorrect_squares);
    assert!(best.pct_no_mistakes >= expected.pct_no_mistakes);
    assert!(best.pct_at_most_one_mistake >= expected.pct_at_most_one_mistake);
    assert!(best.per_square_error_rate <= expected.per_square_error_rate);
}

#[test]
fn evaluate_rejects_unknown_images() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = fixture_set(tmp.path());
    let dump = tmp.path().join("dump.jsonl");
    write_dump(&dump, &[json!({"image_id": 999_999, "labels": vec![12u8; 64]})]);
    assert!(!chessrec(&["evaluate", s(&dump), s(&ann), "--out", s(&tmp.path().join("o"))]).status.success());
}

/// Serves `body` at every path and counts requests.
fn serve(body: Vec<u8>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            while reader.read_line(&mut line).unwrap() > 2 {
                line.clear();
            }
            counter.fetch_add(1, Ordering::SeqCst);
            let head = format!("HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len());
            stream.write_all(head.as_bytes()).unwrap();
            stream.write_all(&body).unwrap();
        }
    });
    (format!("http://{addr}"), hits)
}

#[test]
fn fetch_downloads_once() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = fixture_set(tmp.path());
    let (base, hits) = serve(fs::read(&ann).unwrap());
    let dest = tmp.path().join("dest");
    let url = format!("{base}/{ANNOTATION_FILE}");
    let out = ok(&["fetch", &url, "--out", s(&dest)]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), s(&dest));
    assert!(read_annotations(&dest.join(ANNOTATION_FILE)).unwrap().image_count(SplitLabel::Train) > 0);
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    ok(&["fetch", &url, "--out", s(&dest)]);
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn fetch_failures_exit_nonzero_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = chessrec(&["fetch", "http://127.0.0.1:9/archive.zip", "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(10));
    assert!(String::from_utf8_lossy(&out.stderr).contains("127.0.0.1:9"));

    let (base, _) = serve(b"payload".to_vec());
    let url = format!("{base}/{ANNOTATION_FILE}");
    let out = chessrec(&["fetch", &url, "--sha256", &"0".repeat(64), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(12));
}
