use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use chessrec_core::chess::parse_pgn;
use chessrec_core::dataset::{
    build_annotations, dataset_hash, fetch_dataset, read_annotations, render_synthetic, split_games, validate_annotations,
    write_annotations, BuildOptions, ChecksumPolicy, CornerAnnotation, FetchError, FetchItem, SplitLabel, ANNOTATION_FILE,
};
use chessrec_core::eval::{ablation_report, best_orientation_metrics, BoardPair};
use chessrec_core::model::{
    load_training_data, predict, synthetic_samples, train, Checkpoint, TrainOptions, TrainingData,
};
use chessrec_core::targets::{ClassificationTarget, NUM_CLASSES, NUM_SQUARES};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{Cli, Command};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const REPORT_FILE: &str = "report.json";

pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<FetchError>() {
        Some(f) => f.code() as u8,
        None => 1,
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.paths.out = out;
    }
    match cli.command {
        Command::Fetch { urls, sha256, require_checksum } => fetch(&cfg, urls, sha256, require_checksum),
        Command::Build { pgn } => build(&cfg, &pgn),
        Command::Render { annotations } => render(&cfg, &annotations),
        Command::Train { resume } => train_cmd(&cfg, resume),
        Command::Predict { checkpoint, inputs, annotations, split, dump, keep_going } => {
            predict_cmd(&cfg, &checkpoint, &inputs, annotations.as_deref(), &split, dump.as_deref(), keep_going)
        }
        Command::Evaluate { dump, annotations, orientation_search } => {
            evaluate(&cfg, &dump, &annotations, orientation_search || cfg.eval.orientation_search)
        }
    }
}

/// Experiment description embedded in artifacts. Output locations are left
/// out so reruns into another directory give identical files.
fn provenance_config(cfg: &RunConfig) -> Value {
    let mut v = cfg.to_json();
    v.as_object_mut().unwrap().remove("paths");
    v
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn fetch(cfg: &RunConfig, urls: Vec<String>, sha256: Vec<String>, require: bool) -> anyhow::Result<()> {
    if !sha256.is_empty() && sha256.len() != urls.len() {
        bail!("{} checksums given for {} urls", sha256.len(), urls.len());
    }
    let items: Vec<FetchItem> = urls
        .into_iter()
        .enumerate()
        .map(|(i, url)| FetchItem { url, sha256: sha256.get(i).cloned() })
        .collect();
    let policy = if require { ChecksumPolicy::Require } else { ChecksumPolicy::IfProvided };
    let root = fetch_dataset(&items, &cfg.paths.out, policy)?;
    println!("{}", root.display());
    Ok(())
}

fn build(cfg: &RunConfig, pgn: &Path) -> anyhow::Result<()> {
    let bytes = fs::read(pgn).with_context(|| format!("reading {}", pgn.display()))?;
    let games = parse_pgn(&String::from_utf8_lossy(&bytes))?;
    if games.is_empty() {
        bail!("{} holds no games", pgn.display());
    }
    let opts = BuildOptions { default_device: cfg.build.default_device.clone(), ..Default::default() };
    let built = build_annotations(&games, &opts);
    for f in &built.failures {
        log::warn!("game {} ({:?}) skipped at ply {} ({:?}): {}", f.game_index, f.event, f.ply, f.san, f.reason);
    }
    if built.set.images.is_empty() {
        bail!("no game in {} could be replayed", pgn.display());
    }
    let (mut set, warnings) = split_games(&built.set, cfg.build.split, cfg.seed)?;
    for w in warnings {
        log::warn!("{w:?}");
    }
    set.info.insert("seed".into(), cfg.seed.into());
    set.info.insert("config".into(), provenance_config(cfg));
    set.info.insert("source_sha256".into(), sha256_hex(&bytes).into());
    set.info.insert("skipped_games".into(), built.failures.len().into());

    fs::create_dir_all(&cfg.paths.out)?;
    let path = cfg.paths.out.join(ANNOTATION_FILE);
    write_annotations(&set, &path)?;
    let report = validate_annotations(&set);
    print!("{}", report.summary_table(&set));
    if !report.is_clean() {
        for v in &report.violations {
            log::error!("{v:?}");
        }
        bail!("{} validation violations", report.violations.len());
    }
    log::info!("wrote {} ({} images, dataset hash {})", path.display(), set.images.len(), dataset_hash(&set));
    Ok(())
}

fn render(cfg: &RunConfig, annotations: &Path) -> anyhow::Result<()> {
    let mut set = read_annotations(annotations)?;
    let source_hash = dataset_hash(&set);
    let boards = set.boards();
    let size = cfg.render.style.size;
    let mut boxes = BTreeMap::new();
    let mut corners = Vec::with_capacity(set.images.len());
    for img in &mut set.images {
        let r = render_synthetic(&boards[&img.id], &cfg.render.camera(cfg.seed, img.id), &cfg.render.style);
        let path = cfg.paths.out.join(&img.file_path);
        fs::create_dir_all(path.parent().unwrap())?;
        r.image.save(&path).with_context(|| format!("writing {}", path.display()))?;
        (img.width, img.height) = (size, size);
        for ((square, _), b) in r.pieces.iter().zip(&r.boxes) {
            boxes.insert((img.id, *square), *b);
        }
        corners.push(CornerAnnotation { image_id: img.id, corners: r.corners });
    }
    for p in &mut set.pieces {
        p.bbox = boxes.get(&(p.image_id, p.square)).copied();
    }
    set.corners = corners;
    set.info.insert("render_seed".into(), cfg.seed.into());
    set.info.insert("render_config".into(), serde_json::to_value(&cfg.render)?);
    set.info.insert("source_dataset_hash".into(), source_hash.into());
    write_annotations(&set, &cfg.paths.out.join(ANNOTATION_FILE))?;
    log::info!("rendered {} images into {}", set.images.len(), cfg.paths.out.display());
    Ok(())
}

fn train_cmd(cfg: &RunConfig, resume: bool) -> anyhow::Result<()> {
    let out = &cfg.paths.out;
    fs::create_dir_all(out)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let previous = if resume && ckpt_path.is_file() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        if ckpt.is_finished() {
            log::info!("{} already finished ({:?}); nothing to do", ckpt_path.display(), ckpt.provenance.stop_reason);
            return Ok(());
        }
        Some(ckpt)
    } else {
        None
    };

    let res = cfg.model.input_resolution;
    let (data, hash) = match &cfg.synthetic {
        Some(s) => {
            let spec = json!({ "synthetic": s, "render": cfg.render, "seed": cfg.seed });
            let train = synthetic_samples(0..s.train, cfg.seed, s.max_plies, &cfg.render, res);
            let val = synthetic_samples(s.train..s.train + s.val, cfg.seed, s.max_plies, &cfg.render, res);
            (TrainingData { resolution: res, train, val }, sha256_hex(spec.to_string().as_bytes()))
        }
        None => {
            let root = cfg.paths.dataset_root.as_ref().ok_or_else(|| anyhow!("paths.dataset_root is not set and no [synthetic] source is configured"))?;
            let set = read_annotations(&root.join(ANNOTATION_FILE))?;
            (load_training_data(&set, root, res)?, dataset_hash(&set))
        }
    };
    log::info!("training on {} images, validating on {}", data.train.len(), data.val.len());

    let opts = TrainOptions {
        seed: cfg.seed,
        time_budget: cfg.limits.time_budget_minutes.map(|m| Duration::from_secs_f64(m * 60.0)),
        dataset_hash: Some(hash),
        resume: previous,
    };
    let mut ckpt = train(&cfg.model, &cfg.train, &data, opts)?;
    ckpt.provenance.extra.insert("config".into(), provenance_config(cfg));
    ckpt.save(&ckpt_path)?;
    write_json(
        &out.join(TRAIN_LOG_FILE),
        &json!({
            "seed": cfg.seed,
            "dataset_hash": ckpt.provenance.dataset_hash,
            "config": provenance_config(cfg),
            "provenance": ckpt.provenance,
            "log": ckpt.log,
        }),
    )?;
    log::info!(
        "stopped ({:?}) after {} epochs; best epoch {:?}; wrote {}",
        ckpt.provenance.stop_reason,
        ckpt.log.len(),
        ckpt.provenance.best_epoch,
        ckpt_path.display()
    );
    Ok(())
}

fn is_image(path: &Path) -> bool {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    matches!(ext.as_str(), "png" | "jpg" | "jpeg")
}

/// Files as given; directories expand to their images in name order.
fn expand_inputs(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(input)
                .with_context(|| format!("listing {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image(p))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(input.clone());
        }
    }
    Ok(out)
}

/// One line of a prediction dump.
#[derive(Debug, Serialize, Deserialize)]
struct DumpRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    /// 64 canonical class ids in grid order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<u8>>,
    /// 64x13 scores; the arg-max per square is used when `labels` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    placement: Option<String>,
}

fn predict_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    inputs: &[PathBuf],
    annotations: Option<&Path>,
    split: &str,
    dump: Option<&Path>,
    keep_going: bool,
) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut jobs: Vec<(Option<u64>, PathBuf)> = expand_inputs(inputs)?.into_iter().map(|p| (None, p)).collect();
    let mut hash = None;
    if let Some(ann) = annotations {
        let set = read_annotations(ann)?;
        let label = SplitLabel::ASSIGNED
            .into_iter()
            .chain([SplitLabel::Unassigned])
            .find(|l| l.name() == split)
            .ok_or_else(|| anyhow!("unknown split {split:?}"))?;
        let root = ann.parent().unwrap_or(Path::new("."));
        jobs.extend(set.images_in(label).map(|img| (Some(img.id), root.join(&img.file_path))));
        hash = Some(dataset_hash(&set));
    }
    if jobs.is_empty() {
        bail!("no images to predict");
    }

    let mut writer = match dump {
        Some(path) => {
            let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
            let header = json!({ "header": {
                "seed": cfg.seed,
                "dataset_hash": hash,
                "checkpoint": checkpoint.display().to_string(),
                "training_dataset_hash": ckpt.provenance.dataset_hash,
                "config": provenance_config(cfg),
            }});
            writeln!(w, "{header}")?;
            Some(w)
        }
        None => None,
    };
    let mut failures = 0usize;
    for (image_id, path) in &jobs {
        match predict(&ckpt, path) {
            Ok(p) => {
                println!("{}\t{}", path.display(), p.placement);
                if let Some(w) = writer.as_mut() {
                    let rec = DumpRecord {
                        image_id: *image_id,
                        path: Some(path.display().to_string()),
                        labels: Some(p.labels),
                        scores: None,
                        placement: Some(p.placement),
                    };
                    writeln!(w, "{}", serde_json::to_string(&rec)?)?;
                }
            }
            Err(e) if keep_going => {
                eprintln!("error: {e}");
                failures += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    if failures > 0 {
        bail!("{failures} of {} images could not be predicted", jobs.len());
    }
    Ok(())
}

fn record_target(rec: &DumpRecord) -> anyhow::Result<ClassificationTarget> {
    if let Some(labels) = &rec.labels {
        return ClassificationTarget::from_labels(labels).map_err(|e| anyhow!(e));
    }
    if let Some(scores) = &rec.scores {
        if scores.len() != NUM_SQUARES * NUM_CLASSES {
            bail!("scores hold {} values, expected {}", scores.len(), NUM_SQUARES * NUM_CLASSES);
        }
        let labels: Vec<u8> = scores
            .chunks(NUM_CLASSES)
            .map(|sq| (0..NUM_CLASSES).max_by(|&a, &b| sq[a].total_cmp(&sq[b])).unwrap() as u8)
            .collect();
        return ClassificationTarget::from_labels(&labels).map_err(|e| anyhow!(e));
    }
    bail!("record has neither labels nor scores")
}

fn evaluate(cfg: &RunConfig, dump: &Path, annotations: &Path, orientation_search: bool) -> anyhow::Result<()> {
    let set = read_annotations(annotations)?;
    let targets = set.classification_targets();
    let images: BTreeMap<u64, _> = set.images.iter().map(|i| (i.id, i)).collect();
    let file = fs::File::open(dump).with_context(|| format!("opening {}", dump.display()))?;

    let mut pairs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let ctx = || format!("{} line {}", dump.display(), n + 1);
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).with_context(ctx)?;
        if value.get("header").is_some() {
            continue;
        }
        let rec: DumpRecord = serde_json::from_value(value).with_context(ctx)?;
        let id = match (rec.image_id, &rec.path) {
            (Some(id), _) => id,
            (None, Some(p)) => set
                .images
                .iter()
                .find(|i| Path::new(p).ends_with(&i.file_path))
                .map(|i| i.id)
                .ok_or_else(|| anyhow!("{}: {p} matches no annotated image", ctx()))?,
            (None, None) => bail!("{}: record has neither image_id nor path", ctx()),
        };
        let img = images.get(&id).ok_or_else(|| anyhow!("{}: unknown image id {id}", ctx()))?;
        pairs.push(BoardPair {
            image_id: id,
            predicted: record_target(&rec).with_context(ctx)?,
            ground_truth: targets[&id],
            move_index: Some(img.move_index),
            game_id: Some(img.game_id),
        });
    }
    let phases = cfg.eval.phases;
    let metrics = ablation_report(&pairs, &phases)?;
    let search = if orientation_search { Some(best_orientation_metrics(&pairs, cfg.eval.orientation_scope)?) } else { None };

    let headline = search.as_ref().map(|s| &s.report).unwrap_or(&metrics);
    println!("boards                      {}", headline.board_count);
    println!("mean incorrect squares      {:.3}", headline.mean_incorrect_squares);
    println!("boards with no mistakes (%) {:.2}", headline.pct_no_mistakes);
    println!("boards with <=1 mistake (%) {:.2}", headline.pct_at_most_one_mistake);
    println!("per-square error rate (%)   {:.3}", headline.per_square_error_rate);

    fs::create_dir_all(&cfg.paths.out)?;
    let doc = json!({
        "metrics": metrics,
        "orientation_search": {
            "enabled": orientation_search,
            "scope": cfg.eval.orientation_scope,
            "report": search.as_ref().map(|s| &s.report),
            "chosen_quarter_turns": search.as_ref().map(|s| s.chosen.iter().map(|o| o.quarter_turns()).collect::<Vec<_>>()),
        },
        "phase_boundaries": {
            "early_below": phases.early_below,
            "end_above": phases.end_above,
            "unit": phases.unit,
            "rule": "early if below early_below, end if above end_above, otherwise mid (both boundary values are mid)",
        },
        "dataset_hash": dataset_hash(&set),
        "seed": cfg.seed,
        "config": provenance_config(cfg),
        "dump": dump.display().to_string(),
    });
    let path = cfg.paths.out.join(REPORT_FILE);
    write_json(&path, &doc)?;
    log::info!("wrote {}", path.display());
    Ok(())
}
