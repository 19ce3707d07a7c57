use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::Rgb;
use rayon::prelude::*;
use serde::Serialize;

use orefsdet::checkpoint::{self, Manifest};
use orefsdet::data::{self, synth, Dataset, Density, Scene, SynthParams};
use orefsdet::eval::{bench, MetricsReport};
use orefsdet::train::{self, derive_seed, LogEntry};
use orefsdet::{gradsuite, Config, OreFsDet, Tensor};

use crate::overlay::draw_box;
use crate::Command;

/// Errors that map to a specific exit code; anything else exits 2.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Check(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Check(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

pub fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Synth { out: dir, seed, images, density, classes, size } => synth_cmd(&dir, seed, images, density, &classes, size, out),
        Command::BaseTrain { config, out: ckpt, data, resume, log } => {
            base_train_cmd(config.as_deref(), &ckpt, data.as_deref(), resume.as_deref(), log.as_deref(), out, err)
        }
        Command::Finetune { config, init, shots, out: ckpt, data, log } => {
            finetune_cmd(config.as_deref(), &init, shots, &ckpt, data.as_deref(), log.as_deref(), out, err)
        }
        Command::Infer { ckpt, episode_dir, out: json, overlay } => infer_cmd(&ckpt, &episode_dir, &json, overlay.as_deref(), out),
        Command::Eval { ckpt, data, shots, json } => eval_cmd(&ckpt, data.as_deref(), shots, json.as_deref(), out),
        Command::Bench { ckpt, warmup, iters } => bench_cmd(ckpt.as_deref(), warmup, iters, out),
        Command::Gradcheck { op, trials, inject_fault } => gradcheck_cmd(op.as_deref(), trials, inject_fault, out),
    }
}

fn class_list(spec: &str) -> Result<Vec<u32>> {
    Ok(match spec {
        "ore" => vec![synth::ORE],
        "base" => synth::BASE_CLASSES.to_vec(),
        "all" => [&[synth::ORE][..], &synth::BASE_CLASSES[..]].concat(),
        other => return Err(Failure::Usage(format!("unknown class set `{other}` (expected ore, base or all)")).into()),
    })
}

fn synth_cmd(dir: &Path, seed: u64, images: usize, density: Density, classes: &str, size: usize, out: &mut dyn Write) -> Result<()> {
    if size < 64 {
        return Err(Failure::Usage("--size must be at least 64".into()).into());
    }
    let params = SynthParams { height: size, width: size, ..SynthParams::new(density, class_list(classes)?) };
    let scenes: Vec<Scene> = (0..images as u64).into_par_iter().map(|i| data::synth_scene(derive_seed(&[seed, i]), &params)).collect();
    let ds = Dataset::from_scenes(scenes);
    data::write_dataset(&ds, dir)?;
    let boxes: usize = ds.records.iter().map(|r| r.boxes.len()).sum();
    writeln!(out, "wrote {images} images, {boxes} boxes to {}", dir.display())?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

/// JSON-lines sink: a file when given, otherwise `fallback`.
fn log_sink<'a>(path: Option<&Path>, fallback: &'a mut dyn Write) -> Result<Box<dyn Write + 'a>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).with_context(|| format!("creating log {}", p.display()))?)),
        None => Box::new(fallback),
    })
}

fn log_overrides(cfg: &Config, sink: &mut dyn Write) -> Result<()> {
    let overrides = cfg.overrides();
    if !overrides.is_empty() {
        writeln!(sink, "{}", serde_json::json!({ "overrides": overrides }))?;
    }
    Ok(())
}

/// Fresh model for `cfg` with weights from `path`; a shape mismatch names the
/// first offending parameter.
fn model_from_checkpoint(cfg: &Config, path: &Path) -> Result<(OreFsDet, Manifest)> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let mut model = OreFsDet::new(&cfg.model, cfg.train.seed)?;
    let manifest = checkpoint::load_into(&mut model, &bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok((model, manifest))
}

fn base_train_cmd(
    config: Option<&Path>,
    ckpt: &Path,
    data: Option<&Path>,
    resume: Option<&Path>,
    log: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = match data {
        Some(p) => data::ingest_coco(p)?,
        None => train::base_dataset(&cfg),
    };
    let (mut model, start) = match resume {
        Some(p) => {
            let (m, manifest) = model_from_checkpoint(&cfg, p)?;
            (m, manifest.iteration as usize)
        }
        None => (OreFsDet::new(&cfg.model, cfg.train.seed)?, 0),
    };
    let mut sink = log_sink(log, err)?;
    log_overrides(&cfg, &mut sink)?;
    let mut write_err = None;
    let end = train::base_train(&mut model, &cfg, &ds, start, &mut |e: &LogEntry| {
        if let Err(e) = writeln!(sink, "{}", serde_json::to_string(e).expect("log entry serializes")) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing log");
    }
    sink.flush()?;
    let bytes = checkpoint::save(ckpt, &model, &cfg, end as u64)?;
    writeln!(out, "saved {} ({bytes} bytes, iteration {end})", ckpt.display())?;
    Ok(())
}

/// The K-shot set: the first K novel-class images of `data`, or the synthetic
/// shot sequence.
fn shot_set(cfg: &Config, data: Option<&Dataset>, shots: usize) -> Result<Dataset> {
    if shots == 0 {
        return Err(Failure::Usage("--shots must be at least 1".into()).into());
    }
    match data {
        Some(ds) => {
            let with = ds.images_with(cfg.data.novel_class);
            if with.len() < shots {
                bail!(orefsdet::Error::Data(format!(
                    "{} images contain class {}, {shots} shots requested",
                    with.len(),
                    cfg.data.novel_class
                )));
            }
            Ok(ds.subset(&with[..shots]))
        }
        None => Ok(train::shot_dataset(cfg, shots)),
    }
}

#[allow(clippy::too_many_arguments)]
fn finetune_cmd(
    config: Option<&Path>,
    init: &Path,
    shots: usize,
    ckpt: &Path,
    data: Option<&Path>,
    log: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let cfg = load_config(config)?;
    let (base, _) = model_from_checkpoint(&cfg, init)?;
    let full = data.map(data::ingest_coco).transpose()?;
    let shot_ds = shot_set(&cfg, full.as_ref(), shots)?;
    let mut sink = log_sink(log, err)?;
    log_overrides(&cfg, &mut sink)?;
    let mut write_err = None;
    let tuned = train::few_shot(&base, &cfg, &shot_ds, &mut |e: &LogEntry| {
        if let Err(e) = writeln!(sink, "{}", serde_json::to_string(e).expect("log entry serializes")) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing log");
    }
    sink.flush()?;
    let bytes = checkpoint::save(ckpt, &tuned.model, &cfg, tuned.iterations as u64)?;
    writeln!(out, "saved {} ({bytes} bytes, {shots}-shot, iteration {})", ckpt.display(), tuned.iterations)?;
    Ok(())
}

#[derive(Serialize)]
struct DetectionOut {
    image_id: usize,
    file_name: String,
    bbox: [f32; 4],
    score: f32,
}

#[derive(Serialize)]
struct DetectionsDoc {
    detections: Vec<DetectionOut>,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    files.sort();
    Ok(files)
}

fn read_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path).map_err(|e| orefsdet::Error::Image { path: path.into(), message: e.to_string() })?.to_rgb8())
}

fn infer_cmd(ckpt: &Path, dir: &Path, json: &Path, overlay: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    if !dir.is_dir() {
        bail!(orefsdet::Error::Data(format!("episode directory {} does not exist", dir.display())));
    }
    let (model, manifest) = checkpoint::load(ckpt)?;
    let cfg = manifest.config;
    let queries = png_files(&dir.join("queries"))?;
    let supports = png_files(&dir.join("supports"))?;
    let mut doc = DetectionsDoc { detections: Vec::new() };
    if !queries.is_empty() {
        if supports.is_empty() {
            bail!(orefsdet::Error::Data(format!("malformed episode {}: queries but no supports/*.png", dir.display())));
        }
        let mut crops = Vec::new();
        for p in &supports {
            crops.extend_from_slice(data::pad_support(&read_rgb(p)?).data());
        }
        let s = data::SUPPORT_SIZE;
        let support = Tensor::new(crops, &[supports.len(), 3, s, s])?;
        let proto = model.encode_supports(&support)?;
        if let Some(o) = overlay {
            fs::create_dir_all(o).with_context(|| format!("creating {}", o.display()))?;
        }
        for (i, q) in queries.iter().enumerate() {
            let img = read_rgb(q)?;
            let scene = Scene { image: img, boxes: Vec::new(), classes: Vec::new(), seed: 0 };
            let dets = train::detect_all(&model, &proto, std::slice::from_ref(&scene), &cfg)?.remove(0);
            let file_name = q.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            if let Some(o) = overlay {
                let mut canvas = scene.image.clone();
                for d in &dets {
                    draw_box(&mut canvas, &d.bbox, Rgb([255, 40, 40]), 2);
                }
                let path = o.join(&file_name);
                canvas.save(&path).map_err(|e| orefsdet::Error::Image { path, message: e.to_string() })?;
            }
            doc.detections.extend(dets.into_iter().map(|d| DetectionOut {
                image_id: i + 1,
                file_name: file_name.clone(),
                bbox: [d.bbox.x1, d.bbox.y1, d.bbox.x2 - d.bbox.x1, d.bbox.y2 - d.bbox.y1],
                score: d.score,
            }));
        }
    }
    fs::write(json, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", json.display()))?;
    writeln!(out, "{} detections over {} queries", doc.detections.len(), queries.len())?;
    Ok(())
}

const EVAL_BENCH_WARMUP: usize = 2;
const EVAL_BENCH_ITERS: usize = 10;

fn eval_cmd(ckpt: &Path, data: Option<&Path>, shots: usize, json: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let (model, manifest) = checkpoint::load(ckpt)?;
    let cfg = manifest.config;
    let class = cfg.data.novel_class;
    let (shot_ds, scenes) = match data {
        Some(p) => {
            let full = data::ingest_coco(p)?;
            let with = full.images_with(class);
            let shot_ds = shot_set(&cfg, Some(&full), shots)?;
            let rest: Vec<usize> = (0..full.len()).filter(|i| !with[..shots].contains(i)).collect();
            let scenes = rest.iter().map(|&i| full.scene(i)).collect::<orefsdet::Result<Vec<_>>>()?;
            (shot_ds, scenes)
        }
        None => (shot_set(&cfg, None, shots)?, train::eval_scenes(&cfg)),
    };
    if scenes.is_empty() {
        bail!(orefsdet::Error::Data("no query images left after taking the shot set".into()));
    }
    let instances = train::shot_instances(&shot_ds, class, cfg.train.seed)?;
    let supports = data::support_set(&shot_ds, &instances)?;
    let mut report: MetricsReport = train::evaluate(&model, &supports, &scenes, &cfg)?;
    let proto = model.encode_supports(&supports)?;
    let b = bench(&model, &cfg, &proto, &scenes, EVAL_BENCH_WARMUP, EVAL_BENCH_ITERS)?;
    report.fps = Some(b.fps);
    report.ckpt_bytes = Some(fs::metadata(ckpt)?.len());
    write!(out, "{}", report.to_table())?;
    writeln!(out, "{}", report.to_json())?;
    if let Some(p) = json {
        fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

const BENCH_SCENES: usize = 10;

fn bench_cmd(ckpt: Option<&Path>, warmup: usize, iters: usize, out: &mut dyn Write) -> Result<()> {
    if iters == 0 {
        return Err(Failure::Usage("--iters must be at least 1".into()).into());
    }
    let (model, mut cfg) = match ckpt {
        Some(p) => {
            let (m, manifest) = checkpoint::load(p)?;
            (m, manifest.config)
        }
        None => {
            let cfg = Config::default();
            (OreFsDet::new(&cfg.model, cfg.train.seed)?, cfg)
        }
    };
    cfg.eval.scenes = BENCH_SCENES;
    let shot_ds = train::shot_dataset(&cfg, 1);
    let instances = train::shot_instances(&shot_ds, cfg.data.novel_class, cfg.train.seed)?;
    let proto = model.encode_supports(&data::support_set(&shot_ds, &instances)?)?;
    let scenes = train::eval_scenes(&cfg);
    let r = bench(&model, &cfg, &proto, &scenes, warmup, iters)?;
    writeln!(out, "fps {:.3}", r.fps)?;
    writeln!(out, "median_secs {:.6}", r.median_secs)?;
    writeln!(out, "params {}", r.params)?;
    writeln!(out, "ckpt_bytes {}", r.ckpt_bytes)?;
    writeln!(out, "peak_alloc_bytes {}", r.peak_alloc_bytes)?;
    writeln!(out, "{}", serde_json::to_string(&r)?)?;
    Ok(())
}

fn gradcheck_cmd(op: Option<&str>, trials: usize, fault: Option<f64>, out: &mut dyn Write) -> Result<()> {
    if let Some(name) = op {
        if !gradsuite::case_names().contains(&name) {
            return Err(Failure::Usage(format!("unknown op `{name}`; known: {}", gradsuite::case_names().join(", "))).into());
        }
    }
    let reports = gradsuite::run(op, trials.max(1), fault)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed { "ok" } else { "FAIL" };
        writeln!(out, "{status:<4} {:<20} trials={:<3} max_rel_error={:.3e}", r.name, r.trials, r.max_rel_error)?;
        if !r.passed {
            failed.push(r.name.to_string());
        }
    }
    if !failed.is_empty() {
        return Err(Failure::Check(format!("gradient check failed: {}", failed.join(", "))).into());
    }
    writeln!(out, "all {} cases within {:.0e}", reports.len(), gradsuite::TOLERANCE)?;
    Ok(())
}
