use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use kernelpan::config::RunConfig;
use kernelpan::data::io::{load_dataset, read_index, write_dataset, INDEX_FILE};
use kernelpan::data::synth::PanopticSample;
use kernelpan::eval::evaluate;
use kernelpan::inference::{MergeMode, OracleFlags};
use kernelpan::model::PanopticFcn;
use kernelpan::panoptic::{write_png, PanopticLabel, SEGMENTS_FORMAT};
use kernelpan::pipeline::predict;
use kernelpan::train::{
    eval_set, load_params, read_checkpoint_header, train as run_training, Checkpoint, Precision, TrainData,
};
use kernelpan::{Error, ParamSet, Result, Scalar};
use log::{info, warn};

use crate::ConfigArgs;

const CONFIG_SNAPSHOT: &str = "config.json";

/// `--config` (or `base`, or defaults), then every `--set`, then validation.
fn resolve_config(args: &ConfigArgs, base: Option<RunConfig>) -> Result<RunConfig> {
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => base.unwrap_or_default(),
    };
    let cfg = cfg.with_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn print_config(args: &ConfigArgs) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&resolve_config(args, None)?)?);
    Ok(())
}

pub fn synth(args: &ConfigArgs, out: &Path, count: usize, seed: Option<u64>) -> Result<()> {
    let cfg = resolve_config(args, None)?;
    let first_seed = seed.unwrap_or(cfg.train.data_seed);
    let index = write_dataset(out, &cfg.data, first_seed, count)?;
    cfg.save(&out.join(CONFIG_SNAPSHOT))?;
    info!("wrote {} samples (seeds {first_seed}..) to {}", index.samples.len(), out.display());
    Ok(())
}

pub fn train(args: &ConfigArgs, out: &Path, data_dir: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let base = match resume {
        Some(dir) if args.config.is_none() => Some(read_checkpoint_header(dir)?.config),
        _ => None,
    };
    let mut cfg = resolve_config(args, base)?;
    let data = match data_dir {
        Some(dir) => {
            let index = read_index(dir)?;
            if index.data != cfg.data {
                info!("using the data settings stored in {}", dir.join(INDEX_FILE).display());
                cfg.data = index.data;
                cfg.validate()?;
            }
            TrainData::Fixed(load_dataset(dir)?)
        }
        None => TrainData::from_config(&cfg)?,
    };
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_SNAPSHOT))?;
    let eval = eval_set(&cfg, &data)?;
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(&cfg, &data, &eval, out, resume),
        Precision::F64 => train_as::<f64>(&cfg, &data, &eval, out, resume),
    }
}

fn train_as<T: Scalar>(
    cfg: &RunConfig,
    data: &TrainData,
    eval: &[PanopticSample],
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let resume = match resume {
        Some(dir) => {
            let header = read_checkpoint_header(dir)?;
            let (params, velocity) = match header.precision {
                Precision::F32 => {
                    let c = Checkpoint::<f32>::load(dir)?;
                    (c.params.cast::<T>(), c.velocity.cast::<T>())
                }
                Precision::F64 => {
                    let c = Checkpoint::<f64>::load(dir)?;
                    (c.params.cast::<T>(), c.velocity.cast::<T>())
                }
            };
            info!("resuming from step {} of {}", header.step, dir.display());
            Some(Checkpoint { header, params, velocity })
        }
        None => None,
    };
    let outcome = run_training::<T>(cfg, data, eval, Some(out), resume)?;
    match outcome.last_eval {
        Some(r) => info!(
            "finished at step {}: PQ {:.4} (things {:.4}, stuff {:.4})",
            outcome.steps, r.all.pq, r.things.pq, r.stuff.pq
        ),
        None => info!("finished at step {}", outcome.steps),
    }
    Ok(())
}

/// A checkpoint directory, or a run directory holding `checkpoints/best`
/// (falling back to `checkpoints/last`).
fn checkpoint_dir(path: &Path) -> Result<PathBuf> {
    if path.join("model.json").is_file() {
        return Ok(path.to_path_buf());
    }
    for sub in ["best", "last"] {
        let p = path.join("checkpoints").join(sub);
        if p.join("model.json").is_file() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!(
        "{}: no checkpoint found (expected model.json or checkpoints/best)",
        path.display()
    )))
}

pub struct InferArgs {
    pub config: ConfigArgs,
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub mode: Option<MergeMode>,
    pub oracle_pos: bool,
    pub oracle_class: bool,
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let ckpt = checkpoint_dir(&a.checkpoint)?;
    let header = read_checkpoint_header(&ckpt)?;
    // The model must match the stored parameters; a config file only
    // replaces the inference settings.
    let mut cfg = header.config.clone();
    if let Some(path) = &a.config.config {
        cfg.inference = RunConfig::load(path)?.inference;
    }
    let mut cfg = cfg.with_overrides(&a.config.overrides)?;
    if let Some(mode) = a.mode {
        cfg.inference.merge.mode = mode;
    }
    cfg.validate()?;
    let flags = OracleFlags {
        gt_position: a.oracle_pos,
        gt_class: a.oracle_class,
    };
    match header.precision {
        Precision::F32 => infer_as(&cfg, &load_params::<f32>(&ckpt)?.1, flags, a),
        Precision::F64 => infer_as(&cfg, &load_params::<f64>(&ckpt)?.1, flags, a),
    }
}

fn infer_as<T: Scalar>(cfg: &RunConfig, params: &ParamSet<T>, flags: OracleFlags, a: &InferArgs) -> Result<()> {
    let index = read_index(&a.input)?;
    if (index.data.n_things, index.data.n_stuff) != (cfg.data.n_things, cfg.data.n_stuff) {
        return Err(Error::Data(format!(
            "{}: dataset has {} thing / {} stuff classes, checkpoint expects {} / {}",
            a.input.display(),
            index.data.n_things,
            index.data.n_stuff,
            cfg.data.n_things,
            cfg.data.n_stuff
        )));
    }
    let samples = load_dataset(&a.input)?;
    let model = PanopticFcn::new(cfg.model.clone())?;
    let spec = cfg.target_spec();
    create_dir(&a.out)?;
    cfg.save(&a.out.join(CONFIG_SNAPSHOT))?;
    for (stem, sample) in index.samples.iter().zip(&samples) {
        let pred = predict(&model, params, sample, &cfg.inference, &spec, flags)?;
        pred.label.save(&a.out, stem)?;
    }
    info!("wrote {} predictions to {}", samples.len(), a.out.display());
    Ok(())
}

/// Labels keyed by stem, from a sample directory (ground truth of every
/// sample) or a directory of panoptic PNG + JSON pairs.
fn load_labels(dir: &Path) -> Result<BTreeMap<String, PanopticLabel>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{}: not a directory", dir.display())));
    }
    if dir.join(INDEX_FILE).is_file() {
        let index = read_index(dir)?;
        let samples = load_dataset(dir)?;
        return Ok(index
            .samples
            .into_iter()
            .zip(samples.iter().map(PanopticLabel::from_sample))
            .collect());
    }
    let mut out = BTreeMap::new();
    for stem in segment_stems(dir)? {
        let label = PanopticLabel::load(dir, &stem)?;
        out.insert(stem, label);
    }
    Ok(out)
}

/// Stems of the `*.json` files in `dir` that are panoptic segment tables.
fn segment_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let is_segments = serde_json::from_slice::<serde_json::Value>(&bytes)
            .ok()
            .and_then(|v| v.get("format").and_then(|f| f.as_str()).map(|f| f == SEGMENTS_FORMAT))
            .unwrap_or(false);
        if is_segments {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn eval(pred_dir: &Path, gt_dir: &Path, out: Option<&Path>) -> Result<()> {
    let gt = load_labels(gt_dir)?;
    let mut pred = load_labels(pred_dir)?;
    if gt.is_empty() {
        return Err(Error::Data(format!("{}: no ground-truth labels found", gt_dir.display())));
    }
    let mut pairs = Vec::with_capacity(gt.len());
    for (stem, g) in gt {
        let p = pred.remove(&stem).ok_or_else(|| {
            Error::Data(format!(
                "missing prediction `{stem}` in {} (expected {stem}.json and {stem}.png)",
                pred_dir.display()
            ))
        })?;
        pairs.push((p, g));
    }
    if !pred.is_empty() {
        warn!("{} predictions have no ground truth and were ignored", pred.len());
    }
    let (result, _) = evaluate(&pairs)?;
    let out = out.unwrap_or(pred_dir);
    create_dir(out)?;
    let json_path = out.join("pq.json");
    fs::write(&json_path, serde_json::to_string_pretty(&result)?).map_err(|e| Error::io(&json_path, e))?;
    let csv_path = out.join("pq.csv");
    fs::write(&csv_path, result.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    println!(
        "PQ {:.4}  SQ {:.4}  RQ {:.4}  | things PQ {:.4}  stuff PQ {:.4}  ({} images)",
        result.all.pq,
        result.all.sq,
        result.all.rq,
        result.things.pq,
        result.stuff.pq,
        pairs.len()
    );
    Ok(())
}

fn image_rgb(s: &PanopticSample) -> Vec<u8> {
    let (h, w) = (s.height(), s.width());
    let px = s.image.data();
    let mut rgb = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for c in 0..3 {
            rgb.push((px[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    rgb
}

/// Writes `<stem>_color.png` (colorized labels) for every label in `input`; a
/// sample directory also gets `<stem>_image.png`.
pub fn render(input: &Path, out: &Path) -> Result<()> {
    create_dir(out)?;
    if input.join(INDEX_FILE).is_file() {
        let index = read_index(input)?;
        for (stem, s) in index.samples.iter().zip(load_dataset(input)?) {
            write_png(&out.join(format!("{stem}_image.png")), s.width(), s.height(), &image_rgb(&s))?;
            PanopticLabel::from_sample(&s).save_colorized(&out.join(format!("{stem}_color.png")))?;
        }
        info!("rendered {} samples to {}", index.samples.len(), out.display());
        return Ok(());
    }
    let labels = load_labels(input)?;
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no panoptic labels found", input.display())));
    }
    for (stem, l) in &labels {
        l.save_colorized(&out.join(format!("{stem}_color.png")))?;
    }
    info!("rendered {} labels to {}", labels.len(), out.display());
    Ok(())
}
