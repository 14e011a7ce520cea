//! SGD training with gradient accumulation, poly learning rate, periodic
//! PQ evaluation and resumable checkpoints.

use std::borrow::Cow;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::data::synth::{generate_sample, DataConfig, PanopticSample};
use crate::data::targets::{build_targets, SampleTargets, TargetSpec};
use crate::error::{Error, Result};
use crate::eval::PqResult;
use crate::inference::OracleFlags;
use crate::loss::{total_loss, LossBreakdown};
use crate::model::PanopticFcn;
use crate::pipeline::evaluate_model;
use crate::tensor::{ParamSet, Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    /// Optimizer steps.
    pub total_iters: usize,
    /// Samples accumulated per optimizer step.
    pub batch: usize,
    /// Seeds parameter init and sample order.
    pub seed: u64,
    /// Steps between evaluations; 0 evaluates only at the end.
    pub eval_every: usize,
    pub precision: Precision,
    /// Random horizontal flips of training samples.
    pub hflip: bool,
    /// Size of the fixed synthetic training set; 0 draws a fresh sample
    /// for every slot of every batch.
    pub train_samples: usize,
    /// Seed of the first synthetic training sample.
    pub data_seed: u64,
    /// Size of the synthetic held-out set.
    pub eval_samples: usize,
    pub eval_seed: u64,
    /// Evaluate on the training samples instead of the held-out set.
    pub eval_on_train: bool,
    /// Stop this run after this many completed steps (0 = `total_iters`);
    /// the schedule still spans `total_iters`, so a later resume continues
    /// the same trajectory.
    pub stop_at: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            total_iters: 5000,
            batch: 8,
            seed: 0,
            eval_every: 500,
            precision: Precision::F32,
            hflip: false,
            train_samples: 0,
            data_seed: 0,
            eval_samples: 20,
            eval_seed: 1_000_000,
            eval_on_train: false,
            stop_at: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.total_iters == 0 {
            return bad("total_iters must be >= 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.power < 0.0 {
            return bad("momentum must lie in [0, 1), weight_decay and power must be >= 0");
        }
        Ok(())
    }
}

/// `base_lr * (1 - iter / total_iters)^power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    let frac = iter.min(cfg.total_iters) as f64 / cfg.total_iters as f64;
    cfg.base_lr * (1.0 - frac).powf(cfg.power)
}

/// `v = momentum v + g + wd p`, `p -= lr v`, then clears the gradients.
/// Every parameter needs a gradient and a velocity slot.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, velocity: &mut ParamSet<T>, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if let Some(name) = params.iter().find(|(_, p)| p.grad.is_none()).map(|(n, _)| n.to_string()) {
        return Err(Error::MissingGradient(name));
    }
    let (m, wd, lr) = (T::of(cfg.momentum), T::of(cfg.weight_decay), T::of(lr));
    for (name, p) in params.iter_mut() {
        let v = velocity
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no velocity for parameter `{name}`")))?;
        let g = p.grad.take().expect("checked above");
        for ((pv, vv), gv) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = m * *vv + *gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

pub fn zero_velocity<T: Scalar>(params: &ParamSet<T>) -> ParamSet<T> {
    let mut v = ParamSet::new();
    for (name, p) in params.iter() {
        v.insert(name, Tensor::zeros(p.value.shape())).expect("unique names");
    }
    v
}

pub const CHECKPOINT_FORMAT: &str = "kernelpan-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_FILE: &str = "model.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub precision: Precision,
    /// Optimizer steps completed.
    pub step: usize,
    pub best_pq: Option<f64>,
    pub config: RunConfig,
}

/// Parameters, momentum buffers and the config that produced them.
///
/// On disk: `model.json` (header), `params.json`/`params.bin` and
/// `state.json`/`state.bin` (velocity), all in one directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub params: ParamSet<T>,
    pub velocity: ParamSet<T>,
}

pub fn read_checkpoint_header(dir: &Path) -> Result<CheckpointHeader> {
    let path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let h: CheckpointHeader =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if h.format != CHECKPOINT_FORMAT || h.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("{}: not a checkpoint", path.display())));
    }
    Ok(h)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(HEADER_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self.header)?).map_err(|e| Error::io(&path, e))?;
        self.params.save(dir, "params")?;
        self.velocity.save(dir, "state")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header = read_checkpoint_header(dir)?;
        Ok(Checkpoint {
            header,
            params: ParamSet::load(dir, "params")?,
            velocity: ParamSet::load(dir, "state")?,
        })
    }
}

/// Loads the parameters of a checkpoint in any stored precision as `T`.
pub fn load_params<T: Scalar>(dir: &Path) -> Result<(CheckpointHeader, ParamSet<T>)> {
    let header = read_checkpoint_header(dir)?;
    let params = match header.precision {
        Precision::F32 => ParamSet::<f32>::load(dir, "params")?.cast(),
        Precision::F64 => ParamSet::<f64>::load(dir, "params")?.cast(),
    };
    Ok((header, params))
}

/// Where training samples come from.
#[derive(Clone, Debug)]
pub enum TrainData {
    /// A fixed set, visited in a fresh random order every epoch.
    Fixed(Vec<PanopticSample>),
    /// A new synthetic sample per slot, seeded `first_seed + slot`.
    Stream { cfg: DataConfig, first_seed: u64 },
}

impl TrainData {
    /// Synthetic data as described by the config.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        if cfg.train.train_samples == 0 {
            return Ok(TrainData::Stream {
                cfg: cfg.data.clone(),
                first_seed: cfg.train.data_seed,
            });
        }
        Ok(TrainData::Fixed(synth_set(&cfg.data, cfg.train.data_seed, cfg.train.train_samples)?))
    }

    /// Index into the fixed set, or the stream seed, of global slot `g`.
    fn slot(&self, g: usize, seed: u64) -> usize {
        match self {
            TrainData::Fixed(v) => {
                let n = v.len();
                let epoch = (g / n) as u64;
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
                perm[g % n]
            }
            TrainData::Stream { .. } => g,
        }
    }

    fn sample(&self, slot: usize) -> Result<Cow<'_, PanopticSample>> {
        match self {
            TrainData::Fixed(v) => Ok(Cow::Borrowed(&v[slot])),
            TrainData::Stream { cfg, first_seed } => Ok(Cow::Owned(generate_sample(first_seed + slot as u64, cfg)?)),
        }
    }
}

pub fn synth_set(cfg: &DataConfig, first_seed: u64, count: usize) -> Result<Vec<PanopticSample>> {
    (0..count as u64).map(|i| generate_sample(first_seed + i, cfg)).collect()
}

/// The evaluation set implied by the config.
pub fn eval_set(cfg: &RunConfig, data: &TrainData) -> Result<Vec<PanopticSample>> {
    match data {
        TrainData::Fixed(v) if cfg.train.eval_on_train => Ok(v.clone()),
        _ => synth_set(&cfg.data, cfg.train.eval_seed, cfg.train.eval_samples),
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ParamSet<T>,
    pub velocity: ParamSet<T>,
    /// Step count after training (includes resumed steps).
    pub steps: usize,
    /// Mean batch loss of every step run here.
    pub losses: Vec<f64>,
    pub best_pq: Option<f64>,
    pub last_eval: Option<PqResult>,
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let mut b = LossBreakdown::default();
    for p in parts {
        b.l_pos_th += p.l_pos_th / n;
        b.l_pos_st += p.l_pos_st / n;
        b.l_seg += p.l_seg / n;
        b.total += p.total / n;
        b.m += p.m;
        b.n += p.n;
        b.empty_regions += p.empty_regions;
        b.zero_score_fallbacks += p.zero_score_fallbacks;
    }
    b
}

struct Log(Option<BufWriter<File>>);

impl Log {
    fn open(out_dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = out_dir else { return Ok(Log(None)) };
        let path = dir.join("metrics.jsonl");
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Log(Some(BufWriter::new(f))))
    }

    fn write(&mut self, v: serde_json::Value) -> Result<()> {
        if let Some(w) = &mut self.0 {
            writeln!(w, "{v}").and_then(|_| w.flush()).map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        Ok(())
    }
}

fn finite_grads<T: Scalar>(p: &ParamSet<T>) -> bool {
    p.iter().all(|(_, q)| q.grad.as_ref().is_none_or(|g| g.is_finite()))
}

/// Runs optimizer steps from the step stored in `resume` (or 0) up to
/// `total_iters`, or `stop_at` when set. With an output directory, appends to `metrics.jsonl` and
/// writes `checkpoints/last` and `checkpoints/best`; a non-finite loss or
/// gradient writes `nan_abort.json` and fails with [`Error::Numeric`].
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    data: &TrainData,
    eval_samples: &[PanopticSample],
    out_dir: Option<&Path>,
    resume: Option<Checkpoint<T>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let tc = &cfg.train;
    if let TrainData::Fixed(v) = data {
        if v.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
    }
    let model = PanopticFcn::new(cfg.model.clone())?;
    let spec = cfg.target_spec();
    let (mut params, mut velocity, start, mut best_pq) = match resume {
        Some(c) => (c.params, c.velocity, c.header.step, c.header.best_pq),
        None => {
            let p = model.init_params::<T>(tc.seed);
            let v = zero_velocity(&p);
            (p, v, 0, None)
        }
    };
    if start >= tc.total_iters {
        return Err(Error::Config(format!(
            "checkpoint is at step {start}, total_iters is {}",
            tc.total_iters
        )));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = Log::open(out_dir)?;
    let precision = if T::DTYPE == "f64" { Precision::F64 } else { Precision::F32 };
    let checkpoint = |params: &ParamSet<T>, velocity: &ParamSet<T>, step: usize, best: Option<f64>, name: &str| -> Result<()> {
        let Some(dir) = out_dir else { return Ok(()) };
        Checkpoint {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                precision,
                step,
                best_pq: best,
                config: cfg.clone(),
            },
            params: params.clone(),
            velocity: velocity.clone(),
        }
        .save(&dir.join("checkpoints").join(name))
    };
    // Targets of a fixed set are built once.
    let cached: Option<Vec<SampleTargets<T>>> = match data {
        TrainData::Fixed(v) if !tc.hflip => Some(v.iter().map(|s| build_targets(s, &spec)).collect::<Result<_>>()?),
        _ => None,
    };

    let end = if tc.stop_at == 0 { tc.total_iters } else { tc.stop_at.min(tc.total_iters) };
    let mut losses = Vec::with_capacity(end.saturating_sub(start));
    let mut last_eval = None;
    for step in start..end {
        let lr = poly_lr(step, tc);
        let mut parts = Vec::with_capacity(tc.batch);
        for j in 0..tc.batch {
            let g = step * tc.batch + j;
            let slot = data.slot(g, tc.seed);
            let flip = tc.hflip && ChaCha8Rng::seed_from_u64(tc.seed ^ (g as u64).wrapping_mul(0xd134_2543_de82_ef95)).random_bool(0.5);
            let mut sample = data.sample(slot)?;
            if flip {
                sample = Cow::Owned(sample.flip_horizontal());
            }
            let owned;
            let targets = match &cached {
                Some(c) => &c[slot],
                None => {
                    owned = build_targets::<T>(&sample, &spec)?;
                    &owned
                }
            };
            let mut tape = Tape::new();
            let vars = model.forward_tape(&mut tape, &params, &sample.image.cast::<T>())?;
            let (loss, bd) = total_loss(&mut tape, &vars, targets, &cfg.loss)?;
            let bad = !bd.total.is_finite();
            if !bad {
                tape.backward(loss, &mut params)?;
            }
            if bad || !finite_grads(&params) {
                let report = json!({"step": step, "batch_index": j, "sample_seed": sample.seed, "breakdown": bd});
                if let Some(dir) = out_dir {
                    let path = dir.join("nan_abort.json");
                    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
                }
                log.write(json!({"step": step, "abort": report}))?;
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient at step {step} (sample seed {})",
                    sample.seed
                )));
            }
            parts.push(bd);
        }
        params.scale_grads(T::of(1.0 / tc.batch as f64));
        sgd_step(&mut params, &mut velocity, lr, tc)?;
        let bd = mean_breakdown(&parts);
        losses.push(bd.total);
        log.write(json!({"step": step + 1, "lr": lr, "loss": bd.total, "breakdown": bd}))?;
        if (step + 1) % 50 == 0 {
            log::info!("step {}/{} loss {:.4} lr {:.5}", step + 1, tc.total_iters, bd.total, lr);
        }

        let done = step + 1;
        let eval_now = done == end || (tc.eval_every > 0 && done % tc.eval_every == 0);
        if eval_now && !eval_samples.is_empty() {
            let (r, _) = evaluate_model(&model, &params, eval_samples, &cfg.inference, &spec, OracleFlags::default())?;
            log::info!("step {done} PQ {:.4} (th {:.4}, st {:.4})", r.all.pq, r.things.pq, r.stuff.pq);
            log.write(json!({"step": done, "eval": {"pq": r.all.pq, "sq": r.all.sq, "rq": r.all.rq, "pq_th": r.things.pq, "pq_st": r.stuff.pq}}))?;
            if best_pq.is_none_or(|b| r.all.pq > b) {
                best_pq = Some(r.all.pq);
                checkpoint(&params, &velocity, done, best_pq, "best")?;
            }
            last_eval = Some(r);
        }
        if eval_now {
            checkpoint(&params, &velocity, done, best_pq, "last")?;
        }
    }
    Ok(TrainOutcome {
        params,
        velocity,
        steps: end.max(start),
        losses,
        best_pq,
        last_eval,
    })
}

/// Loss of every sample in `samples` under `params`, without gradients.
pub fn dataset_loss<T: Scalar>(cfg: &RunConfig, params: &ParamSet<T>, samples: &[PanopticSample], spec: &TargetSpec) -> Result<f64> {
    let model = PanopticFcn::new(cfg.model.clone())?;
    let mut sum = 0.0;
    for s in samples {
        let targets = build_targets::<T>(s, spec)?;
        let mut tape = Tape::new();
        let vars = model.forward_tape(&mut tape, params, &s.image.cast::<T>())?;
        sum += total_loss(&mut tape, &vars, &targets, &cfg.loss)?.1.total;
    }
    Ok(sum / samples.len().max(1) as f64)
}
