//! Trains on the fixed 20-sample fixture and reports training-set PQ.
//!
//! `cargo run --release --example overfit -- [key=value ...]`

use std::time::Instant;

use kernelpan::config::RunConfig;
use kernelpan::inference::OracleFlags;
use kernelpan::model::PanopticFcn;
use kernelpan::pipeline::evaluate_model;
use kernelpan::train::{eval_set, train, TrainData};

fn main() -> kernelpan::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::default()
        .with_overrides(&["train.train_samples=20", "train.eval_on_train=true", "train.eval_every=250"])?
        .with_overrides(&overrides)?;
    let data = TrainData::from_config(&cfg)?;
    let ev = eval_set(&cfg, &data)?;
    let t = Instant::now();
    let out_dir = std::env::var("OVERFIT_OUT").ok().map(std::path::PathBuf::from);
    let out = train::<f32>(&cfg, &data, &ev, out_dir.as_deref(), None)?;
    let model = PanopticFcn::new(cfg.model.clone())?;
    let (r, per) = evaluate_model(&model, &out.params, &ev, &cfg.inference, &cfg.target_spec(), OracleFlags::default())?;
    let zero_fn = per.iter().filter(|m| m.thing_false_negatives() == 0).count();
    println!(
        "steps {} time {:.1}s PQ {:.4} PQ_th {:.4} PQ_st {:.4} zero-FN images {}/{}",
        out.steps,
        t.elapsed().as_secs_f64(),
        r.all.pq,
        r.things.pq,
        r.stuff.pq,
        zero_fn,
        per.len()
    );
    Ok(())
}
