//! Model-to-label glue used by training, the CLI and the acceptance checks.

use crate::data::synth::PanopticSample;
use crate::data::targets::{build_targets, TargetSpec};
use crate::error::Result;
use crate::eval::{ImageMatches, PqAccumulator, PqResult};
use crate::inference::{output_to_f64, run_inference, Inference, InferenceConfig, OracleFlags};
use crate::model::PanopticFcn;
use crate::panoptic::PanopticLabel;
use crate::tensor::{ParamSet, Scalar};

/// Runs the network and the test-time pipeline on one sample. Ground truth
/// is only consulted when an oracle flag is set.
pub fn predict<T: Scalar>(
    model: &PanopticFcn,
    params: &ParamSet<T>,
    sample: &PanopticSample,
    cfg: &InferenceConfig,
    spec: &TargetSpec,
    flags: OracleFlags,
) -> Result<Inference> {
    let out = model.forward(params, &sample.image.cast::<T>())?;
    let out = output_to_f64(&out);
    let (h, w) = (sample.height(), sample.width());
    if flags.any() {
        let targets = build_targets::<f64>(sample, spec)?;
        run_inference(&out, h, w, cfg, Some((&targets, flags)))
    } else {
        run_inference(&out, h, w, cfg, None)
    }
}

/// PQ of the model over `samples`, with per-image matches.
pub fn evaluate_model<T: Scalar>(
    model: &PanopticFcn,
    params: &ParamSet<T>,
    samples: &[PanopticSample],
    cfg: &InferenceConfig,
    spec: &TargetSpec,
    flags: OracleFlags,
) -> Result<(PqResult, Vec<ImageMatches>)> {
    let mut acc = PqAccumulator::new();
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = predict(model, params, s, cfg, spec, flags)?;
        per_image.push(acc.add_image(&pred.label, &PanopticLabel::from_sample(s))?);
    }
    Ok((acc.result(), per_image))
}
