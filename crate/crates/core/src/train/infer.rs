use crate::data::{batch_tensors, window_slice, MaskVolume, SliceSample, VolumeCT};
use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::model::Model;
use crate::postproc::{keep_lungs, threshold, ProbabilityVolume};

use super::Case;

const INFER_BATCH: usize = 8;

/// Eval-mode probability volumes for every side output in stage order,
/// then the fused output when the model has one. The last entry is the
/// model's final output.
pub fn predict_volumes(model: &Model, vol: &VolumeCT) -> Result<Vec<ProbabilityVolume>> {
    if !model.has_bn_statistics() {
        return Err(Error::Uninitialized(
            "model has no batch-norm running statistics; train it or load a trained checkpoint".into(),
        ));
    }
    let [nx, ny, nz] = vol.dims;
    let plane = nx * ny;
    let multiple = model.config().spatial_multiple();
    let mut outputs: Vec<Vec<f64>> = Vec::new();
    for z0 in (0..nz).step_by(INFER_BATCH) {
        let slices: Vec<SliceSample> = (z0..(z0 + INFER_BATCH).min(nz)).map(|z| window_slice(vol, z, multiple)).collect();
        let refs: Vec<&SliceSample> = slices.iter().collect();
        let (x, _) = batch_tensors(&refs)?;
        let maps = model.infer_all(x)?;
        if outputs.is_empty() {
            outputs = vec![vec![0.0; plane * nz]; maps.len()];
        }
        for (out, map) in outputs.iter_mut().zip(&maps) {
            for (b, s) in slices.iter().enumerate() {
                let frame = &map.data()[b * s.height * s.width..(b + 1) * s.height * s.width];
                let cropped = crate::data::slices::crop(frame, s.width, s.origin, s.original);
                out[s.z * plane..(s.z + 1) * plane].copy_from_slice(&cropped);
            }
        }
    }
    outputs
        .into_iter()
        .map(|v| ProbabilityVolume::new(vol.dims, vol.spacing, v))
        .collect()
}

pub fn predict_volume(model: &Model, vol: &VolumeCT) -> Result<ProbabilityVolume> {
    Ok(predict_volumes(model, vol)?.pop().expect("at least one output"))
}

/// Threshold followed by hole filling and lung component selection.
pub fn postprocess(pv: &ProbabilityVolume, t: f64) -> Result<MaskVolume> {
    Ok(keep_lungs(&threshold(pv, t)?))
}

pub fn segment_volume(model: &Model, vol: &VolumeCT, t: f64) -> Result<MaskVolume> {
    postprocess(&predict_volume(model, vol)?, t)
}

/// Grid value maximizing mean post-processed Dice; ties go to the lower
/// threshold.
pub fn calibrate_threshold(pairs: &[(ProbabilityVolume, MaskVolume)], grid: &[f64]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Calibration("no validation volumes".into()));
    }
    if grid.is_empty() {
        return Err(Error::Calibration("empty threshold grid".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (f64::NEG_INFINITY, sorted[0]);
    for &t in &sorted {
        let mut sum = 0.0;
        for (pv, gt) in pairs {
            sum += dice(&postprocess(pv, t)?, gt)?;
        }
        let mean = sum / pairs.len() as f64;
        log::debug!("threshold {t}: mean dice {mean}");
        if mean > best.0 {
            best = (mean, t);
        }
    }
    Ok(best.1)
}

pub fn calibrate_model(model: &Model, validation: &[Case], grid: &[f64]) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::Calibration("no validation patients".into()));
    }
    let pairs = validation
        .iter()
        .map(|c| Ok((predict_volume(model, &c.volume)?, c.mask.clone())))
        .collect::<Result<Vec<_>>>()?;
    calibrate_threshold(&pairs, grid)
}
