//! Shared fixtures for the criterion benches.

use phnn_core::autodiff::Tensor;
use phnn_core::data::MaskVolume;
use phnn_core::synth::{synth_case, SynthParams};

/// Deterministic values in [-1, 1] without pulling in an RNG.
pub fn wavy(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f64) * 0.618_034).sin())
}

/// A synthetic ground-truth lung mask of the default corpus size.
pub fn lung_mask(seed: u64) -> MaskVolume {
    synth_case(&SynthParams::default(), seed, 0).expect("default synth params are valid").1
}

/// `mask` with every voxel whose linear index is a multiple of `every` flipped.
pub fn perturbed(mask: &MaskVolume, every: usize) -> MaskVolume {
    let mut out = mask.clone();
    for v in out.voxels.iter_mut().step_by(every) {
        *v ^= 1;
    }
    out
}
