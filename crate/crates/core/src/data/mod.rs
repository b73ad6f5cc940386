//! Volume I/O, windowed slice extraction, manifests and fold splitting.

pub mod folds;
pub mod manifest;
pub mod slices;
pub mod volume;

pub use folds::{split_folds, Fold, FoldSplit, DEFAULT_VAL_FRACTION};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use slices::{
    batch_tensors, make_slices, padded_extent, reassemble_mask, rescale_window, window_slice, window_value,
    SliceSample, LUNG_WINDOWS,
};
pub use volume::{
    decode_mask, decode_volume, encode_mask, encode_volume, linear_index, load_mask, load_volume, save_mask,
    save_volume, DType, Dims, MaskVolume, Spacing, VolumeCT, HU_MAX, HU_MIN, SVL1_HEADER_LEN, SVL1_MAGIC,
};
