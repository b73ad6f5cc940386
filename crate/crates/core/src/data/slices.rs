//! HU windowing and axial slice extraction.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::volume::{MaskVolume, VolumeCT};

/// HU windows feeding input channels 0, 1 and 2, in that order.
pub const LUNG_WINDOWS: [(f64, f64); 3] = [(-1000.0, 200.0), (-160.0, 240.0), (-1000.0, -775.0)];

/// `round(255 · (clamp(v, lo, hi) - lo) / (hi - lo))`, rounding half away
/// from zero. Callers guarantee `lo < hi`.
#[inline]
pub fn window_value(v: f64, lo: f64, hi: f64) -> u8 {
    (255.0 * (v.clamp(lo, hi) - lo) / (hi - lo)).round() as u8
}

/// Maps HU values linearly onto `0..=255` within `[lo, hi]`.
pub fn rescale_window(slice: &[i16], lo: f64, hi: f64) -> Result<Vec<u8>> {
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(Error::Config(format!("window [{lo}, {hi}] must be finite with lo < hi")));
    }
    Ok(slice.iter().map(|&v| window_value(f64::from(v), lo, hi)).collect())
}

/// Rounds `n` up to a multiple of `multiple`.
pub fn padded_extent(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// One windowed axial slice and its label, zero-padded to the network's
/// spatial multiple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceSample {
    /// `height × width × 3`, channel fastest.
    pub image: Vec<u8>,
    /// `height × width`, 0 or 1.
    pub label: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub patient_id: String,
    pub z: usize,
    /// Offset of the original content inside the padded frame, `(row, col)`.
    pub origin: (usize, usize),
    /// Unpadded extent `(ny, nx)`.
    pub original: (usize, usize),
}

impl SliceSample {
    /// Label cropped back to the unpadded extent.
    pub fn cropped_label(&self) -> Vec<u8> {
        crop(&self.label, self.width, self.origin, self.original)
    }
}

pub(crate) fn crop<T: Copy>(data: &[T], width: usize, (r0, c0): (usize, usize), (h, w): (usize, usize)) -> Vec<T> {
    (0..h)
        .flat_map(|r| data[(r0 + r) * width + c0..(r0 + r) * width + c0 + w].iter().copied())
        .collect()
}

/// Windows and pads axial slice `z`, with no label attached.
pub fn window_slice(vol: &VolumeCT, z: usize, multiple: usize) -> SliceSample {
    let [nx, ny, _] = vol.dims;
    let (h, w) = (padded_extent(ny, multiple), padded_extent(nx, multiple));
    let origin = ((h - ny) / 2, (w - nx) / 2);
    let mut image = vec![0u8; h * w * 3];
    let src = vol.axial(z);
    for y in 0..ny {
        for x in 0..nx {
            let v = f64::from(src[y * nx + x]);
            let dst = ((origin.0 + y) * w + origin.1 + x) * 3;
            for (c, &(lo, hi)) in LUNG_WINDOWS.iter().enumerate() {
                image[dst + c] = window_value(v, lo, hi);
            }
        }
    }
    SliceSample {
        image,
        label: vec![0; h * w],
        height: h,
        width: w,
        patient_id: vol.patient_id.clone(),
        z,
        origin,
        original: (ny, nx),
    }
}

/// Extracts axial slices `z = 0, stride, 2·stride, …`, windowed into three
/// channels and symmetrically zero-padded up to a multiple of `multiple`
/// (any odd remainder goes to the bottom/right).
pub fn make_slices(vol: &VolumeCT, mask: &MaskVolume, stride: usize, multiple: usize) -> Result<Vec<SliceSample>> {
    if stride == 0 || multiple == 0 {
        return Err(Error::Input("slice stride and padding multiple must be >= 1".into()));
    }
    if vol.dims != mask.dims {
        return Err(Error::Input(format!(
            "volume dims {:?} do not match mask dims {:?}",
            vol.dims, mask.dims
        )));
    }
    let [nx, ny, nz] = vol.dims;
    Ok((0..nz)
        .step_by(stride)
        .map(|z| {
            let mut s = window_slice(vol, z, multiple);
            let lab = mask.axial(z);
            for y in 0..ny {
                let dst = (s.origin.0 + y) * s.width + s.origin.1;
                s.label[dst..dst + nx].copy_from_slice(&lab[y * nx..(y + 1) * nx]);
            }
            s
        })
        .collect())
}

/// Stacks samples into network input `[B,3,H,W]` (values `u8 / 255`) and
/// label `[B,1,H,W]` tensors.
pub fn batch_tensors(samples: &[&SliceSample]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Input("cannot batch zero samples".into()))?;
    let (h, w) = (first.height, first.width);
    if samples.iter().any(|s| s.height != h || s.width != w) {
        return Err(Error::Dimension("samples in a batch must share one padded extent".into()));
    }
    let plane = h * w;
    let mut input = vec![0.0; samples.len() * 3 * plane];
    let mut label = vec![0.0; samples.len() * plane];
    for (b, s) in samples.iter().enumerate() {
        for i in 0..plane {
            for c in 0..3 {
                input[(b * 3 + c) * plane + i] = f64::from(s.image[i * 3 + c]) / 255.0;
            }
            label[b * plane + i] = f64::from(s.label[i]);
        }
    }
    Ok((
        Tensor::new(vec![samples.len(), 3, h, w], input)?,
        Tensor::new(vec![samples.len(), 1, h, w], label)?,
    ))
}

/// Rebuilds a mask volume from stride-1 slices of one patient.
pub fn reassemble_mask(samples: &[SliceSample], template: &MaskVolume) -> Result<MaskVolume> {
    let [nx, ny, nz] = template.dims;
    if samples.len() != nz {
        return Err(Error::Input(format!("need {nz} slices to reassemble, got {}", samples.len())));
    }
    let mut voxels = Vec::with_capacity(nx * ny * nz);
    for s in samples {
        if s.original != (ny, nx) {
            return Err(Error::Dimension("slice extent does not match the template".into()));
        }
        voxels.extend(s.cropped_label());
    }
    MaskVolume::new(template.dims, template.spacing, voxels)
}
