//! CT volumes, binary masks and the SVL1 container.
//!
//! SVL1 layout (little endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "SVL1"
//!      4     1  dtype code: 0 = i16 HU, 1 = u8 mask
//!      5    12  dims nx, ny, nz (u32 each)
//!     17    24  spacing sx, sy, sz in mm (f64 each)
//!     41     …  voxels, x fastest, then y, then z
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SVL1_MAGIC: &[u8; 4] = b"SVL1";
pub const SVL1_HEADER_LEN: usize = 41;
pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    HounsfieldI16 = 0,
    MaskU8 = 1,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::HounsfieldI16 => 2,
            DType::MaskU8 => 1,
        }
    }
}

/// Voxel extents `(nx, ny, nz)`.
pub type Dims = [usize; 3];
/// Voxel spacing `(sx, sy, sz)` in millimetres.
pub type Spacing = [f64; 3];

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

fn validate_grid(dims: Dims, spacing: Spacing, len: usize) -> Result<()> {
    if dims.iter().product::<usize>() != len {
        return Err(Error::Dimension(format!(
            "dims {dims:?} hold {} voxels but {len} were given",
            dims.iter().product::<usize>()
        )));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Input(format!("spacing {spacing:?} must be finite and positive")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeCT {
    pub dims: Dims,
    pub spacing: Spacing,
    pub voxels: Vec<i16>,
    pub patient_id: String,
    pub dataset_id: String,
}

impl VolumeCT {
    /// Builds a volume, clamping HU values into `[-1024, 3071]`.
    pub fn new(dims: Dims, spacing: Spacing, mut voxels: Vec<i16>) -> Result<Self> {
        validate_grid(dims, spacing, voxels.len())?;
        voxels.iter_mut().for_each(|v| *v = (*v).clamp(HU_MIN, HU_MAX));
        Ok(VolumeCT {
            dims,
            spacing,
            voxels,
            patient_id: String::new(),
            dataset_id: String::new(),
        })
    }

    pub fn with_ids(mut self, patient_id: impl Into<String>, dataset_id: impl Into<String>) -> Self {
        self.patient_id = patient_id.into();
        self.dataset_id = dataset_id.into();
        self
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> i16 {
        self.voxels[linear_index(self.dims, x, y, z)]
    }

    /// Axial slice `z` as `ny` rows of `nx` values.
    pub fn axial(&self, z: usize) -> &[i16] {
        let plane = self.dims[0] * self.dims[1];
        &self.voxels[z * plane..(z + 1) * plane]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    /// One byte per voxel, 0 or 1.
    pub voxels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: Dims, spacing: Spacing, voxels: Vec<u8>) -> Result<Self> {
        validate_grid(dims, spacing, voxels.len())?;
        if let Some(v) = voxels.iter().find(|&&v| v > 1) {
            return Err(Error::Input(format!("mask voxel value {v} is not binary")));
        }
        Ok(MaskVolume { dims, spacing, voxels })
    }

    pub fn empty(dims: Dims, spacing: Spacing) -> Self {
        MaskVolume {
            dims,
            spacing,
            voxels: vec![0; dims.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[linear_index(self.dims, x, y, z)] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = linear_index(self.dims, x, y, z);
        self.voxels[i] = u8::from(on);
    }

    /// Number of foreground voxels.
    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn axial(&self, z: usize) -> &[u8] {
        let plane = self.dims[0] * self.dims[1];
        &self.voxels[z * plane..(z + 1) * plane]
    }
}

fn encode(dtype: DType, dims: Dims, spacing: Spacing, payload: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(SVL1_HEADER_LEN + payload.len());
    out.extend_from_slice(SVL1_MAGIC);
    out.push(dtype as u8);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Input(format!("extent {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(payload);
    Ok(out)
}

struct Decoded<'a> {
    dtype: DType,
    dims: Dims,
    spacing: Spacing,
    payload: &'a [u8],
}

fn decode(bytes: &[u8]) -> Result<Decoded<'_>> {
    if bytes.len() < 4 || &bytes[..4] != SVL1_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "missing SVL1 magic".into(),
        });
    }
    if bytes.len() < SVL1_HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("header ends early; need {SVL1_HEADER_LEN} bytes"),
        });
    }
    let dtype = match bytes[4] {
        0 => DType::HounsfieldI16,
        1 => DType::MaskU8,
        other => {
            return Err(Error::Format {
                offset: 4,
                message: format!("unknown dtype code {other}"),
            })
        }
    };
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 5 + 4 * i;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    }
    let mut spacing = [0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let o = 17 + 8 * i;
        *s = f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        if !(s.is_finite() && *s > 0.0) {
            return Err(Error::Format {
                offset: o,
                message: format!("spacing {s} must be finite and positive"),
            });
        }
    }
    let payload = &bytes[SVL1_HEADER_LEN..];
    let expected = dims
        .iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or(Error::Format {
            offset: 5,
            message: "dims overflow".into(),
        })?;
    if payload.len() != expected {
        return Err(Error::Truncation {
            expected,
            actual: payload.len(),
        });
    }
    Ok(Decoded {
        dtype,
        dims,
        spacing,
        payload,
    })
}

fn expect_dtype(d: &Decoded<'_>, want: DType) -> Result<()> {
    if d.dtype != want {
        return Err(Error::Format {
            offset: 4,
            message: format!("expected dtype {want:?}, found {:?}", d.dtype),
        });
    }
    Ok(())
}

pub fn encode_volume(vol: &VolumeCT) -> Result<Vec<u8>> {
    let payload: Vec<u8> = vol.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
    encode(DType::HounsfieldI16, vol.dims, vol.spacing, &payload)
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeCT> {
    let d = decode(bytes)?;
    expect_dtype(&d, DType::HounsfieldI16)?;
    let voxels = d
        .payload
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    VolumeCT::new(d.dims, d.spacing, voxels)
}

pub fn encode_mask(mask: &MaskVolume) -> Result<Vec<u8>> {
    encode(DType::MaskU8, mask.dims, mask.spacing, &mask.voxels)
}

pub fn decode_mask(bytes: &[u8]) -> Result<MaskVolume> {
    let d = decode(bytes)?;
    expect_dtype(&d, DType::MaskU8)?;
    if let Some(pos) = d.payload.iter().position(|&v| v > 1) {
        return Err(Error::Format {
            offset: SVL1_HEADER_LEN + pos,
            message: format!("mask voxel value {} is not binary", d.payload[pos]),
        });
    }
    Ok(MaskVolume {
        dims: d.dims,
        spacing: d.spacing,
        voxels: d.payload.to_vec(),
    })
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads an SVL1 HU volume; the patient id defaults to the file stem.
pub fn load_volume(path: impl AsRef<Path>) -> Result<VolumeCT> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_volume(&bytes)?.with_ids(file_stem(path), ""))
}

pub fn save_volume(path: impl AsRef<Path>, vol: &VolumeCT) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(vol)?).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &MaskVolume) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(mask)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_volume_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let voxels: Vec<i16> = (0..512).map(|_| rng.random_range(HU_MIN..=HU_MAX)).collect();
        let vol = VolumeCT::new([8, 8, 8], [0.7, 0.7, 5.0], voxels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p001.svl1");
        save_volume(&path, &vol).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.voxels, vol.voxels);
        assert_eq!(back.spacing, [0.7, 0.7, 5.0]);
        assert_eq!(back.patient_id, "p001");
        assert_eq!(encode_volume(&back).unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn mask_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let voxels: Vec<u8> = (0..60).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let mask = MaskVolume::new([3, 4, 5], [1.0, 2.0, 3.0], voxels).unwrap();
        let bytes = encode_mask(&mask).unwrap();
        assert_eq!(decode_mask(&bytes).unwrap(), mask);
    }

    #[test]
    fn header_layout_is_exact() {
        let vol = VolumeCT::new([2, 1, 1], [1.0, 1.0, 2.5], vec![-1000, 40]).unwrap();
        let bytes = encode_volume(&vol).unwrap();
        assert_eq!(&bytes[..4], b"SVL1");
        assert_eq!(bytes[4], 0);
        assert_eq!(&bytes[5..17], &[2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[33..41], &2.5f64.to_le_bytes());
        assert_eq!(&bytes[41..], &[0x18, 0xfc, 0x28, 0x00]);
    }

    #[test]
    fn short_payload_is_truncation() {
        let mut bytes = encode(DType::HounsfieldI16, [10, 10, 10], [1.0; 3], &[]).unwrap();
        bytes.extend(std::iter::repeat_n(0u8, 100));
        assert!(matches!(
            decode_volume(&bytes),
            Err(Error::Truncation {
                expected: 2000,
                actual: 100
            })
        ));
    }

    #[test]
    fn bad_header_fields_report_offsets() {
        let vol = VolumeCT::new([1, 1, 1], [1.0; 3], vec![0]).unwrap();
        let good = encode_volume(&vol).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_volume(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_volume(&bad), Err(Error::Format { offset: 4, .. })));

        assert!(matches!(decode_mask(&good), Err(Error::Format { offset: 4, .. })));

        let mut bad = good.clone();
        bad[25..33].copy_from_slice(&(-1.0f64).to_le_bytes());
        assert!(matches!(decode_volume(&bad), Err(Error::Format { offset: 25, .. })));

        let mask = encode(DType::MaskU8, [2, 1, 1], [1.0; 3], &[1, 7]).unwrap();
        assert!(matches!(decode_mask(&mask), Err(Error::Format { offset: 42, .. })));
    }

    #[test]
    fn hu_values_are_clamped_on_load() {
        let raw = encode(
            DType::HounsfieldI16,
            [2, 1, 1],
            [1.0; 3],
            &[(-2000i16).to_le_bytes(), 4000i16.to_le_bytes()].concat(),
        )
        .unwrap();
        assert_eq!(decode_volume(&raw).unwrap().voxels, vec![HU_MIN, HU_MAX]);
    }
}
