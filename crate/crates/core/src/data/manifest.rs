//! Dataset manifests: `patient_id,dataset_id,volume_path,mask_path`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::volume::{load_mask, load_volume, MaskVolume, VolumeCT};

pub const MANIFEST_HEADER: [&str; 4] = ["patient_id", "dataset_id", "volume_path", "mask_path"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub dataset_id: String,
    /// Resolved against the manifest's directory when relative.
    pub volume_path: PathBuf,
    pub mask_path: PathBuf,
}

impl ManifestEntry {
    /// Loads the volume (carrying this entry's ids) and its mask.
    pub fn load(&self) -> Result<(VolumeCT, MaskVolume)> {
        let vol = load_volume(&self.volume_path)?.with_ids(&self.patient_id, &self.dataset_id);
        let mask = load_mask(&self.mask_path)?;
        if vol.dims != mask.dims {
            return Err(Error::Input(format!(
                "patient {}: volume dims {:?} differ from mask dims {:?}",
                self.patient_id, vol.dims, mask.dims
            )));
        }
        Ok((vol, mask))
    }
}

/// Reads a manifest and checks that every referenced file exists. Row
/// numbers in errors count data rows from 1 (the header is row 0).
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other:?}", path.display())),
    })?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != MANIFEST_HEADER {
        return Err(Error::Input(format!(
            "{}: header {header:?} must be {}",
            path.display(),
            MANIFEST_HEADER.join(",")
        )));
    }
    let mut entries = Vec::new();
    for (i, row) in reader.deserialize::<ManifestEntry>().enumerate() {
        let row_no = i + 1;
        let mut e = row.map_err(|err| Error::Input(format!("{} row {row_no}: {err}", path.display())))?;
        e.volume_path = base.join(&e.volume_path);
        e.mask_path = base.join(&e.mask_path);
        for (what, p) in [("volume", &e.volume_path), ("mask", &e.mask_path)] {
            if !p.is_file() {
                return Err(Error::Input(format!(
                    "{} row {row_no}: {what} file {} not found",
                    path.display(),
                    p.display()
                )));
            }
        }
        entries.push(e);
    }
    if entries.is_empty() {
        return Err(Error::Input(format!("{}: manifest has no rows", path.display())));
    }
    Ok(entries)
}

/// Writes entries, storing paths relative to the manifest's directory when
/// they live beneath it.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other:?}", path.display())),
    })?;
    for e in entries {
        w.serialize(ManifestEntry {
            volume_path: rel(&e.volume_path),
            mask_path: rel(&e.mask_path),
            ..e.clone()
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::volume::{save_mask, save_volume};

    fn fixture(dir: &Path, n: usize) -> Vec<ManifestEntry> {
        (0..n)
            .map(|i| {
                let vol = VolumeCT::new([2, 2, 2], [1.0; 3], vec![i as i16; 8]).unwrap();
                let mask = MaskVolume::empty([2, 2, 2], [1.0; 3]);
                let vp = dir.join(format!("p{i}.svl"));
                let mp = dir.join(format!("p{i}_mask.svl"));
                save_volume(&vp, &vol).unwrap();
                save_mask(&mp, &mask).unwrap();
                ManifestEntry {
                    patient_id: format!("p{i}"),
                    dataset_id: "d".into(),
                    volume_path: vp,
                    mask_path: mp,
                }
            })
            .collect()
    }

    #[test]
    fn round_trip_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let entries = fixture(dir.path(), 3);
        let path = dir.path().join("manifest.csv");
        write_manifest(&path, &entries).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("patient_id,dataset_id,volume_path,mask_path\n"));
        assert!(text.contains("p1,d,p1.svl,p1_mask.svl"));
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, entries);
        let (vol, _) = back[2].load().unwrap();
        assert_eq!(vol.patient_id, "p2");
        assert_eq!(vol.voxels, vec![2; 8]);
    }

    #[test]
    fn missing_mask_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let entries = fixture(dir.path(), 3);
        let path = dir.path().join("manifest.csv");
        write_manifest(&path, &entries).unwrap();
        std::fs::remove_file(&entries[1].mask_path).unwrap();
        let err = read_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::Input(ref m) if m.contains("row 2") && m.contains("mask")), "{err}");
    }

    #[test]
    fn wrong_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "id,dataset,volume,mask\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Input(_))));
    }
}
