//! Synthetic chest CT corpus: a soft-tissue body containing one or two
//! ellipsoidal lungs with noise and consolidation blobs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{save_mask, save_volume, write_manifest, ManifestEntry, MaskVolume, VolumeCT};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub air_hu: f64,
    pub body_hu: f64,
    pub lung_hu: f64,
    pub consolidation_hu: f64,
    pub noise_sd: f64,
    /// Probability that a case has only one lung.
    pub single_lung_fraction: f64,
    /// Upper bound on consolidation blobs per lung.
    pub max_blobs: usize,
    pub datasets: Vec<String>,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            dims: [64, 64, 32],
            spacing: [0.8, 0.8, 2.5],
            air_hu: -1000.0,
            body_hu: 40.0,
            lung_hu: -850.0,
            consolidation_hu: 0.0,
            noise_sd: 30.0,
            single_lung_fraction: 0.2,
            max_blobs: 3,
            datasets: vec!["synth_a".into(), "synth_b".into()],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    c: [f64; 3],
    r: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.c[a]) / self.r[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

pub fn case_id(index: usize) -> String {
    format!("case{index:03}")
}

/// Case `index` of the corpus for `seed`; each case draws from its own
/// generator stream so cases are independent of corpus size.
pub fn synth_case(params: &SynthParams, seed: u64, index: usize) -> Result<(VolumeCT, MaskVolume)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let [nx, ny, nz] = params.dims;
    let (fx, fy, fz) = (nx as f64, ny as f64, nz as f64);
    let jitter = |rng: &mut ChaCha8Rng, v: f64, frac: f64| v * (1.0 + rng.random_range(-frac..frac));

    let body = Ellipsoid {
        c: [fx / 2.0 - 0.5, fy / 2.0 - 0.5, 0.0],
        r: [jitter(&mut rng, 0.44 * fx, 0.05), jitter(&mut rng, 0.36 * fy, 0.05), f64::INFINITY],
    };
    let single = rng.random_bool(params.single_lung_fraction);
    let mut lungs = Vec::new();
    for side in [-1.0, 1.0] {
        let rx = jitter(&mut rng, 0.16 * fx, 0.1);
        lungs.push(Ellipsoid {
            c: [
                body.c[0] + side * (rx + jitter(&mut rng, 0.05 * fx, 0.3)),
                body.c[1] + rng.random_range(-0.03..0.03) * fy,
                fz / 2.0 - 0.5 + rng.random_range(-0.05..0.05) * fz,
            ],
            r: [rx, jitter(&mut rng, 0.25 * fy, 0.1), jitter(&mut rng, 0.38 * fz, 0.1)],
        });
    }
    if single {
        let drop = rng.random_range(0..2);
        lungs.remove(drop);
    }
    let mut blobs = Vec::new();
    for lung in &lungs {
        for _ in 0..rng.random_range(0..=params.max_blobs) {
            let u: [f64; 3] = [0; 3].map(|_| rng.random_range(-0.6..0.6));
            let rad = rng.random_range(1.5..4.0);
            blobs.push(Ellipsoid {
                c: [0, 1, 2].map(|a| lung.c[a] + u[a] * lung.r[a]),
                r: [rad, rad, rad * params.spacing[0] / params.spacing[2] * 1.5],
            });
        }
    }

    let noise = Normal::new(0.0, params.noise_sd).map_err(|e| Error::Config(format!("noise sd: {e}")))?;
    let n = nx * ny * nz;
    let mut voxels = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let in_lung = lungs.iter().any(|l| l.contains(p));
                let hu = if in_lung {
                    if blobs.iter().any(|b| b.contains(p)) {
                        params.consolidation_hu
                    } else {
                        params.lung_hu
                    }
                } else if body.contains(p) {
                    params.body_hu
                } else {
                    params.air_hu
                };
                let v = (hu + noise.sample(&mut rng)).round().clamp(f64::from(i16::MIN), f64::from(i16::MAX));
                voxels.push(v as i16);
                mask.push(u8::from(in_lung));
            }
        }
    }
    let dataset = &params.datasets[index % params.datasets.len()];
    let vol = VolumeCT::new(params.dims, params.spacing, voxels)?.with_ids(case_id(index), dataset.as_str());
    let mask = MaskVolume::new(params.dims, params.spacing, mask)?;
    Ok((vol, mask))
}

/// Writes `cases` volume/mask pairs plus `manifest.csv` into `dir`.
pub fn write_corpus(dir: &Path, params: &SynthParams, cases: usize, seed: u64) -> Result<Vec<ManifestEntry>> {
    if cases == 0 {
        return Err(Error::Config("a synthetic corpus needs at least one case".into()));
    }
    if params.datasets.is_empty() {
        return Err(Error::Config("at least one dataset id is required".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(cases);
    for i in 0..cases {
        let (vol, mask) = synth_case(params, seed, i)?;
        let volume_path = dir.join(format!("{}.svl", case_id(i)));
        let mask_path = dir.join(format!("{}_mask.svl", case_id(i)));
        save_volume(&volume_path, &vol)?;
        save_mask(&mask_path, &mask)?;
        entries.push(ManifestEntry {
            patient_id: vol.patient_id.clone(),
            dataset_id: vol.dataset_id.clone(),
            volume_path,
            mask_path,
        });
    }
    write_manifest(dir.join("manifest.csv"), &entries)?;
    Ok(entries)
}
