//! Dice, average surface distance and report export.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dims, MaskVolume, Spacing};
use crate::error::{Error, Result};

fn check_pair(a: &MaskVolume, b: &MaskVolume) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Input(format!("mask dims {:?} and {:?} differ", a.dims, b.dims)));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
pub fn dice(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    check_pair(a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.voxels.iter().zip(&b.voxels) {
        na += x as usize;
        nb += y as usize;
        both += (x & y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Foreground voxels with a background 6-neighbour or lying on the volume border.
pub fn surface(mask: &MaskVolume) -> Vec<bool> {
    let [nx, ny, nz] = mask.dims;
    let on = |x: usize, y: usize, z: usize| mask.voxels[x + nx * (y + ny * z)] != 0;
    let mut out = vec![false; mask.voxels.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !on(x, y, z) {
                    continue;
                }
                let border = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                out[x + nx * (y + ny * z)] = border
                    || !on(x - 1, y, z)
                    || !on(x + 1, y, z)
                    || !on(x, y - 1, z)
                    || !on(x, y + 1, z)
                    || !on(x, y, z - 1)
                    || !on(x, y, z + 1);
            }
        }
    }
    out
}

/// One-dimensional squared distance transform over sample positions
/// `i · step` (lower envelope of parabolas). `f` holds `INFINITY` where no
/// feature lies.
fn dt1d(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, zb: &mut Vec<f64>) {
    v.clear();
    zb.clear();
    let pos = |i: usize| i as f64 * step;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zb.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
                    if s <= *zb.last().unwrap() {
                        v.pop();
                        zb.pop();
                    } else {
                        v.push(q);
                        zb.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = pos(i);
        while k + 1 < v.len() && zb[k + 1] < x {
            k += 1;
        }
        let d = x - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel centre to the
/// nearest feature voxel, honouring anisotropic spacing.
pub fn squared_distance_transform(features: &[bool], dims: Dims, spacing: Spacing) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut d: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut zb) = (Vec::new(), Vec::new());
    let mut line = Vec::new();
    let mut out = Vec::new();
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        line.resize(len, 0.0);
        out.resize(len, 0.0);
        let starts: Vec<usize> = (0..nx * ny * nz)
            .filter(|&i| (i / stride) % len == 0)
            .collect();
        for s in starts {
            for (k, l) in line.iter_mut().enumerate() {
                *l = d[s + k * stride];
            }
            dt1d(&line, spacing[axis], &mut out, &mut v, &mut zb);
            for (k, o) in out.iter().enumerate() {
                d[s + k * stride] = *o;
            }
        }
    }
    d
}

/// Symmetric average surface distance in mm over voxel-centre surfaces.
pub fn asd(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    check_pair(a, b)?;
    if a.spacing != b.spacing {
        return Err(Error::Input(format!("mask spacings {:?} and {:?} differ", a.spacing, b.spacing)));
    }
    let (sa, sb) = (surface(a), surface(b));
    let (na, nb) = (sa.iter().filter(|&&s| s).count(), sb.iter().filter(|&&s| s).count());
    if na == 0 || nb == 0 {
        return Err(Error::UndefinedMetric("surface distance needs two non-empty masks".into()));
    }
    let da = squared_distance_transform(&sa, a.dims, a.spacing);
    let db = squared_distance_transform(&sb, b.dims, b.spacing);
    let one_way = |from: &[bool], to: &[f64]| -> f64 {
        from.iter().zip(to).filter(|(&s, _)| s).map(|(_, d)| d.sqrt()).sum()
    };
    Ok((one_way(&sa, &db) + one_way(&sb, &da)) / (na + nb) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub patient_id: String,
    pub dice: f64,
    /// `None` when the distance is undefined (an empty mask).
    pub asd_mm: Option<f64>,
    pub pred_voxels: usize,
    pub gt_voxels: usize,
}

pub fn evaluate(patient_id: &str, pred: &MaskVolume, gt: &MaskVolume) -> Result<EvalRecord> {
    let asd_mm = match asd(pred, gt) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(msg)) => {
            log::warn!("{patient_id}: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(EvalRecord {
        patient_id: patient_id.to_string(),
        dice: dice(pred, gt)?,
        asd_mm,
        pred_voxels: pred.count(),
        gt_voxels: gt.count(),
    })
}

/// Mean and sample standard deviation; `None` for an empty slice.
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, sd))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub dice: (f64, f64),
    pub asd_mm: Option<(f64, f64)>,
    pub n: usize,
    pub undefined_asd: usize,
}

pub fn summarize(records: &[EvalRecord]) -> Result<Summary> {
    let dices: Vec<f64> = records.iter().map(|r| r.dice).collect();
    let asds: Vec<f64> = records.iter().filter_map(|r| r.asd_mm).collect();
    Ok(Summary {
        dice: mean_sd(&dices).ok_or_else(|| Error::Input("no records to summarize".into()))?,
        asd_mm: mean_sd(&asds),
        n: records.len(),
        undefined_asd: records.len() - asds.len(),
    })
}

/// A case that could not be scored, reported in place of its metrics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseError {
    pub patient_id: String,
    pub message: String,
}

/// Writes `patient_id,dice,asd_mm,pred_voxels,gt_voxels,error` rows sorted
/// by patient, then a `mean±sd` summary row over the scored cases.
/// Undefined distances are written as `undefined`; failed cases carry only
/// their id and error message.
pub fn write_report(out: &mut impl Write, records: &[EvalRecord], failures: &[CaseError]) -> Result<()> {
    let summary = summarize(records)?;
    let mut rows: Vec<[String; 6]> = records
        .iter()
        .map(|r| {
            [
                r.patient_id.clone(),
                format!("{:.6}", r.dice),
                r.asd_mm.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}")),
                r.pred_voxels.to_string(),
                r.gt_voxels.to_string(),
                String::new(),
            ]
        })
        .chain(failures.iter().map(|f| {
            [
                f.patient_id.clone(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                f.message.clone(),
            ]
        }))
        .collect();
    rows.sort_by(|a, b| a[0].cmp(&b[0]));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["patient_id", "dice", "asd_mm", "pred_voxels", "gt_voxels", "error"])?;
    for row in rows {
        w.write_record(row)?;
    }
    let pm = |(m, s): (f64, f64)| format!("{m:.4}±{s:.4}");
    w.write_record([
        "mean±sd".to_string(),
        pm(summary.dice),
        summary.asd_mm.map_or_else(|| "undefined".to_string(), pm),
        String::new(),
        String::new(),
        String::new(),
    ])?;
    w.flush().map_err(|e| Error::Input(format!("writing report: {e}")))
}

pub fn save_report(path: impl AsRef<Path>, records: &[EvalRecord], failures: &[CaseError]) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_report(&mut file, records, failures)
}

/// `(edge, fraction of records with dice <= edge)` for each edge.
pub fn cumulative_histogram(records: &[EvalRecord], edges: &[f64]) -> Result<Vec<(f64, f64)>> {
    if records.is_empty() {
        return Err(Error::Input("cumulative histogram needs at least one record".into()));
    }
    if edges.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Input("histogram edges must be sorted".into()));
    }
    let n = records.len() as f64;
    Ok(edges
        .iter()
        .map(|&e| (e, records.iter().filter(|r| r.dice <= e).count() as f64 / n))
        .collect())
}

/// Edges `0.00, 0.01, …, 1.00`.
pub fn default_edges() -> Vec<f64> {
    (0..=100).map(|i| f64::from(i) / 100.0).collect()
}

pub fn write_histogram(out: &mut impl Write, rows: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["dice_edge", "fraction"])?;
    for (e, f) in rows {
        w.write_record([format!("{e:.4}"), format!("{f:.6}")])?;
    }
    w.flush().map_err(|e| Error::Input(format!("writing histogram: {e}")))
}
