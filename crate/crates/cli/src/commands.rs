use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use phnn_core::autodiff::suite::{model_loss_check, op_suite, NamedReport};
use phnn_core::config::RunConfig;
use phnn_core::data::{load_mask, load_volume, make_slices, read_manifest, save_mask, split_folds, ManifestEntry, SliceSample};
use phnn_core::metrics::{cumulative_histogram, default_edges, evaluate, save_report, write_histogram, CaseError, EvalRecord};
use phnn_core::model::{FusionMode, ModelConfig};
use phnn_core::synth::{write_corpus, SynthParams};
use phnn_core::train::{save_loss_log, segment_volume, train_fold, Case, Checkpoint};
use phnn_core::Error;
use rayon::prelude::*;

use crate::run_manifest::RunManifest;
use crate::{EvalArgs, GradcheckArgs, PreprocessArgs, SegmentArgs, SplitArgs, SynthArgs, TrainArgs};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    /// A checkpoint that cannot be read is treated as a bad configuration.
    #[error("cannot load checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: Error },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Mode(_) | Error::Split(_) => EXIT_CONFIG,
                Error::Diverged { .. } => EXIT_DIVERGED,
                Error::Input(_)
                | Error::Format { .. }
                | Error::Truncation { .. }
                | Error::Io { .. }
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Dimension(_)
                | Error::UndefinedMetric(_)
                | Error::Calibration(_)
                | Error::Uninitialized(_) => EXIT_DATA,
                Error::Contract(_) | Error::Determinism(_) => EXIT_FAILURE,
            },
            CliError::Checkpoint { .. } | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Io { .. } | CliError::Data(_) => EXIT_DATA,
        }
    }
}

type CliResult = Result<ExitCode, CliError>;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// Manifest path for a command whose output is a single file.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run_manifest.json");
    out.with_file_name(name)
}

fn load_cases(entries: &[ManifestEntry]) -> Result<Vec<Case>, CliError> {
    entries
        .iter()
        .map(|e| {
            let (volume, mask) = e.load()?;
            Ok(Case { volume, mask })
        })
        .collect()
}

fn split_entries(entries: &[ManifestEntry]) -> Vec<(String, String)> {
    entries.iter().map(|e| (e.patient_id.clone(), e.dataset_id.clone())).collect()
}

pub fn synth(args: SynthArgs) -> CliResult {
    create_dir(&args.out)?;
    let entries = write_corpus(&args.out, &SynthParams::default(), args.cases, args.seed)?;
    log::info!("wrote {} synthetic cases to {}", entries.len(), args.out.display());
    let mut rm = RunManifest::new("synth");
    rm.seed = Some(args.seed);
    rm.outputs.push(args.out.join("manifest.csv"));
    for e in &entries {
        rm.outputs.push(e.volume_path.clone());
        rm.outputs.push(e.mask_path.clone());
    }
    rm.write(&args.out.join("run_manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

/// Binary PPM (P6) for the 3-channel image, PGM (P5) for the label.
fn write_netpbm(path: &Path, magic: &str, width: usize, height: usize, pixels: &[u8]) -> Result<(), CliError> {
    let mut bytes = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn dump_slice(dir: &Path, s: &SliceSample) -> Result<[PathBuf; 2], CliError> {
    let stem = format!("{}_z{:04}", s.patient_id, s.z);
    let image = dir.join(format!("{stem}.ppm"));
    let label = dir.join(format!("{stem}_label.pgm"));
    write_netpbm(&image, "P6", s.width, s.height, &s.image)?;
    let lab: Vec<u8> = s.label.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    write_netpbm(&label, "P5", s.width, s.height, &lab)?;
    Ok([image, label])
}

pub fn preprocess(args: PreprocessArgs) -> CliResult {
    let cfg = load_config(args.config.as_deref())?;
    let entries = read_manifest(&args.manifest)?;
    let slice_dir = args.out.join("slices");
    create_dir(&slice_dir)?;
    let multiple = cfg.model.spatial_multiple();
    let summary_path = args.out.join("summary.csv");
    let mut summary = csv::Writer::from_path(&summary_path).map_err(Error::from)?;
    summary
        .write_record(["patient_id", "dataset_id", "z", "height", "width", "origin_row", "origin_col", "lung_pixels"])
        .map_err(Error::from)?;
    let mut rm = RunManifest::new("preprocess");
    rm.config_path = args.config.clone();
    rm.inputs.push(args.manifest.clone());
    for e in &entries {
        let (vol, mask) = e.load()?;
        let samples = make_slices(&vol, &mask, cfg.train.stride_for(&e.dataset_id), multiple)?;
        log::info!("{}: {} slices", e.patient_id, samples.len());
        for s in &samples {
            rm.outputs.extend(dump_slice(&slice_dir, s)?);
            let lung = s.label.iter().filter(|&&v| v != 0).count();
            summary
                .write_record([
                    s.patient_id.clone(),
                    e.dataset_id.clone(),
                    s.z.to_string(),
                    s.height.to_string(),
                    s.width.to_string(),
                    s.origin.0.to_string(),
                    s.origin.1.to_string(),
                    lung.to_string(),
                ])
                .map_err(Error::from)?;
        }
        rm.inputs.push(e.volume_path.clone());
        rm.inputs.push(e.mask_path.clone());
    }
    summary.flush().map_err(|e| CliError::io(&summary_path, e))?;
    rm.outputs.push(summary_path);
    rm.write(&args.out.join("run_manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

pub fn split(args: SplitArgs) -> CliResult {
    let cfg = load_config(args.config.as_deref())?;
    let entries = read_manifest(&args.manifest)?;
    let split = split_folds(&split_entries(&entries), cfg.folds, cfg.split_seed, cfg.val_fraction)?;
    let text = serde_json::to_string_pretty(&split).map_err(Error::from)?;
    fs::write(&args.out, text + "\n").map_err(|e| CliError::io(&args.out, e))?;
    let mut rm = RunManifest::new("split");
    rm.config_path = args.config;
    rm.seed = Some(cfg.split_seed);
    rm.inputs.push(args.manifest);
    rm.outputs.push(args.out.clone());
    rm.write(&sidecar(&args.out))?;
    Ok(ExitCode::SUCCESS)
}

pub fn train(args: TrainArgs) -> CliResult {
    let cfg = load_config(args.config.as_deref())?;
    let entries = read_manifest(&args.manifest)?;
    let split = split_folds(&split_entries(&entries), cfg.folds, cfg.split_seed, cfg.val_fraction)?;
    if args.fold >= cfg.folds {
        return Err(CliError::Usage(format!("fold {} out of range for {} folds", args.fold, cfg.folds)));
    }
    let cases = load_cases(&entries)?;
    create_dir(&args.out)?;

    let mut rm = RunManifest::new("train");
    rm.config_path = args.config.clone();
    rm.seed = Some(cfg.train.seed);
    rm.inputs.push(args.manifest.clone());
    rm.inputs.extend(entries.iter().flat_map(|e| [e.volume_path.clone(), e.mask_path.clone()]));

    let split_path = args.out.join("split.json");
    let text = serde_json::to_string_pretty(&split).map_err(Error::from)?;
    fs::write(&split_path, text + "\n").map_err(|e| CliError::io(&split_path, e))?;
    rm.outputs.push(split_path);

    let run = train_fold(&cfg.model, &cfg.train, &split, args.fold, &cases, |s| {
        if s.step % 50 == 0 {
            log::info!("epoch {} step {} loss {:.4}", s.epoch, s.step, s.total);
        }
    });
    let run = match run {
        Ok(run) => run,
        Err(Error::Diverged { step, loss, last_checkpoint }) => {
            let path = args.out.join("diverged.phn");
            last_checkpoint.save(&path)?;
            rm.outputs.push(path.clone());
            rm.write(&args.out.join("run_manifest.json"))?;
            log::error!("training diverged at step {step} (loss {loss}); last good state saved to {}", path.display());
            return Ok(ExitCode::from(EXIT_DIVERGED));
        }
        Err(e) => return Err(e.into()),
    };

    let ckpt_path = args.out.join("checkpoint.phn");
    run.checkpoint.save(&ckpt_path)?;
    let log_path = args.out.join("loss_log.csv");
    let fused = cfg.model.fusion_mode == FusionMode::Hnn;
    save_loss_log(&log_path, &run.log, cfg.model.num_stages, fused)?;
    log::info!("beta {:.6}, threshold {}, checkpoint {}", run.beta, run.threshold, ckpt_path.display());
    rm.outputs.push(ckpt_path);
    rm.outputs.push(log_path);
    rm.write(&args.out.join("run_manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

pub fn segment(args: SegmentArgs) -> CliResult {
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(|source| CliError::Checkpoint {
        path: args.checkpoint.clone(),
        source,
    })?;
    let threshold = match (args.threshold, ckpt.calibrated_threshold) {
        (Some(t), _) | (None, Some(t)) => t,
        (None, None) => {
            return Err(CliError::Usage(
                "checkpoint has no calibrated threshold; pass --threshold".into(),
            ))
        }
    };
    let model = ckpt.to_model()?;
    let vol = load_volume(&args.volume)?;
    let mask = segment_volume(&model, &vol, threshold)?;
    save_mask(&args.out, &mask)?;
    log::info!("{} lung voxels at threshold {threshold}", mask.count());
    let mut rm = RunManifest::new("segment");
    rm.seed = Some(ckpt.rng.seed);
    rm.inputs.push(args.checkpoint);
    rm.inputs.push(args.volume);
    rm.outputs.push(args.out.clone());
    rm.write(&sidecar(&args.out))?;
    Ok(ExitCode::SUCCESS)
}

fn volume_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "svl") {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path);
            }
        }
    }
    Ok(out)
}

pub fn eval(args: EvalArgs) -> CliResult {
    let preds = volume_files(&args.pred_dir)?;
    let gts = volume_files(&args.gt_dir)?;
    let mut rm = RunManifest::new("eval");
    let mut failures: Vec<CaseError> = Vec::new();
    let mut fail = |id: &str, message: String| {
        failures.push(CaseError {
            patient_id: id.to_string(),
            message,
        })
    };
    let mut pairs = Vec::new();
    for (name, pred_path) in &preds {
        let id = name.trim_end_matches(".svl");
        match gts.get(name) {
            Some(gt_path) => pairs.push((id, pred_path, gt_path)),
            None => fail(id, "no ground truth with this file name".into()),
        }
    }
    for name in gts.keys().filter(|n| !preds.contains_key(*n)) {
        fail(name.trim_end_matches(".svl"), "no prediction with this file name".into());
    }
    let scored: Vec<(&str, phnn_core::Result<EvalRecord>)> = pairs
        .par_iter()
        .map(|&(id, pred, gt)| (id, load_mask(pred).and_then(|p| evaluate(id, &p, &load_mask(gt)?))))
        .collect();
    let mut records: Vec<EvalRecord> = Vec::new();
    for (id, r) in scored {
        match r {
            Ok(r) => records.push(r),
            Err(e) => fail(id, e.to_string()),
        }
    }
    for (_, pred, gt) in &pairs {
        rm.inputs.push((*pred).clone());
        rm.inputs.push((*gt).clone());
    }
    if records.is_empty() {
        let reasons: Vec<String> = failures.iter().map(|f| format!("{}: {}", f.patient_id, f.message)).collect();
        return Err(CliError::Data(format!("nothing to evaluate: {}", reasons.join("; "))));
    }
    save_report(&args.out, &records, &failures)?;
    rm.outputs.push(args.out.clone());
    if let Some(hist) = &args.hist {
        let rows = cumulative_histogram(&records, &default_edges())?;
        let mut f = fs::File::create(hist).map_err(|e| CliError::io(hist, e))?;
        write_histogram(&mut f, &rows)?;
        f.flush().map_err(|e| CliError::io(hist, e))?;
        rm.outputs.push(hist.clone());
    }
    rm.write(&sidecar(&args.out))?;
    if failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for f in &failures {
        log::error!("{}: {}", f.patient_id, f.message);
    }
    Err(CliError::Data(format!(
        "{} of {} cases could not be scored",
        failures.len(),
        records.len() + failures.len()
    )))
}

fn gradcheck_config(path: Option<&Path>) -> Result<ModelConfig, CliError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?.model,
        None => ModelConfig::with_stages(3).width(1.0 / 16.0),
    })
}

pub fn gradcheck(args: GradcheckArgs) -> CliResult {
    let model_cfg = gradcheck_config(args.config.as_deref())?;
    let mut reports: Vec<NamedReport> = op_suite(args.seed)?;
    reports.push(model_loss_check(&model_cfg, 8, 6, args.seed)?);
    let mut w = csv::Writer::from_writer(std::io::stdout());
    w.write_record(["check", "coordinates", "max_rel_error", "tolerance", "passed"]).map_err(Error::from)?;
    for r in &reports {
        w.write_record([
            r.name.clone(),
            r.report.entries.iter().map(|e| e.checked).sum::<usize>().to_string(),
            format!("{:.3e}", r.report.max_rel_error()),
            format!("{:e}", r.report.tol),
            r.report.passed().to_string(),
        ])
        .map_err(Error::from)?;
    }
    w.flush().map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    let mut rm = RunManifest::new("gradcheck");
    rm.config_path = args.config;
    rm.seed = Some(args.seed);
    let failed = reports.iter().filter(|r| !r.report.passed()).count();
    log::info!("{} of {} checks passed", reports.len() - failed, reports.len());
    match &args.out {
        Some(dir) => {
            create_dir(dir)?;
            rm.write(&dir.join("run_manifest.json"))?;
        }
        None => log::info!("run manifest: {}", serde_json::to_string(&rm).map_err(Error::from)?),
    }
    if failed == 0 {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_FAILURE))
    }
}
