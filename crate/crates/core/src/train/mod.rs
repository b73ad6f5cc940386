//! SGD-with-momentum training, checkpoints, threshold calibration and
//! volume segmentation.

mod checkpoint;
mod infer;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{velocity_name, BatchNormMeta, Checkpoint, NamedTensor, RngState, PHN1_MAGIC, PHN1_VERSION};
pub use infer::{calibrate_model, calibrate_threshold, postprocess, predict_volume, predict_volumes, segment_volume};

use crate::autodiff::{Mode, Tape, Var};
use crate::data::{batch_tensors, make_slices, FoldSplit, MaskVolume, SliceSample, VolumeCT};
use crate::error::{Error, Result};
use crate::loss::{estimate_beta, total_loss, LossSpec};
use crate::model::{FusionMode, Model, ModelConfig};
use crate::postproc::threshold_grid;

/// Slice stride applied to the designated large dataset unless overridden.
pub const LARGE_DATASET_STRIDE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Passes over the training slices; a fractional tail runs part of a pass.
    pub epochs: f64,
    pub seed: u64,
    /// Dataset sampled every tenth slice by default.
    pub large_dataset: Option<String>,
    /// Explicit per-dataset slice strides.
    pub slice_stride: BTreeMap<String, usize>,
    pub default_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 4,
            epochs: 13.5,
            seed: 0,
            large_dataset: None,
            slice_stride: BTreeMap::new(),
            default_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut failed = Vec::new();
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            failed.push(format!("lr = {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            failed.push(format!("momentum = {} must lie in [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            failed.push("batch_size must be >= 1".into());
        }
        if !(self.epochs.is_finite() && self.epochs > 0.0) {
            failed.push(format!("epochs = {} must be positive", self.epochs));
        }
        if self.default_stride == 0 || self.slice_stride.values().any(|&s| s == 0) {
            failed.push("slice strides must be >= 1".into());
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(failed.join("; ")))
        }
    }

    pub fn stride_for(&self, dataset: &str) -> usize {
        if let Some(&s) = self.slice_stride.get(dataset) {
            s
        } else if self.large_dataset.as_deref() == Some(dataset) {
            LARGE_DATASET_STRIDE
        } else {
            self.default_stride
        }
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> u64 {
        n_samples.div_ceil(self.batch_size) as u64
    }

    /// `floor(epochs · steps_per_epoch)`.
    pub fn total_steps(&self, n_samples: usize) -> u64 {
        (self.epochs * self.steps_per_epoch(n_samples) as f64).floor() as u64
    }
}

/// Sample order for one epoch, fixed by `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: u64,
    pub step: u64,
    pub total: f64,
    pub sides: Vec<f64>,
    pub fused: Option<f64>,
}

pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    samples: Vec<SliceSample>,
    velocity: Vec<Vec<f64>>,
    step: u64,
    beta: f64,
    order: (u64, Vec<usize>),
}

impl Trainer {
    /// Estimates β from exactly `samples` and starts from zero velocity.
    pub fn new(model: Model, cfg: TrainConfig, samples: Vec<SliceSample>) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::Input("training set has no slices".into()));
        }
        if cfg.total_steps(samples.len()) == 0 {
            return Err(Error::Config(format!(
                "epochs = {} over {} slices gives zero optimizer steps",
                cfg.epochs,
                samples.len()
            )));
        }
        let beta = estimate_beta(samples.iter().map(|s| &s.label))?;
        log::info!("beta = {beta} from {} training slices", samples.len());
        let velocity = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        let order = (0, epoch_order(cfg.seed, 0, samples.len()));
        Ok(Trainer {
            model,
            cfg,
            samples,
            velocity,
            step: 0,
            beta,
            order,
        })
    }

    /// Continues from a checkpoint taken on the same training slices.
    pub fn resume(ckpt: &Checkpoint, samples: Vec<SliceSample>) -> Result<Self> {
        let model = ckpt.to_model()?;
        let mut t = Trainer::new(model, ckpt.train.clone(), samples)?;
        if ckpt.beta != Some(t.beta) {
            return Err(Error::Contract(format!(
                "checkpoint beta {:?} differs from the training slices' beta {}",
                ckpt.beta, t.beta
            )));
        }
        t.velocity = ckpt.velocities(&t.model)?;
        t.step = ckpt.rng.step;
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.total_steps(self.samples.len())
    }

    pub fn samples(&self) -> &[SliceSample] {
        &self.samples
    }

    fn epoch_of(&self, step: u64) -> u64 {
        step / self.cfg.steps_per_epoch(self.samples.len())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let epoch = self.epoch_of(self.step);
        let mut c = Checkpoint::capture(
            &self.model,
            &self.cfg,
            &self.velocity,
            RngState {
                seed: self.cfg.seed,
                epoch,
                step: self.step,
            },
            epoch,
        );
        c.beta = Some(self.beta);
        c
    }

    /// One SGD step: `v ← μv − lr·g`, `p ← p + v`.
    pub fn step(&mut self) -> Result<StepLog> {
        let n = self.samples.len();
        let spe = self.cfg.steps_per_epoch(n);
        let epoch = self.step / spe;
        let pos = (self.step % spe) as usize;
        if self.order.0 != epoch {
            self.order = (epoch, epoch_order(self.cfg.seed, epoch, n));
        }
        let bs = self.cfg.batch_size;
        let batch: Vec<&SliceSample> = self.order.1[pos * bs..((pos + 1) * bs).min(n)]
            .iter()
            .map(|&i| &self.samples[i])
            .collect();
        let (x, y) = batch_tensors(&batch)?;
        let spec = LossSpec {
            beta: self.beta,
            include_fused: self.model.config().fusion_mode == FusionMode::Hnn,
        };
        let before = self.checkpoint();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.model.forward(&mut tape, xv, Mode::Train)?;
        let terms = total_loss(&mut tape, &out, &y, &spec)?;
        let (total, sides, fused) = terms.values(&tape);
        let diverged = |loss: f64| Error::Diverged {
            step: self.step,
            loss,
            last_checkpoint: Box::new(before.clone()),
        };
        if !total.is_finite() {
            return Err(diverged(total));
        }
        tape.backward(terms.total)?;
        let grads: Vec<&[f64]> = out
            .params
            .iter()
            .map(|&v: &Var| tape.grad(v).ok_or_else(|| Error::Contract("parameter leaf has no gradient".into())))
            .collect::<Result<_>>()?;
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(diverged(f64::NAN));
        }
        let (lr, mu) = (self.cfg.lr, self.cfg.momentum);
        let overflow = self.model.params().iter().zip(&self.velocity).zip(&grads).any(|((p, v), g)| {
            p.tensor.data().iter().zip(v).zip(g.iter()).any(|((w, vi), gi)| {
                let nv = mu * vi - lr * gi;
                !(nv.is_finite() && (w + nv).is_finite())
            })
        });
        if overflow {
            return Err(diverged(total));
        }
        for ((p, v), g) in self.model.params_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((w, vi), gi) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi - lr * gi;
                *w += *vi;
            }
        }
        let log = StepLog {
            epoch,
            step: self.step,
            total,
            sides,
            fused,
        };
        self.step += 1;
        Ok(log)
    }

    /// Steps until `until` (exclusive), reporting each step.
    pub fn run_until(&mut self, until: u64, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.step < until {
            let l = self.step()?;
            on_step(&l);
            logs.push(l);
        }
        Ok(logs)
    }

    /// Runs the configured epoch budget.
    pub fn run(&mut self, on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        self.run_until(self.total_steps(), on_step)
    }
}

/// Mean total loss per epoch, in epoch order.
pub fn epoch_means(logs: &[StepLog]) -> Vec<(u64, f64)> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for l in logs {
        let e = acc.entry(l.epoch).or_default();
        e.0 += l.total;
        e.1 += 1;
    }
    acc.into_iter().map(|(e, (s, n))| (e, s / n as f64)).collect()
}

/// `epoch,step,total_loss,loss_s1..loss_sM[,loss_fused]`.
pub fn write_loss_log(out: &mut impl Write, logs: &[StepLog], num_stages: usize, fused: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = vec!["epoch".into(), "step".into(), "total_loss".into()];
    header.extend((1..=num_stages).map(|m| format!("loss_s{m}")));
    if fused {
        header.push("loss_fused".into());
    }
    w.write_record(&header)?;
    for l in logs {
        let mut row = vec![l.epoch.to_string(), l.step.to_string(), l.total.to_string()];
        row.extend(l.sides.iter().map(f64::to_string));
        if let Some(f) = l.fused {
            row.push(f.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Input(format!("writing loss log: {e}")))
}

pub fn save_loss_log(path: impl AsRef<Path>, logs: &[StepLog], num_stages: usize, fused: bool) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_loss_log(&mut f, logs, num_stages, fused)
}

/// A loaded patient.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub volume: VolumeCT,
    pub mask: MaskVolume,
}

impl Case {
    pub fn patient_id(&self) -> &str {
        &self.volume.patient_id
    }
}

/// Training slices of the given patients, in patient-id then slice order.
pub fn training_slices(cases: &[Case], patients: &[String], cfg: &TrainConfig, multiple: usize) -> Result<Vec<SliceSample>> {
    let mut chosen: Vec<&Case> = cases.iter().filter(|c| patients.iter().any(|p| p == c.patient_id())).collect();
    chosen.sort_by(|a, b| a.patient_id().cmp(b.patient_id()));
    let mut out = Vec::new();
    for c in chosen {
        out.extend(make_slices(&c.volume, &c.mask, cfg.stride_for(&c.volume.dataset_id), multiple)?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FoldRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    pub beta: f64,
    pub threshold: f64,
}

/// Trains on fold `fold_index`'s training patients, then calibrates the
/// threshold on its validation patients.
pub fn train_fold(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    split: &FoldSplit,
    fold_index: usize,
    cases: &[Case],
    on_step: impl FnMut(&StepLog),
) -> Result<FoldRun> {
    let fold = split.fold(fold_index)?;
    let model = Model::new(model_cfg.clone())?;
    let multiple = model_cfg.spatial_multiple();
    let samples = training_slices(cases, &fold.train, cfg, multiple)?;
    let expected_beta = estimate_beta(samples.iter().map(|s| &s.label))?;
    let mut trainer = Trainer::new(model, cfg.clone(), samples)?;
    assert_eq!(trainer.beta(), expected_beta, "beta must come from this fold's training slices");
    let log = trainer.run(on_step)?;
    let val: Vec<Case> = cases
        .iter()
        .filter(|c| fold.val.iter().any(|p| p == c.patient_id()))
        .cloned()
        .collect();
    let threshold = calibrate_model(trainer.model(), &val, &threshold_grid())?;
    log::info!("fold {fold_index}: calibrated threshold {threshold}");
    let mut checkpoint = trainer.checkpoint();
    checkpoint.calibrated_threshold = Some(threshold);
    Ok(FoldRun {
        beta: trainer.beta(),
        checkpoint,
        log,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split_folds;
    use crate::synth::{synth_case, SynthParams};

    fn small_params() -> SynthParams {
        SynthParams {
            dims: [32, 32, 8],
            ..SynthParams::default()
        }
    }

    fn cases(n: usize) -> Vec<Case> {
        (0..n)
            .map(|i| {
                let (volume, mask) = synth_case(&small_params(), 1, i).unwrap();
                Case { volume, mask }
            })
            .collect()
    }

    fn model_cfg() -> ModelConfig {
        ModelConfig {
            convs_per_stage: vec![1, 1, 1],
            ..ModelConfig::with_stages(3).width(1.0 / 16.0).seed(3)
        }
    }

    fn slices(c: &[Case]) -> Vec<SliceSample> {
        training_slices(c, &c.iter().map(|c| c.patient_id().to_string()).collect::<Vec<_>>(), &TrainConfig::default(), 4)
            .unwrap()
    }

    #[test]
    fn config_validation_and_strides() {
        let mut cfg = TrainConfig {
            large_dataset: Some("ltrc".into()),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.stride_for("ltrc"), 10);
        assert_eq!(cfg.stride_for("other"), 1);
        cfg.slice_stride.insert("ltrc".into(), 5);
        assert_eq!(cfg.stride_for("ltrc"), 5);
        assert_eq!(cfg.total_steps(10), 40); // 13.5 · ceil(10/4) = 40.5
        let bad = TrainConfig {
            momentum: 1.0,
            batch_size: 0,
            ..TrainConfig::default()
        };
        let Err(Error::Config(msg)) = bad.validate() else { panic!() };
        assert!(msg.contains("momentum") && msg.contains("batch_size"));
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(5, 2, 50);
        assert_eq!(a, epoch_order(5, 2, 50));
        assert_ne!(a, epoch_order(5, 3, 50));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let data = slices(&cases(1));
        let model = Model::new(model_cfg()).unwrap();
        let before: Vec<Vec<f64>> = model.params().iter().map(|p| p.tensor.data().to_vec()).collect();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 8,
            epochs: 3.0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, cfg, data).unwrap();
        let logs = t.run(|_| {}).unwrap();
        assert_eq!(logs.len(), 3);
        let after: Vec<Vec<f64>> = t.model().params().iter().map(|p| p.tensor.data().to_vec()).collect();
        assert_eq!(before, after);
        // One full batch per epoch in shuffled order: the per-sample sum is
        // order independent up to rounding.
        let means = epoch_means(&logs);
        assert!((means[0].1 - means[2].1).abs() < 1e-9 * means[0].1);
    }

    #[test]
    fn momentum_update_matches_hand_computation() {
        let data = slices(&cases(1));
        let model = Model::new(model_cfg()).unwrap();
        let cfg = TrainConfig {
            lr: 1e-4,
            momentum: 0.5,
            batch_size: 2,
            epochs: 1.0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model.clone(), cfg.clone(), data.clone()).unwrap();
        let p0 = t.model().params()[0].tensor.data()[0];
        t.step().unwrap();
        let p1 = t.model().params()[0].tensor.data()[0];
        let v1 = p1 - p0; // = -lr g0
        t.step().unwrap();
        let p2 = t.model().params()[0].tensor.data()[0];
        // Recompute g1 at p1 from the checkpointed state of a twin trainer.
        let mut twin = Trainer::new(model, cfg, data).unwrap();
        twin.step().unwrap();
        twin.velocity.iter_mut().for_each(|v| v.fill(0.0));
        let q1 = twin.model().params()[0].tensor.data()[0];
        twin.step().unwrap();
        let g1_lr = q1 - twin.model().params()[0].tensor.data()[0];
        assert!((p2 - (p1 + 0.5 * v1 - g1_lr)).abs() < 1e-14);
    }

    #[test]
    fn same_seed_same_checkpoint_and_resume_is_exact() {
        let data = slices(&cases(2));
        let cfg = TrainConfig {
            lr: 1e-4,
            batch_size: 3,
            epochs: 1.5,
            seed: 7,
            ..TrainConfig::default()
        };
        let run = || {
            let mut t = Trainer::new(Model::new(model_cfg()).unwrap(), cfg.clone(), data.clone()).unwrap();
            let logs = t.run(|_| {}).unwrap();
            (t.checkpoint().to_bytes().unwrap(), logs)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);

        let mut t = Trainer::new(Model::new(model_cfg()).unwrap(), cfg.clone(), data.clone()).unwrap();
        t.run_until(4, |_| {}).unwrap();
        let saved = Checkpoint::from_bytes(&t.checkpoint().to_bytes().unwrap()).unwrap();
        let next_direct = t.step().unwrap();
        let mut resumed = Trainer::resume(&saved, data.clone()).unwrap();
        let next_resumed = resumed.step().unwrap();
        assert_eq!(next_direct, next_resumed);
        assert_eq!(t.checkpoint().to_bytes().unwrap(), resumed.checkpoint().to_bytes().unwrap());
    }

    #[test]
    fn divergence_returns_last_finite_checkpoint() {
        let data = slices(&cases(1));
        let cfg = TrainConfig {
            lr: 1e300,
            momentum: 0.0,
            batch_size: 2,
            epochs: 4.0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(Model::new(model_cfg()).unwrap(), cfg, data).unwrap();
        match t.run(|_| {}) {
            Err(Error::Diverged { step, last_checkpoint, .. }) => {
                assert_eq!(last_checkpoint.rng.step, step);
                assert!(last_checkpoint.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite())));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn loss_log_layout() {
        let logs = vec![StepLog {
            epoch: 0,
            step: 0,
            total: 1.5,
            sides: vec![0.5, 1.0],
            fused: Some(0.25),
        }];
        let mut buf = Vec::new();
        write_loss_log(&mut buf, &logs, 2, true).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,step,total_loss,loss_s1,loss_s2,loss_fused\n0,0,1.5,0.5,1,0.25\n");
    }

    #[test]
    fn fold_training_uses_fold_beta_and_calibrates() {
        let all = cases(10);
        let entries: Vec<(String, String)> = all
            .iter()
            .map(|c| (c.patient_id().to_string(), c.volume.dataset_id.clone()))
            .collect();
        let split = split_folds(&entries, 5, 0, 0.1).unwrap();
        let cfg = TrainConfig {
            lr: 1e-4,
            batch_size: 8,
            epochs: 1.0,
            ..TrainConfig::default()
        };
        let run = train_fold(&model_cfg(), &cfg, &split, 1, &all, |_| {}).unwrap();
        let fold = split.fold(1).unwrap();
        let train_slices = training_slices(&all, &fold.train, &cfg, 4).unwrap();
        assert_eq!(run.beta, estimate_beta(train_slices.iter().map(|s| &s.label)).unwrap());
        assert_eq!(run.checkpoint.beta, Some(run.beta));
        assert!(threshold_grid().contains(&run.threshold));
        assert_eq!(run.checkpoint.calibrated_threshold, Some(run.threshold));
        assert!(matches!(train_fold(&model_cfg(), &cfg, &split, 7, &all, |_| {}), Err(Error::Split(_))));
    }
}
