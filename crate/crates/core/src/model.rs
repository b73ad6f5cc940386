//! Staged VGG-style backbone with per-stage 1×1 side outputs.
//!
//! Parameter names (stable, used by checkpoints), with `m` and `j` 1-based:
//!
//! | name                   | shape              |
//! |------------------------|--------------------|
//! | `stage{m}.conv{j}.w`   | `[Cout, Cin, k, k]`|
//! | `stage{m}.conv{j}.b`   | `[Cout]`, absent for the last conv of a stage |
//! | `stage{m}.bn.gamma`    | `[C]`              |
//! | `stage{m}.bn.beta`     | `[C]`              |
//! | `stage{m}.side.w`      | `[1, C, 1, 1]`     |
//! | `stage{m}.side.b`      | `[1]`              |
//! | `fuse.h` (hnn only)    | `[M]`              |
//! | `fuse.b` (hnn only)    | `[1]`              |
//!
//! The last conv of each stage feeds batch norm, which cancels any
//! per-channel shift, so it carries no bias.
//!
//! Batch-norm running statistics are buffers, not parameters, and are
//! checkpointed as `stage{m}.bn.running_mean` / `stage{m}.bn.running_var`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormState, Mode, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Independent side outputs plus a learned fused map.
    Hnn,
    /// `σ(ã^m + ã^(m-1))` for every `m > 1`.
    PhnnPairwise,
    /// `b^m = ã^m + b^(m-1)`, `σ(b^m)`.
    PhnnCumulative,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Hnn, FusionMode::PhnnPairwise, FusionMode::PhnnCumulative];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Hnn => "hnn",
            FusionMode::PhnnPairwise => "phnn_pairwise",
            FusionMode::PhnnCumulative => "phnn_cumulative",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_stages: usize,
    pub convs_per_stage: Vec<usize>,
    pub base_channels: Vec<usize>,
    pub width_multiplier: f64,
    pub in_channels: usize,
    pub fusion_mode: FusionMode,
    pub kernel_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_stages: 5,
            convs_per_stage: vec![2, 2, 3, 3, 3],
            base_channels: vec![64, 128, 256, 512, 512],
            width_multiplier: 0.125,
            in_channels: 3,
            fusion_mode: FusionMode::PhnnCumulative,
            kernel_size: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The VGG-16 layout truncated to its first `num_stages` stages.
    pub fn with_stages(num_stages: usize) -> Self {
        let d = Self::default();
        let n = num_stages.min(d.num_stages);
        ModelConfig {
            num_stages,
            convs_per_stage: d.convs_per_stage[..n].to_vec(),
            base_channels: d.base_channels[..n].to_vec(),
            ..d
        }
    }

    pub fn fusion(mut self, mode: FusionMode) -> Self {
        self.fusion_mode = mode;
        self
    }

    pub fn width(mut self, multiplier: f64) -> Self {
        self.width_multiplier = multiplier;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Channel count of each stage after applying the width multiplier.
    pub fn stage_channels(&self) -> Vec<usize> {
        self.base_channels
            .iter()
            .map(|&c| (c as f64 * self.width_multiplier).round() as usize)
            .collect()
    }

    /// Input extents must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.num_stages.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut failed = Vec::new();
        if !(3..=5).contains(&self.num_stages) {
            failed.push(format!("num_stages {} not in 3..=5", self.num_stages));
        }
        if self.convs_per_stage.len() != self.num_stages {
            failed.push(format!(
                "convs_per_stage has {} entries, expected {}",
                self.convs_per_stage.len(),
                self.num_stages
            ));
        }
        if self.base_channels.len() != self.num_stages {
            failed.push(format!(
                "base_channels has {} entries, expected {}",
                self.base_channels.len(),
                self.num_stages
            ));
        }
        if self.convs_per_stage.contains(&0) {
            failed.push("every stage needs at least one convolution".into());
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            failed.push(format!("width_multiplier {} must be positive", self.width_multiplier));
        }
        if self.stage_channels().contains(&0) {
            failed.push(format!(
                "scaled channel counts {:?} must all be >= 1",
                self.stage_channels()
            ));
        }
        if self.in_channels == 0 {
            failed.push("in_channels must be >= 1".into());
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            failed.push(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(failed.join("; ")))
        }
    }
}

/// One per-stage probability map at input resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SideOutput {
    /// 1-based stage index; 0 marks the fused output.
    pub stage: usize,
    /// Collapsed and upsampled stage activation `ã^m`.
    pub activation: Var,
    /// Pre-sigmoid map after fusion.
    pub logit: Var,
    pub probability: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub side_outputs: Vec<SideOutput>,
    pub fused: Option<SideOutput>,
    /// Leaves holding the model parameters, in registry order.
    pub params: Vec<Var>,
}

impl ForwardResult {
    /// The designated inference output: the fused map in hnn mode, the
    /// deepest side output otherwise.
    pub fn final_output(&self) -> SideOutput {
        self.fused
            .unwrap_or_else(|| *self.side_outputs.last().expect("at least one stage"))
    }
}

#[derive(Clone, Debug)]
struct StageLayout {
    convs: Vec<(usize, Option<usize>)>,
    gamma: usize,
    beta: usize,
    side_w: usize,
    side_b: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: Vec<Parameter>,
    bn: Vec<BatchNormState>,
    stages: Vec<StageLayout>,
    fuse: Option<(usize, usize)>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Vec::new();
        let mut stages = Vec::new();
        let mut bn = Vec::new();
        let k = cfg.kernel_size;
        let mut he = |name: String, shape: &[usize], fan_in: usize, params: &mut Vec<Parameter>| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
            params.push(Parameter::new(name, t));
            params.len() - 1
        };
        fn push(params: &mut Vec<Parameter>, name: String, t: Tensor) -> usize {
            params.push(Parameter::new(name, t));
            params.len() - 1
        }

        let mut cin = cfg.in_channels;
        for (si, (&n_convs, &c)) in cfg.convs_per_stage.iter().zip(&cfg.stage_channels()).enumerate() {
            let m = si + 1;
            let mut convs = Vec::new();
            for j in 1..=n_convs {
                let w = he(format!("stage{m}.conv{j}.w"), &[c, cin, k, k], cin * k * k, &mut params);
                let b = (j < n_convs).then(|| push(&mut params, format!("stage{m}.conv{j}.b"), Tensor::zeros(&[c])));
                convs.push((w, b));
                cin = c;
            }
            let gamma = push(&mut params, format!("stage{m}.bn.gamma"), Tensor::full(&[c], 1.0));
            let beta = push(&mut params, format!("stage{m}.bn.beta"), Tensor::zeros(&[c]));
            let side_w = he(format!("stage{m}.side.w"), &[1, c, 1, 1], c, &mut params);
            let side_b = push(&mut params, format!("stage{m}.side.b"), Tensor::zeros(&[1]));
            bn.push(BatchNormState::new(c));
            stages.push(StageLayout {
                convs,
                gamma,
                beta,
                side_w,
                side_b,
            });
        }
        let fuse = (cfg.fusion_mode == FusionMode::Hnn).then(|| {
            let m = cfg.num_stages;
            let h = push(&mut params, "fuse.h".into(), Tensor::full(&[m], 1.0 / m as f64));
            let b = push(&mut params, "fuse.b".into(), Tensor::zeros(&[1]));
            (h, b)
        });
        Ok(Model {
            cfg,
            params,
            bn,
            stages,
            fuse,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bn
    }

    /// True once every batch-norm layer has running statistics.
    pub fn has_bn_statistics(&self) -> bool {
        self.bn.iter().all(BatchNormState::is_initialized)
    }

    /// Number of scalar parameters, excluding batch-norm running statistics.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Records a forward pass with every parameter as a differentiable leaf.
    pub fn forward(&mut self, tape: &mut Tape, input: Var, mode: Mode) -> Result<ForwardResult> {
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p)).collect();
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.forward_with(tape, &vars, input, mode, &mut bn);
        self.bn = bn;
        out
    }

    /// Eval-mode inference; returns the final probability map `[B,1,H,W]`.
    pub fn infer(&self, input: Tensor) -> Result<Tensor> {
        let mut all = self.infer_all(input)?;
        Ok(all.pop().expect("at least one output"))
    }

    /// Eval-mode probability maps of every side output in stage order,
    /// followed by the fused map when present.
    pub fn infer_all(&self, input: Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect();
        let x = tape.constant(input);
        let mut bn = self.bn.clone();
        let out = self.forward_with(&mut tape, &vars, x, Mode::Eval, &mut bn)?;
        Ok(out
            .side_outputs
            .iter()
            .chain(&out.fused)
            .map(|s| tape.value(s.probability).clone())
            .collect())
    }

    /// Forward pass against caller-supplied parameter leaves (registry
    /// order) and batch-norm state.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: Var,
        mode: Mode,
        bn: &mut [BatchNormState],
    ) -> Result<ForwardResult> {
        if params.len() != self.params.len() || bn.len() != self.stages.len() {
            return Err(Error::Contract("parameter or batch-norm list does not match the model".into()));
        }
        let [_, c, h, w] = tape.value(input).dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Dimension(format!(
                "input axis 1 has {c} channels, model expects {}",
                self.cfg.in_channels
            )));
        }
        let mult = self.cfg.spatial_multiple();
        if h % mult != 0 || w % mult != 0 {
            return Err(Error::Dimension(format!(
                "input extent {h}x{w} is not divisible by {mult}; pad the input to a multiple of {mult}"
            )));
        }
        let pad = self.cfg.kernel_size / 2;
        let mut x = input;
        let mut activations = Vec::with_capacity(self.stages.len());
        for (si, stage) in self.stages.iter().enumerate() {
            if si > 0 {
                x = tape.maxpool2d(x, 2, 2)?;
            }
            let last = stage.convs.len() - 1;
            for (j, &(wi, bi)) in stage.convs.iter().enumerate() {
                x = tape.conv2d(x, params[wi], bi.map(|b| params[b]), 1, pad)?;
                if j == last {
                    x = tape.batchnorm2d(x, params[stage.gamma], params[stage.beta], &mut bn[si], mode)?;
                }
                x = tape.relu(x);
            }
            let side = tape.conv2d(x, params[stage.side_w], Some(params[stage.side_b]), 1, 0)?;
            activations.push(tape.upsample_bilinear(side, h, w)?);
        }

        let mut side_outputs = Vec::with_capacity(activations.len());
        let mut prev_logit: Option<Var> = None;
        for (si, &act) in activations.iter().enumerate() {
            let logit = match (self.cfg.fusion_mode, si) {
                (_, 0) | (FusionMode::Hnn, _) => act,
                (FusionMode::PhnnPairwise, _) => tape.add(act, activations[si - 1])?,
                (FusionMode::PhnnCumulative, _) => tape.add(act, prev_logit.expect("set at stage 1"))?,
            };
            prev_logit = Some(logit);
            let probability = tape.sigmoid(logit);
            side_outputs.push(SideOutput {
                stage: si + 1,
                activation: act,
                logit,
                probability,
            });
        }
        let fused = match self.fuse {
            Some((hi, bi)) => {
                let logit = tape.weighted_sum(&activations, params[hi], params[bi])?;
                let probability = tape.sigmoid(logit);
                Some(SideOutput {
                    stage: 0,
                    activation: logit,
                    logit,
                    probability,
                })
            }
            None => None,
        };
        Ok(ForwardResult {
            side_outputs,
            fused,
            params: params.to_vec(),
        })
    }
}
