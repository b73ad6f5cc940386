//! Flat `key = value` run configuration files.
//!
//! One key per line; `#` starts a comment. Recognised keys:
//!
//! ```text
//! stages          number of stages M (3..=5)            default 5
//! convs           convs per stage, comma separated      VGG-16 layout
//! channels        base channels per stage               64,128,256,512,512
//! width           channel multiplier, "0.125" or "1/8"  1/8
//! fusion          hnn | phnn_pairwise | phnn_cumulative phnn_cumulative
//! kernel          conv kernel size (odd)                3
//! seed            init and shuffling seed               0
//! lr              learning rate                         0.001
//! momentum                                              0.9
//! batch_size                                            4
//! epochs          may be fractional                     13.5
//! large_dataset   dataset id sampled every tenth slice  none
//! default_stride  slice stride for other datasets       1
//! stride.<id>     slice stride for dataset <id>
//! folds           k for cross-validation                5
//! val_fraction    share of non-test patients held out   0.1
//! split_seed      fold assignment seed                  seed
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::DEFAULT_VAL_FRACTION;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            folds: 5,
            val_fraction: DEFAULT_VAL_FRACTION,
            split_seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

/// Accepts a decimal or a fraction such as `1/8`.
fn parse_ratio(key: &str, v: &str) -> Result<f64> {
    match v.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (parse_num(key, a.trim())?, parse_num(key, b.trim())?);
            if b == 0.0 {
                return Err(Error::Config(format!("{key}: division by zero in {v:?}")));
            }
            Ok(a / b)
        }
        None => parse_num(key, v),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim().to_string();
            if kv.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
        }

        let mut cfg = RunConfig::default();
        if let Some((_, v)) = kv.get("stages") {
            cfg.model = ModelConfig::with_stages(parse_num("stages", v)?);
        }
        let mut split_seed = None;
        for (k, (line, v)) in &kv {
            let v = v.as_str();
            match k.as_str() {
                "stages" => {}
                "convs" => cfg.model.convs_per_stage = parse_list(k, v)?,
                "channels" => cfg.model.base_channels = parse_list(k, v)?,
                "width" => cfg.model.width_multiplier = parse_ratio(k, v)?,
                "fusion" => cfg.model.fusion_mode = v.parse()?,
                "kernel" => cfg.model.kernel_size = parse_num(k, v)?,
                "seed" => {
                    let s = parse_num(k, v)?;
                    cfg.model.seed = s;
                    cfg.train.seed = s;
                }
                "lr" => cfg.train.lr = parse_num(k, v)?,
                "momentum" => cfg.train.momentum = parse_num(k, v)?,
                "batch_size" => cfg.train.batch_size = parse_num(k, v)?,
                "epochs" => cfg.train.epochs = parse_num(k, v)?,
                "large_dataset" => cfg.train.large_dataset = Some(v.to_string()),
                "default_stride" => cfg.train.default_stride = parse_num(k, v)?,
                "folds" => cfg.folds = parse_num(k, v)?,
                "val_fraction" => cfg.val_fraction = parse_num(k, v)?,
                "split_seed" => split_seed = Some(parse_num(k, v)?),
                _ => match k.strip_prefix("stride.") {
                    Some(ds) if !ds.is_empty() => {
                        cfg.train.slice_stride.insert(ds.to_string(), parse_num(k, v)?);
                    }
                    _ => return Err(Error::Config(format!("line {line}: unknown key {k}"))),
                },
            }
        }
        cfg.split_seed = split_seed.unwrap_or(cfg.train.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("folds = {} must be >= 2", self.folds)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction = {} must lie in [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}
