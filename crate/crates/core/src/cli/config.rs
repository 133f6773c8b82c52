//! Flat `key=value` run configuration.

use std::path::{Path, PathBuf};

use crate::data::{read_key_values, BatchPlan, DatasetKind, GeneratorSpec, LabelMap};
use crate::error::{Error, Result};
use crate::losses::{LossKind, RegressionKind, DEFAULT_HUBER_DELTA};
use crate::trainer::{ContrastiveKind, TrainConfig, TrainMode};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ADACON_OUT";
pub const DEFAULT_OUT: &str = "runs";

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetKind,
    /// CSV to train on instead of a synthetic dataset.
    pub data_file: Option<PathBuf>,
    pub n: usize,
    pub dim: usize,
    pub noise: f64,
    pub label_map: LabelMap,
    pub out: PathBuf,
    pub run_id: Option<String>,
    /// Loss variants swept by `compare`, e.g. `adacon` or `supcon+huber`.
    pub losses: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let out = std::env::var_os(OUT_ENV)
            .filter(|v| !v.is_empty())
            .map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from);
        Self {
            train: TrainConfig::default(),
            dataset: DatasetKind::Ring,
            data_file: None,
            n: 2000,
            dim: 16,
            noise: 0.05,
            label_map: DatasetKind::Ring.default_label_map(),
            out,
            run_id: None,
            losses: vec!["adacon".into(), "supcon".into(), "none".into()],
            seeds: (0..5).collect(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("invalid value for '{key}': '{value}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "loss" => t.contrastive = parse(key, value)?,
            "regression" => {
                let delta = match t.regression {
                    RegressionKind::Huber { delta } => delta,
                    _ => DEFAULT_HUBER_DELTA,
                };
                t.regression = parse_regression(value, delta)?;
            }
            "huber_delta" => {
                let delta: f64 = parse(key, value)?;
                if let RegressionKind::Huber { .. } = t.regression {
                    t.regression = RegressionKind::Huber { delta };
                }
            }
            "gamma_reg" => t.gamma_reg = parse(key, value)?,
            "gamma_con" => t.gamma_con = parse(key, value)?,
            "temperature" => t.temperature = parse(key, value)?,
            "batch_size" => t.plan = BatchPlan::new(parse(key, value)?, t.plan.multiple)?,
            "multiple" => t.plan = BatchPlan::new(t.plan.base_batch, parse(key, value)?)?,
            "lr" => t.sgd.learning_rate = parse(key, value)?,
            "momentum" => t.sgd.momentum = parse(key, value)?,
            "weight_decay" => t.sgd.weight_decay = parse(key, value)?,
            "iterations" => t.iterations = parse(key, value)?,
            "milestones" => t.milestones = parse_list(key, value)?,
            "lr_decay" => t.lr_decay = parse(key, value)?,
            "sigma_aug" => t.sigma_aug = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "mode" => t.mode = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "widths" => t.encoder_widths = parse_list(key, value)?,
            "activation" => t.activation = parse(key, value)?,
            "projection_dim" => t.projection_dim = parse(key, value)?,
            "finetune_lr_factor" => t.finetune_lr_factor = parse(key, value)?,
            "dataset" => {
                self.dataset = parse(key, value)?;
                self.label_map = self.dataset.default_label_map();
            }
            "data_file" => {
                self.data_file = (!value.trim().is_empty()).then(|| PathBuf::from(value.trim()))
            }
            "n" => self.n = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "label_map" => self.label_map = parse(key, value)?,
            "out" => self.out = PathBuf::from(value.trim()),
            "run_id" => {
                self.run_id = (!value.trim().is_empty()).then(|| value.trim().to_string())
            }
            "losses" => {
                let losses: Vec<String> = parse_list(key, value)?;
                for l in &losses {
                    parse_variant(l)?;
                }
                self.losses = losses;
            }
            "seeds" => self.seeds = parse_list(key, value)?,
            other => {
                return Err(Error::InvalidParameter(format!("unknown config key '{other}'")))
            }
        }
        Ok(())
    }

    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        // `dataset` resets the label map and `regression` resets the Huber
        // delta, so both land before the keys they reset.
        let mut ordered: Vec<&(String, String)> = pairs.iter().collect();
        ordered.sort_by_key(|(k, _)| !matches!(k.as_str(), "dataset" | "regression"));
        for (k, v) in ordered {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_pairs(&read_key_values(path)?)?;
        Ok(cfg)
    }

    /// Every setting, in a fixed order; feeding these back through
    /// [`RunConfig::apply_pairs`] reproduces `self`.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let (regression, delta) = match t.regression {
            RegressionKind::L1 => ("l1", DEFAULT_HUBER_DELTA),
            RegressionKind::Mse => ("mse", DEFAULT_HUBER_DELTA),
            RegressionKind::Huber { delta } => ("huber", delta),
        };
        let kv = [
            ("loss", t.contrastive.to_string()),
            ("regression", regression.to_string()),
            ("huber_delta", delta.to_string()),
            ("gamma_reg", t.gamma_reg.to_string()),
            ("gamma_con", t.gamma_con.to_string()),
            ("temperature", t.temperature.to_string()),
            ("batch_size", t.plan.base_batch.to_string()),
            ("multiple", t.plan.multiple.to_string()),
            ("lr", t.sgd.learning_rate.to_string()),
            ("momentum", t.sgd.momentum.to_string()),
            ("weight_decay", t.sgd.weight_decay.to_string()),
            ("iterations", t.iterations.to_string()),
            ("milestones", join(&t.milestones)),
            ("lr_decay", t.lr_decay.to_string()),
            ("sigma_aug", t.sigma_aug.to_string()),
            ("seed", t.seed.to_string()),
            ("mode", t.mode.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("widths", join(&t.encoder_widths)),
            ("activation", t.activation.to_string()),
            ("projection_dim", t.projection_dim.to_string()),
            ("finetune_lr_factor", t.finetune_lr_factor.to_string()),
            ("dataset", self.dataset.to_string()),
            (
                "data_file",
                self.data_file
                    .as_ref()
                    .map_or_else(String::new, |p| p.display().to_string()),
            ),
            ("n", self.n.to_string()),
            ("dim", self.dim.to_string()),
            ("noise", self.noise.to_string()),
            ("label_map", self.label_map.to_string()),
            ("out", self.out.display().to_string()),
            ("run_id", self.run_id.clone().unwrap_or_default()),
            ("losses", self.losses.join(",")),
            ("seeds", join(&self.seeds)),
        ];
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Synthetic dataset for the current seed.
    pub fn generator(&self) -> GeneratorSpec {
        GeneratorSpec {
            kind: self.dataset,
            n: self.n,
            dim: self.dim,
            noise: self.noise,
            label_map: self.label_map,
            seed: self.train.seed,
        }
    }

    /// Copy configured for one loss variant and seed of a sweep.
    pub fn variant(&self, variant: &str, seed: u64) -> Result<Self> {
        let (contrastive, regression) = parse_variant(variant)?;
        let mut cfg = self.clone();
        cfg.train.contrastive = contrastive;
        if let Some(r) = regression {
            cfg.train.regression = r;
        }
        cfg.train.seed = seed;
        Ok(cfg)
    }
}

fn parse_regression(value: &str, huber_delta: f64) -> Result<RegressionKind> {
    let kind: LossKind = value.parse()?;
    match kind {
        LossKind::Huber(_) => Ok(RegressionKind::Huber { delta: huber_delta }),
        k => k.regression_kind().ok_or_else(|| {
            Error::InvalidParameter(format!("'{value}' is not a regression loss"))
        }),
    }
}

/// `adacon`, `none`, `supcon+mse`, or a bare regression loss such as `mse`
/// (regression only).
pub fn parse_variant(s: &str) -> Result<(ContrastiveKind, Option<RegressionKind>)> {
    let (con, reg) = match s.split_once('+') {
        Some((c, r)) => (c, Some(r)),
        None => (s, None),
    };
    let reg = reg
        .map(|r| parse_regression(r, DEFAULT_HUBER_DELTA))
        .transpose()?;
    match con.parse::<ContrastiveKind>() {
        Ok(c) => Ok((c, reg)),
        Err(e) => match (reg, parse_regression(con, DEFAULT_HUBER_DELTA)) {
            (None, Ok(r)) => Ok((ContrastiveKind::None, Some(r))),
            _ => Err(e),
        },
    }
}

/// Validates the dataset-related settings.
pub fn validate_data(cfg: &RunConfig) -> Result<()> {
    if cfg.data_file.is_none() && cfg.n < 10 {
        return Err(Error::DatasetTooSmall(cfg.n));
    }
    if cfg.train.mode == TrainMode::TwoStage && cfg.train.contrastive == ContrastiveKind::None {
        return Err(Error::InvalidParameter(
            "two-stage mode needs a contrastive loss".into(),
        ));
    }
    Ok(())
}
