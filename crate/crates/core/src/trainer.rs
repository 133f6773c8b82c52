//! Multi-task training: `L_total = γ_reg·L_reg + γ_con·L_con`.
//!
//! Each iteration draws one augmented batch, runs the regression loss on every
//! row and the contrastive loss on the projected embeddings (margins come from
//! the ECDF of the training split only), and takes one SGD step on the
//! weighted sum. The model with the best validation MAE is returned.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use crate::data::{epoch_seed, Batch, BatchIter, BatchPlan, Dataset, Splits};
use crate::ecdf::EcdfTable;
use crate::error::{Error, Result};
use crate::evalviz::{fmt_optional, regression_metrics, MetricsReport};
use crate::losses::{
    adacon_loss, adaptive_triplet_loss, mine_triplets, npair_loss, regression_loss, supcon_loss,
    EmbeddingBatch, LossResult, RegressionKind, Temperature, DEFAULT_SCALE,
};
use crate::model::{
    backward_and_step, forward, Activation, ForwardOutput, LrSchedule, ModelParams, ModelSpec,
    OptimizerState, SgdConfig, DEFAULT_PROJECTION_DIM,
};

/// Contrastive branch selection; `None` trains regression only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastiveKind {
    None,
    AdaCon,
    SupCon,
    NPair,
    Triplet,
}

impl fmt::Display for ContrastiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContrastiveKind::None => "none",
            ContrastiveKind::AdaCon => "adacon",
            ContrastiveKind::SupCon => "supcon",
            ContrastiveKind::NPair => "npair",
            ContrastiveKind::Triplet => "triplet",
        })
    }
}

impl FromStr for ContrastiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(ContrastiveKind::None),
            "adacon" => Ok(ContrastiveKind::AdaCon),
            "supcon" => Ok(ContrastiveKind::SupCon),
            "npair" => Ok(ContrastiveKind::NPair),
            "triplet" => Ok(ContrastiveKind::Triplet),
            other => Err(Error::InvalidParameter(format!(
                "unknown contrastive loss '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaCon {
    Fixed(f64),
    /// Resolved from first-epoch loss magnitudes by [`auto_balance_gamma`].
    Auto,
}

impl fmt::Display for GammaCon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GammaCon::Fixed(g) => write!(f, "{g}"),
            GammaCon::Auto => f.write_str("auto"),
        }
    }
}

impl FromStr for GammaCon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "auto" {
            return Ok(GammaCon::Auto);
        }
        s.trim()
            .parse::<f64>()
            .map(GammaCon::Fixed)
            .map_err(|_| Error::InvalidParameter(format!("gamma_con must be a number or 'auto', got '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    MultiTask,
    /// Contrastive pretraining followed by regression fine-tuning.
    TwoStage,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::MultiTask => "multitask",
            TrainMode::TwoStage => "twostage",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "multitask" | "multi-task" => Ok(TrainMode::MultiTask),
            "twostage" | "two-stage" => Ok(TrainMode::TwoStage),
            other => Err(Error::InvalidParameter(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regression: RegressionKind,
    pub contrastive: ContrastiveKind,
    pub gamma_reg: f64,
    pub gamma_con: GammaCon,
    /// Contrastive scale `s`.
    pub temperature: f64,
    pub plan: BatchPlan,
    pub sgd: SgdConfig,
    pub iterations: usize,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub sigma_aug: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub eval_every: usize,
    pub encoder_widths: Vec<usize>,
    pub activation: Activation,
    pub projection_dim: usize,
    /// Two-stage only: fine-tuning learning rate as a fraction of the base.
    pub finetune_lr_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regression: RegressionKind::L1,
            contrastive: ContrastiveKind::AdaCon,
            gamma_reg: 1.0,
            gamma_con: GammaCon::Auto,
            temperature: DEFAULT_SCALE,
            plan: BatchPlan::default(),
            sgd: SgdConfig::default(),
            iterations: 6000,
            milestones: vec![3000, 4500],
            lr_decay: 0.1,
            sigma_aug: 0.05,
            seed: 0,
            mode: TrainMode::MultiTask,
            eval_every: 250,
            encoder_widths: vec![64, 64],
            activation: Activation::Relu,
            projection_dim: DEFAULT_PROJECTION_DIM,
            finetune_lr_factor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.gamma_reg >= 0.0 && self.gamma_reg.is_finite()) {
            return bad(format!("gamma_reg must be ≥ 0, got {}", self.gamma_reg));
        }
        if let GammaCon::Fixed(g) = self.gamma_con {
            if !(g >= 0.0 && g.is_finite()) {
                return bad(format!("gamma_con must be ≥ 0, got {g}"));
            }
        }
        Temperature::new(self.temperature)?;
        if self.eval_every == 0 {
            return bad("eval_every must be ≥ 1".into());
        }
        if !(self.sigma_aug >= 0.0 && self.sigma_aug.is_finite()) {
            return bad(format!("sigma_aug must be ≥ 0, got {}", self.sigma_aug));
        }
        LrSchedule::new(self.sgd.learning_rate, self.milestones.clone(), self.lr_decay)?;
        BatchPlan::new(self.plan.base_batch, self.plan.multiple)?;
        Ok(())
    }

    pub fn model_spec(&self, input_dim: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            encoder_widths: self.encoder_widths.clone(),
            activation: self.activation,
            projection_dim: self.projection_dim,
            projection_activation: Activation::Relu,
        }
    }

    /// Pretraining and fine-tuning lengths: the budget split in half.
    pub fn two_stage_lengths(&self) -> (usize, usize) {
        let pre = self.iterations / 2;
        (pre, self.iterations - pre)
    }

    fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.sgd.learning_rate, self.milestones.clone(), self.lr_decay)
    }

    /// Milestones rescaled from the full budget to a stage of `len` steps.
    fn stage_schedule(&self, base: f64, len: usize) -> Result<LrSchedule> {
        let total = self.iterations.max(1);
        let mut ms: Vec<usize> = self.milestones.iter().map(|&m| m * len / total).collect();
        ms.dedup();
        LrSchedule::new(base, ms, self.lr_decay)
    }
}

/// Loss components of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub lreg: f64,
    pub lcon: f64,
    pub ltotal: f64,
    pub lr: f64,
    /// Weights actually applied at this step.
    pub gamma_reg: f64,
    pub gamma_con: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    /// Number of completed steps when evaluated.
    pub iteration: usize,
    pub val: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub steps: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
    pub gamma_reg: f64,
    /// Fixed or resolved contrastive weight; `None` if auto-balancing never
    /// completed.
    pub gamma_con: Option<f64>,
    /// Steps taken with the contrastive term excluded while auto-balancing.
    pub warmup_steps: usize,
    pub best_iteration: Option<usize>,
    pub best_val_mae: Option<f64>,
    /// Diagnostic if training stopped early on a non-finite value.
    pub aborted: Option<String>,
}

impl TrainRecord {
    fn new(gamma_reg: f64) -> Self {
        Self {
            steps: Vec::new(),
            evals: Vec::new(),
            gamma_reg,
            gamma_con: None,
            warmup_steps: 0,
            best_iteration: None,
            best_val_mae: None,
            aborted: None,
        }
    }

    /// Columns `iteration,lreg,lcon,ltotal,lr,gamma_reg,gamma_con`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("iteration,lreg,lcon,ltotal,lr,gamma_reg,gamma_con\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.iteration, s.lreg, s.lcon, s.ltotal, s.lr, s.gamma_reg, s.gamma_con
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn summary_pairs(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("gamma_reg".to_string(), self.gamma_reg.to_string()),
            ("gamma_con".to_string(), fmt_optional(self.gamma_con)),
            ("warmup_steps".to_string(), self.warmup_steps.to_string()),
            ("steps".to_string(), self.steps.len().to_string()),
            (
                "best_iteration".to_string(),
                self.best_iteration
                    .map_or_else(|| "none".to_string(), |i| i.to_string()),
            ),
            ("best_val_mae".to_string(), fmt_optional(self.best_val_mae)),
        ];
        if let Some(msg) = &self.aborted {
            kv.push(("aborted".to_string(), msg.clone()));
        }
        kv
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: TrainRecord,
    /// Model selected by validation MAE.
    pub params: ModelParams,
}

/// `γ_con = mean(L_reg) / mean(L_con)` rounded to one significant figure.
pub fn auto_balance_gamma(reg_losses: &[f64], con_losses: &[f64]) -> Result<f64> {
    if reg_losses.is_empty() || con_losses.is_empty() {
        return Err(Error::Degenerate("no loss samples for gamma balancing".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (reg, con) = (mean(reg_losses), mean(con_losses));
    if !(con > 0.0 && con.is_finite()) {
        return Err(Error::Degenerate(format!("mean contrastive loss is {con}")));
    }
    if !(reg > 0.0 && reg.is_finite()) {
        return Err(Error::Degenerate(format!("mean regression loss is {reg}")));
    }
    Ok(round_one_significant(reg / con))
}

fn round_one_significant(x: f64) -> f64 {
    let mut exp = x.log10().floor() as i32;
    let mut mant = (x / 10f64.powi(exp)).round();
    if mant >= 10.0 {
        mant = 1.0;
        exp += 1;
    }
    // Divide by an exact power of ten for negative exponents so that e.g.
    // 5e-3 comes out as the nearest double to 0.005.
    if exp < 0 {
        mant / 10f64.powi(-exp)
    } else {
        mant * 10f64.powi(exp)
    }
}

/// Batches across epochs, reshuffled each epoch.
struct BatchStream<'a> {
    data: &'a Dataset,
    plan: BatchPlan,
    sigma_aug: f64,
    seed: u64,
    epoch: u64,
    current: BatchIter<'a>,
}

impl<'a> BatchStream<'a> {
    fn new(data: &'a Dataset, plan: BatchPlan, sigma_aug: f64, seed: u64) -> Result<Self> {
        let current = BatchIter::new(data, plan, sigma_aug, epoch_seed(seed, 0))?;
        Ok(Self {
            data,
            plan,
            sigma_aug,
            seed,
            epoch: 0,
            current,
        })
    }

    fn next_batch(&mut self) -> Result<Batch> {
        if let Some(b) = self.current.next() {
            return Ok(b);
        }
        self.epoch += 1;
        self.current = BatchIter::new(
            self.data,
            self.plan,
            self.sigma_aug,
            epoch_seed(self.seed, self.epoch),
        )?;
        self.current
            .next()
            .ok_or_else(|| Error::DatasetTooSmall(self.data.len()))
    }
}

pub fn predict(params: &ModelParams, features: &Array2<f64>) -> Result<ForwardOutput> {
    forward(params, features)
}

pub fn evaluate(params: &ModelParams, data: &Dataset) -> Result<MetricsReport> {
    let out = forward(params, &data.features)?;
    regression_metrics(&out.predictions, &data.labels)
}

/// Contrastive loss for a forward pass over `batch`.
pub fn contrastive_loss(
    kind: ContrastiveKind,
    embeddings: &Array2<f64>,
    batch: &Batch,
    table: &EcdfTable,
    temperature: Temperature,
) -> Result<Option<LossResult>> {
    if kind == ContrastiveKind::None {
        return Ok(None);
    }
    let eb = EmbeddingBatch::new(
        embeddings.clone(),
        batch.labels.clone(),
        batch.source_ids.clone(),
    )?;
    let r = match kind {
        ContrastiveKind::AdaCon => {
            let margins = table.margin_matrix(&batch.labels)?;
            adacon_loss(&eb, &margins, temperature)?
        }
        ContrastiveKind::SupCon => supcon_loss(&eb, temperature)?,
        ContrastiveKind::NPair => npair_loss(&eb)?,
        ContrastiveKind::Triplet => adaptive_triplet_loss(&eb, &mine_triplets(&eb), table)?,
        ContrastiveKind::None => unreachable!(),
    };
    Ok(Some(r))
}

/// Runs the configured mode. Only the training split feeds the ECDF.
pub fn run_training(config: &TrainConfig, data: &Splits) -> Result<TrainOutcome> {
    config.validate()?;
    match config.mode {
        TrainMode::MultiTask => run_multitask(config, data),
        TrainMode::TwoStage => run_two_stage(config, data),
    }
}

/// What one stage optimizes.
#[derive(Debug, Clone, Copy)]
struct StageWeights {
    regression: bool,
    contrastive: bool,
}

struct Stage<'a> {
    config: &'a TrainConfig,
    data: &'a Splits,
    table: &'a EcdfTable,
    temperature: Temperature,
    weights: StageWeights,
    schedule: LrSchedule,
    iterations: usize,
    /// Index of the first step of this stage in the record.
    offset: usize,
    /// Contrastive weight; `None` means auto-balance during the first epoch.
    gamma_con: Option<f64>,
    select_model: bool,
}

impl Stage<'_> {
    fn run(
        &self,
        params: &mut ModelParams,
        stream: &mut BatchStream<'_>,
        record: &mut TrainRecord,
    ) -> Result<ModelParams> {
        let cfg = self.config;
        let mut opt = OptimizerState::new(cfg.sgd);
        let warmup_len = cfg.plan.batches_per_epoch(self.data.train.len());
        let mut gamma_con = self.gamma_con;
        let mut warm_reg = Vec::new();
        let mut warm_con = Vec::new();
        let mut best = params.clone();
        let mut best_mae = f64::INFINITY;
        let gamma_reg = if self.weights.regression {
            cfg.gamma_reg
        } else {
            0.0
        };

        for step in 0..self.iterations {
            let batch = stream.next_batch()?;
            let out = forward(params, &batch.inputs)?;
            let reg = regression_loss(cfg.regression, &out.predictions, &batch.labels)?;
            let con = if self.weights.contrastive {
                contrastive_loss(
                    cfg.contrastive,
                    &out.embeddings,
                    &batch,
                    self.table,
                    self.temperature,
                )?
            } else {
                None
            };
            let lcon = con.as_ref().map_or(0.0, |c| c.value);

            let applied_con = gamma_con.unwrap_or(0.0);
            if gamma_con.is_none() && con.is_some() {
                record.warmup_steps += 1;
                warm_reg.push(reg.value);
                warm_con.push(lcon);
                if warm_reg.len() == warmup_len {
                    gamma_con = Some(auto_balance_gamma(&warm_reg, &warm_con)?);
                }
            }

            let ltotal = gamma_reg * reg.value + applied_con * lcon;
            let iteration = self.offset + step;
            let lr = self.schedule.lr_at(step);
            if !ltotal.is_finite() {
                record.aborted = Some(format!("non-finite loss at iteration {iteration}"));
                return Ok(self.selected(best, params, best_mae));
            }

            let grad_z = match &con {
                Some(c) if applied_con != 0.0 => Some(&c.grad * applied_con),
                _ => None,
            };
            let grad_pred: Option<Vec<f64>> = (gamma_reg != 0.0)
                .then(|| reg.grad.iter().map(|g| g * gamma_reg).collect());
            if let Err(e) = backward_and_step(
                params,
                &out.cache,
                grad_z.as_ref(),
                grad_pred.as_deref(),
                &mut opt,
                lr,
            ) {
                record.aborted = Some(format!("step rejected at iteration {iteration}: {e}"));
                return Ok(self.selected(best, params, best_mae));
            }
            record.steps.push(IterRecord {
                iteration,
                lreg: reg.value,
                lcon,
                ltotal,
                lr,
                gamma_reg,
                gamma_con: applied_con,
            });

            let done = step + 1;
            if self.select_model && (done % cfg.eval_every == 0 || done == self.iterations) {
                let val = evaluate(params, &self.data.val)?;
                record.evals.push(EvalRecord {
                    iteration: self.offset + done,
                    val,
                });
                if val.mae < best_mae {
                    best_mae = val.mae;
                    best = params.clone();
                    record.best_iteration = Some(self.offset + done);
                    record.best_val_mae = Some(val.mae);
                }
            }
        }
        if gamma_con.is_some() {
            record.gamma_con = gamma_con;
        }
        Ok(self.selected(best, params, best_mae))
    }

    fn selected(&self, best: ModelParams, last: &ModelParams, best_mae: f64) -> ModelParams {
        if self.select_model && best_mae.is_finite() {
            best
        } else {
            last.clone()
        }
    }
}

fn fixed_gamma(config: &TrainConfig) -> Option<f64> {
    match config.gamma_con {
        GammaCon::Fixed(g) => Some(g),
        GammaCon::Auto => None,
    }
}

fn setup(config: &TrainConfig, data: &Splits) -> Result<(EcdfTable, ModelParams)> {
    let table = EcdfTable::fit(&data.train.labels)?;
    let params = ModelParams::init(&config.model_spec(data.train.dim()), config.seed)?;
    Ok((table, params))
}

fn batch_seed(config: &TrainConfig) -> u64 {
    config.seed ^ 0x5851_F42D_4C95_7F2D
}

fn run_multitask(config: &TrainConfig, data: &Splits) -> Result<TrainOutcome> {
    let (table, mut params) = setup(config, data)?;
    let mut record = TrainRecord::new(config.gamma_reg);
    if config.iterations == 0 {
        record.gamma_con = fixed_gamma(config);
        return Ok(TrainOutcome { record, params });
    }
    let mut stream = BatchStream::new(&data.train, config.plan, config.sigma_aug, batch_seed(config))?;
    let stage = Stage {
        config,
        data,
        table: &table,
        temperature: Temperature::new(config.temperature)?,
        weights: StageWeights {
            regression: true,
            contrastive: config.contrastive != ContrastiveKind::None,
        },
        schedule: config.schedule()?,
        iterations: config.iterations,
        offset: 0,
        gamma_con: fixed_gamma(config),
        select_model: !data.val.is_empty(),
    };
    let selected = stage.run(&mut params, &mut stream, &mut record)?;
    if record.gamma_con.is_none() {
        record.gamma_con = fixed_gamma(config);
    }
    Ok(TrainOutcome {
        record,
        params: selected,
    })
}

/// Contrastive-only pretraining, then regression-only fine-tuning at
/// `finetune_lr_factor × lr` with a fresh optimizer. Each stage gets half the
/// budget and the milestones scaled to its length.
///
/// With `gamma_con = auto` the pretraining weight is resolved before any
/// update, from one epoch of batches evaluated at the initial parameters.
pub fn run_two_stage(config: &TrainConfig, data: &Splits) -> Result<TrainOutcome> {
    config.validate()?;
    let (table, mut params) = setup(config, data)?;
    let (pre_len, fine_len) = config.two_stage_lengths();
    let mut record = TrainRecord::new(config.gamma_reg);
    if config.iterations == 0 {
        record.gamma_con = fixed_gamma(config);
        return Ok(TrainOutcome { record, params });
    }
    let temperature = Temperature::new(config.temperature)?;
    let mut stream = BatchStream::new(&data.train, config.plan, config.sigma_aug, batch_seed(config))?;

    let pretrain = config.contrastive != ContrastiveKind::None && pre_len > 0;
    if pretrain {
        let gamma = match config.gamma_con {
            GammaCon::Fixed(g) => g,
            GammaCon::Auto => measure_gamma(config, data, &table, &params, temperature)?,
        };
        record.gamma_con = Some(gamma);
        let stage = Stage {
            config,
            data,
            table: &table,
            temperature,
            weights: StageWeights {
                regression: false,
                contrastive: true,
            },
            schedule: config.stage_schedule(config.sgd.learning_rate, pre_len)?,
            iterations: pre_len,
            offset: 0,
            gamma_con: Some(gamma),
            select_model: false,
        };
        params = stage.run(&mut params, &mut stream, &mut record)?;
        if record.aborted.is_some() {
            return Ok(TrainOutcome { record, params });
        }
    }

    let stage = Stage {
        config,
        data,
        table: &table,
        temperature,
        weights: StageWeights {
            regression: true,
            contrastive: false,
        },
        schedule: config.stage_schedule(config.sgd.learning_rate * config.finetune_lr_factor, fine_len)?,
        iterations: fine_len,
        offset: pre_len,
        gamma_con: Some(0.0),
        select_model: !data.val.is_empty(),
    };
    let gamma_pre = record.gamma_con;
    let selected = stage.run(&mut params, &mut stream, &mut record)?;
    record.gamma_con = gamma_pre;
    Ok(TrainOutcome {
        record,
        params: selected,
    })
}

fn measure_gamma(
    config: &TrainConfig,
    data: &Splits,
    table: &EcdfTable,
    params: &ModelParams,
    temperature: Temperature,
) -> Result<f64> {
    let mut reg = Vec::new();
    let mut con = Vec::new();
    let iter = BatchIter::new(
        &data.train,
        config.plan,
        config.sigma_aug,
        epoch_seed(batch_seed(config), u64::MAX),
    )?;
    for batch in iter {
        let out = forward(params, &batch.inputs)?;
        reg.push(regression_loss(config.regression, &out.predictions, &batch.labels)?.value);
        if let Some(c) = contrastive_loss(config.contrastive, &out.embeddings, &batch, table, temperature)? {
            con.push(c.value);
        }
    }
    auto_balance_gamma(&reg, &con)
}
