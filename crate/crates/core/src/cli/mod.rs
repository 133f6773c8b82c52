//! Command-line front end. Every subcommand writes under `<out>/<run-id>/`.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    generate_dataset, load_csv, sidecar_path, split_dataset, write_csv, write_key_values, Dataset,
    DatasetKind, GeneratorSpec, Splits,
};
use crate::ecdf::EcdfTable;
use crate::error::{Error, Result};
use crate::evalviz::{
    angular_layout, fmt_optional, pairwise_scatter, MetricsReport, ScatterDiagnostic,
    DEFAULT_SCATTER_PAIRS,
};
use crate::losses::{check_loss, EmbeddingBatch, GradCheckCase, LossKind};
use crate::model::ModelParams;
use crate::trainer::{evaluate, predict, run_training, TrainOutcome};

pub use config::{parse_variant, RunConfig, DEFAULT_OUT, OUT_ENV};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "adacon", about = "Adaptive-margin contrastive learning for regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model.
    Train(RunArgs),
    /// Sweep loss variants over seeds and summarize test metrics.
    Compare(CompareArgs),
    /// Finite-difference check of loss gradients on random batches.
    Gradcheck(GradcheckArgs),
    /// Metrics and feature diagnostics of a checkpoint on a dataset.
    Eval(CheckpointArgs),
    /// Scatter and layout CSVs for a checkpoint on a dataset.
    Plotdata(CheckpointArgs),
    /// Write a synthetic dataset as CSV.
    Gen(GenArgs),
    /// Dump the ECDF margin matrix of a batch as CSV.
    Margins(MarginsArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    regression: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    gamma_con: Option<String>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated variants such as `adacon,supcon,none` or `adacon+mse`.
    #[arg(long)]
    losses: Option<String>,
    /// Number of seeds, counted up from `seed`.
    #[arg(long)]
    seeds: Option<u64>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Loss name, or `all`.
    #[arg(long, default_value = "all")]
    loss: String,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 16)]
    max_batch: usize,
    #[arg(long, default_value_t = 8)]
    max_dim: usize,
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// CSV whose labels define the ECDF; defaults to `--data`.
    #[arg(long)]
    ecdf_from: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SCATTER_PAIRS)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value = "ring")]
    dataset: String,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long)]
    label_map: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; defaults to `<out>/<run-id>/data.csv`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Debug, Args)]
struct MarginsArgs {
    /// CSV whose labels define the ECDF.
    #[arg(long)]
    data: PathBuf,
    /// CSV holding the batch; defaults to the first `--rows` rows of `--data`.
    #[arg(long)]
    batch: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    rows: usize,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 1 on usage errors, 2 on runtime failure.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Plotdata(a) => cmd_plotdata(&a),
        Command::Gen(a) => cmd_gen(&a),
        Command::Margins(a) => cmd_margins(&a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run with --help for usage");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

/// Defaults, then the config file, then `--set`, then named flags.
fn resolve(args: &RunArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for item in &args.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{item}'")))?;
        cfg.set(k.trim(), v).map_err(usage)?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(v) = &args.dataset {
        flags.push(("dataset", v.clone()));
    }
    if let Some(v) = &args.loss {
        flags.push(("loss", v.clone()));
    }
    if let Some(v) = &args.regression {
        flags.push(("regression", v.clone()));
    }
    if let Some(v) = args.seed {
        flags.push(("seed", v.to_string()));
    }
    if let Some(v) = args.iterations {
        flags.push(("iterations", v.to_string()));
    }
    if let Some(v) = &args.mode {
        flags.push(("mode", v.clone()));
    }
    if let Some(v) = &args.gamma_con {
        flags.push(("gamma_con", v.clone()));
    }
    if let Some(v) = &args.data {
        flags.push(("data_file", v.display().to_string()));
    }
    if let Some(v) = &args.out {
        flags.push(("out", v.display().to_string()));
    }
    if let Some(v) = &args.run_id {
        flags.push(("run_id", v.clone()));
    }
    for (k, v) in flags {
        cfg.set(k, &v).map_err(usage)?;
    }
    config::validate_data(&cfg).map_err(usage)?;
    cfg.train.validate().map_err(usage)?;
    Ok(cfg)
}

fn run_dir(out: &Path, run_id: &str) -> Result<PathBuf> {
    let dir = out.join(run_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn default_out() -> PathBuf {
    RunConfig::default().out
}

/// Echoes the resolved configuration before any work starts.
fn echo_config(cfg: &RunConfig, default_id: &str) -> Result<PathBuf> {
    let mut resolved = cfg.clone();
    let id = resolved.run_id.get_or_insert_with(|| default_id.to_string()).clone();
    let dir = run_dir(&resolved.out, &id)?;
    write_key_values(&dir.join("config.txt"), &resolved.to_pairs())?;
    Ok(dir)
}

/// Loads or generates the dataset for `cfg` and splits it with the run seed.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let ds = match &cfg.data_file {
        Some(path) => load_csv(path)?,
        None => generate_dataset(&cfg.generator())?,
    };
    if ds.len() < 10 {
        return Err(Error::DatasetTooSmall(ds.len()));
    }
    Ok(split_dataset(&ds, cfg.train.seed))
}

/// Outcome of one seeded run with its held-out evaluation.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub outcome: TrainOutcome,
    pub test: MetricsReport,
    pub scatter: ScatterDiagnostic,
}

/// Trains with `cfg` and evaluates the selected model on the test split.
pub fn run_seed(cfg: &RunConfig) -> Result<(Splits, SeedResult)> {
    let splits = load_splits(cfg)?;
    let outcome = run_training(&cfg.train, &splits)?;
    let table = EcdfTable::fit(&splits.train.labels)?;
    let test = evaluate(&outcome.params, &splits.test)?;
    let scatter = feature_scatter(
        &outcome.params,
        &splits.test,
        &table,
        DEFAULT_SCATTER_PAIRS,
        cfg.train.seed,
    )?;
    Ok((
        splits,
        SeedResult {
            outcome,
            test,
            scatter,
        },
    ))
}

fn embedding_batch(params: &ModelParams, data: &Dataset) -> Result<EmbeddingBatch> {
    let out = predict(params, &data.features)?;
    EmbeddingBatch::new(out.embeddings, data.labels.clone(), (0..data.len()).collect())
}

/// Similarity against ECDF label distance over projected embeddings of `data`.
pub fn feature_scatter(
    params: &ModelParams,
    data: &Dataset,
    table: &EcdfTable,
    n_pairs: usize,
    seed: u64,
) -> Result<ScatterDiagnostic> {
    pairwise_scatter(&embedding_batch(params, data)?, table, n_pairs, seed)
}

fn summary_pairs(res: &SeedResult) -> Vec<(String, String)> {
    let mut kv = res.outcome.record.summary_pairs();
    kv.extend([
        ("test_mae".to_string(), res.test.mae.to_string()),
        ("test_rmse".to_string(), res.test.rmse.to_string()),
        ("test_r2".to_string(), fmt_optional(res.test.r2)),
        ("spearman_rho".to_string(), fmt_optional(res.scatter.spearman_rho)),
    ]);
    kv
}

fn write_run_outputs(dir: &Path, res: &SeedResult) -> Result<()> {
    res.outcome.params.save(&dir.join("model.bin"))?;
    res.outcome.record.write_csv(&dir.join("record.csv"))?;
    write_key_values(&dir.join("summary.txt"), &summary_pairs(res))
}

fn cmd_train(args: &RunArgs) -> std::result::Result<(), Failure> {
    let cfg = resolve(args)?;
    let default_id = format!("{}-{}-s{}", cfg.train.contrastive, cfg.train.regression, cfg.train.seed);
    let dir = echo_config(&cfg, &default_id)?;
    let (_, res) = run_seed(&cfg)?;
    write_run_outputs(&dir, &res)?;
    for (k, v) in summary_pairs(&res) {
        println!("{k}={v}");
    }
    println!("output={}", dir.display());
    Ok(())
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn median_opt(xs: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = xs.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| median(&mut v))
}

fn cmd_compare(args: &CompareArgs) -> std::result::Result<(), Failure> {
    let mut cfg = resolve(&args.run)?;
    if let Some(l) = &args.losses {
        cfg.set("losses", l).map_err(usage)?;
    }
    if let Some(k) = args.seeds {
        let base = cfg.train.seed;
        cfg.seeds = (base..base + k).collect();
    }
    if cfg.losses.is_empty() || cfg.seeds.is_empty() {
        return Err(Failure::Usage("compare needs at least one loss and one seed".into()));
    }
    let dir = echo_config(&cfg, "compare")?;
    let mut csv = String::from("loss,seed,mae,rmse,r2,spearman_rho\n");
    for variant in &cfg.losses {
        let mut rows: Vec<MetricsReport> = Vec::new();
        let mut rhos = Vec::new();
        for &seed in &cfg.seeds {
            let run_cfg = cfg.variant(variant, seed)?;
            let (_, res) = run_seed(&run_cfg)?;
            write_run_outputs(&run_dir(&dir, &format!("{variant}-s{seed}"))?, &res)?;
            csv.push_str(&format!(
                "{variant},{seed},{},{},{},{}\n",
                res.test.mae,
                res.test.rmse,
                fmt_optional(res.test.r2),
                fmt_optional(res.scatter.spearman_rho)
            ));
            eprintln!("{variant} seed={seed} {}", res.test);
            rows.push(res.test);
            rhos.push(res.scatter.spearman_rho);
        }
        let mut maes: Vec<f64> = rows.iter().map(|r| r.mae).collect();
        let mut rmses: Vec<f64> = rows.iter().map(|r| r.rmse).collect();
        let r2s: Vec<Option<f64>> = rows.iter().map(|r| r.r2).collect();
        csv.push_str(&format!(
            "{variant},median,{},{},{},{}\n",
            median(&mut maes),
            median(&mut rmses),
            fmt_optional(median_opt(&r2s)),
            fmt_optional(median_opt(&rhos))
        ));
    }
    let path = dir.join("compare.csv");
    fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    print!("{csv}");
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> std::result::Result<(), Failure> {
    let kinds: Vec<LossKind> = if args.loss == "all" {
        LossKind::ALL.to_vec()
    } else {
        vec![args.loss.parse().map_err(usage)?]
    };
    if args.trials == 0 {
        return Err(Failure::Usage("--trials must be ≥ 1".into()));
    }
    let mut ok = true;
    for kind in kinds {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let mut worst = 0.0_f64;
        for _ in 0..args.trials {
            let case = GradCheckCase::random(&mut rng, args.max_batch, args.max_dim);
            worst = worst.max(check_loss(kind, &case, args.step)?);
        }
        let pass = worst < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!(
            "loss={kind} trials={} max_rel_err={worst:e} {}",
            args.trials,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::NotDifferentiable(format!(
            "gradient check above {GRADCHECK_TOLERANCE:e}"
        ))))
    }
}

struct Loaded {
    params: ModelParams,
    data: Dataset,
    table: EcdfTable,
    dir: PathBuf,
}

fn load_checkpoint_inputs(args: &CheckpointArgs, default_id: &str) -> Result<Loaded> {
    let params = ModelParams::load(&args.checkpoint)?;
    let data = load_csv(&args.data)?;
    if data.dim() != params.spec().input_dim {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint expects {} features, {} has {}",
            params.spec().input_dim,
            args.data.display(),
            data.dim()
        )));
    }
    let table = match &args.ecdf_from {
        Some(p) => EcdfTable::fit(&load_csv(p)?.labels)?,
        None => EcdfTable::fit(&data.labels)?,
    };
    let out = args.out.clone().unwrap_or_else(default_out);
    let dir = run_dir(&out, args.run_id.as_deref().unwrap_or(default_id))?;
    Ok(Loaded {
        params,
        data,
        table,
        dir,
    })
}

fn cmd_eval(args: &CheckpointArgs) -> std::result::Result<(), Failure> {
    let l = load_checkpoint_inputs(args, "eval")?;
    let metrics = evaluate(&l.params, &l.data)?;
    let scatter = feature_scatter(&l.params, &l.data, &l.table, args.pairs, args.seed)?;
    let kv = vec![
        ("mae".to_string(), metrics.mae.to_string()),
        ("rmse".to_string(), metrics.rmse.to_string()),
        ("r2".to_string(), fmt_optional(metrics.r2)),
        ("n".to_string(), metrics.n.to_string()),
        ("spearman_rho".to_string(), fmt_optional(scatter.spearman_rho)),
    ];
    write_key_values(&l.dir.join("metrics.txt"), &kv)?;
    for (k, v) in kv {
        println!("{k}={v}");
    }
    Ok(())
}

fn cmd_plotdata(args: &CheckpointArgs) -> std::result::Result<(), Failure> {
    let l = load_checkpoint_inputs(args, "plotdata")?;
    let batch = embedding_batch(&l.params, &l.data)?;
    let scatter = pairwise_scatter(&batch, &l.table, args.pairs, args.seed)?;
    let mut s = String::from("distance,similarity\n");
    for (d, c) in &scatter.pairs {
        s.push_str(&format!("{d},{c}\n"));
    }
    let scatter_path = l.dir.join("scatter.csv");
    fs::write(&scatter_path, s).map_err(|e| Error::io(&scatter_path, e))?;

    let mut s = String::from("angle,label\n");
    for p in angular_layout(&batch)? {
        s.push_str(&format!("{},{}\n", p.angle, p.label));
    }
    let layout_path = l.dir.join("layout.csv");
    fs::write(&layout_path, s).map_err(|e| Error::io(&layout_path, e))?;
    write_key_values(
        &l.dir.join("diagnostics.txt"),
        &[("spearman_rho".to_string(), fmt_optional(scatter.spearman_rho))],
    )?;
    println!("scatter={}", scatter_path.display());
    println!("layout={}", layout_path.display());
    println!("spearman_rho={}", fmt_optional(scatter.spearman_rho));
    Ok(())
}

fn cmd_gen(args: &GenArgs) -> std::result::Result<(), Failure> {
    let kind: DatasetKind = args.dataset.parse().map_err(usage)?;
    let mut spec = GeneratorSpec::new(kind, args.n, args.dim, args.noise, args.seed);
    if let Some(m) = &args.label_map {
        spec.label_map = m.parse().map_err(usage)?;
    }
    let ds = generate_dataset(&spec).map_err(usage)?;
    let path = match &args.output {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            p.clone()
        }
        None => {
            let out = args.out.clone().unwrap_or_else(default_out);
            let id = args
                .run_id
                .clone()
                .unwrap_or_else(|| format!("gen-{kind}-s{}", args.seed));
            run_dir(&out, &id)?.join("data.csv")
        }
    };
    write_csv(&ds, &path)?;
    write_key_values(&sidecar_path(&path), &spec.to_key_values())?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_margins(args: &MarginsArgs) -> std::result::Result<(), Failure> {
    let data = load_csv(&args.data)?;
    let table = EcdfTable::fit(&data.labels)?;
    let labels: Vec<f64> = match &args.batch {
        Some(p) => load_csv(p)?.labels,
        None => data.labels.iter().take(args.rows).copied().collect(),
    };
    let m = table.margin_matrix(&labels)?;
    let mut s = String::new();
    for row in m.values().rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    match &args.output {
        Some(p) => fs::write(p, s).map_err(|e| Error::io(p, e))?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(s.as_bytes())
                .map_err(|e| Error::io(Path::new("<stdout>"), e))?;
        }
    }
    Ok(())
}
