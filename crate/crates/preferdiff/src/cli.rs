//! Command-line surface: `train`, `evaluate`, `synth`, and `inspect`.
//!
//! Every command resolves a [`RunConfig`] (defaults, `PREFERDIFF_SEED`, the
//! `--config` file, then `--key value` overrides), writes the resolved config
//! into the output directory, and exits 0 on success, 2 on configuration
//! errors, 3 on data or file errors, and 4 on numerical aborts. Failures
//! print one machine-parseable line to stderr.

use crate::config::{ConfigError, EmbeddingMode, RunConfig};
use crate::data::{
    gen_synthetic, import_text_embeddings, load_interactions, user_split, user_split_windowed,
    write_clusters, write_embeddings, write_interactions, DataError, InteractionLog, Splits,
};
use crate::eval::{evaluate_split, EvalConfig, EvalError, EvalReport};
use crate::model::{EncoderKind, ItemEmbeddingTable, ModelError, ModelParams, TableMode};
use crate::numerics::TensorError;
use crate::objective::gradient_weight;
use crate::rng;
use crate::sampler::SamplerError;
use crate::schedule::{DiffusionSchedule, ScheduleError};
use crate::trainer::{
    fit, load_checkpoint, save_checkpoint, AdamW, TrainError, TrainState, TrainerConfig,
};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const USAGE: &str = "\
usage: preferdiff <command> [options] [--KEY VALUE ...]

commands:
  train       fit the model; writes config.txt, train_log.csv, checkpoint.*
  evaluate    rank the valid and test splits; writes metrics.csv
  synth       generate clustered interactions; writes interactions.tsv,
              clusters.csv, embeddings.txt
  inspect     dump diagnostics CSVs (schedule; plus covariance and the
              preference gradient-weight curve when a checkpoint is given)

options:
  --config FILE      config file of 'key = value' lines ('#' comments)
  --out DIR          output directory (default: run)
  --checkpoint STEM  checkpoint stem (expects STEM.manifest and STEM.tensors);
                     resumes training / selects the model to evaluate
  --KEY VALUE        override any config key (dashes become underscores),
                     e.g. --lambda 0.6, --ddim-steps 50, --dim 128
  -h, --help         print this message

config keys and defaults are listed in the README; the seed can also come
from the PREFERDIFF_SEED environment variable (lowest precedence).";

/// Stdout writes tolerate a closed pipe (e.g. `preferdiff inspect | head`)
/// instead of panicking the way `println!` would.
macro_rules! emit {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

macro_rules! emit_raw {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Config(ConfigError),
    Data(DataError),
    Train(TrainError),
    Eval(EvalError),
    Schedule(ScheduleError),
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Data(e) => write!(f, "{e}"),
            CliError::Train(e) => write!(f, "{e}"),
            CliError::Eval(e) => write!(f, "{e}"),
            CliError::Schedule(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "{path}: {source}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}
impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e)
    }
}
impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Train(e)
    }
}
impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Eval(e)
    }
}
impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        CliError::Schedule(e)
    }
}

impl CliError {
    /// Exit code category: 2 configuration, 3 data/files, 4 numerical.
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Schedule(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Train(e) => match e {
                TrainError::NonFiniteLoss { .. } => 4,
                TrainError::Tensor(_) => 4,
                TrainError::Eval(inner) => eval_exit_code(inner),
                _ => 3,
            },
            CliError::Eval(e) => eval_exit_code(e),
        }
    }

    fn category(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "data",
            _ => "numeric",
        }
    }
}

fn eval_exit_code(e: &EvalError) -> i32 {
    match e {
        EvalError::Sampler(SamplerError::InvalidStepCount { .. }) => 2,
        EvalError::Tensor(_) | EvalError::Sampler(_) => 4,
        EvalError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => 4,
        _ => 3,
    }
}

#[derive(Debug, PartialEq, Eq, Clone, Copy)]
enum Command {
    Train,
    Evaluate,
    Synth,
    Inspect,
}

#[derive(Debug)]
struct Invocation {
    command: Command,
    config_path: Option<String>,
    out_dir: PathBuf,
    checkpoint: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    help: bool,
}

fn parse_args(args: &[String]) -> Result<Invocation, CliError> {
    let mut command = None;
    let mut config_path = None;
    let mut out_dir = PathBuf::from("run");
    let mut checkpoint = None;
    let mut overrides = Vec::new();
    let mut help = false;

    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if arg == "--help" || arg == "-h" {
            help = true;
            i += 1;
        } else if let Some(flag) = arg.strip_prefix("--") {
            let value = args
                .get(i + 1)
                .ok_or_else(|| CliError::Usage(format!("flag --{flag} expects a value")))?;
            match flag {
                "config" => config_path = Some(value.clone()),
                "out" => out_dir = PathBuf::from(value),
                "checkpoint" => checkpoint = Some(PathBuf::from(value)),
                _ => overrides.push((flag.replace('-', "_"), value.clone())),
            }
            i += 2;
        } else if command.is_none() {
            command = Some(match arg.as_str() {
                "train" => Command::Train,
                "evaluate" => Command::Evaluate,
                "synth" => Command::Synth,
                "inspect" => Command::Inspect,
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown command {other:?}; expected train, evaluate, synth, or inspect"
                    )))
                }
            });
            i += 1;
        } else {
            return Err(CliError::Usage(format!("unexpected argument {arg:?}")));
        }
    }
    if help {
        return Ok(Invocation {
            command: command.unwrap_or(Command::Inspect),
            config_path,
            out_dir,
            checkpoint,
            overrides,
            help: true,
        });
    }
    let command = command.ok_or_else(|| {
        CliError::Usage("missing command; expected train, evaluate, synth, or inspect".into())
    })?;
    Ok(Invocation {
        command,
        config_path,
        out_dir,
        checkpoint,
        overrides,
        help: false,
    })
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run(args: &[String]) -> i32 {
    match run_inner(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), e);
            e.exit_code()
        }
    }
}

fn run_inner(args: &[String]) -> Result<(), CliError> {
    let inv = parse_args(args)?;
    if inv.help {
        emit!("{USAGE}");
        return Ok(());
    }
    let file_text = match &inv.config_path {
        Some(path) => {
            let p = Path::new(path);
            Some(std::fs::read_to_string(p).map_err(|e| io_err(p, e))?)
        }
        None => None,
    };
    let cfg = RunConfig::resolve(file_text.as_deref(), &inv.overrides)?;

    std::fs::create_dir_all(&inv.out_dir).map_err(|e| io_err(&inv.out_dir, e))?;
    write_text(&inv.out_dir.join("config.txt"), &cfg.serialize())?;
    emit_raw!("{}", cfg.serialize());

    let execute = || -> Result<(), CliError> {
        match inv.command {
            Command::Synth => cmd_synth(&cfg, &inv.out_dir),
            Command::Train => cmd_train(&cfg, &inv.out_dir, inv.checkpoint.as_deref()),
            Command::Evaluate => cmd_evaluate(&cfg, &inv.out_dir, inv.checkpoint.as_deref()),
            Command::Inspect => cmd_inspect(&cfg, &inv.out_dir, inv.checkpoint.as_deref()),
        }
    };
    if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| {
                CliError::Usage(format!("cannot build a {}-thread pool: {e}", cfg.threads))
            })?;
        pool.install(execute)
    } else {
        execute()
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let data = gen_synthetic(&cfg.synth_config())?;
    let interactions = out.join("interactions.tsv");
    let clusters = out.join("clusters.csv");
    let embeddings = out.join("embeddings.txt");
    write_interactions(&interactions, &data.rows)?;
    write_clusters(&clusters, &data.item_cluster)?;
    write_embeddings(&embeddings, &data.embeddings)?;
    emit!(
        "synth: {} interactions, {} items, {} clusters",
        data.rows.len(),
        cfg.synth_items,
        cfg.synth_clusters
    );
    for p in [&interactions, &clusters, &embeddings] {
        emit!("wrote {}", p.display());
    }
    Ok(())
}

/// Loads interactions and splits them per the config.
fn load_splits(cfg: &RunConfig) -> Result<(InteractionLog, Splits), CliError> {
    let path = cfg.data_path.as_deref().ok_or_else(|| {
        CliError::Config(ConfigError::BadValue {
            key: "data_path".into(),
            value: String::new(),
            requirement: "this command needs data_path (or --data-path)".into(),
        })
    })?;
    let log = load_interactions(path, cfg.min_count)?;
    let splits = if cfg.train_windows {
        user_split_windowed(&log, cfg.split, cfg.max_len)?
    } else {
        user_split(&log, cfg.split, cfg.max_len)?
    };
    Ok((log, splits))
}

/// Builds the initial table per the embedding mode: trainable
/// standard-normal ids, or frozen vectors imported from a text file.
fn build_table(cfg: &RunConfig, log: &InteractionLog) -> Result<ItemEmbeddingTable, CliError> {
    match cfg.embedding_mode {
        EmbeddingMode::Id => {
            let mut rng = rng::stream(cfg.seed, &[rng::INIT_STREAM, 0]);
            Ok(ItemEmbeddingTable::standard_normal(
                log.n_items,
                cfg.dim,
                &mut rng,
            ))
        }
        EmbeddingMode::Text => {
            let path = cfg.embeddings_path.as_deref().ok_or_else(|| {
                CliError::Config(ConfigError::BadValue {
                    key: "embeddings_path".into(),
                    value: String::new(),
                    requirement: "embedding_mode = text needs embeddings_path".into(),
                })
            })?;
            let table = import_text_embeddings(path, Some(log.n_items))?;
            if table.dim() != cfg.dim {
                return Err(CliError::Config(ConfigError::BadValue {
                    key: "dim".into(),
                    value: cfg.dim.to_string(),
                    requirement: format!(
                        "embeddings file {path} holds {}-dimensional vectors; set dim to match",
                        table.dim()
                    ),
                }));
            }
            Ok(table)
        }
    }
}

/// Checks a loaded checkpoint against the active config; any disagreement is
/// a refusal, not a silent override.
fn check_checkpoint_compat(
    cfg: &RunConfig,
    ck: &crate::trainer::Checkpoint,
    n_items: Option<usize>,
) -> Result<(), CliError> {
    let mut mismatches: Vec<String> = Vec::new();
    let mut expect = |name: &str, want: String, got: String| {
        if want != got {
            mismatches.push(format!("{name}: config {want}, checkpoint {got}"));
        }
    };
    expect("t_max", cfg.t_max.to_string(), ck.t_max.to_string());
    expect(
        "beta_start",
        cfg.beta_start.to_string(),
        ck.beta_start.to_string(),
    );
    expect(
        "beta_end",
        cfg.beta_end.to_string(),
        ck.beta_end.to_string(),
    );
    expect("dim", cfg.dim.to_string(), ck.state.params.dim.to_string());
    expect(
        "cond_dim",
        cfg.cond_dim.to_string(),
        ck.state.params.cond_dim.to_string(),
    );
    expect(
        "time_dim",
        cfg.time_dim.to_string(),
        ck.state.params.time_dim.to_string(),
    );
    expect(
        "max_len",
        cfg.max_len.to_string(),
        ck.state.params.max_len.to_string(),
    );
    let enc = |k: EncoderKind| match k {
        EncoderKind::Gru => "gru".to_string(),
        EncoderKind::Transformer => "transformer".to_string(),
    };
    expect(
        "encoder",
        enc(cfg.encoder),
        enc(ck.state.params.encoder_kind()),
    );
    if let Some(n) = n_items {
        expect(
            "item count",
            n.to_string(),
            ck.state.table.len().to_string(),
        );
    }
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(ConfigError::BadValue {
            key: "checkpoint".into(),
            value: String::new(),
            requirement: format!("refusing to load: {}", mismatches.join("; ")),
        }))
    }
}

fn format_row(values: &[String]) -> String {
    values.join(",")
}

fn cmd_train(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let (log, splits) = load_splits(cfg)?;
    let schedule = DiffusionSchedule::linear(cfg.t_max, cfg.beta_start, cfg.beta_end)?;

    let mut trainer_cfg: TrainerConfig = cfg.trainer_config();
    let (mut state, mut opt) = match checkpoint {
        Some(stem) => {
            let ck = load_checkpoint(stem)?;
            check_checkpoint_compat(cfg, &ck, Some(log.n_items))?;
            trainer_cfg.start_epoch = ck.epoch;
            (ck.state, ck.opt)
        }
        None => {
            let table = build_table(cfg, &log)?;
            let mut rng = rng::stream(cfg.seed, &[rng::INIT_STREAM, 1]);
            let params = ModelParams::init(
                cfg.dim,
                cfg.cond_dim,
                cfg.time_dim,
                cfg.max_len,
                cfg.encoder,
                &mut rng,
            );
            (
                TrainState::new(params, table),
                AdamW::new(cfg.optimizer_config()),
            )
        }
    };

    emit!(
        "train: {} train / {} valid / {} test users, {} items",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        log.n_items
    );
    let outcome = fit(
        &mut state,
        &mut opt,
        &schedule,
        &splits.train,
        &splits.valid,
        &trainer_cfg,
        |row| {
            emit!(
                "epoch {:>3}  loss {:.6}  valid recall@5 {:.4}  ndcg@5 {:.4}  ({:.1}s)",
                row.epoch,
                row.train_loss,
                row.valid_recall5,
                row.valid_ndcg5,
                row.wall_secs
            );
        },
    )?;

    let mut csv = String::from("epoch,train_loss,valid_recall5,valid_ndcg5,wall_secs\n");
    for r in &outcome.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.valid_recall5, r.valid_ndcg5, r.wall_secs
        );
    }
    write_text(&out.join("train_log.csv"), &csv)?;

    let stem = out.join("checkpoint");
    save_checkpoint(
        &stem,
        &outcome.best_state,
        &outcome.best_opt,
        &schedule,
        outcome.best_epoch,
    )?;
    emit!(
        "best epoch {} (valid recall@5 {:.4}); checkpoint saved to {}.manifest",
        outcome.best_epoch,
        outcome.best_valid_recall,
        stem.display()
    );
    Ok(())
}

fn metrics_csv(reports: &[(&str, &EvalReport)]) -> String {
    let mut csv = String::from("split,k,recall,ndcg\n");
    for (name, report) in reports {
        for row in &report.rows {
            csv.push_str(&format_row(&[
                name.to_string(),
                row.k.to_string(),
                format!("{}", row.recall),
                format!("{}", row.ndcg),
            ]));
            csv.push('\n');
        }
    }
    csv
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let stem: PathBuf = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("checkpoint"));
    let ck = load_checkpoint(&stem)?;
    let (log, splits) = load_splits(cfg)?;
    check_checkpoint_compat(cfg, &ck, Some(log.n_items))?;
    let schedule = DiffusionSchedule::linear(ck.t_max, ck.beta_start, ck.beta_end)?;

    let eval_cfg = EvalConfig {
        ks: vec![5, 10],
        sampler: cfg.sampler_config(false),
        mask_history: cfg.mask_history,
    };
    let valid = evaluate_split(
        &ck.state.params,
        &ck.state.table,
        &schedule,
        &splits.valid,
        &eval_cfg,
    )?;
    let test = evaluate_split(
        &ck.state.params,
        &ck.state.table,
        &schedule,
        &splits.test,
        &eval_cfg,
    )?;

    let csv = metrics_csv(&[("valid", &valid), ("test", &test)]);
    write_text(&out.join("metrics.csv"), &csv)?;
    emit_raw!("{csv}");
    Ok(())
}

fn cmd_inspect(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let inspect_dir = out.join("inspect");
    std::fs::create_dir_all(&inspect_dir).map_err(|e| io_err(&inspect_dir, e))?;

    let schedule = DiffusionSchedule::linear(cfg.t_max, cfg.beta_start, cfg.beta_end)?;
    let mut csv = String::from("t,beta,alpha,alpha_bar\n");
    for (t, beta, alpha, alpha_bar) in schedule.rows() {
        let _ = writeln!(csv, "{t},{beta},{alpha},{alpha_bar}");
    }
    let schedule_path = inspect_dir.join("schedule.csv");
    write_text(&schedule_path, &csv)?;
    emit!("wrote {}", schedule_path.display());

    let Some(stem) = checkpoint else {
        return Ok(());
    };
    let ck = load_checkpoint(stem)?;
    check_checkpoint_compat(cfg, &ck, None)?;

    // Implicit per-example weight of the preference term as the score margin
    // between the positive and the negative branch sweeps [-8, 8].
    let mut gw = String::from("margin,weight\n");
    for i in 0..100 {
        let margin = -8.0 + 16.0 * (i as f64) / 99.0;
        let _ = writeln!(gw, "{},{}", margin, gradient_weight(margin, 0.0));
    }
    let gw_path = inspect_dir.join("gradient_weight.csv");
    write_text(&gw_path, &gw)?;
    emit!("wrote {}", gw_path.display());

    let diag = crate::eval::covariance_diagnostic(ck.state.table.matrix())?;
    let cov = format!(
        "diag_mean,offdiag_rms\n{},{}\n",
        diag.diag_mean, diag.offdiag_rms
    );
    let cov_path = inspect_dir.join("covariance.csv");
    write_text(&cov_path, &cov)?;
    emit!("wrote {}", cov_path.display());
    let mode = match ck.state.table.mode() {
        TableMode::Trainable => "trainable",
        TableMode::Frozen => "frozen",
    };
    emit!(
        "table: {} items, dim {}, {mode}; variance {:.4}, off-diagonal rms {:.4}",
        ck.state.table.len(),
        ck.state.table.dim(),
        diag.diag_mean,
        diag.offdiag_rms
    );
    Ok(())
}
