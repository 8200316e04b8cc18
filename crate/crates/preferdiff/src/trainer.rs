//! Training loop: batched objective construction, decoupled-weight-decay
//! Adam, early stopping on validation recall, and checkpointing.
//!
//! Each batch builds one graph. Per-example noise (condition dropout, the
//! diffusion step, both noise draws) comes from a stream keyed by the run
//! seed, the epoch, and the example's stable index, so a run is reproducible
//! regardless of batch composition order.

use crate::data::{make_batches, Batch, DataError, SequenceExample};
use crate::eval::{evaluate_split, EvalConfig, EvalError};
use crate::model::{
    denoise, encode_sequence, Condition, EncoderKind, ItemEmbeddingTable, ModelError, ModelParams,
    TableBinding, TableMode,
};
use crate::numerics::{Tape, Tensor, TensorError};
use crate::objective::{centroid, combined_loss, simple_loss, LossConfig};
use crate::rng;
use crate::sampler::SamplerConfig;
use crate::schedule::{DiffusionSchedule, ScheduleError};
use rand::Rng;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss is not finite for example {example}")]
    NonFiniteLoss { example: usize },
    #[error("training split is empty")]
    EmptyTrainingSplit,
    #[error("batch contains no examples")]
    EmptyBatch,
    #[error("no gradient produced for parameter {name:?}")]
    MissingGradient { name: String },
    #[error("checkpoint {path}: {msg}")]
    BadCheckpoint { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam step with decoupled weight decay: the parameter shrinks toward
/// zero before the adaptive update, so the decay never enters the moment
/// estimates. `step` is 1-based.
pub fn adamw_update(
    values: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: usize,
    cfg: &OptimizerConfig,
) {
    debug_assert_eq!(values.len(), grad.len());
    debug_assert_eq!(values.len(), m.len());
    debug_assert_eq!(values.len(), v.len());
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let mc = 1.0 - cfg.beta1.powi(step as i32);
    let vc = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..values.len() {
        values[i] *= decay;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / mc;
        let v_hat = v[i] / vc;
        values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter
/// name and created lazily on the first update.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    step: usize,
    slots: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            step: 0,
            slots: HashMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Applies one step to every named parameter; each name must have a
    /// gradient entry (use zeros for parameters that did not participate).
    pub fn apply(
        &mut self,
        params: Vec<(String, &mut Tensor)>,
        grads: &HashMap<String, Tensor>,
    ) -> Result<(), TrainError> {
        self.step += 1;
        for (name, tensor) in params {
            let grad = grads
                .get(&name)
                .ok_or_else(|| TrainError::MissingGradient { name: name.clone() })?;
            let n = tensor.numel();
            let slot = self.slots.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            adamw_update(
                tensor.values_mut(),
                grad.values(),
                &mut slot.m,
                &mut slot.v,
                self.step,
                &self.cfg,
            );
        }
        Ok(())
    }

    fn moments(&self, name: &str) -> Option<&Moments> {
        self.slots.get(name)
    }

    fn set_moments(&mut self, name: String, m: Vec<f64>, v: Vec<f64>) {
        self.slots.insert(name, Moments { m, v });
    }
}

/// Everything the optimizer touches: the denoiser parameters and, when
/// trainable, the item embedding table.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub table: ItemEmbeddingTable,
}

impl TrainState {
    pub fn new(params: ModelParams, table: ItemEmbeddingTable) -> Self {
        Self { params, table }
    }

    /// Tensors the optimizer updates, in a stable order: the table first
    /// (when trainable), then the denoiser parameters.
    pub fn trainable_named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        if self.table.mode() == TableMode::Trainable {
            out.push(("table".to_string(), self.table.matrix_mut()));
        }
        out.extend(self.params.named_tensors_mut());
        out
    }

    /// All persistent tensors in checkpoint order: the table, then the
    /// denoiser parameters.
    pub fn checkpoint_named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("table".to_string(), self.table.matrix())];
        out.extend(self.params.named_tensors());
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    /// Probability of replacing the condition with the unconditional token.
    pub p_uncond: f64,
    pub batch_size: usize,
    /// In-batch negatives per example (cap; fewer when the batch lacks
    /// distinct targets).
    pub negatives: usize,
    pub epochs: usize,
    /// Consecutive epochs without a strict validation improvement tolerated
    /// before stopping.
    pub patience: usize,
    /// First epoch index is `start_epoch + 1`; nonzero when resuming.
    pub start_epoch: usize,
    pub seed: u64,
    /// Reverse-process settings for the per-epoch validation pass.
    pub valid_sampler: SamplerConfig,
    pub mask_history: bool,
}

/// Builds the loss for one example on the shared batch tape and returns the
/// scalar node.
#[allow(clippy::too_many_arguments)]
fn example_loss(
    tape: &mut Tape,
    state: &TrainState,
    bound_vars: &crate::model::ParamVars,
    binding: &mut TableBinding,
    schedule: &DiffusionSchedule,
    cfg: &TrainerConfig,
    epoch: usize,
    index: usize,
    history: &[u32],
    target: u32,
    negatives: &[u32],
) -> Result<crate::numerics::VarId, TrainError> {
    let dim = state.table.dim();
    let mut rng = rng::stream(cfg.seed, &[rng::TRAIN_STREAM, epoch as u64, index as u64]);
    // Fixed draw order keeps the stream stable whether or not the negative
    // branch is built.
    let drop_draw: f64 = rng.gen();
    let t = rng.gen_range(1..=schedule.t_max());
    let eps_pos = Tensor::randn(vec![dim], &mut rng);
    let eps_neg = Tensor::randn(vec![dim], &mut rng);

    let cond = encode_sequence(tape, bound_vars, binding, &state.table, history)?;
    let cond = if drop_draw < cfg.p_uncond {
        Condition::unconditional(bound_vars.phi)
    } else {
        cond
    };

    let e0_pos = binding.row_var(tape, &state.table, target)?;
    let eps_pos_var = tape.constant(eps_pos);
    let et_pos = schedule.forward_noise_var(tape, e0_pos, t, eps_pos_var)?;
    let pred_pos = denoise(tape, bound_vars, et_pos, t, &cond)?;

    // Without negatives (or with all weight on generation) only the
    // reconstruction term remains.
    if cfg.loss.lambda >= 1.0 || negatives.is_empty() {
        return Ok(simple_loss(tape, cfg.loss.measure, pred_pos, e0_pos)?);
    }
    let rows = negatives
        .iter()
        .map(|&id| binding.row_var(tape, &state.table, id))
        .collect::<Result<Vec<_>, _>>()?;
    let e0_cent = centroid(tape, &rows)?;
    let eps_neg_var = tape.constant(eps_neg);
    let et_cent = schedule.forward_noise_var(tape, e0_cent, t, eps_neg_var)?;
    let pred_cent = denoise(tape, bound_vars, et_cent, t, &cond)?;
    let combined = combined_loss(
        tape,
        &cfg.loss,
        pred_pos,
        e0_pos,
        pred_cent,
        e0_cent,
        negatives.len(),
    )?;
    Ok(combined.total)
}

/// Runs one optimization step over a batch and returns its mean loss.
pub fn train_step(
    state: &mut TrainState,
    schedule: &DiffusionSchedule,
    batch: &Batch,
    cfg: &TrainerConfig,
    opt: &mut AdamW,
    epoch: usize,
) -> Result<f64, TrainError> {
    if batch.examples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, true);
    let table_trainable = state.table.mode() == TableMode::Trainable;
    let mut binding = TableBinding::new(&state.table, table_trainable);

    let mut losses = Vec::with_capacity(batch.examples.len());
    for ex in &batch.examples {
        let loss = example_loss(
            &mut tape,
            state,
            &bound.vars,
            &mut binding,
            schedule,
            cfg,
            epoch,
            ex.index,
            &ex.example.history,
            ex.example.target,
            &ex.negatives,
        )?;
        if !tape.value(loss).item().is_finite() {
            return Err(TrainError::NonFiniteLoss { example: ex.index });
        }
        losses.push(loss);
    }
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.add(acc, l)?;
    }
    let total = tape.scale(acc, 1.0 / losses.len() as f64)?;
    let batch_loss = tape.value(total).item();
    let grads = tape.backward(total)?;

    let mut grad_map: HashMap<String, Tensor> = HashMap::new();
    for (name, var) in &bound.named {
        let g = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape_shape_of(state, name)));
        grad_map.insert(name.clone(), g);
    }
    if table_trainable {
        let dim = state.table.dim();
        let mut table_grad = Tensor::zeros(vec![state.table.len(), dim]);
        for (id, var) in binding.bound_rows() {
            if let Some(g) = grads.get(var) {
                let row = &mut table_grad.values_mut()[id as usize * dim..(id as usize + 1) * dim];
                for (dst, src) in row.iter_mut().zip(g.values()) {
                    *dst += src;
                }
            }
        }
        grad_map.insert("table".to_string(), table_grad);
    }
    opt.apply(state.trainable_named_mut(), &grad_map)?;
    Ok(batch_loss)
}

fn tape_shape_of(state: &TrainState, name: &str) -> Vec<usize> {
    state
        .params
        .named_tensors()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.shape().to_vec())
        .unwrap_or_default()
}

#[derive(Debug, Clone, Copy)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_recall5: f64,
    pub valid_ndcg5: f64,
    /// Wall-clock seconds; informational only, not reproducible.
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_valid_recall: f64,
    /// Snapshot of the state at the best validation epoch.
    pub best_state: TrainState,
    /// Optimizer snapshot taken together with `best_state`, so a checkpoint
    /// of the pair can resume consistently.
    pub best_opt: AdamW,
    pub stopped_early: bool,
}

/// Trains until the epoch budget or the patience counter runs out. `state`
/// is left at the last executed epoch; the best validation snapshot is
/// returned separately. Validation uses recall at 5 with a fixed sampler
/// seed, so epoch-over-epoch comparisons see identical noise.
pub fn fit<F: FnMut(&EpochRow)>(
    state: &mut TrainState,
    opt: &mut AdamW,
    schedule: &DiffusionSchedule,
    train: &[SequenceExample],
    valid: &[SequenceExample],
    cfg: &TrainerConfig,
    mut on_epoch: F,
) -> Result<FitOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSplit);
    }
    let eval_cfg = EvalConfig {
        ks: vec![5],
        sampler: cfg.valid_sampler,
        mask_history: cfg.mask_history,
    };
    let mut rows = Vec::new();
    let mut best: Option<(usize, f64, TrainState, AdamW)> = None;
    let mut strikes = 0usize;
    let mut stopped_early = false;

    for epoch in (cfg.start_epoch + 1)..=cfg.epochs {
        let start = Instant::now();
        let mut shuffle = rng::stream(cfg.seed, &[rng::BATCH_STREAM, epoch as u64]);
        let batches = make_batches(train, cfg.batch_size, cfg.negatives, &mut shuffle)?;
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for batch in &batches {
            let loss = train_step(state, schedule, batch, cfg, opt, epoch)?;
            loss_sum += loss * batch.examples.len() as f64;
            count += batch.examples.len();
        }
        let train_loss = loss_sum / count as f64;

        let report = evaluate_split(&state.params, &state.table, schedule, valid, &eval_cfg)?;
        let row = EpochRow {
            epoch,
            train_loss,
            valid_recall5: report.rows[0].recall,
            valid_ndcg5: report.rows[0].ndcg,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        rows.push(row);

        let improved = best
            .as_ref()
            .map_or(true, |(_, r, _, _)| row.valid_recall5 > *r);
        if improved {
            best = Some((epoch, row.valid_recall5, state.clone(), opt.clone()));
            strikes = 0;
        } else {
            strikes += 1;
            if strikes >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_valid_recall, best_state, best_opt) =
        best.unwrap_or_else(|| (cfg.start_epoch, 0.0, state.clone(), opt.clone()));
    Ok(FitOutcome {
        rows,
        best_epoch,
        best_valid_recall,
        best_state,
        best_opt,
        stopped_early,
    })
}

/// Loaded checkpoint: training state, optimizer, schedule settings, and the
/// last completed epoch.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: TrainState,
    pub opt: AdamW,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub epoch: usize,
}

const CHECKPOINT_FORMAT: &str = "preferdiff-checkpoint-v1";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn manifest_path(stem: &Path) -> PathBuf {
    let mut p = stem.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

fn tensors_path(stem: &Path) -> PathBuf {
    let mut p = stem.as_os_str().to_owned();
    p.push(".tensors");
    PathBuf::from(p)
}

/// Tensor payload order: persistent state first, then optimizer moments for
/// each trainable tensor.
fn checkpoint_tensor_list(state: &TrainState) -> Vec<(String, Vec<usize>)> {
    let mut list: Vec<(String, Vec<usize>)> = state
        .checkpoint_named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let trainable: Vec<(String, Vec<usize>)> = {
        let mut owned: Vec<(String, Vec<usize>)> = Vec::new();
        let mut state = state.clone();
        for (n, t) in state.trainable_named_mut() {
            owned.push((n, t.shape().to_vec()));
        }
        owned
    };
    for (name, shape) in trainable {
        list.push((format!("opt.m.{name}"), shape.clone()));
        list.push((format!("opt.v.{name}"), shape));
    }
    list
}

/// Writes `<stem>.manifest` (text header plus tensor directory, protected by
/// a content hash) and `<stem>.tensors` (little-endian f32 values in
/// directory order).
pub fn save_checkpoint<P: AsRef<Path>>(
    stem: P,
    state: &TrainState,
    opt: &AdamW,
    schedule: &DiffusionSchedule,
    epoch: usize,
) -> Result<(), TrainError> {
    let stem = stem.as_ref();
    let encoder = match state.params.encoder_kind() {
        EncoderKind::Gru => "gru",
        EncoderKind::Transformer => "transformer",
    };
    let table_mode = match state.table.mode() {
        TableMode::Trainable => "trainable",
        TableMode::Frozen => "frozen",
    };
    let cfg = opt.config();
    let mut head = String::new();
    let _ = writeln!(head, "format = {CHECKPOINT_FORMAT}");
    let _ = writeln!(head, "encoder = {encoder}");
    let _ = writeln!(head, "dim = {}", state.params.dim);
    let _ = writeln!(head, "cond_dim = {}", state.params.cond_dim);
    let _ = writeln!(head, "time_dim = {}", state.params.time_dim);
    let _ = writeln!(head, "max_len = {}", state.params.max_len);
    let _ = writeln!(head, "item_count = {}", state.table.len());
    let _ = writeln!(head, "table_mode = {table_mode}");
    let _ = writeln!(head, "t_max = {}", schedule.t_max());
    let _ = writeln!(head, "beta_start = {}", schedule.beta(1));
    let _ = writeln!(head, "beta_end = {}", schedule.beta(schedule.t_max()));
    let _ = writeln!(head, "epoch = {epoch}");
    let _ = writeln!(head, "opt_step = {}", opt.step_count());
    let _ = writeln!(head, "lr = {}", cfg.lr);
    let _ = writeln!(head, "weight_decay = {}", cfg.weight_decay);
    let _ = writeln!(head, "beta1 = {}", cfg.beta1);
    let _ = writeln!(head, "beta2 = {}", cfg.beta2);
    let _ = writeln!(head, "eps = {}", cfg.eps);
    let hash = fnv1a(head.as_bytes());
    let mut manifest = head;
    let _ = writeln!(manifest, "config_hash = {hash:016x}");

    let list = checkpoint_tensor_list(state);
    let mut blob: Vec<u8> = Vec::new();
    for (name, shape) in &list {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(manifest, "tensor = {} {}", name, dims.join(" "));
        let numel: usize = shape.iter().product();
        if let Some(rest) = name.strip_prefix("opt.m.") {
            write_moment(&mut blob, opt.moments(rest).map(|s| &s.m), numel);
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            write_moment(&mut blob, opt.moments(rest).map(|s| &s.v), numel);
        } else {
            let tensor = state
                .checkpoint_named()
                .into_iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .expect("listed tensor exists");
            for &v in tensor.values() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let mpath = manifest_path(stem);
    let tpath = tensors_path(stem);
    std::fs::write(&mpath, manifest).map_err(|e| io_err(&mpath, e))?;
    std::fs::write(&tpath, blob).map_err(|e| io_err(&tpath, e))?;
    Ok(())
}

fn write_moment(blob: &mut Vec<u8>, values: Option<&Vec<f64>>, numel: usize) {
    match values {
        Some(vals) => {
            debug_assert_eq!(vals.len(), numel);
            for &v in vals {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        None => blob.extend(std::iter::repeat(0u8).take(numel * 4)),
    }
}

fn bad(path: &Path, msg: impl Into<String>) -> TrainError {
    TrainError::BadCheckpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Reads a checkpoint pair written by [`save_checkpoint`]; validates the
/// format tag, the header hash, and every tensor length before
/// reconstructing the state.
pub fn load_checkpoint<P: AsRef<Path>>(stem: P) -> Result<Checkpoint, TrainError> {
    let stem = stem.as_ref();
    let mpath = manifest_path(stem);
    let tpath = tensors_path(stem);
    let text = std::fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;

    let mut keys: HashMap<String, String> = HashMap::new();
    let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
    let mut head = String::new();
    let mut hash_seen = false;
    for line in text.lines() {
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| bad(&mpath, format!("malformed line {line:?}")))?;
        match key {
            "config_hash" => {
                let expect = fnv1a(head.as_bytes());
                let got = u64::from_str_radix(value, 16)
                    .map_err(|_| bad(&mpath, format!("bad hash {value:?}")))?;
                if got != expect {
                    return Err(bad(
                        &mpath,
                        format!("header hash mismatch: manifest says {got:016x}, header hashes to {expect:016x}"),
                    ));
                }
                hash_seen = true;
            }
            "tensor" => {
                let mut parts = value.split_whitespace();
                let name = parts
                    .next()
                    .ok_or_else(|| bad(&mpath, "tensor line without a name"))?
                    .to_string();
                let dims = parts
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad(&mpath, format!("bad dims for tensor {name}")))?;
                tensors.push((name, dims));
            }
            _ => {
                head.push_str(line);
                head.push('\n');
                keys.insert(key.to_string(), value.to_string());
            }
        }
    }
    if !hash_seen {
        return Err(bad(&mpath, "missing config_hash"));
    }
    let get = |k: &str| -> Result<&String, TrainError> {
        keys.get(k)
            .ok_or_else(|| bad(&mpath, format!("missing key {k}")))
    };
    if get("format")? != CHECKPOINT_FORMAT {
        return Err(bad(&mpath, format!("unknown format {:?}", get("format")?)));
    }
    fn parse<T: std::str::FromStr>(path: &Path, k: &str, v: &str) -> Result<T, TrainError> {
        v.parse()
            .map_err(|_| bad(path, format!("key {k} has unparsable value {v:?}")))
    }
    let dim: usize = parse(&mpath, "dim", get("dim")?)?;
    let cond_dim: usize = parse(&mpath, "cond_dim", get("cond_dim")?)?;
    let time_dim: usize = parse(&mpath, "time_dim", get("time_dim")?)?;
    let max_len: usize = parse(&mpath, "max_len", get("max_len")?)?;
    let item_count: usize = parse(&mpath, "item_count", get("item_count")?)?;
    let t_max: usize = parse(&mpath, "t_max", get("t_max")?)?;
    let beta_start: f64 = parse(&mpath, "beta_start", get("beta_start")?)?;
    let beta_end: f64 = parse(&mpath, "beta_end", get("beta_end")?)?;
    let epoch: usize = parse(&mpath, "epoch", get("epoch")?)?;
    let opt_step: usize = parse(&mpath, "opt_step", get("opt_step")?)?;
    let encoder = match get("encoder")?.as_str() {
        "gru" => EncoderKind::Gru,
        "transformer" => EncoderKind::Transformer,
        other => return Err(bad(&mpath, format!("unknown encoder {other:?}"))),
    };
    let table_mode = match get("table_mode")?.as_str() {
        "trainable" => TableMode::Trainable,
        "frozen" => TableMode::Frozen,
        other => return Err(bad(&mpath, format!("unknown table mode {other:?}"))),
    };
    let opt_cfg = OptimizerConfig {
        lr: parse(&mpath, "lr", get("lr")?)?,
        weight_decay: parse(&mpath, "weight_decay", get("weight_decay")?)?,
        beta1: parse(&mpath, "beta1", get("beta1")?)?,
        beta2: parse(&mpath, "beta2", get("beta2")?)?,
        eps: parse(&mpath, "eps", get("eps")?)?,
    };

    let blob = std::fs::read(&tpath).map_err(|e| io_err(&tpath, e))?;
    let total: usize = tensors
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if blob.len() != total * 4 {
        return Err(bad(
            &tpath,
            format!(
                "expected {} bytes of tensor data, found {}",
                total * 4,
                blob.len()
            ),
        ));
    }

    let mut params = ModelParams::with_shape(dim, cond_dim, time_dim, max_len, encoder);
    let mut table_values: Option<Vec<f64>> = None;
    let mut opt = AdamW::new(opt_cfg);
    opt.step = opt_step;
    let mut moment_store: HashMap<String, Vec<f64>> = HashMap::new();

    let mut offset = 0usize;
    for (name, shape) in &tensors {
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = blob[offset..offset + numel * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        offset += numel * 4;
        if name == "table" {
            if shape.as_slice() != [item_count, dim] {
                return Err(bad(
                    &mpath,
                    format!("table dims {shape:?} disagree with header"),
                ));
            }
            table_values = Some(values);
        } else if name.starts_with("opt.m.") || name.starts_with("opt.v.") {
            moment_store.insert(name.clone(), values);
        } else {
            let mut found = false;
            for (pname, tensor) in params.named_tensors_mut() {
                if &pname == name {
                    if tensor.shape() != shape.as_slice() {
                        return Err(bad(
                            &mpath,
                            format!(
                                "tensor {name} has dims {shape:?}, model expects {:?}",
                                tensor.shape()
                            ),
                        ));
                    }
                    tensor.values_mut().copy_from_slice(&values);
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(bad(&mpath, format!("unexpected tensor {name:?}")));
            }
        }
    }
    let table_values =
        table_values.ok_or_else(|| bad(&mpath, "checkpoint is missing the item table"))?;
    let matrix = Tensor::new(vec![item_count, dim], table_values)
        .map_err(|e| bad(&mpath, format!("table buffer: {e}")))?;
    let table = ItemEmbeddingTable::from_matrix(matrix, table_mode);

    // Pair up m/v buffers into optimizer slots.
    let names: Vec<String> = moment_store
        .keys()
        .filter_map(|k| k.strip_prefix("opt.m.").map(|s| s.to_string()))
        .collect();
    for name in names {
        let m = moment_store.remove(&format!("opt.m.{name}"));
        let v = moment_store.remove(&format!("opt.v.{name}"));
        match (m, v) {
            (Some(m), Some(v)) => opt.set_moments(name, m, v),
            _ => {
                return Err(bad(
                    &mpath,
                    format!("moment buffers for {name} are incomplete"),
                ))
            }
        }
    }
    if let Some(orphan) = moment_store.keys().next() {
        return Err(bad(
            &mpath,
            format!("moment buffer {orphan:?} has no partner"),
        ));
    }

    Ok(Checkpoint {
        state: TrainState::new(params, table),
        opt,
        t_max,
        beta_start,
        beta_end,
        epoch,
    })
}
