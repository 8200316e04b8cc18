//! Full-catalogue ranking evaluation.
//!
//! Each user's history is encoded, a clean embedding is generated by the
//! guided reverse process, and every item in the catalogue is scored by dot
//! product. Ranks use the pessimistic convention: ties count against the
//! target. Per-user noise streams are derived from the run seed and the user
//! index, so results do not depend on thread count or visit order.

use crate::data::SequenceExample;
use crate::model::{encode_sequence, ItemEmbeddingTable, ModelError, ModelParams, TableBinding};
use crate::numerics::{Tape, Tensor, TensorError};
use crate::rng;
use crate::sampler::{sample, SamplerConfig, SamplerError};
use crate::schedule::DiffusionSchedule;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what} must not be empty")]
    EmptyInput { what: &'static str },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("target {target} out of range for {n} scores")]
    TargetOutOfRange { target: usize, n: usize },
    #[error("covariance needs at least 2 rows, got {rows}")]
    NeedTwoRows { rows: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Competition rank of `target` with pessimistic tie handling:
/// `1 + #{j != target : s_j > s_t} + #{j != target : s_j == s_t}`.
///
/// Ids in `masked` are removed from the candidate set (the target itself and
/// ids beyond the score range are never masked).
pub fn rank_target(
    scores: &[f64],
    target: usize,
    masked: Option<&[u32]>,
) -> Result<usize, EvalError> {
    let n = scores.len();
    if n == 0 {
        return Err(EvalError::EmptyInput { what: "scores" });
    }
    if target >= n {
        return Err(EvalError::TargetOutOfRange { target, n });
    }
    let mut skip = vec![false; n];
    if let Some(ids) = masked {
        for &id in ids {
            let id = id as usize;
            if id < n && id != target {
                skip[id] = true;
            }
        }
    }
    let s_t = scores[target];
    let mut rank = 1;
    for (j, &s) in scores.iter().enumerate() {
        if j == target || skip[j] {
            continue;
        }
        if s >= s_t {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Fraction of ranks at or above the cutoff.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyInput { what: "ranks" });
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Mean of `1 / log2(rank + 1)` over ranks within the cutoff, zero otherwise.
/// With a single relevant item per user this is the full normalized
/// discounted cumulative gain.
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyInput { what: "ranks" });
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let total: f64 = ranks
        .iter()
        .map(|&r| {
            if r <= k {
                1.0 / ((r as f64) + 1.0).log2()
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / ranks.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct CovarianceDiagnostic {
    /// Mean of the diagonal of the sample covariance (per-coordinate variance).
    pub diag_mean: f64,
    /// Root mean square of the off-diagonal entries (cross-coordinate
    /// correlation); zero for one-dimensional data.
    pub offdiag_rms: f64,
}

/// Sample covariance summary of a row matrix (rows are observations), using
/// the unbiased `n - 1` normalization.
pub fn covariance_diagnostic(rows: &Tensor) -> Result<CovarianceDiagnostic, EvalError> {
    let shape = rows.shape();
    if shape.len() != 2 {
        return Err(EvalError::EmptyInput {
            what: "covariance row matrix",
        });
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(EvalError::NeedTwoRows { rows: n });
    }
    let vals = rows.values();
    let mut means = vec![0.0; d];
    for row in vals.chunks_exact(d) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in means.iter_mut() {
        *m /= n as f64;
    }
    let mut diag_sum = 0.0;
    let mut off_sq_sum = 0.0;
    for i in 0..d {
        for j in i..d {
            let mut c = 0.0;
            for row in vals.chunks_exact(d) {
                c += (row[i] - means[i]) * (row[j] - means[j]);
            }
            c /= (n - 1) as f64;
            if i == j {
                diag_sum += c;
            } else {
                off_sq_sum += 2.0 * c * c;
            }
        }
    }
    let offdiag_rms = if d > 1 {
        (off_sq_sum / (d * d - d) as f64).sqrt()
    } else {
        0.0
    };
    Ok(CovarianceDiagnostic {
        diag_mean: diag_sum / d as f64,
        offdiag_rms,
    })
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Rank cutoffs to report.
    pub ks: Vec<usize>,
    /// Reverse-process settings; the seed is the base for per-user streams.
    pub sampler: SamplerConfig,
    /// Exclude already-seen items from the candidate set.
    pub mask_history: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct MetricRow {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Per-example target ranks, in input order.
    pub ranks: Vec<usize>,
    pub rows: Vec<MetricRow>,
}

/// Scores every catalogue item against the generated embedding.
fn score_catalogue(table: &ItemEmbeddingTable, x0: &Tensor) -> Vec<f64> {
    let d = table.dim();
    let x = x0.values();
    table
        .matrix()
        .values()
        .chunks_exact(d)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Ranks every example's target over the full catalogue and aggregates the
/// requested cutoffs. Examples are processed in parallel; per-user generator
/// seeds make the output independent of the thread pool.
pub fn evaluate_split(
    params: &ModelParams,
    table: &ItemEmbeddingTable,
    schedule: &DiffusionSchedule,
    examples: &[SequenceExample],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyInput {
            what: "evaluation split",
        });
    }
    if cfg.ks.is_empty() {
        return Err(EvalError::EmptyInput { what: "cutoffs" });
    }
    let ranks: Vec<usize> = examples
        .par_iter()
        .enumerate()
        .map(|(idx, ex)| -> Result<usize, EvalError> {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let mut binding = TableBinding::new(table, false);
            let cond = encode_sequence(&mut tape, &bound.vars, &mut binding, table, &ex.history)?;
            let user_cfg = SamplerConfig {
                seed: rng::mix(cfg.sampler.seed, &[rng::EVAL_STREAM, idx as u64]),
                ..cfg.sampler
            };
            let x0 = sample(&mut tape, &bound.vars, schedule, &cond, &user_cfg)?;
            let scores = score_catalogue(table, &x0);
            let mask = cfg.mask_history.then_some(ex.history.as_slice());
            Ok(rank_target(&scores, ex.target as usize, mask)?)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let rows = cfg
        .ks
        .iter()
        .map(|&k| -> Result<MetricRow, EvalError> {
            Ok(MetricRow {
                k,
                recall: recall_at_k(&ranks, k)?,
                ndcg: ndcg_at_k(&ranks, k)?,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport { ranks, rows })
}
