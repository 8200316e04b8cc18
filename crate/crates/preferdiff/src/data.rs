//! Interaction logs, splits, batching, and synthetic data.
//!
//! Interaction files are plain text, one `(user, item, timestamp)` row per
//! line, tab- or comma-separated. Users and items may be arbitrary tokens;
//! they are densely re-indexed after filtering. Histories are fixed-length
//! and left-padded with the reserved id `n_items`.

use crate::model::{ItemEmbeddingTable, TableMode};
use crate::numerics::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(
        "{path}:{line}: expected 'user<TAB>item<TAB>timestamp' (or comma-separated), got {got:?}"
    )]
    MalformedRow {
        path: String,
        line: usize,
        got: String,
    },
    #[error("{path}:{line}: timestamp {value:?} is not an integer")]
    BadTimestamp {
        path: String,
        line: usize,
        value: String,
    },
    #[error("no interactions survive min_count={min_count} filtering")]
    EmptyAfterFilter { min_count: usize },
    #[error("need at least 3 user sequences to split, found {found}")]
    TooFewSequences { found: usize },
    #[error("split ratios must all be positive")]
    BadSplitRatios,
    #[error("batch size must be at least 2 to draw in-batch negatives")]
    BatchTooSmall,
    #[error("batch size must be nonzero")]
    EmptyBatch,
    #[error("{path}:{line}: embedding file: {msg}")]
    BadEmbeddingFile {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("embeddings file has {file} rows but the interaction log indexes {log} items")]
    EmbeddingCountMismatch { file: usize, log: usize },
    #[error("invalid synthetic config: {msg}")]
    BadSynthConfig { msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One user's chronologically ordered interactions, densely re-indexed.
#[derive(Debug, Clone)]
pub struct UserSequence {
    pub user: u32,
    pub items: Vec<u32>,
    pub last_timestamp: i64,
}

#[derive(Debug, Clone)]
pub struct InteractionLog {
    pub sequences: Vec<UserSequence>,
    pub n_items: usize,
    /// Dense item id -> original token.
    pub item_names: Vec<String>,
    /// Dense user id -> original token.
    pub user_names: Vec<String>,
}

impl InteractionLog {
    pub fn pad_id(&self) -> u32 {
        self.n_items as u32
    }
}

/// Parses an interaction file without filtering; row order is preserved.
fn parse_rows(path: &Path) -> Result<Vec<(String, String, i64)>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let display = path.display().to_string();
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = if raw.contains('\t') {
            raw.split('\t').collect()
        } else {
            raw.split(',').collect()
        };
        if fields.len() != 3 {
            return Err(DataError::MalformedRow {
                path: display,
                line,
                got: raw.to_string(),
            });
        }
        let user = fields[0].trim().to_string();
        let item = fields[1].trim().to_string();
        let ts_text = fields[2].trim();
        let ts: i64 = ts_text.parse().map_err(|_| DataError::BadTimestamp {
            path: display.clone(),
            line,
            value: ts_text.to_string(),
        })?;
        if user.is_empty() || item.is_empty() {
            return Err(DataError::MalformedRow {
                path: display,
                line,
                got: raw.to_string(),
            });
        }
        rows.push((user, item, ts));
    }
    Ok(rows)
}

/// Builds a log from raw rows: drops users and items with fewer than
/// `min_count` interactions until the counts stabilize, then re-indexes both
/// densely in first-occurrence order and sorts each user's items by timestamp
/// (stable, so equal timestamps keep file order).
pub fn log_from_rows(
    rows: Vec<(String, String, i64)>,
    min_count: usize,
) -> Result<InteractionLog, DataError> {
    let mut keep: Vec<(String, String, i64)> = rows;
    loop {
        let mask: Vec<bool> = {
            let mut user_counts: HashMap<&str, usize> = HashMap::new();
            let mut item_counts: HashMap<&str, usize> = HashMap::new();
            for (u, i, _) in &keep {
                *user_counts.entry(u).or_default() += 1;
                *item_counts.entry(i).or_default() += 1;
            }
            keep.iter()
                .map(|(u, i, _)| {
                    user_counts[u.as_str()] >= min_count && item_counts[i.as_str()] >= min_count
                })
                .collect()
        };
        if mask.iter().all(|&k| k) {
            break;
        }
        let mut it = mask.into_iter();
        keep.retain(|_| it.next().expect("mask length"));
    }
    if keep.is_empty() {
        return Err(DataError::EmptyAfterFilter { min_count });
    }

    let mut user_ids: HashMap<String, u32> = HashMap::new();
    let mut item_ids: HashMap<String, u32> = HashMap::new();
    let mut user_names = Vec::new();
    let mut item_names = Vec::new();
    let mut per_user: Vec<Vec<(u32, i64)>> = Vec::new();
    for (u, i, ts) in keep {
        let uid = *user_ids.entry(u.clone()).or_insert_with(|| {
            user_names.push(u.clone());
            per_user.push(Vec::new());
            (user_names.len() - 1) as u32
        });
        let iid = *item_ids.entry(i.clone()).or_insert_with(|| {
            item_names.push(i.clone());
            (item_names.len() - 1) as u32
        });
        per_user[uid as usize].push((iid, ts));
    }

    let sequences = per_user
        .into_iter()
        .enumerate()
        .map(|(uid, mut items)| {
            items.sort_by_key(|&(_, ts)| ts);
            let last_timestamp = items.last().map(|&(_, ts)| ts).unwrap_or(0);
            UserSequence {
                user: uid as u32,
                items: items.into_iter().map(|(i, _)| i).collect(),
                last_timestamp,
            }
        })
        .collect();

    Ok(InteractionLog {
        sequences,
        n_items: item_names.len(),
        item_names,
        user_names,
    })
}

pub fn load_interactions<P: AsRef<Path>>(
    path: P,
    min_count: usize,
) -> Result<InteractionLog, DataError> {
    log_from_rows(parse_rows(path.as_ref())?, min_count)
}

/// Fixed-length training example: left-padded history and the next item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceExample {
    pub user: u32,
    pub history: Vec<u32>,
    pub target: u32,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<SequenceExample>,
    pub valid: Vec<SequenceExample>,
    pub test: Vec<SequenceExample>,
}

fn to_example(seq: &UserSequence, max_len: usize, pad: u32) -> SequenceExample {
    // Keep only the most recent max_len + 1 items.
    let items = if seq.items.len() > max_len + 1 {
        &seq.items[seq.items.len() - (max_len + 1)..]
    } else {
        &seq.items[..]
    };
    let (history_items, target) = items.split_at(items.len() - 1);
    let mut history = vec![pad; max_len - history_items.len()];
    history.extend_from_slice(history_items);
    SequenceExample {
        user: seq.user,
        history,
        target: target[0],
    }
}

/// Every prefix of the sequence becomes one example: the target at position j
/// conditions on the (at most max_len) items before it.
fn to_windows(seq: &UserSequence, max_len: usize, pad: u32, out: &mut Vec<SequenceExample>) {
    for j in 1..seq.items.len() {
        let start = j.saturating_sub(max_len);
        let history_items = &seq.items[start..j];
        let mut history = vec![pad; max_len - history_items.len()];
        history.extend_from_slice(history_items);
        out.push(SequenceExample {
            user: seq.user,
            history,
            target: seq.items[j],
        });
    }
}

fn partition_users(
    log: &InteractionLog,
    ratios: (u32, u32, u32),
) -> Result<(Vec<usize>, usize, usize), DataError> {
    let (a, b, c) = ratios;
    if a == 0 || b == 0 || c == 0 {
        return Err(DataError::BadSplitRatios);
    }
    let n = log.sequences.len();
    if n < 3 {
        return Err(DataError::TooFewSequences { found: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (log.sequences[i].last_timestamp, log.sequences[i].user));

    let sum = (a + b + c) as usize;
    let mut n_train = n * a as usize / sum;
    let mut n_valid = n * b as usize / sum;
    if n_valid == 0 {
        n_valid = 1;
    }
    if n - n_train - n_valid == 0 || n_train + n_valid > n {
        n_train = n - n_valid - 1;
    }
    if n_train == 0 {
        n_train = 1;
    }
    Ok((order, n_train, n_valid))
}

/// Splits whole users by the time of their final interaction (earliest go to
/// train), breaking timestamp ties by user id. Counts follow the ratios with
/// an adjustment that keeps every split non-empty.
pub fn user_split(
    log: &InteractionLog,
    ratios: (u32, u32, u32),
    max_len: usize,
) -> Result<Splits, DataError> {
    let (order, n_train, n_valid) = partition_users(log, ratios)?;
    let pad = log.pad_id();
    let make = |idx: &[usize]| {
        idx.iter()
            .map(|&i| to_example(&log.sequences[i], max_len, pad))
            .collect::<Vec<_>>()
    };
    Ok(Splits {
        train: make(&order[..n_train]),
        valid: make(&order[n_train..n_train + n_valid]),
        test: make(&order[n_train + n_valid..]),
    })
}

/// Same user partition as [`user_split`], but every prefix of a training
/// user's sequence becomes its own example, which multiplies the training set
/// by roughly the average sequence length. Validation and test users keep the
/// single final-item example so evaluation stays leave-one-out.
pub fn user_split_windowed(
    log: &InteractionLog,
    ratios: (u32, u32, u32),
    max_len: usize,
) -> Result<Splits, DataError> {
    let (order, n_train, n_valid) = partition_users(log, ratios)?;
    let pad = log.pad_id();
    let mut train = Vec::new();
    for &i in &order[..n_train] {
        to_windows(&log.sequences[i], max_len, pad, &mut train);
    }
    let make = |idx: &[usize]| {
        idx.iter()
            .map(|&i| to_example(&log.sequences[i], max_len, pad))
            .collect::<Vec<_>>()
    };
    Ok(Splits {
        train,
        valid: make(&order[n_train..n_train + n_valid]),
        test: make(&order[n_train + n_valid..]),
    })
}

/// One training example with its sampled in-batch negatives.
#[derive(Debug, Clone)]
pub struct BatchExample {
    /// Position of the example in the epoch's example slice; stable across
    /// epochs, so it can key a per-example noise stream.
    pub index: usize,
    pub example: SequenceExample,
    pub negatives: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub examples: Vec<BatchExample>,
}

/// Shuffles the epoch, chunks it, and attaches to each example the distinct
/// targets of its batch peers (minus its own target), subsampled without
/// replacement to at most `negatives`. The trailing short batch is kept.
pub fn make_batches(
    examples: &[SequenceExample],
    batch_size: usize,
    negatives: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Batch>, DataError> {
    if batch_size == 0 {
        return Err(DataError::EmptyBatch);
    }
    if negatives >= 1 && batch_size < 2 {
        return Err(DataError::BatchTooSmall);
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let targets: Vec<u32> = chunk.iter().map(|&i| examples[i].target).collect();
        let mut items = Vec::with_capacity(chunk.len());
        for (pos, &i) in chunk.iter().enumerate() {
            let own = targets[pos];
            let mut pool: Vec<u32> = Vec::new();
            for (j, &t) in targets.iter().enumerate() {
                if j != pos && t != own && !pool.contains(&t) {
                    pool.push(t);
                }
            }
            if pool.len() > negatives {
                // Partial Fisher-Yates: the first `negatives` entries become a
                // uniform draw without replacement.
                for k in 0..negatives {
                    let j = rng.gen_range(k..pool.len());
                    pool.swap(k, j);
                }
                pool.truncate(negatives);
            }
            items.push(BatchExample {
                index: i,
                example: examples[i].clone(),
                negatives: pool,
            });
        }
        batches.push(Batch { examples: items });
    }
    Ok(batches)
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub latent_dim: usize,
    /// Probability that a draw ignores the user's preferred cluster.
    pub noise: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub rows: Vec<(u32, u32, i64)>,
    /// Ground-truth cluster per item.
    pub item_cluster: Vec<u32>,
    /// Latent item vectors near their cluster center; importable as a frozen
    /// embedding table.
    pub embeddings: Tensor,
}

/// Clustered interaction generator: every user has one preferred cluster and
/// draws items from it, except for a `noise` fraction drawn uniformly from
/// the whole catalogue.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SyntheticData, DataError> {
    if cfg.users == 0 || cfg.items == 0 {
        return Err(DataError::BadSynthConfig {
            msg: "users and items must be positive".into(),
        });
    }
    if cfg.clusters == 0 || cfg.clusters > cfg.items {
        return Err(DataError::BadSynthConfig {
            msg: format!("clusters must lie in 1..={}", cfg.items),
        });
    }
    if !(0.0..=1.0).contains(&cfg.noise) {
        return Err(DataError::BadSynthConfig {
            msg: format!("noise {} outside [0, 1]", cfg.noise),
        });
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(DataError::BadSynthConfig {
            msg: "sequence length bounds must satisfy 1 <= min <= max".into(),
        });
    }
    if cfg.latent_dim == 0 {
        return Err(DataError::BadSynthConfig {
            msg: "latent_dim must be positive".into(),
        });
    }

    let mut rng = crate::rng::stream(cfg.seed, &[0x5E]);
    let item_cluster: Vec<u32> = (0..cfg.items)
        .map(|i| (i * cfg.clusters / cfg.items) as u32)
        .collect();
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); cfg.clusters];
    for (i, &c) in item_cluster.iter().enumerate() {
        members[c as usize].push(i as u32);
    }

    let centers: Vec<Vec<f64>> = (0..cfg.clusters)
        .map(|_| {
            (0..cfg.latent_dim)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        })
        .collect();
    let mut emb = Vec::with_capacity(cfg.items * cfg.latent_dim);
    for i in 0..cfg.items {
        let center = &centers[item_cluster[i] as usize];
        for &c in center {
            let jitter: f64 = rng.sample(rand_distr::StandardNormal);
            emb.push(c + 0.25 * jitter);
        }
    }
    let embeddings = Tensor::new(vec![cfg.items, cfg.latent_dim], emb).expect("sized buffer");

    let mut rows = Vec::new();
    for u in 0..cfg.users {
        let cluster = rng.gen_range(0..cfg.clusters);
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        for pos in 0..len {
            let item = if rng.gen::<f64>() < cfg.noise {
                rng.gen_range(0..cfg.items) as u32
            } else {
                let m = &members[cluster];
                m[rng.gen_range(0..m.len())]
            };
            rows.push((u as u32, item, pos as i64));
        }
    }
    Ok(SyntheticData {
        rows,
        item_cluster,
        embeddings,
    })
}

pub fn write_interactions<P: AsRef<Path>>(
    path: P,
    rows: &[(u32, u32, i64)],
) -> Result<(), DataError> {
    let mut out = String::new();
    for (u, i, ts) in rows {
        writeln!(out, "{u}\t{i}\t{ts}").expect("string write");
    }
    std::fs::write(path.as_ref(), out).map_err(|e| io_err(path.as_ref(), e))
}

pub fn write_clusters<P: AsRef<Path>>(path: P, clusters: &[u32]) -> Result<(), DataError> {
    let mut out = String::from("item,cluster\n");
    for (i, c) in clusters.iter().enumerate() {
        writeln!(out, "{i},{c}").expect("string write");
    }
    std::fs::write(path.as_ref(), out).map_err(|e| io_err(path.as_ref(), e))
}

/// Writes a dense matrix in the text-embedding format: a `N d` header, then
/// one whitespace-separated row per item.
pub fn write_embeddings<P: AsRef<Path>>(path: P, matrix: &Tensor) -> Result<(), DataError> {
    debug_assert_eq!(matrix.shape().len(), 2);
    let (n, d) = (matrix.shape()[0], matrix.shape()[1]);
    let mut out = String::new();
    writeln!(out, "{n} {d}").expect("string write");
    for i in 0..n {
        let row = &matrix.values()[i * d..(i + 1) * d];
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", line.join(" ")).expect("string write");
    }
    std::fs::write(path.as_ref(), out).map_err(|e| io_err(path.as_ref(), e))
}

/// Reads a text-embedding file into a frozen table. When `expected_items` is
/// given, the row count must match the interaction log's item index.
pub fn import_text_embeddings<P: AsRef<Path>>(
    path: P,
    expected_items: Option<usize>,
) -> Result<ItemEmbeddingTable, DataError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| DataError::BadEmbeddingFile {
        path: display.clone(),
        line: 1,
        msg: "missing 'N d' header".into(),
    })?;
    let head: Vec<&str> = header.split_whitespace().collect();
    let parse_head = |s: &str| s.parse::<usize>().ok();
    let (n, d) = match head.as_slice() {
        [n, d] => match (parse_head(n), parse_head(d)) {
            (Some(n), Some(d)) if n > 0 && d > 0 => (n, d),
            _ => {
                return Err(DataError::BadEmbeddingFile {
                    path: display,
                    line: 1,
                    msg: format!("header {header:?} is not two positive integers"),
                })
            }
        },
        _ => {
            return Err(DataError::BadEmbeddingFile {
                path: display,
                line: 1,
                msg: format!("header {header:?} is not two positive integers"),
            })
        }
    };

    let mut values = Vec::with_capacity(n * d);
    let mut rows_read = 0;
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        if rows_read == n {
            return Err(DataError::BadEmbeddingFile {
                path: display,
                line,
                msg: format!("more than the declared {n} rows"),
            });
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != d {
            return Err(DataError::BadEmbeddingFile {
                path: display,
                line,
                msg: format!("expected {d} values, got {}", fields.len()),
            });
        }
        for f in fields {
            let v: f64 = f.parse().map_err(|_| DataError::BadEmbeddingFile {
                path: display.clone(),
                line,
                msg: format!("value {f:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(DataError::BadEmbeddingFile {
                    path: display,
                    line,
                    msg: format!("value {f:?} is not finite"),
                });
            }
            values.push(v);
        }
        rows_read += 1;
    }
    if rows_read != n {
        return Err(DataError::BadEmbeddingFile {
            path: display,
            line: 0,
            msg: format!("declared {n} rows, found {rows_read}"),
        });
    }
    if let Some(expected) = expected_items {
        if expected != n {
            return Err(DataError::EmbeddingCountMismatch {
                file: n,
                log: expected,
            });
        }
    }
    let matrix = Tensor::new(vec![n, d], values).expect("sized buffer");
    Ok(ItemEmbeddingTable::from_matrix(matrix, TableMode::Frozen))
}
