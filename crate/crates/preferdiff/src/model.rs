//! Item embeddings, sequence encoder, and the conditional denoiser.
//!
//! All forward passes run on a [`Tape`] so the same code path serves training
//! (gradients on) and sampling (constants only). Parameters live in plain
//! tensors and are bound to a tape per pass.

use crate::numerics::{Tape, Tensor, TensorError, VarId};
use rand::Rng;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown item id {id}; table holds {count} items")]
    UnknownItem { id: u32, count: usize },
    #[error("history length {got} exceeds encoder capacity {capacity}")]
    HistoryTooLong { got: usize, capacity: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableMode {
    /// Rows are free parameters, initialized from a standard normal.
    Trainable,
    /// Rows come from an external source and never receive updates.
    Frozen,
}

/// Dense `[n_items, dim]` embedding matrix plus the reserved padding id `n_items`.
#[derive(Debug, Clone)]
pub struct ItemEmbeddingTable {
    mode: TableMode,
    dim: usize,
    rows: Tensor,
}

impl ItemEmbeddingTable {
    pub fn standard_normal<R: Rng>(n_items: usize, dim: usize, rng: &mut R) -> Self {
        Self::scaled_normal(n_items, dim, 1.0, rng)
    }

    pub fn scaled_normal<R: Rng>(n_items: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let mut rows = Tensor::randn(vec![n_items, dim], rng);
        for v in rows.values_mut() {
            *v *= scale;
        }
        Self {
            mode: TableMode::Trainable,
            dim,
            rows,
        }
    }

    pub fn from_matrix(rows: Tensor, mode: TableMode) -> Self {
        debug_assert_eq!(rows.shape().len(), 2);
        let dim = rows.shape()[1];
        Self { mode, dim, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> TableMode {
        self.mode
    }

    /// Reserved id marking padding positions in fixed-length histories.
    pub fn pad_id(&self) -> u32 {
        self.len() as u32
    }

    pub fn matrix(&self) -> &Tensor {
        &self.rows
    }

    pub fn matrix_mut(&mut self) -> &mut Tensor {
        &mut self.rows
    }

    pub fn row(&self, id: u32) -> Result<Tensor, ModelError> {
        if id as usize >= self.len() {
            return Err(ModelError::UnknownItem {
                id,
                count: self.len(),
            });
        }
        let start = id as usize * self.dim;
        Ok(Tensor::vector(
            self.rows.values()[start..start + self.dim].to_vec(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Gru,
    Transformer,
}

#[derive(Debug, Clone)]
pub struct GruWeights {
    pub wz: Tensor,
    pub uz: Tensor,
    pub bz: Tensor,
    pub wr: Tensor,
    pub ur: Tensor,
    pub br: Tensor,
    pub wh: Tensor,
    pub uh: Tensor,
    pub bh: Tensor,
}

/// Single block, two heads, causal by construction (only the last position is
/// decoded and it attends to every earlier position). No normalization layers;
/// at depth one the residual paths stay well scaled.
#[derive(Debug, Clone)]
pub struct TransformerWeights {
    pub w_in: Tensor,
    pub pos: Vec<Tensor>,
    pub wq: [Tensor; 2],
    pub wk: [Tensor; 2],
    pub wv: [Tensor; 2],
    pub wo: Tensor,
    pub ff1: Tensor,
    pub fb1: Tensor,
    pub ff2: Tensor,
    pub fb2: Tensor,
}

#[derive(Debug, Clone)]
pub enum EncoderWeights {
    Gru(GruWeights),
    Transformer(TransformerWeights),
}

/// Denoiser head: two tanh hidden layers of width `4 * dim`, bias-free output.
#[derive(Debug, Clone)]
pub struct MlpWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dim: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub max_len: usize,
    pub encoder: EncoderWeights,
    pub mlp: MlpWeights,
    pub phi: Tensor,
}

fn init_matrix<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Tensor {
    let std = 1.0 / (inp as f64).sqrt();
    let mut t = Tensor::randn(vec![out, inp], rng);
    for v in t.values_mut() {
        *v *= std;
    }
    t
}

impl ModelParams {
    /// Fresh parameters: fan-in-scaled normal weights, zero biases, and a
    /// standard-normal unconditional token.
    pub fn init<R: Rng>(
        dim: usize,
        cond_dim: usize,
        time_dim: usize,
        max_len: usize,
        kind: EncoderKind,
        rng: &mut R,
    ) -> Self {
        let encoder = match kind {
            EncoderKind::Gru => EncoderWeights::Gru(GruWeights {
                wz: init_matrix(cond_dim, dim, rng),
                uz: init_matrix(cond_dim, cond_dim, rng),
                bz: Tensor::zeros(vec![cond_dim]),
                wr: init_matrix(cond_dim, dim, rng),
                ur: init_matrix(cond_dim, cond_dim, rng),
                br: Tensor::zeros(vec![cond_dim]),
                wh: init_matrix(cond_dim, dim, rng),
                uh: init_matrix(cond_dim, cond_dim, rng),
                bh: Tensor::zeros(vec![cond_dim]),
            }),
            EncoderKind::Transformer => {
                let dk = cond_dim / 2;
                let ff = 2 * cond_dim;
                EncoderWeights::Transformer(TransformerWeights {
                    w_in: init_matrix(cond_dim, dim, rng),
                    pos: (0..max_len)
                        .map(|_| Tensor::randn(vec![cond_dim], rng))
                        .collect(),
                    wq: [
                        init_matrix(dk, cond_dim, rng),
                        init_matrix(dk, cond_dim, rng),
                    ],
                    wk: [
                        init_matrix(dk, cond_dim, rng),
                        init_matrix(dk, cond_dim, rng),
                    ],
                    wv: [
                        init_matrix(dk, cond_dim, rng),
                        init_matrix(dk, cond_dim, rng),
                    ],
                    wo: init_matrix(cond_dim, cond_dim, rng),
                    ff1: init_matrix(ff, cond_dim, rng),
                    fb1: Tensor::zeros(vec![ff]),
                    ff2: init_matrix(cond_dim, ff, rng),
                    fb2: Tensor::zeros(vec![cond_dim]),
                })
            }
        };
        let hidden = 4 * dim;
        let input = dim + cond_dim + time_dim;
        let mlp = MlpWeights {
            w1: init_matrix(hidden, input, rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: init_matrix(hidden, hidden, rng),
            b2: Tensor::zeros(vec![hidden]),
            w3: init_matrix(dim, hidden, rng),
        };
        let phi = Tensor::randn(vec![cond_dim], rng);
        Self {
            dim,
            cond_dim,
            time_dim,
            max_len,
            encoder,
            mlp,
            phi,
        }
    }

    /// Zero-filled parameters with the same structure; used when loading
    /// serialized weights into a known shape.
    pub fn with_shape(
        dim: usize,
        cond_dim: usize,
        time_dim: usize,
        max_len: usize,
        kind: EncoderKind,
    ) -> Self {
        use rand_chacha::rand_core::SeedableRng;
        // Shape-only construction: init with a throwaway generator, then clear.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut params = Self::init(dim, cond_dim, time_dim, max_len, kind, &mut rng);
        for (_, t) in params.named_tensors_mut() {
            for v in t.values_mut() {
                *v = 0.0;
            }
        }
        params
    }

    pub fn encoder_kind(&self) -> EncoderKind {
        match self.encoder {
            EncoderWeights::Gru(_) => EncoderKind::Gru,
            EncoderWeights::Transformer(_) => EncoderKind::Transformer,
        }
    }

    /// Stable parameter registry; checkpoint blobs and optimizer slots follow
    /// this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        match &self.encoder {
            EncoderWeights::Gru(g) => {
                out.push(("encoder.wz".into(), &g.wz));
                out.push(("encoder.uz".into(), &g.uz));
                out.push(("encoder.bz".into(), &g.bz));
                out.push(("encoder.wr".into(), &g.wr));
                out.push(("encoder.ur".into(), &g.ur));
                out.push(("encoder.br".into(), &g.br));
                out.push(("encoder.wh".into(), &g.wh));
                out.push(("encoder.uh".into(), &g.uh));
                out.push(("encoder.bh".into(), &g.bh));
            }
            EncoderWeights::Transformer(t) => {
                out.push(("encoder.w_in".into(), &t.w_in));
                for (i, p) in t.pos.iter().enumerate() {
                    out.push((format!("encoder.pos.{i}"), p));
                }
                for h in 0..2 {
                    out.push((format!("encoder.wq.{h}"), &t.wq[h]));
                }
                for h in 0..2 {
                    out.push((format!("encoder.wk.{h}"), &t.wk[h]));
                }
                for h in 0..2 {
                    out.push((format!("encoder.wv.{h}"), &t.wv[h]));
                }
                out.push(("encoder.wo".into(), &t.wo));
                out.push(("encoder.ff1".into(), &t.ff1));
                out.push(("encoder.fb1".into(), &t.fb1));
                out.push(("encoder.ff2".into(), &t.ff2));
                out.push(("encoder.fb2".into(), &t.fb2));
            }
        }
        out.push(("denoiser.w1".into(), &self.mlp.w1));
        out.push(("denoiser.b1".into(), &self.mlp.b1));
        out.push(("denoiser.w2".into(), &self.mlp.w2));
        out.push(("denoiser.b2".into(), &self.mlp.b2));
        out.push(("denoiser.w3".into(), &self.mlp.w3));
        out.push(("phi".into(), &self.phi));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        match &mut self.encoder {
            EncoderWeights::Gru(g) => {
                out.push(("encoder.wz".into(), &mut g.wz));
                out.push(("encoder.uz".into(), &mut g.uz));
                out.push(("encoder.bz".into(), &mut g.bz));
                out.push(("encoder.wr".into(), &mut g.wr));
                out.push(("encoder.ur".into(), &mut g.ur));
                out.push(("encoder.br".into(), &mut g.br));
                out.push(("encoder.wh".into(), &mut g.wh));
                out.push(("encoder.uh".into(), &mut g.uh));
                out.push(("encoder.bh".into(), &mut g.bh));
            }
            EncoderWeights::Transformer(t) => {
                out.push(("encoder.w_in".into(), &mut t.w_in));
                for (i, p) in t.pos.iter_mut().enumerate() {
                    out.push((format!("encoder.pos.{i}"), p));
                }
                let [q0, q1] = &mut t.wq;
                out.push(("encoder.wq.0".into(), q0));
                out.push(("encoder.wq.1".into(), q1));
                let [k0, k1] = &mut t.wk;
                out.push(("encoder.wk.0".into(), k0));
                out.push(("encoder.wk.1".into(), k1));
                let [v0, v1] = &mut t.wv;
                out.push(("encoder.wv.0".into(), v0));
                out.push(("encoder.wv.1".into(), v1));
                out.push(("encoder.wo".into(), &mut t.wo));
                out.push(("encoder.ff1".into(), &mut t.ff1));
                out.push(("encoder.fb1".into(), &mut t.fb1));
                out.push(("encoder.ff2".into(), &mut t.ff2));
                out.push(("encoder.fb2".into(), &mut t.fb2));
            }
        }
        out.push(("denoiser.w1".into(), &mut self.mlp.w1));
        out.push(("denoiser.b1".into(), &mut self.mlp.b1));
        out.push(("denoiser.w2".into(), &mut self.mlp.w2));
        out.push(("denoiser.b2".into(), &mut self.mlp.b2));
        out.push(("denoiser.w3".into(), &mut self.mlp.w3));
        out.push(("phi".into(), &mut self.phi));
        out
    }

    /// Registers every parameter as a tape leaf. `trainable` controls whether
    /// backward reports gradients for them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut named = Vec::new();
        let mut leaf = |tape: &mut Tape, name: String, t: &Tensor| {
            let id = tape.leaf(t.clone().with_requires_grad(trainable));
            named.push((name, id));
            id
        };
        let encoder = match &self.encoder {
            EncoderWeights::Gru(g) => EncoderVars::Gru(GruVars {
                wz: leaf(tape, "encoder.wz".into(), &g.wz),
                uz: leaf(tape, "encoder.uz".into(), &g.uz),
                bz: leaf(tape, "encoder.bz".into(), &g.bz),
                wr: leaf(tape, "encoder.wr".into(), &g.wr),
                ur: leaf(tape, "encoder.ur".into(), &g.ur),
                br: leaf(tape, "encoder.br".into(), &g.br),
                wh: leaf(tape, "encoder.wh".into(), &g.wh),
                uh: leaf(tape, "encoder.uh".into(), &g.uh),
                bh: leaf(tape, "encoder.bh".into(), &g.bh),
            }),
            EncoderWeights::Transformer(t) => EncoderVars::Transformer(TransformerVars {
                w_in: leaf(tape, "encoder.w_in".into(), &t.w_in),
                pos: t
                    .pos
                    .iter()
                    .enumerate()
                    .map(|(i, p)| leaf(tape, format!("encoder.pos.{i}"), p))
                    .collect(),
                wq: [
                    leaf(tape, "encoder.wq.0".into(), &t.wq[0]),
                    leaf(tape, "encoder.wq.1".into(), &t.wq[1]),
                ],
                wk: [
                    leaf(tape, "encoder.wk.0".into(), &t.wk[0]),
                    leaf(tape, "encoder.wk.1".into(), &t.wk[1]),
                ],
                wv: [
                    leaf(tape, "encoder.wv.0".into(), &t.wv[0]),
                    leaf(tape, "encoder.wv.1".into(), &t.wv[1]),
                ],
                wo: leaf(tape, "encoder.wo".into(), &t.wo),
                ff1: leaf(tape, "encoder.ff1".into(), &t.ff1),
                fb1: leaf(tape, "encoder.fb1".into(), &t.fb1),
                ff2: leaf(tape, "encoder.ff2".into(), &t.ff2),
                fb2: leaf(tape, "encoder.fb2".into(), &t.fb2),
            }),
        };
        let mlp = MlpVars {
            w1: leaf(tape, "denoiser.w1".into(), &self.mlp.w1),
            b1: leaf(tape, "denoiser.b1".into(), &self.mlp.b1),
            w2: leaf(tape, "denoiser.w2".into(), &self.mlp.w2),
            b2: leaf(tape, "denoiser.b2".into(), &self.mlp.b2),
            w3: leaf(tape, "denoiser.w3".into(), &self.mlp.w3),
        };
        let phi = leaf(tape, "phi".into(), &self.phi);
        BoundParams {
            vars: ParamVars {
                dim: self.dim,
                cond_dim: self.cond_dim,
                time_dim: self.time_dim,
                encoder,
                mlp,
                phi,
            },
            named,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub wz: VarId,
    pub uz: VarId,
    pub bz: VarId,
    pub wr: VarId,
    pub ur: VarId,
    pub br: VarId,
    pub wh: VarId,
    pub uh: VarId,
    pub bh: VarId,
}

#[derive(Debug, Clone)]
pub struct TransformerVars {
    pub w_in: VarId,
    pub pos: Vec<VarId>,
    pub wq: [VarId; 2],
    pub wk: [VarId; 2],
    pub wv: [VarId; 2],
    pub wo: VarId,
    pub ff1: VarId,
    pub fb1: VarId,
    pub ff2: VarId,
    pub fb2: VarId,
}

#[derive(Debug, Clone)]
pub enum EncoderVars {
    Gru(GruVars),
    Transformer(TransformerVars),
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
    pub w3: VarId,
}

/// Tape-bound parameters plus the registry mapping names to leaf ids.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: ParamVars,
    pub named: Vec<(String, VarId)>,
}

#[derive(Debug, Clone)]
pub struct ParamVars {
    pub dim: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub encoder: EncoderVars,
    pub mlp: MlpVars,
    pub phi: VarId,
}

/// Guidance condition: either an encoded history or the learned
/// unconditional token.
#[derive(Debug, Clone, Copy)]
pub struct Condition {
    pub var: VarId,
    pub is_unconditional: bool,
}

impl Condition {
    pub fn unconditional(phi: VarId) -> Self {
        Self {
            var: phi,
            is_unconditional: true,
        }
    }
}

/// Lazily binds referenced embedding rows as tape leaves so per-row gradients
/// can be scattered back into the table.
#[derive(Debug)]
pub struct TableBinding {
    vars: HashMap<u32, VarId>,
    trainable: bool,
}

impl TableBinding {
    pub fn new(table: &ItemEmbeddingTable, trainable: bool) -> Self {
        Self {
            vars: HashMap::new(),
            trainable: trainable && table.mode() == TableMode::Trainable,
        }
    }

    pub fn row_var(
        &mut self,
        tape: &mut Tape,
        table: &ItemEmbeddingTable,
        id: u32,
    ) -> Result<VarId, ModelError> {
        if let Some(&v) = self.vars.get(&id) {
            return Ok(v);
        }
        let row = table.row(id)?.with_requires_grad(self.trainable);
        let var = tape.leaf(row);
        self.vars.insert(id, var);
        Ok(var)
    }

    pub fn bound_rows(&self) -> impl Iterator<Item = (u32, VarId)> + '_ {
        self.vars.iter().map(|(&k, &v)| (k, v))
    }
}

/// Sinusoidal step embedding with geometric frequencies from 1 down to
/// roughly 1e-4; even coordinates carry sines, odd carry cosines.
pub fn time_embedding(t: usize, time_dim: usize) -> Tensor {
    debug_assert!(time_dim >= 2 && time_dim % 2 == 0);
    let half = time_dim / 2;
    let mut v = vec![0.0; time_dim];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        v[2 * i] = angle.sin();
        v[2 * i + 1] = angle.cos();
    }
    Tensor::vector(v)
}

fn gru_encode(
    tape: &mut Tape,
    pv: &ParamVars,
    g: &GruVars,
    binding: &mut TableBinding,
    table: &ItemEmbeddingTable,
    items: &[u32],
) -> Result<VarId, ModelError> {
    let mut h = tape.constant(Tensor::zeros(vec![pv.cond_dim]));
    let one = tape.constant_scalar(1.0);
    for &id in items {
        let x = binding.row_var(tape, table, id)?;
        let zx = tape.matmul(g.wz, x)?;
        let zh = tape.matmul(g.uz, h)?;
        let zs = tape.add(zx, zh)?;
        let zs = tape.add(zs, g.bz)?;
        let z = tape.sigmoid(zs)?;

        let rx = tape.matmul(g.wr, x)?;
        let rh = tape.matmul(g.ur, h)?;
        let rs = tape.add(rx, rh)?;
        let rs = tape.add(rs, g.br)?;
        let r = tape.sigmoid(rs)?;

        let cx = tape.matmul(g.wh, x)?;
        let gated = tape.mul(r, h)?;
        let ch = tape.matmul(g.uh, gated)?;
        let cs = tape.add(cx, ch)?;
        let cs = tape.add(cs, g.bh)?;
        let cand = tape.tanh(cs)?;

        let keep = tape.mul(z, h)?;
        let inv = tape.sub(one, z)?;
        let update = tape.mul(inv, cand)?;
        h = tape.add(update, keep)?;
    }
    Ok(h)
}

fn transformer_encode(
    tape: &mut Tape,
    pv: &ParamVars,
    w: &TransformerVars,
    binding: &mut TableBinding,
    table: &ItemEmbeddingTable,
    items: &[u32],
) -> Result<VarId, ModelError> {
    let n = items.len();
    if n > w.pos.len() {
        return Err(ModelError::HistoryTooLong {
            got: n,
            capacity: w.pos.len(),
        });
    }
    let mut xs = Vec::with_capacity(n);
    for (i, &id) in items.iter().enumerate() {
        let e = binding.row_var(tape, table, id)?;
        let proj = tape.matmul(w.w_in, e)?;
        xs.push(tape.add(proj, w.pos[i])?);
    }
    let last = xs[n - 1];
    let dk = pv.cond_dim / 2;
    let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();

    let mut head_ctx = Vec::with_capacity(2);
    for h in 0..2 {
        let q = tape.matmul(w.wq[h], last)?;
        let mut scores = Vec::with_capacity(n);
        for &x in &xs {
            let k = tape.matmul(w.wk[h], x)?;
            let s = tape.dot(q, k)?;
            scores.push(tape.scale(s, inv_sqrt_dk)?);
        }
        let score_vec = tape.concat(&scores)?;
        let attn = tape.softmax(score_vec)?;
        let mut ctx: Option<VarId> = None;
        for (j, &x) in xs.iter().enumerate() {
            let mut pick = vec![0.0; n];
            pick[j] = 1.0;
            let sel = tape.constant(Tensor::vector(pick));
            let aj = tape.dot(attn, sel)?;
            let v = tape.matmul(w.wv[h], x)?;
            let term = tape.mul(v, aj)?;
            ctx = Some(match ctx {
                Some(c) => tape.add(c, term)?,
                None => term,
            });
        }
        head_ctx.push(ctx.expect("at least one position"));
    }
    let merged = tape.concat(&head_ctx)?;
    let attn_out = tape.matmul(w.wo, merged)?;
    let y = tape.add(last, attn_out)?;

    let f1 = tape.matmul(w.ff1, y)?;
    let f1 = tape.add(f1, w.fb1)?;
    let f1 = tape.tanh(f1)?;
    let f2 = tape.matmul(w.ff2, f1)?;
    let f2 = tape.add(f2, w.fb2)?;
    Ok(tape.add(y, f2)?)
}

/// Encodes a padded history into a condition vector. Padding positions (the
/// table's reserved id) are skipped; an effectively empty history yields the
/// unconditional token.
pub fn encode_sequence(
    tape: &mut Tape,
    pv: &ParamVars,
    binding: &mut TableBinding,
    table: &ItemEmbeddingTable,
    history: &[u32],
) -> Result<Condition, ModelError> {
    let pad = table.pad_id();
    let mut items = Vec::with_capacity(history.len());
    for &id in history {
        if id == pad {
            continue;
        }
        if id as usize >= table.len() {
            return Err(ModelError::UnknownItem {
                id,
                count: table.len(),
            });
        }
        items.push(id);
    }
    if items.is_empty() {
        return Ok(Condition::unconditional(pv.phi));
    }
    let var = match &pv.encoder {
        EncoderVars::Gru(g) => gru_encode(tape, pv, g, binding, table, &items)?,
        EncoderVars::Transformer(t) => transformer_encode(tape, pv, t, binding, table, &items)?,
    };
    Ok(Condition {
        var,
        is_unconditional: false,
    })
}

/// Replaces the condition with the unconditional token with probability `p_u`.
pub fn drop_condition<R: Rng>(cond: Condition, pv: &ParamVars, p_u: f64, rng: &mut R) -> Condition {
    if rng.gen::<f64>() < p_u {
        Condition::unconditional(pv.phi)
    } else {
        cond
    }
}

/// Predicts the clean embedding from a noised one, the step embedding, and
/// the condition, via concatenation fusion.
pub fn denoise(
    tape: &mut Tape,
    pv: &ParamVars,
    e_t: VarId,
    t: usize,
    cond: &Condition,
) -> Result<VarId, ModelError> {
    let te = tape.constant(time_embedding(t, pv.time_dim));
    let input = tape.concat(&[e_t, cond.var, te])?;
    let a1 = tape.matmul(pv.mlp.w1, input)?;
    let a1 = tape.add(a1, pv.mlp.b1)?;
    let h1 = tape.tanh(a1)?;
    let a2 = tape.matmul(pv.mlp.w2, h1)?;
    let a2 = tape.add(a2, pv.mlp.b2)?;
    let h2 = tape.tanh(a2)?;
    Ok(tape.matmul(pv.mlp.w3, h2)?)
}
