//! Acceptance gate: one test per shipping criterion. Each test prints a
//! single `criterion N PASS ...` line on success (visible with
//! `cargo test --test acceptance -- --nocapture`).

use preferdiff::data::{
    gen_synthetic, log_from_rows, user_split, user_split_windowed, Splits, SynthConfig,
};
use preferdiff::eval::{evaluate_split, ndcg_at_k, rank_target, recall_at_k, EvalConfig};
use preferdiff::model::{
    denoise, encode_sequence, EncoderKind, ItemEmbeddingTable, ModelParams, TableBinding, TableMode,
};
use preferdiff::numerics::{finite_difference_gradient, Tape, Tensor};
use preferdiff::objective::{
    bpr_diff_c, bpr_diff_v, centroid, combined_loss, gradient_weight, measure, pairwise_upper,
    simple_loss, LossConfig, MeasureKind,
};
use preferdiff::sampler::{ddim_step, sample, sample_with, SamplerConfig};
use preferdiff::schedule::DiffusionSchedule;
use preferdiff::trainer::{fit, AdamW, OptimizerConfig, TrainState, TrainerConfig};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Criterion 1: analytic gradients of every loss variant match central finite
// differences over all model parameters and touched embedding rows.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum LossVariant {
    Simple,
    Pairwise,
    Centroid,
    Full,
}

struct GradCase {
    params: ModelParams,
    table: ItemEmbeddingTable,
    schedule: DiffusionSchedule,
    history: Vec<u32>,
    target: u32,
    negatives: Vec<u32>,
    t: usize,
    eps_pos: Tensor,
    eps_neg: Tensor,
    kind: MeasureKind,
    ids: Vec<u32>,
}

impl GradCase {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 8;
        let n_items = 12;
        let params = ModelParams::init(dim, dim, 4, 4, EncoderKind::Gru, &mut rng);
        let table = ItemEmbeddingTable::standard_normal(n_items, dim, &mut rng);
        let schedule = DiffusionSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut pool: Vec<u32> = (0..n_items as u32).collect();
        pool.shuffle(&mut rng);
        let history = pool[0..2].to_vec();
        let target = pool[2];
        let negatives = pool[3..6].to_vec();
        let t = rng.gen_range(1..=50);
        let eps_pos = Tensor::randn(vec![dim], &mut rng);
        let eps_neg = Tensor::randn(vec![dim], &mut rng);
        let kind = if seed % 2 == 0 {
            MeasureKind::Cosine
        } else {
            MeasureKind::L2
        };
        let mut ids: Vec<u32> = history
            .iter()
            .chain(std::iter::once(&target))
            .chain(negatives.iter())
            .copied()
            .collect();
        ids.sort_unstable();
        ids.dedup();
        Self {
            params,
            table,
            schedule,
            history,
            target,
            negatives,
            t,
            eps_pos,
            eps_neg,
            kind,
            ids,
        }
    }

    /// Loss value and, when `want_grads`, the analytic gradient flattened in
    /// the same order as [`Self::flatten`].
    fn eval(
        &self,
        params: &ModelParams,
        table: &ItemEmbeddingTable,
        variant: LossVariant,
        want_grads: bool,
    ) -> (f64, Option<Vec<f64>>) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, want_grads);
        let mut binding = TableBinding::new(table, want_grads);
        let cond =
            encode_sequence(&mut tape, &bound.vars, &mut binding, table, &self.history).unwrap();
        let e0_pos = binding.row_var(&mut tape, table, self.target).unwrap();
        let eps_pos = tape.constant(self.eps_pos.clone());
        let et_pos = self
            .schedule
            .forward_noise_var(&mut tape, e0_pos, self.t, eps_pos)
            .unwrap();
        let pred_pos = denoise(&mut tape, &bound.vars, et_pos, self.t, &cond).unwrap();

        let loss = match variant {
            LossVariant::Simple => simple_loss(&mut tape, self.kind, pred_pos, e0_pos).unwrap(),
            LossVariant::Pairwise => {
                let e_neg = binding
                    .row_var(&mut tape, table, self.negatives[0])
                    .unwrap();
                let eps_neg = tape.constant(self.eps_neg.clone());
                let et_neg = self
                    .schedule
                    .forward_noise_var(&mut tape, e_neg, self.t, eps_neg)
                    .unwrap();
                let pred_neg = denoise(&mut tape, &bound.vars, et_neg, self.t, &cond).unwrap();
                let s_pos = measure(&mut tape, self.kind, pred_pos, e0_pos).unwrap();
                let s_neg = measure(&mut tape, self.kind, pred_neg, e_neg).unwrap();
                pairwise_upper(&mut tape, s_pos, s_neg).unwrap()
            }
            LossVariant::Centroid | LossVariant::Full => {
                let rows: Vec<_> = self
                    .negatives
                    .iter()
                    .map(|&id| binding.row_var(&mut tape, table, id).unwrap())
                    .collect();
                let cent = centroid(&mut tape, &rows).unwrap();
                let eps_neg = tape.constant(self.eps_neg.clone());
                let et_cent = self
                    .schedule
                    .forward_noise_var(&mut tape, cent, self.t, eps_neg)
                    .unwrap();
                let pred_cent = denoise(&mut tape, &bound.vars, et_cent, self.t, &cond).unwrap();
                match variant {
                    LossVariant::Centroid => {
                        let s_pos = measure(&mut tape, self.kind, pred_pos, e0_pos).unwrap();
                        let s_cent = measure(&mut tape, self.kind, pred_cent, cent).unwrap();
                        bpr_diff_c(&mut tape, s_pos, s_cent, self.negatives.len()).unwrap()
                    }
                    _ => {
                        let cfg = LossConfig {
                            lambda: 0.4,
                            measure: self.kind,
                        };
                        combined_loss(
                            &mut tape,
                            &cfg,
                            pred_pos,
                            e0_pos,
                            pred_cent,
                            cent,
                            self.negatives.len(),
                        )
                        .unwrap()
                        .total
                    }
                }
            }
        };
        let value = tape.value(loss).item();
        if !want_grads {
            return (value, None);
        }
        let grads = tape.backward(loss).unwrap();
        let mut flat = Vec::new();
        for (_, var) in &bound.named {
            let shape_len = tape.value(*var).numel();
            match grads.get(*var) {
                Some(g) => flat.extend_from_slice(g.values()),
                None => flat.extend(std::iter::repeat(0.0).take(shape_len)),
            }
        }
        let bound_rows: std::collections::HashMap<u32, _> = binding.bound_rows().collect();
        let dim = table.dim();
        for &id in &self.ids {
            match bound_rows.get(&id).and_then(|&v| grads.get(v)) {
                Some(g) => flat.extend_from_slice(g.values()),
                None => flat.extend(std::iter::repeat(0.0).take(dim)),
            }
        }
        (value, Some(flat))
    }

    fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for (_, t) in self.params.named_tensors() {
            flat.extend_from_slice(t.values());
        }
        for &id in &self.ids {
            flat.extend_from_slice(self.table.row(id).unwrap().values());
        }
        flat
    }

    fn unflatten(&self, flat: &[f64]) -> (ModelParams, ItemEmbeddingTable) {
        let mut params = self.params.clone();
        let mut offset = 0;
        for (_, t) in params.named_tensors_mut() {
            let n = t.numel();
            t.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        let mut table = self.table.clone();
        let dim = table.dim();
        for &id in &self.ids {
            let start = id as usize * dim;
            table.matrix_mut().values_mut()[start..start + dim]
                .copy_from_slice(&flat[offset..offset + dim]);
            offset += dim;
        }
        assert_eq!(offset, flat.len());
        (params, table)
    }
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let variants = [
        LossVariant::Simple,
        LossVariant::Pairwise,
        LossVariant::Centroid,
        LossVariant::Full,
    ];
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let case = GradCase::new(seed);
        let flat0 = case.flatten();
        for &variant in &variants {
            let (_, grads) = case.eval(&case.params, &case.table, variant, true);
            let analytic = grads.unwrap();
            let fd = finite_difference_gradient(
                |probe: &Tensor| {
                    let (p, t) = case.unflatten(probe.values());
                    case.eval(&p, &t, variant, false).0
                },
                &Tensor::vector(flat0.clone()),
                1e-5,
            )
            .unwrap();
            assert_eq!(analytic.len(), fd.numel());
            for (i, (&a, &n)) in analytic.iter().zip(fd.values()).enumerate() {
                // Near-zero gradients are floored: the probe's own roundoff
                // dominates any relative reading down there.
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-5);
                worst = worst.max(rel);
                assert!(
                    rel < 1e-4,
                    "seed {seed}: coordinate {i} analytic {a} vs fd {n} (rel {rel:.3e})"
                );
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 30.0, "gradient oracle took {secs:.1}s");
    println!("criterion 1 PASS (20 seeds x 4 loss variants, max rel err {worst:.2e}, {secs:.1}s)");
}

// ---------------------------------------------------------------------------
// Criterion 2: schedule endpoints, monotone signal decay, and Monte-Carlo
// agreement of the closed-form forward noising with its stated moments.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_schedule_and_forward_noise_moments() {
    let t0 = Instant::now();
    let s = DiffusionSchedule::linear(2000, 1e-4, 0.02).unwrap();
    assert_eq!(s.beta(1), 1e-4);
    assert_eq!(s.beta(2000), 0.02);
    for t in 1..=2000 {
        assert!(
            s.alpha_bar(t) < s.alpha_bar(t - 1),
            "signal level failed to decay at step {t}"
        );
    }

    let d = 8;
    let n = 100_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let e0 = Tensor::randn(vec![d], &mut rng);
    for t in [1usize, 500, 1000, 1500, 2000] {
        let ab = s.alpha_bar(t);
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        for _ in 0..n {
            let eps = Tensor::randn(vec![d], &mut rng);
            let et = s.forward_noise(&e0, t, &eps).unwrap();
            for (i, &v) in et.values().iter().enumerate() {
                sum[i] += v;
                sum_sq[i] += v * v;
            }
        }
        let expected_var = 1.0 - ab;
        // The estimator's own noise floor dominates 5% of the mean once the
        // signal is tiny, so the mean check widens to four standard errors.
        let mc_floor = 4.0 * (expected_var / n as f64).sqrt();
        for i in 0..d {
            let mean = sum[i] / n as f64;
            let expected_mean = ab.sqrt() * e0.values()[i];
            let tol = (0.05 * expected_mean.abs()).max(mc_floor);
            assert!(
                (mean - expected_mean).abs() <= tol,
                "t={t} coord {i}: mean {mean} vs {expected_mean}"
            );
            let var = (sum_sq[i] - sum[i] * sum[i] / n as f64) / (n as f64 - 1.0);
            assert!(
                (var - expected_var).abs() <= 0.05 * expected_var,
                "t={t} coord {i}: var {var} vs {expected_var}"
            );
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 10.0, "schedule checks took {secs:.1}s");
    println!("criterion 2 PASS (exact endpoints, strict decay, 5 Monte-Carlo steps, {secs:.1}s)");
}

// ---------------------------------------------------------------------------
// Criterion 3: closed forms of the ranking losses.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_loss_closed_forms() {
    const LN_2: f64 = std::f64::consts::LN_2;
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::scalar(1.234));
    let b = tape.leaf(Tensor::scalar(1.234));
    let pair = pairwise_upper(&mut tape, a, b).unwrap();
    assert!((tape.value(pair).item() - LN_2).abs() < 1e-12);
    for h in [1usize, 4, 16] {
        let c = bpr_diff_c(&mut tape, a, b, h).unwrap();
        assert!((tape.value(c).item() - LN_2).abs() < 1e-12, "h={h}");
        let negs = vec![b; h];
        let v = bpr_diff_v(&mut tape, a, &negs).unwrap();
        assert!((tape.value(v).item() - LN_2).abs() < 1e-12, "h={h}");
    }

    // Mixture endpoints select exactly one term.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mk = |tape: &mut Tape, rng: &mut ChaCha8Rng| {
        let t = Tensor::randn(vec![5], rng);
        tape.leaf(t)
    };
    let mut tape = Tape::new();
    let (pp, tp, pn, tn) = (
        mk(&mut tape, &mut rng),
        mk(&mut tape, &mut rng),
        mk(&mut tape, &mut rng),
        mk(&mut tape, &mut rng),
    );
    for (lambda, pick_generation) in [(1.0, true), (0.0, false)] {
        let cfg = LossConfig {
            lambda,
            measure: MeasureKind::L2,
        };
        let out = combined_loss(&mut tape, &cfg, pp, tp, pn, tn, 4).unwrap();
        let total = tape.value(out.total).item();
        let part = if pick_generation {
            tape.value(out.generation).item()
        } else {
            tape.value(out.preference).item()
        };
        assert_eq!(total, part, "lambda={lambda}");
    }

    // One negative: the centroid form degenerates to the pairwise bound.
    let mut tape = Tape::new();
    let s_pos = tape.leaf(Tensor::scalar(0.73));
    let s_neg = tape.leaf(Tensor::scalar(0.21));
    let pair = pairwise_upper(&mut tape, s_pos, s_neg).unwrap();
    let cent = bpr_diff_c(&mut tape, s_pos, s_neg, 1).unwrap();
    assert!((tape.value(pair).item() - tape.value(cent).item()).abs() < 1e-12);
    println!("criterion 3 PASS (ln 2 at zero margin, exact mixture endpoints, |H|=1 reduction)");
}

// ---------------------------------------------------------------------------
// Criterion 4: the centroid loss upper-bounds the per-negative form for a
// linear denoiser under squared error, given a shared noise draw.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_centroid_upper_bounds_individual_negatives() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let schedule = DiffusionSchedule::linear(10, 1e-4, 0.02).unwrap();
    let d = 8;
    for inst in 0..1000 {
        let h = [2usize, 4, 8][inst % 3];
        let t = rng.gen_range(1..=10);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::randn(vec![d, d], &mut rng));
        let predict = |tape: &mut Tape, x| tape.matmul(a, x).unwrap();

        let e_pos = tape.constant(Tensor::randn(vec![d], &mut rng));
        let eps_pos = tape.constant(Tensor::randn(vec![d], &mut rng));
        let et_pos = schedule
            .forward_noise_var(&mut tape, e_pos, t, eps_pos)
            .unwrap();
        let pred_pos = predict(&mut tape, et_pos);
        let s_pos = measure(&mut tape, MeasureKind::L2, pred_pos, e_pos).unwrap();

        let eps_shared = tape.constant(Tensor::randn(vec![d], &mut rng));
        let mut neg_vars = Vec::with_capacity(h);
        let mut neg_scores = Vec::with_capacity(h);
        for _ in 0..h {
            let e = tape.constant(Tensor::randn(vec![d], &mut rng));
            let et = schedule
                .forward_noise_var(&mut tape, e, t, eps_shared)
                .unwrap();
            let pred = predict(&mut tape, et);
            neg_scores.push(measure(&mut tape, MeasureKind::L2, pred, e).unwrap());
            neg_vars.push(e);
        }
        let cent = centroid(&mut tape, &neg_vars).unwrap();
        let et_cent = schedule
            .forward_noise_var(&mut tape, cent, t, eps_shared)
            .unwrap();
        let pred_cent = predict(&mut tape, et_cent);
        let s_cent = measure(&mut tape, MeasureKind::L2, pred_cent, cent).unwrap();

        let v = bpr_diff_v(&mut tape, s_pos, &neg_scores).unwrap();
        let c = bpr_diff_c(&mut tape, s_pos, s_cent, h).unwrap();
        let (v, c) = (tape.value(v).item(), tape.value(c).item());
        assert!(
            v <= c + 1e-9,
            "instance {inst} (h={h}, t={t}): per-negative {v} exceeds centroid {c}"
        );
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 10.0, "bound check took {secs:.1}s");
    println!("criterion 4 PASS (1000 linear-denoiser instances, h in {{2,4,8}}, {secs:.1}s)");
}

// ---------------------------------------------------------------------------
// Criterion 5: on unit vectors, d * averaged squared error equals twice the
// cosine discrepancy.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_unit_norm_ties_l2_to_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for inst in 0..1000 {
        let d = [2usize, 4, 8, 16, 32][inst % 5];
        let unit = |rng: &mut ChaCha8Rng| {
            let mut t = Tensor::randn(vec![d], rng);
            let norm = t.values().iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in t.values_mut() {
                *v /= norm;
            }
            t
        };
        let mut tape = Tape::new();
        let a = tape.leaf(unit(&mut rng));
        let b = tape.leaf(unit(&mut rng));
        let l2 = measure(&mut tape, MeasureKind::L2, a, b).unwrap();
        let cos = measure(&mut tape, MeasureKind::Cosine, a, b).unwrap();
        let gap = (d as f64 * tape.value(l2).item() - 2.0 * tape.value(cos).item()).abs();
        worst = worst.max(gap);
        assert!(gap < 1e-10, "instance {inst} (d={d}): gap {gap:.3e}");
    }
    println!("criterion 5 PASS (1000 unit pairs, max gap {worst:.2e})");
}

// ---------------------------------------------------------------------------
// Criterion 6: reverse-process properties.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_reverse_process_properties() {
    let schedule = DiffusionSchedule::linear(2000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let dim = 6;

    // A perfect predictor makes the sampler return the clean embedding
    // bit-for-bit.
    let e0 = Tensor::randn(vec![dim], &mut rng);
    let cfg = SamplerConfig {
        ddim_steps: 20,
        guidance_weight: 2.0,
        seed: 99,
    };
    let out = sample_with(|_, _| Ok(e0.clone()), &schedule, &cfg, dim).unwrap();
    assert_eq!(out.values(), e0.values());

    // Inversion: noising the truth and stepping back with the truth as the
    // prediction lands on the closed-form state one step earlier.
    let eps = Tensor::randn(vec![dim], &mut rng);
    for t in [2usize, 100, 777, 2000] {
        let et = schedule.forward_noise(&e0, t, &eps).unwrap();
        let back = ddim_step(&schedule, &et, t, &e0).unwrap();
        let expect = schedule.forward_noise(&e0, t - 1, &eps).unwrap();
        for (b, e) in back.values().iter().zip(expect.values()) {
            assert!((b - e).abs() < 1e-10, "t={t}: {b} vs {e}");
        }
    }

    // Fixed-seed model sampling is bit-identical across repeated runs.
    let params = ModelParams::init(dim, dim, 4, 3, EncoderKind::Gru, &mut rng);
    let table =
        ItemEmbeddingTable::from_matrix(Tensor::randn(vec![10, dim], &mut rng), TableMode::Frozen);
    let draw = || {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let mut binding = TableBinding::new(&table, false);
        let cond =
            encode_sequence(&mut tape, &bound.vars, &mut binding, &table, &[1, 4, 7]).unwrap();
        sample(&mut tape, &bound.vars, &schedule, &cond, &cfg).unwrap()
    };
    let first = draw();
    let second = draw();
    assert_eq!(first.values(), second.values());

    // Evaluation ranks are invariant to the worker-pool size.
    let examples: Vec<_> = {
        let rows: Vec<(String, String, i64)> = (0..12)
            .flat_map(|u| {
                (0..5).map(move |i| (format!("u{u}"), format!("i{}", (u * 3 + i) % 10), i as i64))
            })
            .collect();
        let log = log_from_rows(rows, 1).unwrap();
        user_split(&log, (1, 1, 1), 3).unwrap().test
    };
    let eval_cfg = EvalConfig {
        ks: vec![5],
        sampler: cfg,
        mask_history: false,
    };
    let run_with = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate_split(&params, &table, &schedule, &examples, &eval_cfg).unwrap())
    };
    let one = run_with(1);
    let two = run_with(2);
    assert_eq!(one.ranks, two.ranks);
    assert_eq!(one.rows[0].recall, two.rows[0].recall);

    println!(
        "criterion 6 PASS (exact perfect-denoiser output, inversion at 4 steps, bit-stable reruns, pool-size invariance)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: implicit example weight grows monotonically as the negative
// branch becomes more likely than the positive.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_hard_negative_weighting() {
    let weights: Vec<f64> = (0..100)
        .map(|i| {
            let margin = 8.0 - 16.0 * i as f64 / 99.0;
            gradient_weight(margin, 0.0)
        })
        .collect();
    for pair in weights.windows(2) {
        assert!(pair[1] > pair[0], "weight failed to increase: {pair:?}");
    }
    assert!(weights[0] < 0.01, "easy-end weight {}", weights[0]);
    assert!(weights[99] > 0.99, "hard-end weight {}", weights[99]);
    println!(
        "criterion 7 PASS (strictly increasing over 100 margins, endpoints {:.2e} / {:.6})",
        weights[0], weights[99]
    );
}

// ---------------------------------------------------------------------------
// Criteria 8 & 10 share the synthetic training harness.
// ---------------------------------------------------------------------------

/// Splits plus the generator's true latent vectors re-indexed to dense ids.
/// `windowed` expands every training prefix into its own example, which is
/// how the directional study gets enough data for ID embeddings learned from
/// scratch.
fn synthetic_task(
    seed: u64,
    ratios: (u32, u32, u32),
    windowed: bool,
) -> (Splits, ItemEmbeddingTable) {
    let data = gen_synthetic(&SynthConfig {
        users: 2000,
        items: 200,
        clusters: 8,
        latent_dim: 64,
        noise: 0.2,
        min_len: 5,
        max_len: 9,
        seed,
    })
    .unwrap();
    let rows: Vec<(String, String, i64)> = data
        .rows
        .iter()
        .map(|(u, i, t)| (format!("u{u}"), format!("i{i}"), *t))
        .collect();
    let log = log_from_rows(rows, 1).unwrap();
    let d = 64;
    let mut vals = vec![0.0; log.n_items * d];
    for (dense, name) in log.item_names.iter().enumerate() {
        let orig: usize = name[1..].parse().unwrap();
        vals[dense * d..(dense + 1) * d]
            .copy_from_slice(&data.embeddings.values()[orig * d..(orig + 1) * d]);
    }
    let table = ItemEmbeddingTable::from_matrix(
        Tensor::matrix(log.n_items, d, vals).unwrap(),
        TableMode::Frozen,
    );
    let splits = if windowed {
        user_split_windowed(&log, ratios, 6).unwrap()
    } else {
        user_split(&log, ratios, 6).unwrap()
    };
    (splits, table)
}

struct RunOutcome {
    best_valid_recall: f64,
    test_recall: f64,
}

fn train_and_test(
    seed: u64,
    lambda: f64,
    kind: MeasureKind,
    lr: f64,
    epochs: usize,
    table: ItemEmbeddingTable,
    splits: &Splits,
) -> RunOutcome {
    let mut rng = preferdiff::rng::stream(seed, &[preferdiff::rng::INIT_STREAM, 1]);
    let params = ModelParams::init(64, 64, 64, 6, EncoderKind::Gru, &mut rng);
    let mut state = TrainState::new(params, table);
    let schedule = DiffusionSchedule::linear(2000, 1e-4, 0.02).unwrap();
    let cfg = TrainerConfig {
        loss: LossConfig {
            lambda,
            measure: kind,
        },
        optimizer: OptimizerConfig {
            lr,
            ..OptimizerConfig::default()
        },
        p_uncond: 0.1,
        batch_size: 64,
        negatives: 8,
        epochs,
        patience: epochs,
        start_epoch: 0,
        seed,
        valid_sampler: SamplerConfig {
            ddim_steps: 20,
            guidance_weight: 2.0,
            seed,
        },
        mask_history: false,
    };
    let mut opt = AdamW::new(cfg.optimizer);
    let outcome = fit(
        &mut state,
        &mut opt,
        &schedule,
        &splits.train,
        &splits.valid,
        &cfg,
        |_| {},
    )
    .unwrap();
    let eval_cfg = EvalConfig {
        ks: vec![5],
        sampler: SamplerConfig {
            ddim_steps: 20,
            guidance_weight: 2.0,
            seed,
        },
        mask_history: false,
    };
    let report = evaluate_split(
        &outcome.best_state.params,
        &outcome.best_state.table,
        &schedule,
        &splits.test,
        &eval_cfg,
    )
    .unwrap();
    RunOutcome {
        best_valid_recall: outcome.best_valid_recall,
        test_recall: report.rows[0].recall,
    }
}

/// Both arms share everything except the loss: ID embeddings learned from
/// scratch (standard-normal init), windowed training prefixes, identical
/// budgets and sampler. Under learnable embeddings the generation-only L2
/// arm can shrink and merge item vectors instead of separating them, which
/// the cosine measure rules out by construction, so this is the regime where
/// the directional claim has a mechanism rather than seed noise.
#[test]
fn criterion_08_preference_objective_beats_generation_only() {
    let t0 = Instant::now();
    let seeds = [1u64, 2, 3];
    let mut wins = 0;
    let mut cos_sum = 0.0;
    let mut l2_sum = 0.0;
    let mut lines = Vec::new();
    for &seed in &seeds {
        let (splits, truth) = synthetic_task(seed, (6, 1, 3), true);
        let mut init_rng = preferdiff::rng::stream(seed, &[preferdiff::rng::INIT_STREAM, 0]);
        let table = ItemEmbeddingTable::standard_normal(truth.len(), 64, &mut init_rng);
        let full = train_and_test(
            seed,
            0.5,
            MeasureKind::Cosine,
            3e-3,
            10,
            table.clone(),
            &splits,
        );
        let ablated = train_and_test(seed, 1.0, MeasureKind::L2, 3e-3, 10, table, &splits);
        if full.test_recall >= ablated.test_recall {
            wins += 1;
        }
        cos_sum += full.test_recall;
        l2_sum += ablated.test_recall;
        lines.push(format!(
            "seed {seed}: {:.4} vs {:.4}",
            full.test_recall, ablated.test_recall
        ));
    }
    let cos_mean = cos_sum / seeds.len() as f64;
    let l2_mean = l2_sum / seeds.len() as f64;
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 600.0, "directional study took {secs:.1}s");
    assert!(
        wins >= 2,
        "preference objective won only {wins}/3 seeds ({})",
        lines.join("; ")
    );
    let floor = 4.0 * 5.0 / 200.0;
    assert!(
        cos_mean >= floor,
        "preference arm mean test recall@5 {cos_mean:.4} below {floor} ({})",
        lines.join("; ")
    );
    assert!(
        l2_mean >= floor,
        "generation-only arm mean test recall@5 {l2_mean:.4} below {floor}; \
         with learnable embeddings the L2 arm collapses toward a global mean \
         instead of separating items ({})",
        lines.join("; ")
    );
    println!(
        "criterion 8 PASS (preference {wins}/3 seeds; mean recall@5 {cos_mean:.4} vs {l2_mean:.4}, both >= {floor}; {secs:.1}s; {})",
        lines.join("; ")
    );
}

#[test]
fn criterion_10_standard_normal_init_outperforms_scaled() {
    let t0 = Instant::now();
    let seeds = [1u64, 2, 3];
    let mut wins = 0;
    let mut lines = Vec::new();
    for &seed in &seeds {
        let (splits, truth) = synthetic_task(seed, (8, 1, 1), false);
        let n_items = truth.len();
        let mut init_rng = preferdiff::rng::stream(seed, &[preferdiff::rng::INIT_STREAM, 0]);
        let std_table = ItemEmbeddingTable::standard_normal(n_items, 64, &mut init_rng);
        let mut init_rng = preferdiff::rng::stream(seed, &[preferdiff::rng::INIT_STREAM, 0]);
        let scaled_table = ItemEmbeddingTable::scaled_normal(n_items, 64, 0.01, &mut init_rng);
        let std_run = train_and_test(seed, 0.4, MeasureKind::Cosine, 3e-3, 8, std_table, &splits);
        let scaled_run = train_and_test(
            seed,
            0.4,
            MeasureKind::Cosine,
            3e-3,
            8,
            scaled_table,
            &splits,
        );
        if std_run.best_valid_recall >= scaled_run.best_valid_recall {
            wins += 1;
        }
        lines.push(format!(
            "seed {seed}: {:.4} vs {:.4}",
            std_run.best_valid_recall, scaled_run.best_valid_recall
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(
        wins >= 2,
        "standard-normal init won only {wins}/3 seeds ({})",
        lines.join("; ")
    );
    println!(
        "criterion 10 PASS (standard-normal init {wins}/3 seeds on best valid recall@5; {secs:.1}s; {})",
        lines.join("; ")
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: ranking metrics against a brute-force sort oracle.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_metrics_match_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for inst in 0..200 {
        let n = rng.gen_range(1..=1000);
        let target = rng.gen_range(0..n);
        let quantize = inst % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(-3.0..3.0);
                if quantize {
                    (v * 4.0).round() / 4.0
                } else {
                    v
                }
            })
            .collect();
        let k = rng.gen_range(1..=20);

        // Oracle: full sort, descending, with the target ordered after every
        // tied competitor (pessimistic).
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            scores[j]
                .partial_cmp(&scores[i])
                .unwrap()
                .then_with(|| (i == target).cmp(&(j == target)))
        });
        let oracle_rank = order.iter().position(|&i| i == target).unwrap() + 1;
        let oracle_recall = if oracle_rank <= k { 1.0 } else { 0.0 };
        let oracle_ndcg = if oracle_rank <= k {
            1.0 / ((oracle_rank + 1) as f64).log2()
        } else {
            0.0
        };

        let rank = rank_target(&scores, target, None).unwrap();
        assert_eq!(rank, oracle_rank, "instance {inst} (n={n})");
        assert_eq!(recall_at_k(&[rank], k).unwrap(), oracle_recall);
        assert_eq!(ndcg_at_k(&[rank], k).unwrap(), oracle_ndcg);
    }
    assert_eq!(ndcg_at_k(&[3], 5).unwrap(), 0.5);
    println!("criterion 9 PASS (200 instances vs sort oracle, rank-3 spot value exact)");
}

// ---------------------------------------------------------------------------
// Criterion 11: the shipped binary reproduces metrics.csv byte-for-byte.
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_end_to_end_byte_determinism() {
    let bin = env!("CARGO_BIN_EXE_preferdiff");
    let run_chain = |root: &std::path::Path| -> Vec<u8> {
        let synth_dir = root.join("synth");
        let run_dir = root.join("run");
        let base = [
            "--seed",
            "7",
            "--t-max",
            "50",
            "--dim",
            "16",
            "--cond-dim",
            "16",
            "--time-dim",
            "8",
            "--max-len",
            "5",
            "--ddim-steps",
            "5",
            "--valid-ddim-steps",
            "2",
            "--epochs",
            "2",
            "--batch-size",
            "16",
            "--negatives",
            "4",
            "--min-count",
            "1",
            "--synth-users",
            "80",
            "--synth-items",
            "40",
            "--synth-clusters",
            "4",
            "--synth-latent-dim",
            "16",
            "--synth-min-len",
            "4",
            "--synth-max-len",
            "7",
        ];
        let run = |cmd: &str, extra: &[&str]| {
            let status = std::process::Command::new(bin)
                .arg(cmd)
                .args(base)
                .args(extra)
                .env_remove("PREFERDIFF_SEED")
                .stdout(std::process::Stdio::null())
                .status()
                .unwrap();
            assert!(status.success(), "{cmd} failed");
        };
        let synth_out = synth_dir.to_str().unwrap().to_owned();
        let run_out = run_dir.to_str().unwrap().to_owned();
        let data = synth_dir.join("interactions.tsv");
        let data_arg = data.to_str().unwrap().to_owned();
        run("synth", &["--out", &synth_out]);
        run("train", &["--out", &run_out, "--data-path", &data_arg]);
        run("evaluate", &["--out", &run_out, "--data-path", &data_arg]);
        std::fs::read(run_dir.join("metrics.csv")).unwrap()
    };
    let dir = tempfile::tempdir().unwrap();
    let first = run_chain(&dir.path().join("a"));
    let second = run_chain(&dir.path().join("b"));
    assert!(!first.is_empty());
    assert_eq!(first, second, "metrics.csv differs between identical runs");
    println!(
        "criterion 11 PASS (synth -> train -> evaluate twice, metrics.csv identical, {} bytes)",
        first.len()
    );
}
