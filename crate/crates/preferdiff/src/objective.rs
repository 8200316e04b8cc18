//! Training losses.
//!
//! The generation term regresses the denoiser output onto the clean positive
//! embedding under a configurable discrepancy measure. The preference term is
//! a softplus ranking penalty between the positive reconstruction error and
//! the reconstruction error of the negative centroid, scaled by the negative
//! count. Both terms share one measure and combine through a convex mixture.

use crate::numerics::{Tape, TensorError, VarId};
use std::fmt;
use std::str::FromStr;

/// Discrepancy between denoiser output and clean target. `L1`, `L2`, and
/// `Huber` average over coordinates; `Cosine` is one minus the cosine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureKind {
    L1,
    L2,
    Huber,
    Cosine,
}

impl FromStr for MeasureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "huber" => Ok(Self::Huber),
            "cosine" => Ok(Self::Cosine),
            other => Err(format!(
                "unknown measure {other:?}; expected one of l1, l2, huber, cosine"
            )),
        }
    }
}

impl fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::L1 => "l1",
            Self::L2 => "l2",
            Self::Huber => "huber",
            Self::Cosine => "cosine",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Mixture weight on the generation term; `1 - lambda` goes to the
    /// preference term.
    pub lambda: f64,
    pub measure: MeasureKind,
}

/// Discrepancy score `S(pred, target)` as a scalar tape node.
pub fn measure(
    tape: &mut Tape,
    kind: MeasureKind,
    pred: VarId,
    target: VarId,
) -> Result<VarId, TensorError> {
    match kind {
        MeasureKind::L1 => {
            let d = tape.sub(pred, target)?;
            let a = tape.abs(d)?;
            tape.mean(a)
        }
        MeasureKind::L2 => {
            let d = tape.sub(pred, target)?;
            let s = tape.square(d)?;
            tape.mean(s)
        }
        MeasureKind::Huber => {
            let d = tape.sub(pred, target)?;
            let h = tape.huber(d)?;
            tape.mean(h)
        }
        MeasureKind::Cosine => {
            let c = tape.cosine(pred, target)?;
            let one = tape.constant_scalar(1.0);
            tape.sub(one, c)
        }
    }
}

/// Generation-only loss: the measure against the clean positive target.
pub fn simple_loss(
    tape: &mut Tape,
    kind: MeasureKind,
    pred: VarId,
    target: VarId,
) -> Result<VarId, TensorError> {
    measure(tape, kind, pred, target)
}

/// Pairwise preference bound for a single negative:
/// `softplus(s_pos - s_neg)`.
pub fn pairwise_upper(tape: &mut Tape, s_pos: VarId, s_neg: VarId) -> Result<VarId, TensorError> {
    let margin = tape.sub(s_pos, s_neg)?;
    tape.softplus(margin)
}

/// Coordinate-wise mean of the negative embeddings.
pub fn centroid(tape: &mut Tape, rows: &[VarId]) -> Result<VarId, TensorError> {
    if rows.is_empty() {
        return Err(TensorError::EmptyInput { op: "centroid" });
    }
    let mut acc = rows[0];
    for &r in &rows[1..] {
        acc = tape.add(acc, r)?;
    }
    tape.scale(acc, 1.0 / rows.len() as f64)
}

/// Centroid preference loss: `softplus(h * (s_pos - s_negcent))` where `h` is
/// the number of negatives the centroid summarizes.
pub fn bpr_diff_c(
    tape: &mut Tape,
    s_pos: VarId,
    s_negcent: VarId,
    negatives: usize,
) -> Result<VarId, TensorError> {
    if negatives == 0 {
        return Err(TensorError::EmptyInput { op: "bpr_diff_c" });
    }
    let margin = tape.sub(s_pos, s_negcent)?;
    let scaled = tape.scale(margin, negatives as f64)?;
    tape.softplus(scaled)
}

/// Multi-negative preference loss over individual scores:
/// `softplus(h * (s_pos - mean(s_negs)))`. Reference form for the centroid
/// bound; training uses [`bpr_diff_c`].
pub fn bpr_diff_v(tape: &mut Tape, s_pos: VarId, s_negs: &[VarId]) -> Result<VarId, TensorError> {
    if s_negs.is_empty() {
        return Err(TensorError::EmptyInput { op: "bpr_diff_v" });
    }
    let stacked = tape.concat(s_negs)?;
    let mean_neg = tape.mean(stacked)?;
    let margin = tape.sub(s_pos, mean_neg)?;
    let scaled = tape.scale(margin, s_negs.len() as f64)?;
    tape.softplus(scaled)
}

/// Combined loss parts for one example.
#[derive(Debug, Clone, Copy)]
pub struct CombinedLoss {
    pub total: VarId,
    pub generation: VarId,
    pub preference: VarId,
}

/// Full training objective:
/// `lambda * simple + (1 - lambda) * softplus(h * (s_pos - s_negcent))`.
/// Both terms use the configured measure; `s_pos` doubles as the generation
/// term.
pub fn combined_loss(
    tape: &mut Tape,
    cfg: &LossConfig,
    pred_pos: VarId,
    target_pos: VarId,
    pred_negcent: VarId,
    target_negcent: VarId,
    negatives: usize,
) -> Result<CombinedLoss, TensorError> {
    debug_assert!((0.0..=1.0).contains(&cfg.lambda));
    let s_pos = measure(tape, cfg.measure, pred_pos, target_pos)?;
    let s_neg = measure(tape, cfg.measure, pred_negcent, target_negcent)?;
    let preference = bpr_diff_c(tape, s_pos, s_neg, negatives)?;
    let weighted_gen = tape.scale(s_pos, cfg.lambda)?;
    let weighted_pref = tape.scale(preference, 1.0 - cfg.lambda)?;
    let total = tape.add(weighted_gen, weighted_pref)?;
    Ok(CombinedLoss {
        total,
        generation: s_pos,
        preference,
    })
}

/// Implicit gradient weight on an example given log-likelihood proxies for
/// the positive and negative branches; grows as the negative becomes harder.
pub fn gradient_weight(logp_pos_proxy: f64, logp_neg_proxy: f64) -> f64 {
    let margin = logp_pos_proxy - logp_neg_proxy;
    1.0 - 1.0 / (1.0 + (-margin).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN_2: f64 = 0.6931471805599453;

    fn scalar(tape: &mut Tape, v: f64) -> VarId {
        tape.leaf(Tensor::scalar(v))
    }

    #[test]
    fn equal_scores_give_ln_two() {
        let mut tape = Tape::new();
        let a = scalar(&mut tape, 0.37);
        let b = scalar(&mut tape, 0.37);
        let p = pairwise_upper(&mut tape, a, b).unwrap();
        assert!((tape.value(p).item() - LN_2).abs() < 1e-12);
        for h in [1, 4, 16] {
            let c = bpr_diff_c(&mut tape, a, b, h).unwrap();
            assert!(
                (tape.value(c).item() - LN_2).abs() < 1e-12,
                "negatives = {h}"
            );
        }
    }

    #[test]
    fn frozen_softplus_spot_values() {
        // softplus(2) and softplus(-4) pinned to six decimals.
        let mut tape = Tape::new();
        let pos = scalar(&mut tape, 3.0);
        let neg = scalar(&mut tape, 1.0);
        let p = pairwise_upper(&mut tape, pos, neg).unwrap();
        assert!((tape.value(p).item() - 2.126928).abs() < 1e-6);

        let lo = scalar(&mut tape, 0.2);
        let hi = scalar(&mut tape, 2.2);
        let c = bpr_diff_c(&mut tape, lo, hi, 2).unwrap();
        assert!((tape.value(c).item() - 0.018150).abs() < 1e-6);
    }

    #[test]
    fn single_negative_reduces_to_pairwise_bound() {
        let mut tape = Tape::new();
        let a = scalar(&mut tape, 0.8);
        let b = scalar(&mut tape, 0.3);
        let pair = pairwise_upper(&mut tape, a, b).unwrap();
        let cent = bpr_diff_c(&mut tape, a, b, 1).unwrap();
        let multi = bpr_diff_v(&mut tape, a, &[b]).unwrap();
        let p = tape.value(pair).item();
        assert!((tape.value(cent).item() - p).abs() < 1e-12);
        assert!((tape.value(multi).item() - p).abs() < 1e-12);
    }

    #[test]
    fn centroid_matches_coordinate_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vecs: Vec<Tensor> = (0..8).map(|_| Tensor::randn(vec![6], &mut rng)).collect();
        let mut tape = Tape::new();
        let ids: Vec<VarId> = vecs.iter().map(|v| tape.leaf(v.clone())).collect();
        let c = centroid(&mut tape, &ids).unwrap();
        for i in 0..6 {
            let mean = vecs.iter().map(|v| v.values()[i]).sum::<f64>() / 8.0;
            assert!((tape.value(c).values()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn centroid_of_nothing_is_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(
            centroid(&mut tape, &[]),
            Err(TensorError::EmptyInput { op: "centroid" })
        ));
        let s = scalar(&mut tape, 1.0);
        assert!(bpr_diff_c(&mut tape, s, s, 0).is_err());
        assert!(bpr_diff_v(&mut tape, s, &[]).is_err());
    }

    #[test]
    fn l2_measure_averages_coordinates() {
        // Pins the mean (not sum) convention: ||[1,1]||^2 / 2 = 1.
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let target = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        let m = measure(&mut tape, MeasureKind::L2, pred, target).unwrap();
        assert_eq!(tape.value(m).item(), 1.0);
    }

    #[test]
    fn identical_vectors_score_zero_under_every_measure() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![0.4, -0.9, 1.3]));
        let b = tape.leaf(Tensor::vector(vec![0.4, -0.9, 1.3]));
        for kind in [
            MeasureKind::L1,
            MeasureKind::L2,
            MeasureKind::Huber,
            MeasureKind::Cosine,
        ] {
            let m = measure(&mut tape, kind, a, b).unwrap();
            assert!(tape.value(m).item().abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn lambda_endpoints_select_single_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pred_pos = Tensor::randn(vec![5], &mut rng);
        let target_pos = Tensor::randn(vec![5], &mut rng);
        let pred_neg = Tensor::randn(vec![5], &mut rng);
        let target_neg = Tensor::randn(vec![5], &mut rng);

        let eval = |lambda: f64| -> (f64, f64, f64) {
            let mut tape = Tape::new();
            let pp = tape.leaf(pred_pos.clone());
            let tp = tape.leaf(target_pos.clone());
            let pn = tape.leaf(pred_neg.clone());
            let tn = tape.leaf(target_neg.clone());
            let cfg = LossConfig {
                lambda,
                measure: MeasureKind::L2,
            };
            let loss = combined_loss(&mut tape, &cfg, pp, tp, pn, tn, 4).unwrap();
            (
                tape.value(loss.total).item(),
                tape.value(loss.generation).item(),
                tape.value(loss.preference).item(),
            )
        };

        let (total1, gen1, _) = eval(1.0);
        assert_eq!(total1, gen1);
        let (total0, _, pref0) = eval(0.0);
        assert_eq!(total0, pref0);
    }

    #[test]
    fn generation_only_mixture_kills_preference_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut tape = Tape::new();
        let pp = tape.leaf(Tensor::randn(vec![4], &mut rng).with_requires_grad(true));
        let tp = tape.leaf(Tensor::randn(vec![4], &mut rng));
        let pn = tape.leaf(Tensor::randn(vec![4], &mut rng).with_requires_grad(true));
        let tn = tape.leaf(Tensor::randn(vec![4], &mut rng));
        let cfg = LossConfig {
            lambda: 1.0,
            measure: MeasureKind::L2,
        };
        let loss = combined_loss(&mut tape, &cfg, pp, tp, pn, tn, 3).unwrap();
        let grads = tape.backward(loss.total).unwrap();
        assert!(grads.get(pn).unwrap().values().iter().all(|&g| g == 0.0));
        assert!(grads.get(pp).unwrap().values().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn gradient_weight_pins() {
        assert_eq!(gradient_weight(0.0, 0.0), 0.5);
        assert_eq!(gradient_weight(1.3, 1.3), 0.5);
        // Harder negatives (higher negative likelihood proxy) weigh more.
        assert!(gradient_weight(0.0, 2.0) > gradient_weight(0.0, 1.0));
        assert!(gradient_weight(2.0, 0.0) < 0.5);
    }

    proptest! {
        /// For unit vectors the averaged squared error and the cosine
        /// discrepancy coincide up to the factor d/2.
        #[test]
        fn unit_norm_ties_l2_to_cosine(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 6;
            let normalize = |mut t: Tensor| {
                let n = t.values().iter().map(|v| v * v).sum::<f64>().sqrt();
                for v in t.values_mut() { *v /= n; }
                t
            };
            let a = normalize(Tensor::randn(vec![d], &mut rng));
            let b = normalize(Tensor::randn(vec![d], &mut rng));
            let mut tape = Tape::new();
            let av = tape.leaf(a);
            let bv = tape.leaf(b);
            let l2 = measure(&mut tape, MeasureKind::L2, av, bv).unwrap();
            let cos = measure(&mut tape, MeasureKind::Cosine, av, bv).unwrap();
            let lhs = d as f64 * tape.value(l2).item();
            let rhs = 2.0 * tape.value(cos).item();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
