//! The three base ("reward") losses — CLIP-style symmetric contrastive,
//! SimCLR-style InfoNCE, DINO-style self-distillation — and the reward
//! probability map used inside value targets.

use crate::ad::graph::{Graph, NodeId};
use crate::ad::params::ParamStore;
use crate::ad::tensor::{Scalar, Tensor};
use crate::ad::AdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("contrastive batch needs at least 2 items, got {0}")]
    BatchTooSmall(usize),
    #[error("DINO needs at least 2 prototypes, got {0}")]
    TooFewPrototypes(usize),
    #[error(transparent)]
    Ad(#[from] AdError),
}

fn identity_targets<T: Scalar>(n: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        t.data[i * n + i] = T::one();
    }
    t
}

/// Symmetric contrastive loss over a square logit matrix with diagonal
/// pairing: cross-entropy of rows against the identity plus the same for
/// columns, each averaged over the batch. Uniform logits give 2·ln B.
pub fn clip_loss<T: Scalar>(g: &mut Graph<T>, logits: NodeId) -> Result<NodeId, RewardError> {
    let shape = g.value(logits).shape.clone();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(AdError::BadShape {
            op: "clip_loss",
            expected: "square logit matrix".into(),
            got: shape,
        }
        .into());
    }
    let b = shape[0];
    if b < 2 {
        return Err(RewardError::BatchTooSmall(b));
    }
    let eye = identity_targets::<T>(b);
    let rows = g.softmax_xent(logits, &eye)?;
    let tl = g.transpose2(logits)?;
    let cols = g.softmax_xent(tl, &eye)?;
    Ok(g.add(rows, cols)?)
}

/// InfoNCE over 2B paired views. `sims` is the [2B, 2B] scaled similarity
/// matrix where rows 2i and 2i+1 are two views of image i. Each anchor's
/// positive is its partner; all other views (excluding self) are negatives.
/// Uniform similarities give ln(2B − 1).
pub fn simclr_loss<T: Scalar>(g: &mut Graph<T>, sims: NodeId) -> Result<NodeId, RewardError> {
    let shape = g.value(sims).shape.clone();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] % 2 != 0 {
        return Err(AdError::BadShape {
            op: "simclr_loss",
            expected: "square matrix with even side".into(),
            got: shape,
        }
        .into());
    }
    let n2 = shape[0];
    if n2 < 4 {
        return Err(RewardError::BatchTooSmall(n2 / 2));
    }
    // Self-similarities are excluded from each anchor's candidate set.
    let mut mask = Tensor::zeros(vec![n2, n2]);
    for i in 0..n2 {
        mask.data[i * n2 + i] = T::from_f64(-1e30);
    }
    let mask_node = g.constant(mask);
    let masked = g.add(sims, mask_node)?;
    let mut targets = Tensor::zeros(vec![n2, n2]);
    for i in 0..n2 {
        let partner = i ^ 1;
        targets.data[i * n2 + partner] = T::one();
    }
    Ok(g.softmax_xent(masked, &targets)?)
}

/// Running state of the DINO-style variant: center vector plus temperatures.
/// Prototypes themselves live in the parameter store ("ann.protos").
#[derive(Debug, Clone)]
pub struct DinoState {
    pub center: Vec<f64>,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub center_momentum: f64,
}

impl DinoState {
    pub fn new(protos: usize) -> Result<Self, RewardError> {
        if protos < 2 {
            return Err(RewardError::TooFewPrototypes(protos));
        }
        Ok(DinoState {
            center: vec![0.0; protos],
            tau_student: 0.1,
            tau_teacher: 0.04,
            center_momentum: 0.9,
        })
    }
}

/// Teacher distribution: softmax((sims − center) / τ_t) per row.
/// Computed host-side from the EMA model's outputs; never differentiated.
pub fn dino_teacher_probs(state: &DinoState, teacher_sims: &[f64]) -> Vec<f64> {
    let k = state.center.len();
    assert_eq!(teacher_sims.len() % k, 0, "teacher sims not a multiple of K");
    let mut out = Vec::with_capacity(teacher_sims.len());
    for row in teacher_sims.chunks(k) {
        let scaled: Vec<f64> = row
            .iter()
            .zip(&state.center)
            .map(|(&s, &c)| (s - c) / state.tau_teacher)
            .collect();
        let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|&v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| e / z));
    }
    out
}

/// Center update from raw (uncentered) teacher similarities:
/// center ← m·center + (1−m)·batch mean.
pub fn dino_update_center(state: &mut DinoState, teacher_sims: &[f64]) {
    let k = state.center.len();
    let rows = teacher_sims.len() / k;
    assert!(rows > 0);
    let m = state.center_momentum;
    for j in 0..k {
        let mean = (0..rows).map(|i| teacher_sims[i * k + j]).sum::<f64>() / rows as f64;
        state.center[j] = m * state.center[j] + (1.0 - m) * mean;
    }
}

/// Student cross-entropy against fixed teacher probabilities:
/// mean over rows of −Σ_k p_t · log softmax(sims / τ_s).
pub fn dino_loss<T: Scalar>(
    g: &mut Graph<T>,
    state: &DinoState,
    student_sims: NodeId,
    teacher_probs: &Tensor<T>,
) -> Result<NodeId, RewardError> {
    let k = g.value(student_sims).shape[1];
    if k < 2 {
        return Err(RewardError::TooFewPrototypes(k));
    }
    let scaled = g.scale(student_sims, 1.0 / state.tau_student);
    Ok(g.softmax_xent(scaled, teacher_probs)?)
}

/// Re-normalize the prototype rows after an optimizer step.
pub fn normalize_prototypes(params: &mut ParamStore) {
    if let Some(t) = params.get_mut("ann.protos") {
        let d = t.shape[1];
        for row in t.data.chunks_mut(d) {
            let n = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
            for v in row {
                *v = (*v as f64 / n) as f32;
            }
        }
    }
}

/// Host-side row softmax of reward logits: p(ℓ|x) over the annotation batch.
pub fn reward_probs(logits: &[f64], l: usize) -> Vec<f64> {
    assert!(l >= 1 && logits.len() % l == 0);
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(l) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| e / z));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_loss(f: impl FnOnce(&mut Graph<f64>) -> NodeId) -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let id = f(&mut g);
        g.scalar_value(id)
    }

    #[test]
    fn clip_uniform_logits_is_twice_log_batch() {
        for b in [2usize, 5] {
            let loss = scalar_loss(|g| {
                let l = g.input(Tensor::full(vec![b, b], 0.7));
                clip_loss(g, l).unwrap()
            });
            assert!((loss - 2.0 * (b as f64).ln()).abs() < 1e-9, "B={b}: {loss}");
        }
    }

    #[test]
    fn clip_perfect_pairs_vanishes_at_high_temperature() {
        // Orthogonal matched pairs: similarity 1 on the diagonal, 0 off it,
        // scaled by a large temperature.
        let b = 4;
        let mut m = Tensor::zeros(vec![b, b]);
        for i in 0..b {
            m.data[i * b + i] = 100.0;
        }
        let loss = scalar_loss(|g| {
            let l = g.input(m);
            clip_loss(g, l).unwrap()
        });
        assert!(loss < 1e-9, "{loss}");
    }

    #[test]
    fn clip_three_pair_case_matches_hand_computation() {
        // logits [[2,0,0],[0,1,0],[0,0,0.5]]
        let rows = [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.5]];
        // Row and column direction losses computed term by term.
        let mut expect = 0.0;
        for i in 0..3 {
            let lse: f64 = (0..3).map(|j| f64::exp(rows[i][j])).sum::<f64>().ln();
            expect += lse - rows[i][i];
        }
        for j in 0..3 {
            let lse: f64 = (0..3).map(|i| f64::exp(rows[i][j])).sum::<f64>().ln();
            expect += lse - rows[j][j];
        }
        expect /= 3.0;
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let loss = scalar_loss(|g| {
            let l = g.input(Tensor::from_vec(vec![3, 3], flat));
            clip_loss(g, l).unwrap()
        });
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn clip_row_shift_invariance() {
        let base = [[2.0, 0.0, 1.0], [0.3, 1.0, 0.0], [0.1, 0.4, 0.5]];
        let loss_of = |m: &[[f64; 3]; 3]| {
            let flat: Vec<f64> = m.iter().flatten().copied().collect();
            scalar_loss(|g| {
                let l = g.input(Tensor::from_vec(vec![3, 3], flat));
                let eye = identity_targets::<f64>(3);
                g.softmax_xent(l, &eye).unwrap()
            })
        };
        let mut shifted = base;
        for v in &mut shifted[1] {
            *v += 17.0;
        }
        assert!((loss_of(&base) - loss_of(&shifted)).abs() < 1e-9);
    }

    #[test]
    fn clip_batch_too_small() {
        let mut g: Graph<f64> = Graph::new();
        let l = g.input(Tensor::zeros(vec![1, 1]));
        assert!(matches!(clip_loss(&mut g, l), Err(RewardError::BatchTooSmall(1))));
    }

    #[test]
    fn simclr_uniform_is_log_candidates() {
        for b in [2usize, 4] {
            let n2 = 2 * b;
            let loss = scalar_loss(|g| {
                let s = g.input(Tensor::full(vec![n2, n2], 0.3));
                simclr_loss(g, s).unwrap()
            });
            assert!((loss - ((n2 - 1) as f64).ln()).abs() < 1e-9, "B={b}: {loss}");
        }
    }

    #[test]
    fn simclr_two_image_case_matches_enumerated_partition() {
        // B=2: views (0,1) pair up, (2,3) pair up. Hand-built similarities.
        let s = [
            [9.0, 0.8, 0.1, -0.2],
            [0.8, 9.0, 0.0, 0.3],
            [0.1, 0.0, 9.0, 0.6],
            [-0.2, 0.3, 0.6, 9.0],
        ];
        // Anchor i: -log(exp(s[i][partner]) / sum_{j != i} exp(s[i][j]))
        let mut expect = 0.0;
        for i in 0..4 {
            let partner = i ^ 1;
            let z: f64 = (0..4).filter(|&j| j != i).map(|j| f64::exp(s[i][j])).sum();
            expect += z.ln() - s[i][partner];
        }
        expect /= 4.0;
        let flat: Vec<f64> = s.iter().flatten().copied().collect();
        let loss = scalar_loss(|g| {
            let n = g.input(Tensor::from_vec(vec![4, 4], flat));
            simclr_loss(g, n).unwrap()
        });
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    #[test]
    fn dino_uniform_teacher_uniform_student_is_log_k() {
        let state = DinoState::new(4).unwrap();
        let teacher = dino_teacher_probs(&state, &[0.5, 0.5, 0.5, 0.5]);
        assert!(teacher.iter().all(|&p| (p - 0.25).abs() < 1e-12));
        let tp = Tensor::from_vec(vec![1, 4], teacher);
        let loss = scalar_loss(|g| {
            let s = g.input(Tensor::full(vec![1, 4], 0.2));
            dino_loss(g, &state, s, &tp).unwrap()
        });
        assert!((loss - 4.0f64.ln()).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn dino_low_teacher_temperature_sharpens_to_argmax() {
        let mut state = DinoState::new(3).unwrap();
        state.tau_teacher = 1e-4;
        let p = dino_teacher_probs(&state, &[0.2, 0.9, 0.1]);
        assert!(p[1] > 0.999999);
    }

    #[test]
    fn dino_two_prototype_hand_case() {
        let mut state = DinoState::new(2).unwrap();
        state.center = vec![0.1, -0.1];
        state.tau_teacher = 0.5;
        state.tau_student = 0.25;
        let sims_t = [0.6, -0.4];
        let sims_s = [0.2, 0.7];
        // teacher: softmax(((0.6-0.1)/0.5, (-0.4+0.1)/0.5)) = softmax(1.0, -0.6)
        let e = |x: f64| x.exp();
        let zt = e(1.0) + e(-0.6);
        let t = [e(1.0) / zt, e(-0.6) / zt];
        // student log-softmax of (0.8, 2.8)
        let zs = (e(0.8) + e(2.8)).ln();
        let expect = t[0] * (zs - 0.8) + t[1] * (zs - 2.8);
        let teacher = dino_teacher_probs(&state, &sims_t);
        let tp = Tensor::from_vec(vec![1, 2], teacher);
        let loss = scalar_loss(|g| {
            let s = g.input(Tensor::from_vec(vec![1, 2], sims_s.to_vec()));
            dino_loss(g, &state, s, &tp).unwrap()
        });
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn dino_center_converges_geometrically_to_teacher_mean() {
        let mut state = DinoState::new(2).unwrap();
        let sims = [1.0, -1.0, 3.0, 1.0]; // mean (2.0, 0.0)
        let mut prev_gap = f64::INFINITY;
        for _ in 0..20 {
            dino_update_center(&mut state, &sims);
            let gap = ((state.center[0] - 2.0).powi(2) + state.center[1].powi(2)).sqrt();
            assert!(gap < prev_gap);
            if prev_gap.is_finite() {
                assert!((gap / prev_gap - 0.9).abs() < 1e-9, "rate should be 0.9");
            }
            prev_gap = gap;
        }
        assert!(prev_gap < 2.5 * 0.9f64.powi(20));
    }

    #[test]
    fn reward_probs_rows_sum_to_one() {
        let p = reward_probs(&[0.0, 0.0, 0.0, 0.0, 0.0], 5);
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-12));
        let p = reward_probs(&[42.0], 1);
        assert_eq!(p, vec![1.0]);
        let p = reward_probs(&[10.0, -10.0], 2);
        assert!(p[0] > 0.999999 && (p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn losses_invariant_under_pair_permutation() {
        // Permuting image order (and pairing accordingly) leaves the CLIP
        // loss unchanged.
        let m = [[2.0, 0.1, 0.3], [0.4, 1.5, 0.2], [0.0, 0.6, 1.1]];
        let perm = [2usize, 0, 1];
        let mut pm = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                pm[i][j] = m[perm[i]][perm[j]];
            }
        }
        let loss_of = |m: &[[f64; 3]; 3]| {
            let flat: Vec<f64> = m.iter().flatten().copied().collect();
            scalar_loss(|g| {
                let l = g.input(Tensor::from_vec(vec![3, 3], flat));
                clip_loss(g, l).unwrap()
            })
        };
        assert!((loss_of(&m) - loss_of(&pm)).abs() < 1e-12);
    }
}
