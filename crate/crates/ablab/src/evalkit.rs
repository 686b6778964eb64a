//! Probes and diagnostics: linear probes on frozen features, IoU-bucketed
//! bootstrap-prediction accuracy, gradient-cosine alignment between the two
//! loss terms, and the neural-vs-oracle value gap.

use crate::ad::graph::{Gradients, Graph, NodeId};
use crate::ad::params::EmaState;
use crate::ad::tensor::Scalar;
use crate::ad::AdError;
use crate::bootstrap::{
    compute_targets_host, reward_psi, value_psi, AnnotationRef, TransitionBatch,
};
use crate::geometry::{discretize_action, iou, relative_bbox, BBox};
use crate::models::{
    bind_params, decode_values, encode_tokens, pooled_embed, reward_logits, value_logits,
    views_to_patches, Bound, ModelError, QModel,
};
use crate::oracle::{window_bbox, DiscreteMdp};
use crate::rewards::reward_probs;
use crate::synthdata::{rasterize_scene, render_view, Scene, View};
use serde::{Deserialize, Serialize};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("probe train split contains a single class")]
    SingleClass,
    #[error("probe split index {0} out of range for {1} samples")]
    BadSplit(usize, usize),
    #[error("buckets must partition [0,1], got {0:?}")]
    BadBuckets(Vec<(f64, f64)>),
    #[error("lattice/render mismatch: {0}")]
    LatticeMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// IoU bucketing used for bootstrap-accuracy reports: near to far.
pub const DEFAULT_BUCKETS: [(f64, f64); 4] = [(0.6, 1.0), (0.3, 0.6), (0.1, 0.3), (0.0, 0.1)];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub accuracy: f64,
    pub samples: usize,
    pub config_hash: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ProbeSplit {
    /// Deterministic interleaved split: every `hold_every`-th sample held out.
    pub fn interleaved(m: usize, hold_every: usize) -> Self {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for i in 0..m {
            if hold_every > 0 && i % hold_every == hold_every - 1 {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        ProbeSplit { train, test }
    }
}

const PROBE_MAX_ITERS: usize = 5000;
const PROBE_GRAD_TOL: f64 = 1e-6;

/// Multinomial logistic regression on frozen features by full-batch gradient
/// descent (gradient norm <= 1e-6 or 5k iterations); reports held-out accuracy.
pub fn linear_probe(
    task: &str,
    features: &[f64],
    dim: usize,
    labels: &[usize],
    split: &ProbeSplit,
) -> Result<ProbeReport, EvalError> {
    let m = labels.len();
    assert_eq!(features.len(), m * dim, "features must be row-major [M x dim]");
    for &i in split.train.iter().chain(&split.test) {
        if i >= m {
            return Err(EvalError::BadSplit(i, m));
        }
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let train_classes: std::collections::HashSet<usize> =
        split.train.iter().map(|&i| labels[i]).collect();
    if train_classes.len() < 2 {
        return Err(EvalError::SingleClass);
    }

    // Weights [classes x (dim + 1)], last column is the bias.
    let cols = dim + 1;
    let mut w = vec![0.0f64; classes * cols];
    let nt = split.train.len() as f64;
    let mut lr = 2.0;
    let mut prev_loss = f64::INFINITY;
    for _ in 0..PROBE_MAX_ITERS {
        let mut grad = vec![0.0f64; classes * cols];
        let mut loss = 0.0;
        for &i in &split.train {
            let x = &features[i * dim..(i + 1) * dim];
            let (p, lse) = class_probs(&w, x, classes, dim);
            loss += lse - logits_of(&w, x, classes, dim)[labels[i]];
            for c in 0..classes {
                let err = p[c] - if c == labels[i] { 1.0 } else { 0.0 };
                let row = &mut grad[c * cols..(c + 1) * cols];
                for (gk, &xk) in row[..dim].iter_mut().zip(x) {
                    *gk += err * xk;
                }
                row[dim] += err;
            }
        }
        loss /= nt;
        for gk in &mut grad {
            *gk /= nt;
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm <= PROBE_GRAD_TOL {
            break;
        }
        // Plain GD with a halving guard so the fixed step never diverges.
        if loss > prev_loss {
            lr *= 0.5;
        }
        prev_loss = loss;
        for (wk, gk) in w.iter_mut().zip(&grad) {
            *wk -= lr * gk;
        }
    }

    let mut correct = 0usize;
    for &i in &split.test {
        let x = &features[i * dim..(i + 1) * dim];
        let logits = logits_of(&w, x, classes, dim);
        let pred = argmax(&logits);
        if pred == labels[i] {
            correct += 1;
        }
    }
    let accuracy = if split.test.is_empty() {
        0.0
    } else {
        correct as f64 / split.test.len() as f64
    };
    let mut h = DefaultHasher::new();
    (PROBE_MAX_ITERS, dim, classes, split.train.len()).hash(&mut h);
    Ok(ProbeReport {
        task: task.to_string(),
        accuracy,
        samples: split.test.len(),
        config_hash: h.finish(),
    })
}

fn logits_of(w: &[f64], x: &[f64], classes: usize, dim: usize) -> Vec<f64> {
    let cols = dim + 1;
    (0..classes)
        .map(|c| {
            let row = &w[c * cols..(c + 1) * cols];
            row[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[dim]
        })
        .collect()
}

fn class_probs(w: &[f64], x: &[f64], classes: usize, dim: usize) -> (Vec<f64>, f64) {
    let logits = logits_of(w, x, classes, dim);
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    (exps.iter().map(|&e| e / z).collect(), z.ln() + mx)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Pooled, unit-norm feature rows for a set of views, under frozen parameters.
pub fn extract_features(model: &QModel, views: &[&View]) -> Result<Vec<f64>, EvalError> {
    let mut g: Graph<f32> = Graph::new();
    let p = bind_params(&mut g, &model.params, true);
    let patches = views_to_patches::<f32>(views, &model.cfg)?;
    let pn = g.constant(patches);
    let toks = encode_tokens(&mut g, &model.cfg, &p, pn)?;
    let phi = pooled_embed(&mut g, &p, toks)?;
    Ok(g.value(phi).to_f64_vec())
}

/// Probe label: largest-area annotation visible in the view, background
/// included as the last class.
pub fn dominant_glyph_label(scene: &Scene, bbox: &BBox) -> usize {
    argmax(&crate::synthdata::true_annotation_dist(scene, bbox))
}

/// Probe label: the glyph occupying the cell `offset` cells away from the
/// cell under the view centre; off-grid or empty cells map to the background
/// class. Sensitive to where content is, not just what is visible.
pub fn glyph_at_offset_label(scene: &Scene, bbox: &BBox, offset: (isize, isize)) -> usize {
    let g = scene.grid as isize;
    let cy = (((bbox.y_min + bbox.y_max) * 0.5) * g as f64).floor() as isize;
    let cx = (((bbox.x_min + bbox.x_max) * 0.5) * g as f64).floor() as isize;
    let ty = cy.clamp(0, g - 1) + offset.0;
    let tx = cx.clamp(0, g - 1) + offset.1;
    if ty < 0 || ty >= g || tx < 0 || tx >= g {
        return scene.vocab;
    }
    let cell = scene.cells[(ty * g + tx) as usize];
    if cell == 0 {
        scene.vocab
    } else {
        cell as usize - 1
    }
}

/// Per-bucket argmax agreement between online value predictions and the
/// bootstrapped targets on held-out transitions; empty buckets report null.
pub fn bucketed_bootstrap_accuracy(
    model: &QModel,
    ema: &EmaState,
    transitions: &TransitionBatch,
    gamma: f64,
    buckets: &[(f64, f64)],
) -> Result<Vec<Option<f64>>, EvalError> {
    if buckets.is_empty() {
        return Err(EvalError::BadBuckets(buckets.to_vec()));
    }
    let cfg = model.cfg;
    let (b, n) = (transitions.b, transitions.n);
    let l = transitions.annotations.len(cfg.protos);
    let mut g: Graph<f32> = Graph::new();
    let online = bind_params(&mut g, &model.params, true);
    let frozen = bind_params(&mut g, &ema.params, true);
    let view_refs: Vec<&View> = transitions.views.iter().collect();
    let patches = views_to_patches::<f32>(&view_refs, &cfg)?;

    // Target side from the EMA copy.
    let pn_t = g.constant(patches.clone());
    let toks_t = encode_tokens(&mut g, &cfg, &frozen, pn_t)?;
    let phi_t = pooled_embed(&mut g, &frozen, toks_t)?;
    let psi_rew = reward_psi(&mut g, &cfg, &frozen, &transitions.annotations)
        .map_err(|e| EvalError::LatticeMismatch(e.to_string()))?;
    let rl = reward_logits(&mut g, &frozen, phi_t, psi_rew)?;
    let probs = reward_probs(&g.value(rl).to_f64_vec(), l);
    let phi_ab_t = decode_values(&mut g, &cfg, &frozen, toks_t, &transitions.actions, n, false)?;
    let psi_val_t = value_psi(&mut g, &cfg, &frozen, &transitions.annotations)
        .map_err(|e| EvalError::LatticeMismatch(e.to_string()))?;
    let ql_t = value_logits(&mut g, &frozen, phi_ab_t, psi_val_t)?;
    let targets =
        compute_targets_host(&probs, &g.value(ql_t).to_f64_vec(), b, n, l, gamma);

    // Online predictions.
    let pn_o = g.constant(patches);
    let toks_o = encode_tokens(&mut g, &cfg, &online, pn_o)?;
    let phi_ab_o = decode_values(&mut g, &cfg, &online, toks_o, &transitions.actions, n, false)?;
    let psi_val_o = value_psi(&mut g, &cfg, &online, &transitions.annotations)
        .map_err(|e| EvalError::LatticeMismatch(e.to_string()))?;
    let ql_o = value_logits(&mut g, &online, phi_ab_o, psi_val_o)?;
    let preds = g.value(ql_o).to_f64_vec();

    let mut hits = vec![0usize; buckets.len()];
    let mut totals = vec![0usize; buckets.len()];
    for bi in 0..b {
        for i in 0..n {
            for j in 0..n {
                let pair_iou = iou(
                    &transitions.views[bi * n + i].bbox,
                    &transitions.views[bi * n + j].bbox,
                );
                let Some(bucket) = buckets.iter().position(|&(lo, hi)| {
                    pair_iou >= lo && (pair_iou < hi || (hi >= 1.0 && pair_iou <= 1.0))
                }) else {
                    continue;
                };
                let row = ((bi * n + i) * n + j) * l;
                let pred = argmax(&preds[row..row + l]);
                let want = argmax(&targets[(bi * n + j) * l..(bi * n + j + 1) * l]);
                totals[bucket] += 1;
                if pred == want {
                    hits[bucket] += 1;
                }
            }
        }
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { None } else { Some(h as f64 / t as f64) })
        .collect())
}

/// Cosine similarity between the gradients of two losses over the parameters
/// whose names start with `prefix` (the encoder, by default). Returns null if
/// either gradient vector is exactly zero.
pub fn grad_cosine<T: Scalar>(
    g: &Graph<T>,
    bound: &Bound,
    loss_a: NodeId,
    loss_b: NodeId,
    prefix: &str,
) -> Option<f64> {
    let ga = g.backward(loss_a);
    let gb = g.backward(loss_b);
    let mut names: Vec<&str> = bound.names().filter(|n| n.starts_with(prefix)).collect();
    names.sort_unstable();
    // A parameter may receive a gradient from one loss but not the other;
    // fill zeros of the parameter's size to keep positions aligned.
    let flat_aligned = |grads: &Gradients<T>| -> Vec<f64> {
        let mut v = Vec::new();
        for name in &names {
            let id = bound.input_id(name);
            match grads.get(id) {
                Some(t) => v.extend(t.to_f64_vec()),
                None => {
                    let numel = g.value(id).data.len();
                    v.extend(std::iter::repeat(0.0).take(numel));
                }
            }
        }
        v
    };
    let va = flat_aligned(&ga);
    let vb = flat_aligned(&gb);
    let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = va.iter().zip(&vb).map(|(a, b)| a * b).sum();
    Some(dot / (na * nb))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GapReport {
    pub max_abs: f64,
    pub mean_abs: f64,
    pub compared: usize,
}

/// Render every oracle observation, evaluate the model's action values on
/// the exact lattice moves, and compare sigmoid(value logits) against the
/// observation-averaged fixed point `obs_table` from `observation_q`.
pub fn oracle_value_gap(
    model: &QModel,
    mdp: &DiscreteMdp,
    obs_of_state: &[usize],
    obs_table: &[f64],
) -> Result<GapReport, EvalError> {
    if mdp.scenes.is_empty() {
        return Err(EvalError::LatticeMismatch("MDP has no attached scenes".into()));
    }
    if obs_of_state.len() != mdp.n_states {
        return Err(EvalError::LatticeMismatch(format!(
            "observation map covers {} states, MDP has {}",
            obs_of_state.len(),
            mdp.n_states
        )));
    }
    let cfg = model.cfg;
    let l = mdp.l;
    if l != cfg.vocab {
        return Err(EvalError::LatticeMismatch(format!(
            "MDP has {} annotations, model vocabulary holds {}",
            l, cfg.vocab
        )));
    }
    let w = mdp.windows.len();
    let annotations = AnnotationRef::VocabIds((0..l).collect());

    // One representative state per observation.
    let n_obs = obs_of_state.iter().copied().max().map_or(0, |m| m + 1);
    let mut rep_state = vec![usize::MAX; n_obs];
    for (s, &o) in obs_of_state.iter().enumerate() {
        if rep_state[o] == usize::MAX {
            rep_state[o] = s;
        }
    }

    // Valid (in-lattice) actions per source window, tokenized from the exact
    // relative moves. Off-lattice actions self-loop in the oracle but have no
    // rendered counterpart, so they are skipped on both sides.
    let mut canvases = Vec::with_capacity(mdp.scenes.len());
    for scene in &mdp.scenes {
        canvases.push(rasterize_scene(scene));
    }

    let mut sum_abs = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut compared = 0usize;
    let al = mdp.n_actions * l;
    for (o, &s) in rep_state.iter().enumerate() {
        let scene_idx = s / w;
        let win_idx = s % w;
        let src = &mdp.windows[win_idx];
        let src_bbox = window_bbox(src, mdp.grid);
        let view = render_view(&canvases[scene_idx], &src_bbox, cfg.resolution, scene_idx);

        let mut tokens = Vec::new();
        let mut action_ids = Vec::new();
        for (ai, act) in mdp.actions.iter().enumerate() {
            let ty = src.y as isize + act.dy;
            let tx = src.x as isize + act.dx;
            let span = 2 * (mdp.grid - act.size.min(mdp.grid)) as isize;
            if act.size > mdp.grid || ty < 0 || tx < 0 || ty > span || tx > span {
                continue;
            }
            let dst = crate::oracle::Window { y: ty as usize, x: tx as usize, size: act.size };
            let rel = relative_bbox(&src_bbox, &window_bbox(&dst, mdp.grid))
                .map_err(|e| EvalError::LatticeMismatch(e.to_string()))?;
            tokens.push(discretize_action(&rel));
            action_ids.push(ai);
        }
        if tokens.is_empty() {
            continue;
        }

        let mut g: Graph<f32> = Graph::new();
        let p = bind_params(&mut g, &model.params, true);
        let patches = views_to_patches::<f32>(&[&view], &cfg)?;
        let pn = g.constant(patches);
        let toks = encode_tokens(&mut g, &cfg, &p, pn)?;
        let phi_ab = decode_values(&mut g, &cfg, &p, toks, &tokens, tokens.len(), false)?;
        let psi = value_psi(&mut g, &cfg, &p, &annotations)
            .map_err(|e| EvalError::LatticeMismatch(e.to_string()))?;
        let ql = value_logits(&mut g, &p, phi_ab, psi)?;
        let logits = g.value(ql).to_f64_vec();

        for (row, &ai) in action_ids.iter().enumerate() {
            for li in 0..l {
                let z = logits[row * l + li];
                let pred = 1.0 / (1.0 + (-z).exp());
                let truth = obs_table[o * al + ai * l + li];
                let err = (pred - truth).abs();
                sum_abs += err;
                max_abs = max_abs.max(err);
                compared += 1;
            }
        }
    }
    if compared == 0 {
        return Err(EvalError::LatticeMismatch("no comparable state-action pairs".into()));
    }
    Ok(GapReport { max_abs, mean_abs: sum_abs / compared as f64, compared })
}

/// Everything `eval` writes for one checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub probes: Vec<ProbeReport>,
    pub bucket_accuracy: Vec<Option<f64>>,
    pub grad_cosine: Option<f64>,
    pub oracle_gap: Option<GapReport>,
}

/// Minimal CSV writer for sweep summaries: quotes nothing, so keep fields
/// free of commas.
pub fn write_csv(path: &std::path::Path, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", header.join(","))?;
    for row in rows {
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}
