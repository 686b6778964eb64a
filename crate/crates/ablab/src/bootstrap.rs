//! Value targets, the bootstrapping loss, the combined training step, and
//! the ablation switches. Targets mix the EMA reward distribution with the
//! sigmoid of the EMA value maximum over the sampled within-image actions.

use crate::ad::graph::{Graph, NodeId};
use crate::ad::optim::{adamw_step, ema_update, tau_schedule, AdamConfig, AdamState, TauKind};
use crate::ad::params::EmaState;
use crate::ad::tensor::Tensor;
use crate::ad::AdError;
use crate::geometry::{discretize_action, relative_bbox, sample_crop, ActionTokens, CropConfig, GeometryError};
use crate::models::{
    annotation_embed, annotation_table_rows, bind_params, decode_values, encode_tokens,
    pooled_embed, reward_logits, value_logits, views_to_patches, AnnHead, Bound, ModelError,
    QModel, Variant,
};
use crate::rewards::{
    clip_loss, dino_loss, dino_teacher_probs, dino_update_center, normalize_prototypes,
    reward_probs, simclr_loss, DinoState, RewardError,
};
use crate::synthdata::{render_view, Canvas, View};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: reward={reward_loss} value={value_loss} max|logit|={max_logit}")]
    NonFinite {
        step: u64,
        reward_loss: f64,
        value_loss: f64,
        max_logit: f64,
    },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub no_action_tokens: bool,
    pub no_propagation: bool,
    pub no_target_network: bool,
    pub no_annotation_loss: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Discount: weight of propagated value vs immediate annotation reward.
    pub gamma: f64,
    /// Views per image in the transition batch.
    pub n_views: usize,
    /// Images per transition batch.
    pub batch: usize,
    /// Items in the reward batch.
    pub reward_batch: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub tau_kind: TauKind,
    #[serde(default)]
    pub flags: AblationFlags,
    pub crop: CropConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(TrainError::Config(format!("gamma must be in [0,1), got {}", self.gamma)));
        }
        if self.n_views < 2 {
            return Err(TrainError::Config(format!("n_views must be >= 2, got {}", self.n_views)));
        }
        if self.batch == 0 || self.reward_batch < 2 {
            return Err(TrainError::Config("batch >= 1 and reward_batch >= 2 required".into()));
        }
        self.crop.validate().map_err(TrainError::Geometry)?;
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// What the annotation batch refers to for value targets.
#[derive(Debug, Clone)]
pub enum AnnotationRef {
    /// CLIP-style: vocabulary indices.
    VocabIds(Vec<usize>),
    /// SimCLR-style: embedded reference views.
    Views(Vec<View>),
    /// DINO-style: all prototypes.
    Prototypes,
}

impl AnnotationRef {
    pub fn len(&self, protos: usize) -> usize {
        match self {
            AnnotationRef::VocabIds(v) => v.len(),
            AnnotationRef::Views(v) => v.len(),
            AnnotationRef::Prototypes => protos,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, AnnotationRef::VocabIds(v) if v.is_empty())
            || matches!(self, AnnotationRef::Views(v) if v.is_empty())
    }
}

/// B images x N views plus the full N x N action grid per image, in
/// (image, source view, target view) order.
#[derive(Debug, Clone)]
pub struct TransitionBatch {
    pub views: Vec<View>,
    pub actions: Vec<ActionTokens>,
    pub b: usize,
    pub n: usize,
    pub annotations: AnnotationRef,
}

/// Sample N crops per canvas and tokenize all N^2 relative actions;
/// actions[j][j] is the identity.
pub fn build_transitions<R: Rng>(
    rng: &mut R,
    canvases: &[(usize, &Canvas)],
    n: usize,
    crop: &CropConfig,
    resolution: usize,
    annotations: AnnotationRef,
) -> Result<TransitionBatch, TrainError> {
    let mut boxes = Vec::with_capacity(canvases.len());
    for _ in canvases {
        let per_image: Vec<_> =
            (0..n).map(|_| sample_crop(rng, crop)).collect::<Result<_, _>>()?;
        boxes.push(per_image);
    }
    transitions_from_boxes(canvases, &boxes, resolution, annotations)
}

/// Build a transition batch from pre-chosen view boxes, one Vec of N boxes
/// per canvas.
pub fn transitions_from_boxes(
    canvases: &[(usize, &Canvas)],
    boxes: &[Vec<crate::geometry::BBox>],
    resolution: usize,
    annotations: AnnotationRef,
) -> Result<TransitionBatch, TrainError> {
    let b = canvases.len();
    assert_eq!(boxes.len(), b, "one box set per canvas");
    let n = boxes.first().map_or(0, Vec::len);
    if n < 2 {
        return Err(TrainError::Config(format!("need at least 2 views, got {n}")));
    }
    let mut views = Vec::with_capacity(b * n);
    let mut actions = Vec::with_capacity(b * n * n);
    for (&(scene_id, canvas), image_boxes) in canvases.iter().zip(boxes) {
        assert_eq!(image_boxes.len(), n, "equal view counts per image");
        for bbox in image_boxes {
            views.push(render_view(canvas, bbox, resolution, scene_id));
        }
        for j in 0..n {
            for k in 0..n {
                let rel = relative_bbox(&image_boxes[j], &image_boxes[k])?;
                actions.push(discretize_action(&rel));
            }
        }
    }
    Ok(TransitionBatch { views, actions, b, n, annotations })
}

/// Numerically exact logit; maps 0 and 1 to ∓infinity (sigmoid restores them).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Single-image target operator on plain tables:
/// target[j][ℓ] = (1−γ)·p[j][ℓ] + γ·σ(max_k q[j][k][ℓ]), max ties to lowest k.
pub fn compute_targets_from_tables(p: &[f64], q_logits: &[f64], n: usize, l: usize, gamma: f64) -> Vec<f64> {
    assert_eq!(p.len(), n * l);
    assert_eq!(q_logits.len(), n * n * l);
    let mut out = vec![0.0; n * l];
    for j in 0..n {
        for li in 0..l {
            let mut best = f64::NEG_INFINITY;
            for k in 0..n {
                let v = q_logits[(j * n + k) * l + li];
                if v > best {
                    best = v;
                }
            }
            out[j * l + li] = (1.0 - gamma) * p[j * l + li] + gamma * sigmoid(best);
        }
    }
    out
}

/// Batched target computation from EMA outputs (host-side, 64-bit).
pub fn compute_targets_host(
    probs: &[f64],
    q_logits: &[f64],
    b: usize,
    n: usize,
    l: usize,
    gamma: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(b * n * l);
    for bi in 0..b {
        out.extend(compute_targets_from_tables(
            &probs[bi * n * l..(bi + 1) * n * l],
            &q_logits[bi * n * n * l..(bi + 1) * n * n * l],
            n,
            l,
            gamma,
        ));
    }
    out
}

/// Expand per-(image, target view) targets to the full pair grid: the
/// prediction for (b, i, j) regresses to target[b, j], including i = j.
pub fn expand_targets(targets: &[f64], b: usize, n: usize, l: usize) -> Vec<f64> {
    assert_eq!(targets.len(), b * n * l);
    let mut out = Vec::with_capacity(b * n * n * l);
    for bi in 0..b {
        for _i in 0..n {
            for j in 0..n {
                out.extend_from_slice(&targets[(bi * n + j) * l..(bi * n + j + 1) * l]);
            }
        }
    }
    out
}

/// Everything mutated by one training step.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: QModel,
    pub ema: EmaState,
    pub adam: AdamState,
    pub adam_cfg: AdamConfig,
    pub dino: Option<DinoState>,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: QModel) -> Result<Self, TrainError> {
        let ema = EmaState::from_online(&model.params);
        let dino = match model.cfg.variant {
            Variant::Dino => Some(DinoState::new(model.cfg.protos)?),
            _ => None,
        };
        Ok(TrainState {
            model,
            ema,
            adam: AdamState::default(),
            adam_cfg: AdamConfig::default(),
            dino,
            step: 0,
        })
    }
}

/// Reward-batch payload per variant. SimCLR/DINO views come in adjacent
/// pairs (2i, 2i+1) of the same image.
#[derive(Debug, Clone)]
pub enum RewardBatch {
    Clip { views: Vec<View>, ids: Vec<usize> },
    Simclr { views: Vec<View> },
    Dino { views: Vec<View> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub reward_loss: f64,
    pub value_loss: f64,
    pub tau: f64,
    pub gamma: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Value-head annotation embeddings psi_AB for the batch's annotation set.
pub(crate) fn value_psi(
    g: &mut Graph<f32>,
    model_cfg: &crate::models::ModelCfg,
    p: &Bound,
    annotations: &AnnotationRef,
) -> Result<NodeId, TrainError> {
    let base = match annotations {
        AnnotationRef::VocabIds(ids) => annotation_table_rows(g, p, ids)?,
        AnnotationRef::Views(views) => {
            let refs: Vec<&View> = views.iter().collect();
            let patches = views_to_patches::<f32>(&refs, model_cfg)?;
            let pn = g.constant(patches);
            let toks = encode_tokens(g, model_cfg, p, pn)?;
            g.mean_axis1(toks)?
        }
        AnnotationRef::Prototypes => p.id("ann.protos"),
    };
    Ok(annotation_embed(g, p, base, AnnHead::Value)?)
}

/// Reward-head annotation embeddings psi for the same annotation set.
pub(crate) fn reward_psi(
    g: &mut Graph<f32>,
    model_cfg: &crate::models::ModelCfg,
    p: &Bound,
    annotations: &AnnotationRef,
) -> Result<NodeId, TrainError> {
    let base = match annotations {
        AnnotationRef::VocabIds(ids) => annotation_table_rows(g, p, ids)?,
        AnnotationRef::Views(views) => {
            let refs: Vec<&View> = views.iter().collect();
            let patches = views_to_patches::<f32>(&refs, model_cfg)?;
            let pn = g.constant(patches);
            let toks = encode_tokens(g, model_cfg, p, pn)?;
            g.mean_axis1(toks)?
        }
        AnnotationRef::Prototypes => p.id("ann.protos"),
    };
    Ok(annotation_embed(g, p, base, AnnHead::Reward)?)
}

/// The per-step computation graph, before any parameter update: both loss
/// terms plus the handles needed for gradients and diagnostics.
pub struct BuiltStep {
    pub online: Bound,
    pub frozen: Bound,
    pub reward_loss: Option<NodeId>,
    pub value_loss: NodeId,
    pub value_logits: NodeId,
    /// Raw teacher similarities, kept for the DINO centre update.
    pub teacher_sims: Option<Vec<f64>>,
}

/// Build one training step's losses into `g` without mutating the state.
pub fn build_step(
    g: &mut Graph<f32>,
    state: &TrainState,
    reward_batch: &RewardBatch,
    transitions: &TransitionBatch,
    cfg: &TrainConfig,
) -> Result<BuiltStep, TrainError> {
    let mcfg = state.model.cfg;
    let (b, n) = (transitions.b, transitions.n);
    let l = transitions.annotations.len(mcfg.protos);
    if transitions.annotations.is_empty() {
        return Err(TrainError::Config("empty annotation set".into()));
    }
    let online = bind_params(g, &state.model.params, false);
    let target_store = if cfg.flags.no_target_network {
        &state.model.params
    } else {
        &state.ema.params
    };
    let frozen = bind_params(g, target_store, true);

    let view_refs: Vec<&View> = transitions.views.iter().collect();
    let patches = views_to_patches::<f32>(&view_refs, &mcfg)?;

    // Target side (all under stop-gradient): reward probs + value logits.
    let pn_t = g.constant(patches.clone());
    let toks_t = encode_tokens(g, &mcfg, &frozen, pn_t)?;
    let phi_t = pooled_embed(g, &frozen, toks_t)?;
    let psi_rew_t = reward_psi(g, &mcfg, &frozen, &transitions.annotations)?;
    let r_logits_t = reward_logits(g, &frozen, phi_t, psi_rew_t)?;
    let r_logits_host = g.value(r_logits_t).to_f64_vec();
    let probs = match (&state.dino, &transitions.annotations) {
        (Some(ds), AnnotationRef::Prototypes) => dino_teacher_probs(ds, &r_logits_host),
        _ => reward_probs(&r_logits_host, l),
    };
    let phi_ab_t = decode_values(
        g,
        &mcfg,
        &frozen,
        toks_t,
        &transitions.actions,
        n,
        cfg.flags.no_action_tokens,
    )?;
    let psi_val_t = value_psi(g, &mcfg, &frozen, &transitions.annotations)?;
    let q_logits_t = value_logits(g, &frozen, phi_ab_t, psi_val_t)?;
    let q_host = g.value(q_logits_t).to_f64_vec();

    let effective_gamma = if cfg.flags.no_propagation { 0.0 } else { cfg.gamma };
    let targets = compute_targets_host(&probs, &q_host, b, n, l, effective_gamma);
    debug_assert!(targets.iter().all(|&t| (0.0..=1.0).contains(&t)));
    let expanded = expand_targets(&targets, b, n, l);
    let target_tensor = Tensor::<f32>::from_f64(vec![b * n * n, l], &expanded);

    // Online side: value loss over the full pair grid.
    let pn_o = g.constant(patches);
    let toks_o = encode_tokens(g, &mcfg, &online, pn_o)?;
    let phi_ab_o = decode_values(
        g,
        &mcfg,
        &online,
        toks_o,
        &transitions.actions,
        n,
        cfg.flags.no_action_tokens,
    )?;
    let psi_val_o = value_psi(g, &mcfg, &online, &transitions.annotations)?;
    let q_logits_o = value_logits(g, &online, phi_ab_o, psi_val_o)?;
    let value_loss_node = g.bce_with_logits(q_logits_o, &target_tensor)?;

    // Reward loss per variant.
    let mut teacher_sims = None;
    let reward_loss_node = if cfg.flags.no_annotation_loss {
        None
    } else {
        Some(match reward_batch {
            RewardBatch::Clip { views, ids } => {
                let refs: Vec<&View> = views.iter().collect();
                let p = views_to_patches::<f32>(&refs, &mcfg)?;
                let pn = g.constant(p);
                let toks = encode_tokens(g, &mcfg, &online, pn)?;
                let phi = pooled_embed(g, &online, toks)?;
                let base = annotation_table_rows(g, &online, ids)?;
                let psi = annotation_embed(g, &online, base, AnnHead::Reward)?;
                let logits = reward_logits(g, &online, phi, psi)?;
                clip_loss(g, logits)?
            }
            RewardBatch::Simclr { views } => {
                let refs: Vec<&View> = views.iter().collect();
                let p = views_to_patches::<f32>(&refs, &mcfg)?;
                let pn = g.constant(p);
                let toks = encode_tokens(g, &mcfg, &online, pn)?;
                let phi = pooled_embed(g, &online, toks)?;
                let pooled = g.mean_axis1(toks)?;
                let psi = annotation_embed(g, &online, pooled, AnnHead::Reward)?;
                let sims = reward_logits(g, &online, phi, psi)?;
                simclr_loss(g, sims)?
            }
            RewardBatch::Dino { views } => {
                let ds = state
                    .dino
                    .as_ref()
                    .expect("DINO state present for DINO variant");
                let refs: Vec<&View> = views.iter().collect();
                let p = views_to_patches::<f32>(&refs, &mcfg)?;
                // Teacher similarities from the frozen copy.
                let pn_teach = g.constant(p.clone());
                let toks_teach = encode_tokens(g, &mcfg, &frozen, pn_teach)?;
                let phi_teach = pooled_embed(g, &frozen, toks_teach)?;
                let protos_t = frozen.id("ann.protos");
                let psi_teach = g.l2norm_rows(protos_t)?;
                let sims_teach_node = g.matmul_nt(phi_teach, psi_teach)?;
                let sims_teach = g.value(sims_teach_node).to_f64_vec();
                // Swap pairs: the teacher for view i is its partner i^1.
                let k = mcfg.protos;
                let rows = sims_teach.len() / k;
                let mut teacher_swapped = vec![0.0; sims_teach.len()];
                for i in 0..rows {
                    let partner = i ^ 1;
                    teacher_swapped[i * k..(i + 1) * k]
                        .copy_from_slice(&sims_teach[partner * k..(partner + 1) * k]);
                }
                let teacher_p = dino_teacher_probs(ds, &teacher_swapped);
                let teacher_tensor = Tensor::<f32>::from_f64(vec![rows, k], &teacher_p);
                // Student similarities from the online copy.
                let pn_stud = g.constant(p);
                let toks_stud = encode_tokens(g, &mcfg, &online, pn_stud)?;
                let phi_stud = pooled_embed(g, &online, toks_stud)?;
                let protos_o = online.id("ann.protos");
                let psi_stud = g.l2norm_rows(protos_o)?;
                let sims_stud = g.matmul_nt(phi_stud, psi_stud)?;
                let loss = dino_loss(g, ds, sims_stud, &teacher_tensor)?;
                teacher_sims = Some(sims_teach);
                loss
            }
        })
    };

    Ok(BuiltStep {
        online,
        frozen,
        reward_loss: reward_loss_node,
        value_loss: value_loss_node,
        value_logits: q_logits_o,
        teacher_sims,
    })
}

/// One combined step: reward loss + value bootstrapping loss (ratio 1.0),
/// AdamW update, EMA update, metrics.
pub fn train_step(
    state: &mut TrainState,
    reward_batch: &RewardBatch,
    transitions: &TransitionBatch,
    cfg: &TrainConfig,
) -> Result<StepMetrics, TrainError> {
    let t0 = std::time::Instant::now();
    let mut g: Graph<f32> = Graph::new();
    let built = build_step(&mut g, state, reward_batch, transitions, cfg)?;

    let total = match built.reward_loss {
        Some(r) => g.add(r, built.value_loss)?,
        None => built.value_loss,
    };
    let reward_loss = built.reward_loss.map_or(0.0, |r| g.scalar_value(r) as f64);
    let value_loss = g.scalar_value(built.value_loss) as f64;
    if !reward_loss.is_finite() || !value_loss.is_finite() {
        let max_logit = g
            .value(built.value_logits)
            .data
            .iter()
            .map(|v| v.abs() as f64)
            .fold(0.0, f64::max);
        return Err(TrainError::NonFinite {
            step: state.step,
            reward_loss,
            value_loss,
            max_logit,
        });
    }

    let grads_by_node = g.backward(total);
    let names: Vec<String> = state.model.params.names().map(str::to_string).collect();
    let mut grads: Vec<(String, Tensor<f32>)> = Vec::new();
    for name in names {
        if let Some(gt) = grads_by_node.get(built.online.input_id(&name)) {
            grads.push((name, gt.clone()));
        }
    }
    let lr = cfg.lr_at(state.step);
    adamw_step(&mut state.model.params, &grads, &mut state.adam, lr, &state.adam_cfg)?;
    if state.model.cfg.variant == Variant::Dino {
        normalize_prototypes(&mut state.model.params);
    }
    if let (Some(ds), Some(sims)) = (state.dino.as_mut(), built.teacher_sims.as_ref()) {
        dino_update_center(ds, sims);
    }
    let tau = tau_schedule(cfg.tau_kind, state.step, cfg.total_steps);
    ema_update(&mut state.ema, &state.model.params, tau)?;
    state.step += 1;

    Ok(StepMetrics {
        step: state.step,
        reward_loss,
        value_loss,
        tau,
        gamma: cfg.gamma,
        lr,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}
