//! The training loop shared by the CLI and the integration tests: per-step
//! deterministic sampling, checkpointing, metrics emission, and bit-exact
//! resume.

use crate::ad::checkpoint::{load_meta, load_namespace, save_checkpoint, CheckpointError};
use crate::ad::optim::AdamState;
use crate::ad::params::{EmaState, ParamStore};
use crate::ad::tensor::Tensor;
use crate::bootstrap::{
    build_transitions, transitions_from_boxes, AnnotationRef, RewardBatch, StepMetrics,
    TrainConfig, TrainError, TrainState, TransitionBatch,
};
use crate::geometry::BBox;
use crate::models::{ModelCfg, QModel, Variant};
use crate::oracle::{window_bbox, Window};
use crate::rewards::DinoState;
use crate::synthdata::{
    generate_scene, rasterize_scene, render_view, true_annotation_dist, Canvas, DataError, Scene,
    SceneConfig, View,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad run config: {0}")]
    Config(String),
    #[error(transparent)]
    Eval(#[from] crate::evalkit::EvalError),
    #[error("IoU band [{}, {}) unsatisfiable after {1} rejections", .0.0, .0.1)]
    Unsatisfiable((f64, f64), u64),
}

impl From<serde_json::Error> for RunError {
    fn from(e: serde_json::Error) -> Self {
        RunError::Config(e.to_string())
    }
}

/// How view boxes are drawn during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum CropKind {
    /// Random resized crops from the train config's sampler.
    Rrc,
    /// Uniform draws from the half-cell lattice windows of the given sizes,
    /// matching the discrete oracle's state space.
    Lattice { sizes: Vec<usize> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelCfg,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub n_scenes: usize,
    pub ckpt_every: u64,
    pub crops: CropKind,
    /// Constrain each sampled view pair's IoU into this half-open band by
    /// rejection sampling, leaving the marginal box distribution unchanged.
    #[serde(default)]
    pub pair_iou_band: Option<(f64, f64)>,
}

/// Rejection budget before a band is declared unsatisfiable.
pub const MAX_PAIR_REJECTIONS: u64 = 1_000_000;

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        self.model
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        self.train.validate()?;
        self.scene
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        if self.n_scenes == 0 {
            return Err(RunError::Config("n_scenes must be nonzero".into()));
        }
        if self.model.vocab != self.scene.vocab + 1 {
            return Err(RunError::Config(format!(
                "model vocabulary {} must equal scene glyphs + background = {}",
                self.model.vocab,
                self.scene.vocab + 1
            )));
        }
        if let Some((lo, hi)) = self.pair_iou_band {
            if !(0.0..=1.0).contains(&lo) || !(lo < hi) || hi > 1.0 + 1e-12 {
                return Err(RunError::Config(format!(
                    "IoU band [{lo}, {hi}) must satisfy 0 <= lo < hi <= 1"
                )));
            }
            if self.train.n_views != 2 {
                return Err(RunError::Config(
                    "pair_iou_band requires exactly 2 views per image".into(),
                ));
            }
        }
        if let CropKind::Lattice { sizes } = &self.crops {
            if sizes.is_empty() || sizes.iter().any(|&s| s == 0 || s > self.scene.grid) {
                return Err(RunError::Config(format!(
                    "lattice sizes {sizes:?} must be in 1..={}",
                    self.scene.grid
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub scenes: Vec<Scene>,
    pub canvases: Vec<Canvas>,
}

impl TrainData {
    pub fn from_scenes(scenes: Vec<Scene>) -> Self {
        let canvases = scenes.iter().map(rasterize_scene).collect();
        TrainData { scenes, canvases }
    }

    pub fn generate(cfg: &SceneConfig, n: usize, seed: u64) -> Result<Self, DataError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenes: Result<Vec<Scene>, DataError> =
            (0..n as u64).map(|i| generate_scene(&mut rng, cfg, i)).collect();
        Ok(TrainData::from_scenes(scenes?))
    }
}

/// splitmix64 finalizer: a stable stream/step mixer for per-step RNG seeds,
/// so resume at step k replays exactly the same draws as a straight run.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(step)))
}

/// All lattice windows for a grid at the given sizes, in a fixed order.
pub fn lattice_windows(grid: usize, sizes: &[usize]) -> Vec<Window> {
    let mut out = Vec::new();
    for &size in sizes {
        let span = 2 * (grid - size) + 1;
        for y in 0..span {
            for x in 0..span {
                out.push(Window { y, x, size });
            }
        }
    }
    out
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub data: TrainData,
    pub state: TrainState,
    windows: Vec<Window>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, data: TrainData) -> Result<Self, RunError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.train.seed));
        let model = QModel::init(cfg.model, &mut rng).map_err(TrainError::Model)?;
        let state = TrainState::new(model)?;
        Ok(Self::with_state(cfg, data, state))
    }

    fn with_state(cfg: RunConfig, data: TrainData, state: TrainState) -> Self {
        let windows = match &cfg.crops {
            CropKind::Lattice { sizes } => lattice_windows(cfg.scene.grid, sizes),
            CropKind::Rrc => Vec::new(),
        };
        Trainer { cfg, data, state, windows }
    }

    /// Restore a trainer from a checkpoint directory written by `save`.
    pub fn resume(cfg: RunConfig, data: TrainData, ckpt: &Path) -> Result<Self, RunError> {
        cfg.validate()?;
        let params = load_namespace(ckpt, "model")?;
        let ema = EmaState { params: load_namespace(ckpt, "ema")? };
        let m_store = load_namespace(ckpt, "adam.m")?;
        let v_store = load_namespace(ckpt, "adam.v")?;
        let meta = load_meta(ckpt)?;
        let step = meta["step"].as_u64().ok_or_else(|| {
            RunError::Checkpoint(CheckpointError::BadIndex("meta.step missing".into()))
        })?;
        let adam_t = meta["adam_t"].as_u64().unwrap_or(step);
        let mut adam = AdamState::default();
        adam.t = adam_t;
        for (name, t) in m_store.iter() {
            adam.m.insert(name.to_string(), t.clone());
        }
        for (name, t) in v_store.iter() {
            adam.v.insert(name.to_string(), t.clone());
        }
        let dino = match cfg.model.variant {
            Variant::Dino => {
                let mut ds = DinoState::new(cfg.model.protos).map_err(TrainError::Reward)?;
                if let Some(center) = meta["dino_center"].as_array() {
                    ds.center = center.iter().filter_map(|v| v.as_f64()).collect();
                }
                Some(ds)
            }
            _ => None,
        };
        let model = QModel { cfg: cfg.model, params };
        let state = TrainState {
            model,
            ema,
            adam,
            adam_cfg: Default::default(),
            dino,
            step,
        };
        Ok(Self::with_state(cfg, data, state))
    }

    /// Write model/EMA/optimizer tensors plus step metadata under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), RunError> {
        let mut m_store = ParamStore::new();
        let mut v_store = ParamStore::new();
        let names: Vec<String> =
            self.state.model.params.names().map(str::to_string).collect();
        for name in &names {
            if let Some(t) = self.state.adam.m.get(name) {
                m_store.insert(name, t.clone());
            }
            if let Some(t) = self.state.adam.v.get(name) {
                v_store.insert(name, t.clone());
            }
        }
        let meta = serde_json::json!({
            "step": self.state.step,
            "adam_t": self.state.adam.t,
            "dino_center": self.state.dino.as_ref().map(|d| d.center.clone()),
        });
        save_checkpoint(
            dir,
            &[
                ("model", &self.state.model.params),
                ("ema", &self.state.ema.params),
                ("adam.m", &m_store),
                ("adam.v", &v_store),
            ],
            meta,
        )?;
        Ok(())
    }

    fn view_box<R: Rng>(&self, rng: &mut R) -> Result<BBox, TrainError> {
        match &self.cfg.crops {
            CropKind::Rrc => crate::geometry::sample_crop(rng, &self.cfg.train.crop)
                .map_err(TrainError::Geometry),
            CropKind::Lattice { .. } => {
                let w = &self.windows[rng.gen_range(0..self.windows.len())];
                Ok(window_bbox(w, self.cfg.scene.grid))
            }
        }
    }

    /// A view pair whose IoU falls inside the configured band; both boxes
    /// come from the unmodified marginal sampler.
    fn banded_pair<R: Rng>(&self, rng: &mut R, band: (f64, f64)) -> Result<Vec<BBox>, RunError> {
        let first = self.view_box(rng)?;
        let mut rejected = 0u64;
        loop {
            let second = self.view_box(rng)?;
            let v = crate::geometry::iou(&first, &second);
            if v >= band.0 && (v < band.1 || (band.1 >= 1.0 && v <= 1.0)) {
                return Ok(vec![first, second]);
            }
            rejected += 1;
            if rejected >= MAX_PAIR_REJECTIONS {
                return Err(RunError::Unsatisfiable(band, rejected));
            }
        }
    }

    /// The N-views-per-image transition batch for one step.
    pub fn sample_transitions<R: Rng>(
        &self,
        rng: &mut R,
        annotations: AnnotationRef,
    ) -> Result<TransitionBatch, RunError> {
        let tc = &self.cfg.train;
        let ids: Vec<usize> =
            (0..tc.batch).map(|_| rng.gen_range(0..self.data.scenes.len())).collect();
        let canvases: Vec<(usize, &Canvas)> =
            ids.iter().map(|&i| (i, &self.data.canvases[i])).collect();
        if let Some(band) = self.cfg.pair_iou_band {
            let mut boxes = Vec::with_capacity(canvases.len());
            for _ in &canvases {
                boxes.push(self.banded_pair(rng, band)?);
            }
            return Ok(transitions_from_boxes(
                &canvases,
                &boxes,
                self.cfg.model.resolution,
                annotations,
            )?);
        }
        match &self.cfg.crops {
            CropKind::Rrc => Ok(build_transitions(
                rng,
                &canvases,
                tc.n_views,
                &tc.crop,
                self.cfg.model.resolution,
                annotations,
            )?),
            CropKind::Lattice { .. } => {
                let mut boxes = Vec::with_capacity(canvases.len());
                for _ in &canvases {
                    let per: Result<Vec<BBox>, TrainError> =
                        (0..tc.n_views).map(|_| self.view_box(rng)).collect();
                    boxes.push(per?);
                }
                Ok(transitions_from_boxes(
                    &canvases,
                    &boxes,
                    self.cfg.model.resolution,
                    annotations,
                )?)
            }
        }
    }

    /// Reward batch: CLIP pairs each view with a label drawn from the view's
    /// exact annotation distribution (so the learned softmax converges to
    /// it); SimCLR/DINO use adjacent-view pairs of the same scene.
    pub fn sample_reward_batch<R: Rng>(&self, rng: &mut R) -> Result<RewardBatch, TrainError> {
        let b = self.cfg.train.reward_batch;
        let res = self.cfg.model.resolution;
        match self.cfg.model.variant {
            Variant::Clip => {
                let mut views = Vec::with_capacity(b);
                let mut ids = Vec::with_capacity(b);
                for _ in 0..b {
                    let s = rng.gen_range(0..self.data.scenes.len());
                    let bbox = self.view_box(rng)?;
                    let dist = true_annotation_dist(&self.data.scenes[s], &bbox);
                    ids.push(sample_categorical(rng, &dist));
                    views.push(render_view(&self.data.canvases[s], &bbox, res, s));
                }
                Ok(RewardBatch::Clip { views, ids })
            }
            Variant::Simclr | Variant::Dino => {
                if b % 2 != 0 {
                    return Err(TrainError::Config(format!(
                        "paired reward batch must be even, got {b}"
                    )));
                }
                let mut views = Vec::with_capacity(b);
                for _ in 0..b / 2 {
                    let s = rng.gen_range(0..self.data.scenes.len());
                    for _ in 0..2 {
                        let bbox = self.view_box(rng)?;
                        views.push(render_view(&self.data.canvases[s], &bbox, res, s));
                    }
                }
                Ok(match self.cfg.model.variant {
                    Variant::Simclr => RewardBatch::Simclr { views },
                    _ => RewardBatch::Dino { views },
                })
            }
        }
    }

    fn annotations_for(&self, reward: &RewardBatch) -> AnnotationRef {
        match self.cfg.model.variant {
            Variant::Clip => AnnotationRef::VocabIds((0..self.cfg.model.vocab).collect()),
            Variant::Dino => AnnotationRef::Prototypes,
            Variant::Simclr => match reward {
                RewardBatch::Simclr { views } => AnnotationRef::Views(views.clone()),
                _ => AnnotationRef::Views(Vec::new()),
            },
        }
    }

    /// One full training step with its own derived RNG stream.
    pub fn step_once(&mut self) -> Result<StepMetrics, RunError> {
        let mut rng = step_rng(self.cfg.train.seed, self.state.step);
        let reward = self.sample_reward_batch(&mut rng)?;
        let annotations = self.annotations_for(&reward);
        let transitions = self.sample_transitions(&mut rng, annotations)?;
        let metrics =
            crate::bootstrap::train_step(&mut self.state, &reward, &transitions, &self.cfg.train)?;
        Ok(metrics)
    }

    /// Train to `until`, appending one metrics line per step and writing a
    /// checkpoint every `ckpt_every` steps plus one at the end. `on_ckpt`
    /// fires after each checkpoint is on disk.
    pub fn run_until(
        &mut self,
        out_dir: &Path,
        until: u64,
        mut on_ckpt: impl FnMut(&Trainer, u64) -> Result<(), RunError>,
    ) -> Result<(), RunError> {
        std::fs::create_dir_all(out_dir)?;
        let mut metrics_file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("metrics.jsonl"))?;
        while self.state.step < until {
            let m = self.step_once()?;
            writeln!(metrics_file, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
            let at = self.state.step;
            if (self.cfg.ckpt_every > 0 && at % self.cfg.ckpt_every == 0) || at == until {
                let dir = checkpoint_dir(out_dir, at);
                self.save(&dir)?;
                on_ckpt(self, at)?;
            }
        }
        Ok(())
    }
}

pub fn checkpoint_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step:07}"))
}

/// Latest checkpoint directory under a run, by step number.
pub fn latest_checkpoint(out_dir: &Path) -> Option<(u64, PathBuf)> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(out_dir).ok()? {
        let entry = entry.ok()?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(step) = name.strip_prefix("ckpt_").and_then(|s| s.parse::<u64>().ok()) {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, entry.path()));
            }
        }
    }
    best
}

fn sample_categorical<R: Rng>(rng: &mut R, dist: &[f64]) -> usize {
    let total: f64 = dist.iter().sum();
    let mut u = rng.gen_range(0.0..total.max(f64::MIN_POSITIVE));
    for (i, &p) in dist.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    dist.len() - 1
}

/// Collect representative views for probing: one view per draw with both
/// probe labels attached.
pub struct ProbeSamples {
    pub views: Vec<View>,
    pub dominant: Vec<usize>,
    pub at_offset: Vec<usize>,
    pub offset: (isize, isize),
}

pub fn sample_probe_views(
    trainer: &Trainer,
    count: usize,
    offset: (isize, isize),
    seed: u64,
) -> Result<ProbeSamples, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed) ^ 0xA5A5_5A5A);
    let res = trainer.cfg.model.resolution;
    let mut views = Vec::with_capacity(count);
    let mut dominant = Vec::with_capacity(count);
    let mut at_offset = Vec::with_capacity(count);
    for _ in 0..count {
        let s = rng.gen_range(0..trainer.data.scenes.len());
        let bbox = trainer.view_box(&mut rng)?;
        let scene = &trainer.data.scenes[s];
        views.push(render_view(&trainer.data.canvases[s], &bbox, res, s));
        dominant.push(crate::evalkit::dominant_glyph_label(scene, &bbox));
        at_offset.push(crate::evalkit::glyph_at_offset_label(scene, &bbox, offset));
    }
    Ok(ProbeSamples { views, dominant, at_offset, offset })
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub eval_seed: u64,
    /// Views per probe task.
    pub probe_count: usize,
    /// Cell offset for the glyph-at-offset probe.
    pub offset: (isize, isize),
    /// Held-out transition batches pooled into the bucket report.
    pub transition_batches: usize,
    pub buckets: Vec<(f64, f64)>,
    /// Compare against the discrete oracle (needs lattice crops + CLIP).
    pub with_oracle_gap: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            eval_seed: 17,
            probe_count: 256,
            offset: (0, 1),
            transition_batches: 8,
            buckets: crate::evalkit::DEFAULT_BUCKETS.to_vec(),
            with_oracle_gap: false,
        }
    }
}

/// Run the full diagnostic suite against the trainer's current state.
/// Deterministic given (state, options).
pub fn eval_checkpoint(trainer: &Trainer, opts: &EvalOptions) -> Result<crate::evalkit::EvalReport, RunError> {
    use crate::evalkit::{
        bucketed_bootstrap_accuracy, extract_features, grad_cosine, linear_probe,
        oracle_value_gap, ProbeSplit,
    };
    let model = &trainer.state.model;

    // Linear probes on frozen pooled features.
    let samples = sample_probe_views(trainer, opts.probe_count, opts.offset, opts.eval_seed)?;
    let view_refs: Vec<&View> = samples.views.iter().collect();
    let feats = extract_features(model, &view_refs)?;
    let split = ProbeSplit::interleaved(opts.probe_count, 4);
    let mut probes = Vec::new();
    for (task, labels) in
        [("dominant_glyph", &samples.dominant), ("glyph_at_offset", &samples.at_offset)]
    {
        match linear_probe(task, &feats, model.cfg.embed, labels, &split) {
            Ok(r) => probes.push(r),
            Err(crate::evalkit::EvalError::SingleClass) => {}
            Err(e) => return Err(e.into()),
        }
    }

    // Held-out transitions pooled into one batch for the bucket report.
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(opts.eval_seed) ^ 0x0BAD_CAFE);
    let annotations = AnnotationRef::VocabIds((0..trainer.cfg.model.vocab).collect());
    let mut pooled: Option<TransitionBatch> = None;
    for _ in 0..opts.transition_batches {
        let batch = trainer.sample_transitions(&mut rng, annotations.clone())?;
        match &mut pooled {
            None => pooled = Some(batch),
            Some(p) => {
                p.views.extend(batch.views);
                p.actions.extend(batch.actions);
                p.b += batch.b;
            }
        }
    }
    let pooled = pooled.expect("at least one transition batch");
    let bucket_accuracy = bucketed_bootstrap_accuracy(
        model,
        &trainer.state.ema,
        &pooled,
        trainer.cfg.train.gamma,
        &opts.buckets,
    )?;

    // Gradient alignment of the two loss terms on a held-out batch.
    let reward = trainer.sample_reward_batch(&mut rng)?;
    let gc_annotations = trainer.annotations_for(&reward);
    let gc_batch = trainer.sample_transitions(&mut rng, gc_annotations)?;
    let mut g = crate::ad::graph::Graph::<f32>::new();
    let built =
        crate::bootstrap::build_step(&mut g, &trainer.state, &reward, &gc_batch, &trainer.cfg.train)?;
    let cosine = built
        .reward_loss
        .and_then(|r| grad_cosine(&g, &built.online, r, built.value_loss, "enc."));

    // Fixed-point comparison on the exact lattice, when applicable.
    let oracle_gap = if opts.with_oracle_gap {
        let CropKind::Lattice { sizes } = &trainer.cfg.crops else {
            return Err(RunError::Config(
                "oracle gap needs lattice crops so views match MDP states".into(),
            ));
        };
        let mdp = crate::oracle::DiscreteMdp::build(
            trainer.data.scenes.clone(),
            sizes,
            trainer.cfg.train.gamma,
        )
        .map_err(|e| RunError::Config(e.to_string()))?;
        let (q, _, _) = crate::oracle::value_iteration(&mdp, 1e-12)
            .map_err(|e| RunError::Config(e.to_string()))?;
        let keys =
            crate::oracle::rendered_observations(&mdp, trainer.cfg.model.resolution);
        let (obs_of_state, table) =
            crate::oracle::observation_q(&mdp, &q, |s| keys[s].clone());
        Some(oracle_value_gap(model, &mdp, &obs_of_state, &table)?)
    } else {
        None
    };

    Ok(crate::evalkit::EvalReport {
        step: trainer.state.step,
        probes,
        bucket_accuracy,
        grad_cosine: cosine,
        oracle_gap,
    })
}

/// Tensor equality helper for resume certification.
pub fn stores_bit_equal(a: &ParamStore, b: &ParamStore) -> bool {
    let an: Vec<&str> = a.names().collect();
    let bn: Vec<&str> = b.names().collect();
    if an != bn {
        return false;
    }
    an.iter().all(|n| {
        let (ta, tb): (&Tensor<f32>, &Tensor<f32>) = (a.get(n).unwrap(), b.get(n).unwrap());
        ta.shape == tb.shape
            && ta.data.iter().zip(&tb.data).all(|(x, y)| x.to_bits() == y.to_bits())
    })
}
