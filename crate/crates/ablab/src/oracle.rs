//! Exact finite-MDP mirror of the crop environment: states are (scene,
//! lattice window) pairs, actions are relative window moves, rewards are
//! (1−γ)·true annotation distribution of the landed window. Value iteration
//! to Q*, observation-posterior averaging, and a tabular TD learner.

use crate::geometry::BBox;
use crate::synthdata::{true_annotation_dist, Scene};
use rand::Rng;
use std::collections::HashMap;
use std::hash::Hash;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("discount must satisfy 0 <= gamma < 1, got {0}")]
    BadGamma(f64),
    #[error("invalid lattice: {0}")]
    BadLattice(String),
    #[error("state-action space too large: {0} pairs (limit {1})")]
    TooLarge(usize, usize),
}

/// A lattice window: top-left position in half-cell units, side in cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

/// A relative window move: offset in half-cells plus the landing size.
/// Moves that leave the lattice self-loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LatticeAction {
    pub dy: isize,
    pub dx: isize,
    pub size: usize,
}

pub const DEFAULT_PAIR_LIMIT: usize = 100_000;

#[derive(Debug, Clone)]
pub struct DiscreteMdp {
    /// r[s * l + ℓ] = (1−γ) · true annotation distribution at state s.
    pub rewards: Vec<f64>,
    /// next_state[s * n_actions + a], total (self-loops for invalid moves).
    pub next_state: Vec<usize>,
    pub n_states: usize,
    pub n_actions: usize,
    pub l: usize,
    pub gamma: f64,
    // Lattice metadata (empty for hand-built table MDPs).
    pub scenes: Vec<Scene>,
    pub windows: Vec<Window>,
    pub actions: Vec<LatticeAction>,
    pub grid: usize,
}

impl DiscreteMdp {
    /// Hand-built MDP from raw tables, no lattice attached.
    pub fn from_tables(
        rewards: Vec<f64>,
        next_state: Vec<usize>,
        l: usize,
        gamma: f64,
    ) -> Result<Self, OracleError> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(OracleError::BadGamma(gamma));
        }
        let n_states = rewards.len() / l;
        let n_actions = next_state.len() / n_states;
        assert_eq!(rewards.len(), n_states * l);
        assert_eq!(next_state.len(), n_states * n_actions);
        assert!(next_state.iter().all(|&s| s < n_states), "transitions must be total");
        Ok(DiscreteMdp {
            rewards,
            next_state,
            n_states,
            n_actions,
            l,
            gamma,
            scenes: Vec::new(),
            windows: Vec::new(),
            actions: Vec::new(),
            grid: 0,
        })
    }

    /// Enumerate windows (positions on the half-cell grid, sizes in cells),
    /// derive the action set as all window-to-window relative moves, and
    /// tabulate exact rewards and transitions.
    pub fn build(scenes: Vec<Scene>, sizes: &[usize], gamma: f64) -> Result<Self, OracleError> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(OracleError::BadGamma(gamma));
        }
        if scenes.is_empty() {
            return Err(OracleError::BadLattice("no scenes".into()));
        }
        let grid = scenes[0].grid;
        let vocab = scenes[0].vocab;
        if scenes.iter().any(|s| s.grid != grid || s.vocab != vocab) {
            return Err(OracleError::BadLattice("scenes disagree on grid/vocab".into()));
        }
        let mut windows = Vec::new();
        for &size in sizes {
            if size == 0 || size > grid {
                return Err(OracleError::BadLattice(format!(
                    "window size {size} does not fit grid {grid}"
                )));
            }
            let span = 2 * (grid - size) + 1;
            for y in 0..span {
                for x in 0..span {
                    windows.push(Window { y, x, size });
                }
            }
        }
        let win_index: HashMap<Window, usize> =
            windows.iter().enumerate().map(|(i, &w)| (w, i)).collect();
        let mut action_set: Vec<LatticeAction> = windows
            .iter()
            .flat_map(|src| {
                windows.iter().map(move |dst| LatticeAction {
                    dy: dst.y as isize - src.y as isize,
                    dx: dst.x as isize - src.x as isize,
                    size: dst.size,
                })
            })
            .collect();
        action_set.sort();
        action_set.dedup();

        let (w, a) = (windows.len(), action_set.len());
        let n_states = scenes.len() * w;
        if n_states * a > DEFAULT_PAIR_LIMIT {
            return Err(OracleError::TooLarge(n_states * a, DEFAULT_PAIR_LIMIT));
        }
        let l = vocab + 1;
        let mut rewards = Vec::with_capacity(n_states * l);
        for scene in &scenes {
            for win in &windows {
                let bbox = window_bbox(win, grid);
                let p = true_annotation_dist(scene, &bbox);
                rewards.extend(p.iter().map(|&v| (1.0 - gamma) * v));
            }
        }
        let mut next_win = Vec::with_capacity(w * a);
        for (wi, win) in windows.iter().enumerate() {
            for act in &action_set {
                let ty = win.y as isize + act.dy;
                let tx = win.x as isize + act.dx;
                let tgt = if ty >= 0 && tx >= 0 {
                    win_index
                        .get(&Window { y: ty as usize, x: tx as usize, size: act.size })
                        .copied()
                        .unwrap_or(wi)
                } else {
                    wi
                };
                next_win.push(tgt);
            }
        }
        let mut next_state = Vec::with_capacity(n_states * a);
        for si in 0..scenes.len() {
            for wi in 0..w {
                for ai in 0..a {
                    next_state.push(si * w + next_win[wi * a + ai]);
                }
            }
        }
        Ok(DiscreteMdp {
            rewards,
            next_state,
            n_states,
            n_actions: a,
            l,
            gamma,
            scenes,
            windows,
            actions: action_set,
            grid,
        })
    }

    pub fn state(&self, scene_idx: usize, win_idx: usize) -> usize {
        scene_idx * self.windows.len() + win_idx
    }
}

/// Normalized bbox of a lattice window on a G-cell grid.
pub fn window_bbox(w: &Window, grid: usize) -> BBox {
    let g2 = (2 * grid) as f64;
    BBox::new(
        w.y as f64 / g2,
        w.x as f64 / g2,
        (w.y + 2 * w.size) as f64 / g2,
        (w.x + 2 * w.size) as f64 / g2,
    )
}

/// Dense Q[s][a][ℓ] in 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub data: Vec<f64>,
    pub n_states: usize,
    pub n_actions: usize,
    pub l: usize,
}

impl QTable {
    pub fn zeros(mdp: &DiscreteMdp) -> Self {
        QTable {
            data: vec![0.0; mdp.n_states * mdp.n_actions * mdp.l],
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            l: mdp.l,
        }
    }

    pub fn full(mdp: &DiscreteMdp, v: f64) -> Self {
        let mut q = QTable::zeros(mdp);
        q.data.fill(v);
        q
    }

    #[inline]
    pub fn at(&self, s: usize, a: usize, l: usize) -> f64 {
        self.data[(s * self.n_actions + a) * self.l + l]
    }

    pub fn sup_dist(&self, other: &QTable) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// max_a Q[s][a][ℓ] per (s, ℓ); ties resolve to the lowest action index
/// implicitly via strict improvement.
fn state_maxes(mdp: &DiscreteMdp, q: &QTable) -> Vec<f64> {
    let (a, l) = (mdp.n_actions, mdp.l);
    let mut m = vec![f64::NEG_INFINITY; mdp.n_states * l];
    for s in 0..mdp.n_states {
        for ai in 0..a {
            let row = &q.data[(s * a + ai) * l..(s * a + ai + 1) * l];
            let out = &mut m[s * l..(s + 1) * l];
            for (o, &v) in out.iter_mut().zip(row) {
                if v > *o {
                    *o = v;
                }
            }
        }
    }
    m
}

/// One Bellman sweep: Q'[s][a][ℓ] = r[s'][ℓ] + γ·max_{a'} Q[s'][a'][ℓ].
pub fn bellman_apply(mdp: &DiscreteMdp, q: &QTable) -> QTable {
    let maxes = state_maxes(mdp, q);
    let mut out = QTable::zeros(mdp);
    let (a, l) = (mdp.n_actions, mdp.l);
    for s in 0..mdp.n_states {
        for ai in 0..a {
            let sp = mdp.next_state[s * a + ai];
            let r = &mdp.rewards[sp * l..(sp + 1) * l];
            let m = &maxes[sp * l..(sp + 1) * l];
            let dst = &mut out.data[(s * a + ai) * l..(s * a + ai + 1) * l];
            for ((o, &rv), &mv) in dst.iter_mut().zip(r).zip(m) {
                *o = rv + mdp.gamma * mv;
            }
        }
    }
    out
}

/// Iterate from Q = 0 until the sup-norm change is at most `tol`.
/// Returns (table, sweeps, final residual).
pub fn value_iteration(mdp: &DiscreteMdp, tol: f64) -> Result<(QTable, usize, f64), OracleError> {
    if !(0.0..1.0).contains(&mdp.gamma) {
        return Err(OracleError::BadGamma(mdp.gamma));
    }
    assert!(tol > 0.0);
    value_iteration_from(mdp, QTable::zeros(mdp), tol)
}

pub fn value_iteration_from(
    mdp: &DiscreteMdp,
    start: QTable,
    tol: f64,
) -> Result<(QTable, usize, f64), OracleError> {
    let mut q = start;
    // Contraction bound on sweeps from a bounded start, plus slack.
    let max_iters = if mdp.gamma == 0.0 {
        2
    } else {
        ((tol * (1.0 - mdp.gamma)).ln() / mdp.gamma.ln()).ceil() as usize + 2
    };
    for it in 1..=max_iters {
        let next = bellman_apply(mdp, &q);
        let residual = next.sup_dist(&q);
        q = next;
        if residual <= tol {
            return Ok((q, it, residual));
        }
    }
    let next = bellman_apply(mdp, &q);
    let residual = next.sup_dist(&q);
    Ok((next, max_iters + 1, residual))
}

/// Observation key per state: the exact bit pattern of the state's rendered
/// window view. States whose windows produce identical pixels are aliased —
/// the agent cannot tell them apart — and must share an observation.
pub fn rendered_observations(mdp: &DiscreteMdp, resolution: usize) -> Vec<Vec<u32>> {
    let canvases: Vec<crate::synthdata::Canvas> =
        mdp.scenes.iter().map(crate::synthdata::rasterize_scene).collect();
    (0..mdp.n_states)
        .map(|s| {
            let scene_idx = s / mdp.windows.len();
            let win = &mdp.windows[s % mdp.windows.len()];
            let view = crate::synthdata::render_view(
                &canvases[scene_idx],
                &window_bbox(win, mdp.grid),
                resolution,
                scene_idx,
            );
            view.pixels.iter().map(|p| p.to_bits()).collect()
        })
        .collect()
}

/// Posterior-averaged value table over observations: Q̄(o,a,ℓ) is the mean of
/// Q(s,a,ℓ) over all states whose observation collides, uniform state prior.
/// Returns the per-state observation index and the averaged table indexed by
/// observation.
pub fn observation_q<K, F>(mdp: &DiscreteMdp, q: &QTable, obs_fn: F) -> (Vec<usize>, Vec<f64>)
where
    K: Eq + Hash,
    F: Fn(usize) -> K,
{
    let mut keys: HashMap<K, usize> = HashMap::new();
    let mut obs_of_state = Vec::with_capacity(mdp.n_states);
    let mut counts: Vec<usize> = Vec::new();
    for s in 0..mdp.n_states {
        let k = obs_fn(s);
        let next_id = keys.len();
        let id = *keys.entry(k).or_insert(next_id);
        if id == counts.len() {
            counts.push(0);
        }
        counts[id] += 1;
        obs_of_state.push(id);
    }
    let al = mdp.n_actions * mdp.l;
    let mut table = vec![0.0; counts.len() * al];
    for s in 0..mdp.n_states {
        let o = obs_of_state[s];
        let src = &q.data[s * al..(s + 1) * al];
        let dst = &mut table[o * al..(o + 1) * al];
        for (d, &v) in dst.iter_mut().zip(src) {
            *d += v;
        }
    }
    for (o, &c) in counts.iter().enumerate() {
        for v in &mut table[o * al..(o + 1) * al] {
            *v /= c as f64;
        }
    }
    (obs_of_state, table)
}

/// Tabular TD with a periodically synced target table: sample (s, a)
/// uniformly, move Q[s][a][·] toward r[s'] + γ·max_{a'} Q_target[s'][a'][·].
pub fn td_tabular<R: Rng>(
    mdp: &DiscreteMdp,
    steps: u64,
    lr: impl Fn(u64) -> f64,
    sync_every: u64,
    rng: &mut R,
) -> QTable {
    assert!(steps > 0 && sync_every > 0);
    let mut q = QTable::zeros(mdp);
    let mut target = q.clone();
    let (a, l) = (mdp.n_actions, mdp.l);
    for step in 0..steps {
        if step % sync_every == 0 {
            target = q.clone();
        }
        let s = rng.gen_range(0..mdp.n_states);
        let ai = rng.gen_range(0..a);
        let sp = mdp.next_state[s * a + ai];
        let alpha = lr(step);
        for li in 0..l {
            let mut m = f64::NEG_INFINITY;
            for ap in 0..a {
                m = m.max(target.at(sp, ap, li));
            }
            let tgt = mdp.rewards[sp * l + li] + mdp.gamma * m;
            let idx = (s * a + ai) * l + li;
            q.data[idx] += alpha * (tgt - q.data[idx]);
        }
    }
    q
}

/// Empirical contraction ratio max over random table pairs of
/// ‖T Q1 − T Q2‖∞ / ‖Q1 − Q2‖∞.
pub fn contraction_ratio<R: Rng>(mdp: &DiscreteMdp, pairs: usize, rng: &mut R) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let mut q1 = QTable::zeros(mdp);
        let mut q2 = QTable::zeros(mdp);
        for v in &mut q1.data {
            *v = rng.gen_range(0.0..1.0);
        }
        for v in &mut q2.data {
            *v = rng.gen_range(0.0..1.0);
        }
        let d = q1.sup_dist(&q2);
        if d == 0.0 {
            continue;
        }
        let t1 = bellman_apply(mdp, &q1);
        let t2 = bellman_apply(mdp, &q2);
        worst = worst.max(t1.sup_dist(&t2) / d);
    }
    worst
}
