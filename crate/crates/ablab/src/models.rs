//! Network shapes at toy scale: a small ViT view encoder, per-variant
//! annotation embedders, the temperature-scaled reward logits, and the
//! action-conditioned value decoder producing Q logits.

use crate::ad::graph::{Graph, NodeId};
use crate::ad::params::{trunc_normal, ParamStore};
use crate::ad::tensor::{Scalar, Tensor};
use crate::ad::AdError;
use crate::geometry::{ActionTokens, ACTION_BINS};
use crate::synthdata::View;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("view resolution {got} does not match configured {want}")]
    Resolution { got: usize, want: usize },
    #[error("empty annotation batch")]
    EmptyAnnotations,
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Clip,
    Simclr,
    Dino,
}

impl std::str::FromStr for Variant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "clip" => Ok(Variant::Clip),
            "simclr" => Ok(Variant::Simclr),
            "dino" => Ok(Variant::Dino),
            other => Err(ModelError::Config(format!("unknown variant: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelCfg {
    /// Render resolution R; input views are R x R x 3.
    pub resolution: usize,
    pub patch: usize,
    /// Transformer width.
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    /// Value-decoder depth.
    pub dec_depth: usize,
    /// Shared embedding-space width for phi/psi similarity.
    pub embed: usize,
    /// Annotation vocabulary size (glyphs + background for CLIP-style).
    pub vocab: usize,
    /// Prototype count for the DINO-style variant.
    pub protos: usize,
    pub variant: Variant,
}

impl ModelCfg {
    pub fn toy(variant: Variant, vocab: usize) -> Self {
        ModelCfg {
            resolution: 32,
            patch: 8,
            d: 64,
            depth: 4,
            heads: 4,
            dec_depth: 2,
            embed: 64,
            vocab,
            protos: 32,
            variant,
        }
    }

    /// Token count T = (R / patch)^2.
    pub fn tokens(&self) -> usize {
        let side = self.resolution / self.patch;
        side * side
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.resolution % self.patch != 0 {
            return Err(ModelError::Config(format!(
                "resolution {} not divisible by patch {}",
                self.resolution, self.patch
            )));
        }
        if self.d % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "width {} not divisible by heads {}",
                self.d, self.heads
            )));
        }
        if self.depth == 0 || self.dec_depth == 0 || self.embed == 0 || self.vocab == 0 {
            return Err(ModelError::Config("depth/dec_depth/embed/vocab must be nonzero".into()));
        }
        if self.variant == Variant::Dino && self.protos < 2 {
            return Err(ModelError::Config("DINO needs at least 2 prototypes".into()));
        }
        Ok(())
    }
}

fn insert_linear<R: Rng>(p: &mut ParamStore, rng: &mut R, name: &str, din: usize, dout: usize) {
    p.insert(&format!("{name}.w"), trunc_normal(rng, vec![din, dout], 0.02));
    p.insert(&format!("{name}.b"), Tensor::zeros(vec![dout]));
}

fn insert_ln(p: &mut ParamStore, name: &str, d: usize) {
    p.insert(&format!("{name}.g"), Tensor::full(vec![d], 1.0));
    p.insert(&format!("{name}.b"), Tensor::zeros(vec![d]));
}

fn insert_block<R: Rng>(p: &mut ParamStore, rng: &mut R, name: &str, d: usize, cross: bool) {
    insert_ln(p, &format!("{name}.ln1"), d);
    for proj in ["q", "k", "v", "o"] {
        insert_linear(p, rng, &format!("{name}.sa.{proj}"), d, d);
    }
    if cross {
        insert_ln(p, &format!("{name}.lnq"), d);
        insert_ln(p, &format!("{name}.lnkv"), d);
        for proj in ["q", "k", "v", "o"] {
            insert_linear(p, rng, &format!("{name}.ca.{proj}"), d, d);
        }
    }
    insert_ln(p, &format!("{name}.ln2"), d);
    insert_linear(p, rng, &format!("{name}.mlp1"), d, 4 * d);
    insert_linear(p, rng, &format!("{name}.mlp2"), 4 * d, d);
}

/// All trainable parameters for one QModel, names stable across runs.
pub fn init_params<R: Rng>(cfg: &ModelCfg, rng: &mut R) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    let (d, e, t) = (cfg.d, cfg.embed, cfg.tokens());
    let ppc = cfg.patch * cfg.patch * 3;

    insert_linear(&mut p, rng, "enc.patch", ppc, d);
    p.insert("enc.pos", trunc_normal(rng, vec![t * d], 0.02));
    for i in 0..cfg.depth {
        insert_block(&mut p, rng, &format!("enc.blk{i}"), d, false);
    }
    insert_ln(&mut p, "enc.lnf", d);
    insert_linear(&mut p, rng, "enc.proj", d, e);

    // Annotation backbone per variant, then independent reward/value heads.
    match cfg.variant {
        Variant::Clip => p.insert("ann.table", trunc_normal(rng, vec![cfg.vocab, d], 0.02)),
        Variant::Simclr => {} // annotation backbone is the image encoder itself
        Variant::Dino => p.insert("ann.protos", trunc_normal(rng, vec![cfg.protos, d], 0.02)),
    }
    insert_linear(&mut p, rng, "ann.rew", d, e);
    insert_linear(&mut p, rng, "ann.val", d, e);

    // Value decoder: one embedding table per action-token slot, a learned
    // mask token for the action-free ablation, decoder blocks, output proj.
    for q in 0..4 {
        p.insert(&format!("dec.act{q}"), trunc_normal(rng, vec![ACTION_BINS, d], 0.02));
    }
    p.insert("dec.mask", trunc_normal(rng, vec![1, d], 0.02));
    for i in 0..cfg.dec_depth {
        insert_block(&mut p, rng, &format!("dec.blk{i}"), d, true);
    }
    insert_ln(&mut p, "dec.lnf", d);
    insert_linear(&mut p, rng, "dec.proj", d, e);

    let log10 = (10.0f64).ln() as f32;
    p.insert("log_t", Tensor::scalar(log10));
    p.insert("log_t_ab", Tensor::scalar(log10));
    p.insert("b_ab", Tensor::scalar(0.0));
    Ok(p)
}

/// A parameter set plus its config.
#[derive(Debug, Clone)]
pub struct QModel {
    pub cfg: ModelCfg,
    pub params: ParamStore,
}

impl QModel {
    pub fn init<R: Rng>(cfg: ModelCfg, rng: &mut R) -> Result<Self, ModelError> {
        let params = init_params(&cfg, rng)?;
        Ok(QModel { cfg, params })
    }
}

/// Parameter tensors bound into a graph as named nodes. Frozen bindings are
/// wrapped in stop-gradient, so no gradient can structurally reach them.
pub struct Bound {
    nodes: HashMap<String, NodeId>,
    /// Raw input ids, for reading gradients after backward (online only).
    inputs: HashMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn input_id(&self, name: &str) -> NodeId {
        *self
            .inputs
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(|s| s.as_str())
    }
}

pub fn bind_params<T: Scalar>(g: &mut Graph<T>, store: &ParamStore, frozen: bool) -> Bound {
    let mut nodes = HashMap::new();
    let mut inputs = HashMap::new();
    for (name, t) in store.iter() {
        let data: Vec<T> = t.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        let raw = g.input(Tensor::from_vec(t.shape.clone(), data));
        inputs.insert(name.to_string(), raw);
        let node = if frozen { g.stop_grad(raw) } else { raw };
        nodes.insert(name.to_string(), node);
    }
    Bound { nodes, inputs }
}

/// Host-side patchify: views -> [B*T, patch*patch*3] row per patch.
pub fn views_to_patches<T: Scalar>(views: &[&View], cfg: &ModelCfg) -> Result<Tensor<T>, ModelError> {
    let (r, ps) = (cfg.resolution, cfg.patch);
    let side = r / ps;
    let ppc = ps * ps * 3;
    let mut data = Vec::with_capacity(views.len() * side * side * ppc);
    for v in views {
        if v.resolution != r {
            return Err(ModelError::Resolution { got: v.resolution, want: r });
        }
        for py in 0..side {
            for px in 0..side {
                for iy in 0..ps {
                    let y = py * ps + iy;
                    for ix in 0..ps {
                        let x = px * ps + ix;
                        let o = (y * r + x) * 3;
                        for c in 0..3 {
                            data.push(T::from_f64(v.pixels[o + c] as f64));
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![views.len() * side * side, ppc], data))
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: NodeId) -> Result<NodeId, AdError> {
    let y = g.matmul(x, p.id(&format!("{name}.w")))?;
    g.add_tiled(y, p.id(&format!("{name}.b")))
}

fn layer_norm_named<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    x: NodeId,
) -> Result<NodeId, AdError> {
    g.layer_norm(x, p.id(&format!("{name}.g")), p.id(&format!("{name}.b")))
}

/// Multi-head attention: queries from `xq` [b,tq,d], keys/values from `xkv`
/// [b,tk,d], projections named `{name}.{q,k,v,o}`.
fn attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    heads: usize,
    xq: NodeId,
    xkv: NodeId,
) -> Result<NodeId, AdError> {
    let sq = g.value(xq).shape.clone();
    let sk = g.value(xkv).shape.clone();
    let (b, tq, d) = (sq[0], sq[1], sq[2]);
    let tk = sk[1];
    let flat_q = g.reshape(xq, vec![b * tq, d])?;
    let flat_kv = g.reshape(xkv, vec![b * tk, d])?;
    let q = linear(g, p, &format!("{name}.q"), flat_q)?;
    let k = linear(g, p, &format!("{name}.k"), flat_kv)?;
    let v = linear(g, p, &format!("{name}.v"), flat_kv)?;
    let q = g.reshape(q, vec![b, tq, d])?;
    let k = g.reshape(k, vec![b, tk, d])?;
    let v = g.reshape(v, vec![b, tk, d])?;
    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;
    let oh = g.sdpa(qh, kh, vh)?;
    let o = g.merge_heads(oh)?;
    let o_flat = g.reshape(o, vec![b * tq, d])?;
    let o = linear(g, p, &format!("{name}.o"), o_flat)?;
    g.reshape(o, vec![b, tq, d])
}

fn mlp<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    x: NodeId,
    b: usize,
    t: usize,
    d: usize,
) -> Result<NodeId, AdError> {
    let flat = g.reshape(x, vec![b * t, d])?;
    let h = linear(g, p, &format!("{name}.mlp1"), flat)?;
    let h = g.gelu(h);
    let o = linear(g, p, &format!("{name}.mlp2"), h)?;
    g.reshape(o, vec![b, t, d])
}

/// Encoder tokens: patchify -> linear embed -> positional embeddings ->
/// pre-LN transformer blocks -> final LN. Output [B, T, d].
pub fn encode_tokens<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelCfg,
    p: &Bound,
    patches: NodeId,
) -> Result<NodeId, ModelError> {
    let t = cfg.tokens();
    let d = cfg.d;
    let b = g.value(patches).shape[0] / t;
    let x = linear(g, p, "enc.patch", patches)?;
    let x = g.reshape(x, vec![b, t * d])?;
    let x = g.add_tiled(x, p.id("enc.pos"))?;
    let mut x = g.reshape(x, vec![b, t, d])?;
    for i in 0..cfg.depth {
        let name = format!("enc.blk{i}");
        let h = layer_norm_named(g, p, &format!("{name}.ln1"), x)?;
        let a = attention(g, p, &format!("{name}.sa"), cfg.heads, h, h)?;
        x = g.add(x, a)?;
        let h = layer_norm_named(g, p, &format!("{name}.ln2"), x)?;
        let m = mlp(g, p, &name, h, b, t, d)?;
        x = g.add(x, m)?;
    }
    Ok(layer_norm_named(g, p, "enc.lnf", x)?)
}

/// Pooled view embedding phi(x): mean-pool tokens, project, L2-normalize.
pub fn pooled_embed<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    tokens: NodeId,
) -> Result<NodeId, ModelError> {
    let pooled = g.mean_axis1(tokens)?;
    let proj = linear(g, p, "enc.proj", pooled)?;
    Ok(g.l2norm_rows(proj)?)
}

/// Which annotation head to apply on top of the shared annotation backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnHead {
    Reward,
    Value,
}

/// L2-normalized annotation embeddings psi [L, embed] from a backbone
/// feature matrix [L, d] (table rows, pooled view features, or prototypes).
pub fn annotation_embed<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    base: NodeId,
    head: AnnHead,
) -> Result<NodeId, ModelError> {
    let name = match head {
        AnnHead::Reward => "ann.rew",
        AnnHead::Value => "ann.val",
    };
    let proj = linear(g, p, name, base)?;
    Ok(g.l2norm_rows(proj)?)
}

/// CLIP-style annotation backbone: embedding-table rows for vocabulary ids.
pub fn annotation_table_rows<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    ids: &[usize],
) -> Result<NodeId, ModelError> {
    if ids.is_empty() {
        return Err(ModelError::EmptyAnnotations);
    }
    Ok(g.gather_rows(p.id("ann.table"), ids)?)
}

/// Reward logits [B, L]: entry (i, j) = t * phi_i . psi_j with t = exp(log_t).
pub fn reward_logits<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    phi: NodeId,
    psi: NodeId,
) -> Result<NodeId, ModelError> {
    if g.value(psi).shape[0] == 0 {
        return Err(ModelError::EmptyAnnotations);
    }
    let sim = g.matmul_nt(phi, psi)?;
    let t = g.exp(p.id("log_t"));
    Ok(g.mul_scalar_node(sim, t)?)
}

/// Action-conditioned value embedding phi_AB for M = rows(actions) queries.
///
/// `enc_tokens` is [S, T, d] (one row of source-view tokens per query group);
/// each consecutive group of `group` queries cross-attends to the same
/// source view's tokens, so S * group = M. Passing `mask_token` replaces all
/// four action tokens with the single learned mask embedding.
pub fn decode_values<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelCfg,
    p: &Bound,
    enc_tokens: NodeId,
    actions: &[ActionTokens],
    group: usize,
    mask_token: bool,
) -> Result<NodeId, ModelError> {
    let m = actions.len();
    let d = cfg.d;
    let s = g.value(enc_tokens).shape[0];
    if s * group != m {
        return Err(ModelError::Config(format!(
            "{m} actions cannot be grouped as {s} views x {group}"
        )));
    }
    let memory = g.repeat_rows(enc_tokens, group)?;
    let mut slots = Vec::with_capacity(4);
    for q in 0..4 {
        let (table, idx): (NodeId, Vec<usize>) = if mask_token {
            (p.id("dec.mask"), vec![0; m])
        } else {
            (p.id(&format!("dec.act{q}")), actions.iter().map(|a| a.0[q] as usize).collect())
        };
        slots.push(g.gather_rows(table, &idx)?);
    }
    let mut x = g.stack_axis1(&slots)?;
    for i in 0..cfg.dec_depth {
        let name = format!("dec.blk{i}");
        let h = layer_norm_named(g, p, &format!("{name}.ln1"), x)?;
        let a = attention(g, p, &format!("{name}.sa"), cfg.heads, h, h)?;
        x = g.add(x, a)?;
        let hq = layer_norm_named(g, p, &format!("{name}.lnq"), x)?;
        let hkv = layer_norm_named(g, p, &format!("{name}.lnkv"), memory)?;
        let c = attention(g, p, &format!("{name}.ca"), cfg.heads, hq, hkv)?;
        x = g.add(x, c)?;
        let h = layer_norm_named(g, p, &format!("{name}.ln2"), x)?;
        let mm = mlp(g, p, &name, h, m, 4, d)?;
        x = g.add(x, mm)?;
    }
    let x = layer_norm_named(g, p, "dec.lnf", x)?;
    let pooled = g.mean_axis1(x)?;
    let proj = linear(g, p, "dec.proj", pooled)?;
    Ok(g.l2norm_rows(proj)?)
}

/// Value logits [M, L]: t_AB * phi_AB . psi_AB + b_AB.
pub fn value_logits<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    phi_ab: NodeId,
    psi_val: NodeId,
) -> Result<NodeId, ModelError> {
    if g.value(psi_val).shape[0] == 0 {
        return Err(ModelError::EmptyAnnotations);
    }
    let sim = g.matmul_nt(phi_ab, psi_val)?;
    let t = g.exp(p.id("log_t_ab"));
    let scaled = g.mul_scalar_node(sim, t)?;
    Ok(g.add_scalar_node(scaled, p.id("b_ab"))?)
}
