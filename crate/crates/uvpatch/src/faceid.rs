//! Surrogate face-embedding zoo, alignment, and synthetic identity sets.
//!
//! Embedders are small conv stacks ending in a dense layer and L2
//! normalization; four architectures (A-D) with distinct widths and depths
//! make up the evaluation zoo (A is the designated white-box model by
//! convention), and E is held out for the mock verification client.
//! Untrained random embedders carry no identity structure, so the zoo is
//! smoke-trained with a cosine contrastive objective on a synthetic identity
//! set until same-identity pairs beat different-identity pairs by a margin
//! on held-out views.

use crate::diffcore::{cosine_anneal_lr, AdamState, Graph, NodeId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::radiance::{Pose, RadianceModel};
use crate::rng::{stream, stream_rng, substream_rng};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const EMBED_DIM: usize = 64;
pub const EMBED_INPUT: usize = 48;
/// Central fraction of the image kept by alignment.
pub const ALIGN_CROP: f32 = 0.8;
/// Margin of the smoke-training objective (in cosine units).
pub const TRIPLET_MARGIN: f32 = 0.5;

/// Embedder architecture: conv stage widths (each 3x3 conv + leaky-relu +
/// 2x average pool), then dense to the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchId {
    A,
    B,
    C,
    D,
    E,
}

impl ArchId {
    pub fn stages(self) -> &'static [usize] {
        match self {
            ArchId::A => &[8, 16, 32, 64],
            ArchId::B => &[12, 24, 48],
            ArchId::C => &[6, 12, 24, 48],
            ArchId::D => &[16, 32, 64, 64],
            ArchId::E => &[10, 20, 40],
        }
    }

    pub fn all_zoo() -> [ArchId; 4] {
        [ArchId::A, ArchId::B, ArchId::C, ArchId::D]
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(ArchId::A),
            "B" => Ok(ArchId::B),
            "C" => Ok(ArchId::C),
            "D" => Ok(ArchId::D),
            "E" => Ok(ArchId::E),
            other => Err(Error::InvalidArgument(format!(
                "unknown embedder architecture {other:?}"
            ))),
        }
    }
}

/// One face-embedding network; same (arch, seed) always reproduces the same
/// parameters.
#[derive(Debug, Clone)]
pub struct EmbedderModel {
    pub arch: ArchId,
    pub seed: u64,
    pub params: ParamSet,
}

impl EmbedderModel {
    pub fn new(arch: ArchId, seed: u64) -> Self {
        let mut rng = substream_rng(seed, stream::ZOO_INIT, arch as u64);
        let mut params = ParamSet::new();
        let mut in_ch = 3;
        let mut spatial = EMBED_INPUT;
        for (i, &out_ch) in arch.stages().iter().enumerate() {
            params.push(
                format!("conv{i}.weight"),
                Tensor::randn(
                    &[out_ch, in_ch, 3, 3],
                    (2.0 / (9.0 * in_ch as f32)).sqrt(),
                    &mut rng,
                ),
            );
            params.push(format!("conv{i}.bias"), Tensor::zeros(&[out_ch]));
            in_ch = out_ch;
            spatial /= 2;
        }
        let flat = in_ch * spatial * spatial;
        params.push(
            "fc.weight",
            Tensor::randn(&[flat, EMBED_DIM], 1.0 / (flat as f32).sqrt(), &mut rng),
        );
        params.push("fc.bias", Tensor::zeros(&[EMBED_DIM]));
        EmbedderModel { arch, seed, params }
    }

    /// Blob name for zoo checkpoints.
    pub fn blob_name(&self) -> String {
        format!("embedder.{}.{}", self.arch, self.seed)
    }

    /// Unit-norm embedding of an aligned image (no gradient tracking).
    pub fn embed(&self, aligned: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.leaf(aligned.clone());
        let ids = self.params.register_frozen(&mut g);
        let out = build_embed(&mut g, x, &ids, self.arch)?;
        Ok(g.value(out).clone())
    }

    /// Convenience: align then embed.
    pub fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        self.embed(&align(image)?)
    }
}

/// Cosine similarity of two embeddings (not assumed normalized).
pub fn cosine(a: &Tensor, b: &Tensor) -> f32 {
    let dot: f32 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na: f32 = a.data().iter().map(|v| v * v).sum::<f32>().sqrt();
    let nb: f32 = b.data().iter().map(|v| v * v).sum::<f32>().sqrt();
    dot / (na * nb).max(1e-12)
}

// ── Alignment ────────────────────────────────────────────────────────

fn align_coords(out_size: usize, crop: f32) -> Tensor {
    let lo = (1.0 - crop) * 0.5;
    let mut data = Vec::with_capacity(out_size * out_size * 2);
    for i in 0..out_size {
        let v = lo + crop * (i as f32 + 0.5) / out_size as f32;
        for j in 0..out_size {
            let u = lo + crop * (j as f32 + 0.5) / out_size as f32;
            data.extend_from_slice(&[u, v]);
        }
    }
    Tensor::new(vec![out_size * out_size, 2], data).unwrap()
}

/// Deterministic center crop to the central 80% followed by bilinear resize
/// to the embedder input resolution.
pub fn align(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xid = g.leaf(x.clone());
    let out = build_align(&mut g, xid)?;
    Ok(g.value(out).clone())
}

/// Graph version of [`align`]; differentiable w.r.t. the image.
pub fn build_align(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let [c, h, w] = shape[..] else {
        return Err(Error::shape_mismatch(
            "align",
            "[C,H,W]",
            format!("{shape:?}"),
        ));
    };
    if h != w {
        return Err(Error::shape_mismatch(
            "align",
            "square image",
            format!("[{c},{h},{w}]"),
        ));
    }
    if h < EMBED_INPUT {
        return Err(Error::InvalidArgument(format!(
            "align: image size {h} below embedder input {EMBED_INPUT}"
        )));
    }
    let coords = g.leaf(align_coords(EMBED_INPUT, ALIGN_CROP));
    let sampled = g.grid_sample(x, coords)?;
    g.reshape(sampled, &[c, EMBED_INPUT, EMBED_INPUT])
}

// ── Embedding graph ──────────────────────────────────────────────────

/// Conv stack + dense + L2 normalization; input must be aligned
/// [3, 48, 48].
pub fn build_embed(g: &mut Graph, x: NodeId, params: &[NodeId], arch: ArchId) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    if shape != [3, EMBED_INPUT, EMBED_INPUT] {
        return Err(Error::shape_mismatch(
            "embed",
            format!("[3,{EMBED_INPUT},{EMBED_INPUT}]"),
            format!("{shape:?}"),
        ));
    }
    let n_stages = arch.stages().len();
    let mut h = x;
    for i in 0..n_stages {
        let conv = g.conv2d(h, params[2 * i], params[2 * i + 1])?;
        let act = g.leaky_relu(conv, 0.2)?;
        h = g.avg_pool2(act)?;
    }
    let numel = g.value(h).numel();
    let flat = g.reshape(h, &[1, numel])?;
    let dense = g.matmul(flat, params[2 * n_stages])?;
    let dense = g.add_bias(dense, params[2 * n_stages + 1])?;
    let vec = g.reshape(dense, &[EMBED_DIM])?;
    g.l2_normalize(vec)
}

// ── Model zoo ────────────────────────────────────────────────────────

/// Deterministic zoo; `archs[0]` is the designated white-box model.
pub fn make_model_zoo(seeds: &[u64], archs: &[ArchId]) -> Result<Vec<EmbedderModel>> {
    if seeds.is_empty() || archs.is_empty() {
        return Err(Error::InvalidArgument(
            "make_model_zoo: seeds and archs must be nonempty".into(),
        ));
    }
    if seeds.len() != archs.len() {
        return Err(Error::InvalidArgument(format!(
            "make_model_zoo: {} seeds vs {} archs",
            seeds.len(),
            archs.len()
        )));
    }
    Ok(archs
        .iter()
        .zip(seeds)
        .map(|(&arch, &seed)| EmbedderModel::new(arch, seed))
        .collect())
}

// ── Synthetic identity sets ──────────────────────────────────────────

/// Synthetic identities: per-identity latents over a shared generator, with
/// views rendered at linspaced yaws.
#[derive(Debug, Clone)]
pub struct IdentitySet {
    /// Shared generator; its own `w` field is ignored in favor of `latents`.
    pub base: RadianceModel,
    pub latents: Vec<Tensor>,
    /// View poses, shared by every identity.
    pub poses: Vec<Pose>,
    /// views[id][k] is the image of identity `id` at `poses[k]`.
    pub views: Vec<Vec<Tensor>>,
}

impl IdentitySet {
    pub fn n_identities(&self) -> usize {
        self.latents.len()
    }

    pub fn views_per_identity(&self) -> usize {
        self.poses.len()
    }

    /// Radiance model of one identity (shared generator, own latent).
    pub fn model_for(&self, id: usize) -> RadianceModel {
        let mut m = self.base.clone();
        m.w = self.latents[id].clone();
        m
    }
}

/// Renders `n_ids` fresh identities at `views_per_id` linspaced yaws within
/// [-yaw_range, yaw_range] degrees. Deterministic per (base model, seed).
pub fn synthesize_identity_set(
    base: &RadianceModel,
    n_ids: usize,
    views_per_id: usize,
    yaw_range_deg: f32,
    seed: u64,
    latent_stream: u64,
) -> Result<IdentitySet> {
    if n_ids < 2 || views_per_id < 2 {
        return Err(Error::InvalidArgument(format!(
            "identity set needs >= 2 identities and >= 2 views (got {n_ids}, {views_per_id})"
        )));
    }
    let d = base.cfg.camera_distance;
    let poses: Vec<Pose> = (0..views_per_id)
        .map(|k| {
            let t = k as f32 / (views_per_id - 1) as f32;
            Pose::new(-yaw_range_deg + 2.0 * yaw_range_deg * t, 0.0, d)
        })
        .collect::<Result<_>>()?;
    let mut latents = Vec::with_capacity(n_ids);
    let mut views = Vec::with_capacity(n_ids);
    for id in 0..n_ids {
        let mut rng = substream_rng(seed, latent_stream, id as u64);
        let w = Tensor::randn(&[base.cfg.latent_dim], 1.0, &mut rng);
        let mut model = base.clone();
        model.w = w.clone();
        let planes = model.triplane()?;
        let mut id_views = Vec::with_capacity(views_per_id);
        for pose in &poses {
            id_views.push(model.synthesize_from_planes(&planes, pose)?);
        }
        latents.push(w);
        views.push(id_views);
    }
    Ok(IdentitySet {
        base: base.clone(),
        latents,
        poses,
        views,
    })
}

// ── Smoke training ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SmokeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub margin_target: f32,
    pub holdout_fraction: f32,
}

impl Default for SmokeTrainConfig {
    fn default() -> Self {
        SmokeTrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 0.01,
            margin_target: 0.3,
            holdout_fraction: 0.25,
        }
    }
}

/// Held-out margin: mean same-identity cosine minus mean cross-identity
/// cosine over the given (already aligned) view images.
pub fn holdout_margin(model: &EmbedderModel, aligned: &[Vec<Tensor>]) -> Result<f32> {
    let mut embeddings = Vec::with_capacity(aligned.len());
    for id_views in aligned {
        let mut per_id = Vec::with_capacity(id_views.len());
        for v in id_views {
            per_id.push(model.embed(v)?);
        }
        embeddings.push(per_id);
    }
    let mut same = (0.0f64, 0usize);
    let mut diff = (0.0f64, 0usize);
    for a in 0..embeddings.len() {
        for b in a..embeddings.len() {
            for i in 0..embeddings[a].len() {
                let j0 = if a == b { i + 1 } else { 0 };
                for j in j0..embeddings[b].len() {
                    let c = cosine(&embeddings[a][i], &embeddings[b][j]) as f64;
                    if a == b {
                        same.0 += c;
                        same.1 += 1;
                    } else {
                        diff.0 += c;
                        diff.1 += 1;
                    }
                }
            }
        }
    }
    if same.1 == 0 || diff.1 == 0 {
        return Err(Error::InvalidArgument(
            "holdout_margin: need both same- and cross-identity pairs".into(),
        ));
    }
    Ok((same.0 / same.1 as f64 - diff.0 / diff.1 as f64) as f32)
}

/// Trains every zoo model with a cosine contrastive objective (pull
/// same-identity views together, push different identities apart) until the
/// held-out margin reaches `margin_target`. Seed-deterministic; fails with
/// the achieved margin if the epoch budget runs out.
pub fn train_zoo_smoke(
    zoo: &mut [EmbedderModel],
    identity_set: &IdentitySet,
    cfg: &SmokeTrainConfig,
    seed: u64,
) -> Result<Vec<f32>> {
    let n_ids = identity_set.n_identities();
    let views = identity_set.views_per_identity();
    if n_ids < 8 || views < 4 {
        return Err(Error::InvalidArgument(format!(
            "train_zoo_smoke: need >= 8 identities with >= 4 views, got {n_ids} x {views}"
        )));
    }
    let holdout = ((views as f32 * cfg.holdout_fraction).ceil() as usize).clamp(1, views - 2);
    let train_views = views - holdout;

    // Alignment is pose-independent, so it is precomputed once.
    let mut train_aligned: Vec<Vec<Tensor>> = Vec::with_capacity(n_ids);
    let mut holdout_aligned: Vec<Vec<Tensor>> = Vec::with_capacity(n_ids);
    for id_views in &identity_set.views {
        let mut t = Vec::with_capacity(train_views);
        let mut h = Vec::with_capacity(holdout);
        for (k, img) in id_views.iter().enumerate() {
            if k < train_views {
                t.push(align(img)?);
            } else {
                h.push(align(img)?);
            }
        }
        train_aligned.push(t);
        holdout_aligned.push(h);
    }

    let mut margins = Vec::with_capacity(zoo.len());
    for (model_idx, model) in zoo.iter_mut().enumerate() {
        let mut rng = substream_rng(seed, stream::ZOO_TRAIN, model_idx as u64);
        let sizes: Vec<usize> = model.params.tensors().iter().map(|t| t.numel()).collect();
        let mut adam = AdamState::new(cfg.lr, &sizes);
        let steps_per_epoch = (n_ids * train_views).div_ceil(cfg.batch_size);
        let total_steps = cfg.epochs * steps_per_epoch;
        let mut margin = holdout_margin(model, &holdout_aligned)?;
        let mut reached = margin >= cfg.margin_target;
        for epoch in 0..cfg.epochs {
            if reached {
                break;
            }
            for step in 0..steps_per_epoch {
                let global_step = epoch * steps_per_epoch + step;
                let lr = cosine_anneal_lr(cfg.lr, global_step, total_steps)?.max(cfg.lr * 0.1);
                train_smoke_step(model, &train_aligned, cfg.batch_size, lr, &mut adam, &mut rng)?;
            }
            margin = holdout_margin(model, &holdout_aligned)?;
            reached = margin >= cfg.margin_target;
        }
        if !reached {
            return Err(Error::InvalidArgument(format!(
                "smoke training of {} stalled: margin {margin:.3} < target {:.3}",
                model.blob_name(),
                cfg.margin_target
            )));
        }
        margins.push(margin);
    }
    Ok(margins)
}

fn train_smoke_step(
    model: &mut EmbedderModel,
    train_aligned: &[Vec<Tensor>],
    batch_size: usize,
    lr: f32,
    adam: &mut AdamState,
    rng: &mut impl Rng,
) -> Result<()> {
    let n_ids = train_aligned.len();
    let mut g = Graph::new();
    let params = model.params.register(&mut g);
    let mut losses = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let anchor_id = rng.gen_range(0..n_ids);
        let views = &train_aligned[anchor_id];
        let ai = rng.gen_range(0..views.len());
        let mut pi = rng.gen_range(0..views.len() - 1);
        if pi >= ai {
            pi += 1;
        }
        let mut neg_id = rng.gen_range(0..n_ids - 1);
        if neg_id >= anchor_id {
            neg_id += 1;
        }
        let ni = rng.gen_range(0..train_aligned[neg_id].len());

        let xa = g.leaf(views[ai].clone());
        let xp = g.leaf(views[pi].clone());
        let xn = g.leaf(train_aligned[neg_id][ni].clone());
        let ea = build_embed(&mut g, xa, &params, model.arch)?;
        let ep = build_embed(&mut g, xp, &params, model.arch)?;
        let en = build_embed(&mut g, xn, &params, model.arch)?;
        // Embeddings are unit-norm, so the dot product is the cosine.
        // Margin form relu(cos_neg - cos_pos + m): depends only on the
        // cosine difference, so collapsing every embedding to one point is
        // not a minimum.
        let cos_pos = {
            let prod = g.mul(ea, ep)?;
            g.sum(prod)?
        };
        let cos_neg = {
            let prod = g.mul(ea, en)?;
            g.sum(prod)?
        };
        let gap = g.sub(cos_neg, cos_pos)?;
        let shifted = g.affine(gap, 1.0, TRIPLET_MARGIN)?;
        losses.push(g.relu(shifted)?);
    }
    let stacked = g.concat(&losses, 0)?;
    let loss = g.mean(stacked)?;
    g.backward(loss)?;
    let grads: Vec<Vec<f32>> = params
        .iter()
        .map(|&p| {
            g.grad(p)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(p).numel()])
        })
        .collect();
    let grad_refs: Vec<&[f32]> = grads.iter().map(|v| v.as_slice()).collect();
    let mut tensors = model.params.tensors_mut();
    adam.step(&mut tensors, &grad_refs, lr)?;
    Ok(())
}
