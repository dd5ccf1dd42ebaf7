//! Pre-training losses: masked language modeling with optional visual
//! fusion, masked region modeling (feature regression and class-KL) with
//! optional semantic fusion, and the bidirectional contrastive retrieval
//! loss over in-batch negatives.

use rand::Rng;

use crate::config::{FIRST_FREE_ID, MASK_ID};
use crate::encoder::{
    build_image_encoder, build_text_encoder, ModelParams, RegionSequence, TokenSequence,
};
use crate::error::{LdError, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const DEFAULT_MASK_RATE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextMaskAction {
    Mask,
    Random,
    Keep,
}

/// Which masked-region distance to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrmVariant {
    FeatureRegression,
    ClassKl,
}

/// A resolved masking decision: which positions, what each masked text
/// position now carries, and the originals kept for supervision.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    /// Sorted, unique, never containing position 0.
    pub indices: Vec<usize>,
    pub kind: MaskKind,
}

#[derive(Debug, Clone)]
pub enum MaskKind {
    Text {
        actions: Vec<TextMaskAction>,
        /// Token ids after applying the 80/10/10 actions.
        resolved: Vec<u32>,
        /// Pre-mask ids, the prediction targets.
        originals: Vec<u32>,
    },
    Image {
        /// Pre-mask feature vectors, the regression targets.
        features: Vec<Vec<f64>>,
        /// Detector class distributions, the KL targets.
        class_dist: Vec<Vec<f64>>,
    },
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Substitutes resolved ids into a copy of the token sequence.
    pub fn apply_to_tokens(&self, tokens: &TokenSequence) -> Result<TokenSequence> {
        let MaskKind::Text { resolved, .. } = &self.kind else {
            return Err(LdError::InvalidArgument(
                "text plan required to mask tokens".into(),
            ));
        };
        let mut ids = tokens.ids.clone();
        for (&pos, &id) in self.indices.iter().zip(resolved) {
            ids[pos] = id;
        }
        Ok(TokenSequence::new(ids))
    }
}

fn draw_positions(len_without_cls: usize, rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut indices: Vec<usize> = (1..=len_without_cls)
        .filter(|_| rng.gen::<f64>() < rate)
        .collect();
    if indices.is_empty() {
        // The losses divide by M; force one position so M >= 1.
        indices.push(rng.gen_range(1..=len_without_cls));
    }
    indices
}

/// Independent Bernoulli selection per non-[CLS] position, with the
/// selected positions resolved to MASK/RANDOM/KEEP at 80/10/10.
pub fn plan_text_mask(
    tokens: &TokenSequence,
    vocab: usize,
    rate: f64,
    rng: &mut impl Rng,
) -> MaskPlan {
    let indices = draw_positions(tokens.len(), rate, rng);
    let mut actions = Vec::with_capacity(indices.len());
    let mut resolved = Vec::with_capacity(indices.len());
    let mut originals = Vec::with_capacity(indices.len());
    for &pos in &indices {
        let original = tokens.ids[pos];
        let roll: f64 = rng.gen();
        let action = if roll < 0.8 {
            TextMaskAction::Mask
        } else if roll < 0.9 {
            TextMaskAction::Random
        } else {
            TextMaskAction::Keep
        };
        let id = match action {
            TextMaskAction::Mask => MASK_ID,
            TextMaskAction::Random => rng.gen_range(FIRST_FREE_ID..vocab as u32),
            TextMaskAction::Keep => original,
        };
        actions.push(action);
        resolved.push(id);
        originals.push(original);
    }
    MaskPlan {
        indices,
        kind: MaskKind::Text {
            actions,
            resolved,
            originals,
        },
    }
}

/// Region masking: single action (feature zeroed before projection);
/// originals retain features and class distributions.
pub fn plan_region_mask(regions: &RegionSequence, rate: f64, rng: &mut impl Rng) -> MaskPlan {
    let indices = draw_positions(regions.len(), rate, rng);
    let features = indices.iter().map(|&i| regions.features[i - 1].clone()).collect();
    let class_dist = indices.iter().map(|&i| regions.class_dist[i - 1].clone()).collect();
    MaskPlan {
        indices,
        kind: MaskKind::Image {
            features,
            class_dist,
        },
    }
}

fn require_nonempty(plan: &MaskPlan) -> Result<()> {
    if plan.is_empty() {
        Err(LdError::EmptyInput("mask plan"))
    } else {
        Ok(())
    }
}

fn one_hot_rows(rows: usize, cols: usize, hot: impl Iterator<Item = usize>) -> Result<Tensor> {
    let mut data = vec![0.0; rows * cols];
    for (r, c) in hot.enumerate() {
        data[r * cols + c] = 1.0;
    }
    Tensor::matrix(rows, cols, data)
}

fn mlp_head(
    g: &mut Graph,
    params: &ModelParams,
    x: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let w1 = g.param(&format!("{prefix}.w1"), params.get(&format!("{prefix}.w1"))?.clone());
    let b1 = g.param(&format!("{prefix}.b1"), params.get(&format!("{prefix}.b1"))?.clone());
    let w2 = g.param(&format!("{prefix}.w2"), params.get(&format!("{prefix}.w2"))?.clone());
    let b2 = g.param(&format!("{prefix}.b2"), params.get(&format!("{prefix}.b2"))?.clone());
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let out = g.matmul(h, w2)?;
    g.add_row(out, b2)
}

/// Builds the (V)MLM loss node. With `fused_image` present, logits are
/// computed from z_m + h_0 of the paired image.
pub fn mlm_loss_node(
    g: &mut Graph,
    params: &ModelParams,
    tokens: &TokenSequence,
    plan: &MaskPlan,
    fused_image: Option<&RegionSequence>,
) -> Result<NodeId> {
    require_nonempty(plan)?;
    let MaskKind::Text { originals, .. } = &plan.kind else {
        return Err(LdError::InvalidArgument("text mask plan required".into()));
    };
    let masked_tokens = plan.apply_to_tokens(tokens)?;
    masked_tokens.validate(&params.config)?;
    let hidden = build_text_encoder(g, params, &masked_tokens.ids)?;
    let mut z_m = g.rows(hidden, &plan.indices)?;
    if let Some(regions) = fused_image {
        regions.validate(&params.config)?;
        let img_hidden = build_image_encoder(g, params, regions, &[])?;
        let h0 = g.rows(img_hidden, &[0])?;
        z_m = g.add_row(z_m, h0)?;
    }
    let m = plan.len();
    let w = g.param("text.mlm.w", params.get("text.mlm.w")?.clone());
    let b = g.param("text.mlm.b", params.get("text.mlm.b")?.clone());
    let logits = g.matmul(z_m, w)?;
    let logits = g.add_row(logits, b)?;
    let lsm = g.log_softmax(logits);
    let hot = one_hot_rows(m, params.config.vocab, originals.iter().map(|&i| i as usize))?;
    let hot = g.constant(hot);
    let picked = g.mul(lsm, hot)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / m as f64))
}

/// Builds the (S)MRFR loss node: mean squared L2 reconstruction error of
/// masked region features, optionally fused with the caption's z_0.
pub fn mrfr_loss_node(
    g: &mut Graph,
    params: &ModelParams,
    regions: &RegionSequence,
    plan: &MaskPlan,
    fused_text: Option<&TokenSequence>,
) -> Result<NodeId> {
    require_nonempty(plan)?;
    let MaskKind::Image { features, .. } = &plan.kind else {
        return Err(LdError::InvalidArgument("image mask plan required".into()));
    };
    regions.validate(&params.config)?;
    let hidden = build_image_encoder(g, params, regions, &plan.indices)?;
    let mut h_m = g.rows(hidden, &plan.indices)?;
    if let Some(tokens) = fused_text {
        tokens.validate(&params.config)?;
        let text_hidden = build_text_encoder(g, params, &tokens.ids)?;
        let z0 = g.rows(text_hidden, &[0])?;
        h_m = g.add_row(h_m, z0)?;
    }
    let pred = mlp_head(g, params, h_m, "img.fr")?;
    let target = g.constant(Tensor::from_rows(features)?);
    let diff = g.sub(target, pred)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / plan.len() as f64))
}

/// Builds the (S)MRC-kl loss node: mean KL(detector distribution ‖ predicted
/// class softmax) over masked regions.
pub fn mrc_kl_loss_node(
    g: &mut Graph,
    params: &ModelParams,
    regions: &RegionSequence,
    plan: &MaskPlan,
    fused_text: Option<&TokenSequence>,
) -> Result<NodeId> {
    require_nonempty(plan)?;
    let MaskKind::Image { class_dist, .. } = &plan.kind else {
        return Err(LdError::InvalidArgument("image mask plan required".into()));
    };
    regions.validate(&params.config)?;
    let hidden = build_image_encoder(g, params, regions, &plan.indices)?;
    let mut h_m = g.rows(hidden, &plan.indices)?;
    if let Some(tokens) = fused_text {
        tokens.validate(&params.config)?;
        let text_hidden = build_text_encoder(g, params, &tokens.ids)?;
        let z0 = g.rows(text_hidden, &[0])?;
        h_m = g.add_row(h_m, z0)?;
    }
    let logits = mlp_head(g, params, h_m, "img.mrc")?;
    let lsm = g.log_softmax(logits);
    let m = plan.len() as f64;
    // KL(p‖q) = Σ p·ln p − Σ p·ln q, with 0·ln 0 = 0 on the target side.
    let neg_entropy: f64 = class_dist
        .iter()
        .flatten()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum();
    let target = g.constant(Tensor::from_rows(class_dist)?);
    let cross = g.mul(target, lsm)?;
    let cross_sum = g.sum(cross);
    let scaled = g.scale(cross_sum, -1.0 / m);
    let ne = g.constant(Tensor::scalar(neg_entropy / m));
    g.add(scaled, ne)
}

/// Builds the bidirectional contrastive loss node from stacked global
/// embeddings (row k of each matrix comes from positive pair k).
pub fn cmr_loss_node(g: &mut Graph, text_globals: NodeId, image_globals: NodeId) -> Result<NodeId> {
    let n = g.value(text_globals).rows();
    if n == 0 {
        return Err(LdError::EmptyInput("cmr batch"));
    }
    if g.value(text_globals).cols() != g.value(image_globals).cols()
        || g.value(image_globals).rows() != n
    {
        return Err(LdError::ShapeMismatch {
            op: "cmr_loss",
            lhs: g.value(text_globals).shape().to_vec(),
            rhs: g.value(image_globals).shape().to_vec(),
        });
    }
    // One batched multiply yields every positive and negative score.
    let s_text_query = g.matmul_nt(text_globals, image_globals)?;
    let s_image_query = g.matmul_nt(image_globals, text_globals)?;
    let eye = one_hot_rows(n, n, 0..n)?;
    let eye = g.constant(eye);
    let lsm_ir = g.log_softmax(s_text_query);
    let lsm_tr = g.log_softmax(s_image_query);
    let d_ir = g.mul(lsm_ir, eye)?;
    let d_tr = g.mul(lsm_tr, eye)?;
    let s1 = g.sum(d_ir);
    let s2 = g.sum(d_tr);
    let total = g.add(s1, s2)?;
    Ok(g.scale(total, -1.0 / (2.0 * n as f64)))
}

/// Plain masked language modeling loss, text only.
pub fn loss_mlm(params: &ModelParams, tokens: &TokenSequence, plan: &MaskPlan) -> Result<f64> {
    let mut g = Graph::new();
    let node = mlm_loss_node(&mut g, params, tokens, plan, None)?;
    Ok(g.value(node).scalar_value())
}

/// Visual-embedding fused MLM: masked-token logits conditioned on the paired
/// image's global representation.
pub fn loss_vmlm(
    params: &ModelParams,
    tokens: &TokenSequence,
    regions: &RegionSequence,
    plan: &MaskPlan,
) -> Result<f64> {
    let mut g = Graph::new();
    let node = mlm_loss_node(&mut g, params, tokens, plan, Some(regions))?;
    Ok(g.value(node).scalar_value())
}

/// Masked region feature regression; pass the paired caption for the
/// semantic-fused variant.
pub fn loss_mrfr(
    params: &ModelParams,
    regions: &RegionSequence,
    plan: &MaskPlan,
    fused_text: Option<&TokenSequence>,
) -> Result<f64> {
    let mut g = Graph::new();
    let node = mrfr_loss_node(&mut g, params, regions, plan, fused_text)?;
    Ok(g.value(node).scalar_value())
}

/// Masked region classification with KL divergence; pass the paired caption
/// for the semantic-fused variant.
pub fn loss_mrc_kl(
    params: &ModelParams,
    regions: &RegionSequence,
    plan: &MaskPlan,
    fused_text: Option<&TokenSequence>,
) -> Result<f64> {
    let mut g = Graph::new();
    let node = mrc_kl_loss_node(&mut g, params, regions, plan, fused_text)?;
    Ok(g.value(node).scalar_value())
}

/// Similarity between global embeddings: plain inner product.
pub fn similarity(z0: &[f64], h0: &[f64]) -> Result<f64> {
    if z0.len() != h0.len() {
        return Err(LdError::ShapeMismatch {
            op: "similarity",
            lhs: vec![z0.len()],
            rhs: vec![h0.len()],
        });
    }
    Ok(z0.iter().zip(h0).map(|(a, b)| a * b).sum())
}

/// Contrastive retrieval loss over stacked n×d global embeddings.
pub fn loss_cmr(text_globals: &Tensor, image_globals: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(text_globals.clone());
    let h = g.constant(image_globals.clone());
    let node = cmr_loss_node(&mut g, z, h)?;
    Ok(g.value(node).scalar_value())
}
