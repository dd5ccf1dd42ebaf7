//! Twin transformer encoders: one over image regions, one over tokens.
//! The two share the output dimension d and nothing else.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ModelConfig, CLS_ID, GEOM_DIM};
use crate::error::{LdError, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// One "image": N region feature vectors with geometry and per-region class
/// distributions as produced by an external detector (or the synthetic
/// generator).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSequence {
    pub features: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; GEOM_DIM]>,
    pub class_dist: Vec<Vec<f64>>,
}

impl RegionSequence {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n = self.features.len();
        if n == 0 {
            return Err(LdError::EmptyInput("region sequence"));
        }
        if n > config.n_max {
            return Err(LdError::InvalidArgument(format!(
                "{} regions exceeds n_max={}",
                n, config.n_max
            )));
        }
        if self.boxes.len() != n || self.class_dist.len() != n {
            return Err(LdError::InvalidArgument(
                "features/boxes/class_dist length mismatch".into(),
            ));
        }
        for f in &self.features {
            if f.len() != config.feature_dim {
                return Err(LdError::ShapeMismatch {
                    op: "region features",
                    lhs: vec![f.len()],
                    rhs: vec![config.feature_dim],
                });
            }
        }
        for c in &self.class_dist {
            if c.len() != config.classes {
                return Err(LdError::ShapeMismatch {
                    op: "class distribution",
                    lhs: vec![c.len()],
                    rhs: vec![config.classes],
                });
            }
            let sum: f64 = c.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || c.iter().any(|v| *v < 0.0) {
                return Err(LdError::InvalidArgument(
                    "class distribution must be nonnegative and sum to 1".into(),
                ));
            }
        }
        for b in &self.boxes {
            let [x1, y1, x2, y2, w, h, area] = *b;
            let coords_ok = b[..4].iter().all(|v| (0.0..=1.0).contains(v));
            if !coords_ok
                || (w - (x2 - x1)).abs() > 1e-9
                || (h - (y2 - y1)).abs() > 1e-9
                || (area - w * h).abs() > 1e-9
            {
                return Err(LdError::InvalidArgument(format!(
                    "invalid box geometry {:?}",
                    b
                )));
            }
        }
        Ok(())
    }
}

/// One caption: token ids with [CLS] at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    /// Length excluding the [CLS] position.
    pub fn len(&self) -> usize {
        self.ids.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.ids.len() < 2 {
            return Err(LdError::EmptyInput("token sequence"));
        }
        if self.ids[0] != CLS_ID {
            return Err(LdError::InvalidArgument(
                "token sequence must start with [CLS]".into(),
            ));
        }
        if self.len() > config.t_max {
            return Err(LdError::InvalidArgument(format!(
                "{} tokens exceeds t_max={}",
                self.len(),
                config.t_max
            )));
        }
        for &id in &self.ids {
            if id as usize >= config.vocab {
                return Err(LdError::TokenOutOfVocab {
                    id,
                    vocab: config.vocab as u32,
                });
            }
        }
        Ok(())
    }
}

/// Encoder output: per-position hidden states, with the index-0 vector as the
/// global representation.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub hidden: Tensor,
    pub global: Tensor,
}

impl EncodedSequence {
    fn from_hidden(hidden: Tensor) -> Self {
        let global = Tensor::vector(hidden.row(0).to_vec());
        EncodedSequence { hidden, global }
    }
}

/// All learnable weights of both encoders plus their objective heads,
/// addressed by dotted names ("text.*" / "img.*").
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

const INIT_STD: f64 = 0.02;

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut tensors = BTreeMap::new();
        let mut draw = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape, data).unwrap()
        };
        // The declaration order below fixes the rng consumption order;
        // BTreeMap storage keeps iteration order independent of it.
        for (name, shape, is_weight) in encoder_layer_names(&config) {
            let t = if is_weight {
                draw(shape)
            } else if name.ends_with(".g") {
                Tensor::new(shape.clone(), vec![1.0; shape.iter().product()]).unwrap()
            } else {
                Tensor::zeros(shape)
            };
            tensors.insert(name, t);
        }
        ModelParams { config, tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| LdError::InvalidArgument(format!("unknown parameter '{name}'")))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Zeroes every image-side tensor; h_0 then collapses to the zero vector,
    /// which degrades the fused objectives to their plain counterparts.
    pub fn zero_image_side(&mut self) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with("img.") {
                *t = Tensor::zeros_like(t);
            }
        }
    }

    pub fn zero_text_side(&mut self) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with("text.") {
                *t = Tensor::zeros_like(t);
            }
        }
    }
}

/// (name, shape, random-init?) for every tensor, in rng consumption order.
fn encoder_layer_names(c: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let (d, ffn, v, cls, dv, tmax) = (c.dim, c.ffn, c.vocab, c.classes, c.feature_dim, c.t_max);
    let mut out: Vec<(String, Vec<usize>, bool)> = Vec::new();
    // Text encoder.
    out.push(("text.tok_emb".into(), vec![v, d], true));
    out.push(("text.pos_emb".into(), vec![tmax + 1, d], true));
    out.push(("text.emb_ln.g".into(), vec![d], false));
    out.push(("text.emb_ln.b".into(), vec![d], false));
    for side in ["text", "img"] {
        for l in 0..c.layers {
            let p = format!("{side}.l{l}");
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{p}.attn.{w}"), vec![d, d], true));
                out.push((format!("{p}.attn.{w}b"), vec![d], false));
            }
            out.push((format!("{p}.ln1.g"), vec![d], false));
            out.push((format!("{p}.ln1.b"), vec![d], false));
            out.push((format!("{p}.ffn.w1"), vec![d, ffn], true));
            out.push((format!("{p}.ffn.b1"), vec![ffn], false));
            out.push((format!("{p}.ffn.w2"), vec![ffn, d], true));
            out.push((format!("{p}.ffn.b2"), vec![d], false));
            out.push((format!("{p}.ln2.g"), vec![d], false));
            out.push((format!("{p}.ln2.b"), vec![d], false));
        }
        out.push((format!("{side}.final_ln.g"), vec![d], false));
        out.push((format!("{side}.final_ln.b"), vec![d], false));
    }
    // Image input projections and learned [CLS].
    out.push(("img.cls".into(), vec![1, d], true));
    out.push(("img.feat_proj.w".into(), vec![dv, d], true));
    out.push(("img.feat_proj.b".into(), vec![d], false));
    out.push(("img.geom_proj.w".into(), vec![GEOM_DIM, d], true));
    out.push(("img.geom_proj.b".into(), vec![d], false));
    out.push(("img.emb_ln.g".into(), vec![d], false));
    out.push(("img.emb_ln.b".into(), vec![d], false));
    // Objective heads.
    out.push(("text.mlm.w".into(), vec![d, v], true));
    out.push(("text.mlm.b".into(), vec![v], false));
    out.push(("img.fr.w1".into(), vec![d, d], true));
    out.push(("img.fr.b1".into(), vec![d], false));
    out.push(("img.fr.w2".into(), vec![d, dv], true));
    out.push(("img.fr.b2".into(), vec![dv], false));
    out.push(("img.mrc.w1".into(), vec![d, d], true));
    out.push(("img.mrc.b1".into(), vec![d], false));
    out.push(("img.mrc.w2".into(), vec![d, cls], true));
    out.push(("img.mrc.b2".into(), vec![cls], false));
    out
}

pub(crate) fn bind(g: &mut Graph, params: &ModelParams, name: &str) -> Result<NodeId> {
    Ok(g.param(name, params.get(name)?.clone()))
}

pub(crate) fn layer_norm_affine(
    g: &mut Graph,
    params: &ModelParams,
    x: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let gamma = bind(g, params, &format!("{prefix}.g"))?;
    let beta = bind(g, params, &format!("{prefix}.b"))?;
    let n = g.layer_norm(x);
    let n = g.mul_row(n, gamma)?;
    g.add_row(n, beta)
}

pub(crate) fn linear(g: &mut Graph, params: &ModelParams, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
    let wn = bind(g, params, w)?;
    let bn = bind(g, params, b)?;
    let y = g.matmul(x, wn)?;
    g.add_row(y, bn)
}

pub(crate) fn transformer_layer(
    g: &mut Graph,
    params: &ModelParams,
    x: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let c = &params.config;
    let dh = c.head_dim();
    let q = linear(g, params, x, &format!("{prefix}.attn.wq"), &format!("{prefix}.attn.wqb"))?;
    let k = linear(g, params, x, &format!("{prefix}.attn.wk"), &format!("{prefix}.attn.wkb"))?;
    let v = linear(g, params, x, &format!("{prefix}.attn.wv"), &format!("{prefix}.attn.wvb"))?;
    let mut head_outs = Vec::with_capacity(c.heads);
    for h in 0..c.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores);
        head_outs.push(g.matmul(attn, vh)?);
    }
    let concat = g.concat_cols(&head_outs)?;
    let proj = linear(
        g,
        params,
        concat,
        &format!("{prefix}.attn.wo"),
        &format!("{prefix}.attn.wob"),
    )?;
    let x = g.add(x, proj)?;
    let x = layer_norm_affine(g, params, x, &format!("{prefix}.ln1"))?;

    let h1 = linear(g, params, x, &format!("{prefix}.ffn.w1"), &format!("{prefix}.ffn.b1"))?;
    let h1 = g.gelu(h1);
    let h2 = linear(g, params, h1, &format!("{prefix}.ffn.w2"), &format!("{prefix}.ffn.b2"))?;
    let x = g.add(x, h2)?;
    layer_norm_affine(g, params, x, &format!("{prefix}.ln2"))
}

fn encoder_stack(g: &mut Graph, params: &ModelParams, mut x: NodeId, side: &str) -> Result<NodeId> {
    for l in 0..params.config.layers {
        x = transformer_layer(g, params, x, &format!("{side}.l{l}"))?;
    }
    layer_norm_affine(g, params, x, &format!("{side}.final_ln"))
}

/// Builds the text encoder into `g`; `ids` must already carry any mask
/// substitutions. Returns the (T+1)×d hidden-state node.
pub fn build_text_encoder(g: &mut Graph, params: &ModelParams, ids: &[u32]) -> Result<NodeId> {
    let tok_emb = bind(g, params, "text.tok_emb")?;
    let pos_emb = bind(g, params, "text.pos_emb")?;
    let emb = g.embed(tok_emb, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = g.rows(pos_emb, &positions)?;
    let x = g.add(emb, pos)?;
    let x = layer_norm_affine(g, params, x, "text.emb_ln")?;
    encoder_stack(g, params, x, "text")
}

/// Builds the image encoder into `g`. Features of masked regions are zeroed
/// before projection; geometry is retained. Returns the (N+1)×d hidden node.
pub fn build_image_encoder(
    g: &mut Graph,
    params: &ModelParams,
    regions: &RegionSequence,
    masked: &[usize],
) -> Result<NodeId> {
    let n = regions.len();
    let c = &params.config;
    let mut feat_data = Vec::with_capacity(n * c.feature_dim);
    for (i, f) in regions.features.iter().enumerate() {
        // mask indices are positions in the encoded sequence; position 0 is [CLS]
        if masked.contains(&(i + 1)) {
            feat_data.extend(std::iter::repeat(0.0).take(c.feature_dim));
        } else {
            feat_data.extend_from_slice(f);
        }
    }
    let feats = g.constant(Tensor::matrix(n, c.feature_dim, feat_data)?);
    let mut geom_data = Vec::with_capacity(n * GEOM_DIM);
    for b in &regions.boxes {
        geom_data.extend_from_slice(b);
    }
    let geom = g.constant(Tensor::matrix(n, GEOM_DIM, geom_data)?);

    let f = linear(g, params, feats, "img.feat_proj.w", "img.feat_proj.b")?;
    let ge = linear(g, params, geom, "img.geom_proj.w", "img.geom_proj.b")?;
    let x = g.add(f, ge)?;
    let cls = bind(g, params, "img.cls")?;
    let x = g.concat_rows(&[cls, x])?;
    let x = layer_norm_affine(g, params, x, "img.emb_ln")?;
    encoder_stack(g, params, x, "img")
}

fn check_mask_indices(masked: &[usize], seq_len_with_cls: usize) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for &i in masked {
        if i == 0 {
            return Err(LdError::InvalidArgument(
                "position 0 ([CLS]) cannot be masked".into(),
            ));
        }
        if i >= seq_len_with_cls {
            return Err(LdError::InvalidArgument(format!(
                "mask index {i} out of range"
            )));
        }
        if !seen.insert(i) {
            return Err(LdError::InvalidArgument(format!(
                "duplicate mask index {i}"
            )));
        }
    }
    Ok(())
}

pub fn encode_text(params: &ModelParams, tokens: &TokenSequence) -> Result<EncodedSequence> {
    tokens.validate(&params.config)?;
    let mut g = Graph::new();
    let hidden = build_text_encoder(&mut g, params, &tokens.ids)?;
    let t = g.value(hidden).clone();
    t.check_finite("text encoder output")?;
    Ok(EncodedSequence::from_hidden(t))
}

pub fn encode_image(params: &ModelParams, regions: &RegionSequence) -> Result<EncodedSequence> {
    regions.validate(&params.config)?;
    let mut g = Graph::new();
    let hidden = build_image_encoder(&mut g, params, regions, &[])?;
    let t = g.value(hidden).clone();
    t.check_finite("image encoder output")?;
    Ok(EncodedSequence::from_hidden(t))
}

/// Runs the text encoder on a masked sequence. `tokens` must already carry
/// the resolved mask plan (MASK/RANDOM/KEEP applied upstream).
pub fn masked_encode_text(
    params: &ModelParams,
    tokens: &TokenSequence,
    mask_indices: &[usize],
) -> Result<EncodedSequence> {
    tokens.validate(&params.config)?;
    check_mask_indices(mask_indices, tokens.ids.len())?;
    encode_text(params, tokens)
}

/// Runs the image encoder with masked region features zeroed out.
pub fn masked_encode_image(
    params: &ModelParams,
    regions: &RegionSequence,
    mask_indices: &[usize],
) -> Result<EncodedSequence> {
    regions.validate(&params.config)?;
    check_mask_indices(mask_indices, regions.len() + 1)?;
    let mut g = Graph::new();
    let hidden = build_image_encoder(&mut g, params, regions, mask_indices)?;
    let t = g.value(hidden).clone();
    t.check_finite("image encoder output")?;
    Ok(EncodedSequence::from_hidden(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            ffn: 16,
            vocab: 12,
            classes: 4,
            feature_dim: 6,
            n_max: 6,
            t_max: 8,
        }
    }

    pub(crate) fn random_regions(config: &ModelConfig, rng: &mut impl Rng, n: usize) -> RegionSequence {
        let mut features = Vec::new();
        let mut boxes = Vec::new();
        let mut class_dist = Vec::new();
        for _ in 0..n {
            features.push((0..config.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let x1: f64 = rng.gen_range(0.0..0.5);
            let y1: f64 = rng.gen_range(0.0..0.5);
            let w: f64 = rng.gen_range(0.1..0.5);
            let h: f64 = rng.gen_range(0.1..0.5);
            boxes.push([x1, y1, x1 + w, y1 + h, w, h, w * h]);
            let raw: Vec<f64> = (0..config.classes).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            class_dist.push(raw.into_iter().map(|v| v / sum).collect());
        }
        RegionSequence {
            features,
            boxes,
            class_dist,
        }
    }

    #[test]
    fn text_shape_contract() {
        let params = ModelParams::init(tiny_config(), 1);
        let tokens = TokenSequence::new(vec![CLS_ID, 3, 4, 5, 6, 7, 8, 9]);
        let enc = encode_text(&params, &tokens).unwrap();
        assert_eq!(enc.hidden.shape(), &[8, 8]);
        assert_eq!(enc.global.data(), enc.hidden.row(0));
    }

    #[test]
    fn image_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let config = tiny_config();
        let params = ModelParams::init(config, 1);
        let regions = random_regions(&config, &mut rng, 5);
        let enc = encode_image(&params, &regions).unwrap();
        assert_eq!(enc.hidden.shape(), &[6, config.dim]);
    }

    #[test]
    fn determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = tiny_config();
        let params = ModelParams::init(config, 5);
        let regions = random_regions(&config, &mut rng, 3);
        let a = encode_image(&params, &regions).unwrap();
        let b = encode_image(&params, &regions).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_layers_no_mixing() {
        let mut config = tiny_config();
        config.layers = 0;
        let params = ModelParams::init(config, 2);
        let a = encode_text(&params, &TokenSequence::new(vec![CLS_ID, 3, 4, 5])).unwrap();
        let b = encode_text(&params, &TokenSequence::new(vec![CLS_ID, 3, 9, 5])).unwrap();
        // positions 0, 1, 3 depend only on their own id and position
        assert_eq!(a.hidden.row(0), b.hidden.row(0));
        assert_eq!(a.hidden.row(1), b.hidden.row(1));
        assert_ne!(a.hidden.row(2), b.hidden.row(2));
        assert_eq!(a.hidden.row(3), b.hidden.row(3));
    }

    #[test]
    fn one_layer_mixes_positions_into_cls() {
        let params = ModelParams::init(tiny_config(), 11);
        let a = encode_text(&params, &TokenSequence::new(vec![CLS_ID, 3, 4, 5])).unwrap();
        let b = encode_text(&params, &TokenSequence::new(vec![CLS_ID, 3, 4, 9])).unwrap();
        assert_ne!(a.hidden.row(0), b.hidden.row(0));
    }

    #[test]
    fn token_out_of_vocab_rejected() {
        let params = ModelParams::init(tiny_config(), 1);
        let err = encode_text(&params, &TokenSequence::new(vec![CLS_ID, 99])).unwrap_err();
        assert!(matches!(err, LdError::TokenOutOfVocab { .. }));
    }

    #[test]
    fn empty_regions_rejected() {
        let params = ModelParams::init(tiny_config(), 1);
        let regions = RegionSequence {
            features: vec![],
            boxes: vec![],
            class_dist: vec![],
        };
        assert!(encode_image(&params, &regions).is_err());
    }

    #[test]
    fn empty_mask_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let config = tiny_config();
        let params = ModelParams::init(config, 4);
        let regions = random_regions(&config, &mut rng, 4);
        let plain = encode_image(&params, &regions).unwrap();
        let masked = masked_encode_image(&params, &regions, &[]).unwrap();
        assert_eq!(plain, masked);
    }

    #[test]
    fn masking_cls_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let config = tiny_config();
        let params = ModelParams::init(config, 4);
        let regions = random_regions(&config, &mut rng, 4);
        assert!(masked_encode_image(&params, &regions, &[0]).is_err());
    }

    #[test]
    fn all_regions_masked_depends_only_on_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let config = tiny_config();
        let params = ModelParams::init(config, 4);
        let mut a = random_regions(&config, &mut rng, 3);
        let mut b = random_regions(&config, &mut rng, 3);
        // same geometry, different features
        b.boxes = a.boxes.clone();
        a.class_dist = b.class_dist.clone();
        let mask: Vec<usize> = vec![1, 2, 3];
        let ea = masked_encode_image(&params, &a, &mask).unwrap();
        let eb = masked_encode_image(&params, &b, &mask).unwrap();
        assert_eq!(ea, eb);
    }

    #[test]
    fn region_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let config = tiny_config();
        let params = ModelParams::init(config, 8);
        let regions = random_regions(&config, &mut rng, 4);
        let perm = [2usize, 0, 3, 1];
        let permuted = RegionSequence {
            features: perm.iter().map(|&i| regions.features[i].clone()).collect(),
            boxes: perm.iter().map(|&i| regions.boxes[i]).collect(),
            class_dist: perm.iter().map(|&i| regions.class_dist[i].clone()).collect(),
        };
        let a = encode_image(&params, &regions).unwrap();
        let b = encode_image(&params, &permuted).unwrap();
        for (out_pos, &src) in perm.iter().enumerate() {
            for (x, y) in b.hidden.row(out_pos + 1).iter().zip(a.hidden.row(src + 1)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for (x, y) in b.global.data().iter().zip(a.global.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn encoders_share_no_parameters() {
        let config = tiny_config();
        let mut params = ModelParams::init(config, 8);
        let tokens = TokenSequence::new(vec![CLS_ID, 3, 4]);
        let before = encode_text(&params, &tokens).unwrap();
        // mutate every image-side tensor
        for (name, t) in params.tensors.iter_mut() {
            if name.starts_with("img.") {
                for v in t.data_mut() {
                    *v += 1.0;
                }
            }
        }
        let after = encode_text(&params, &tokens).unwrap();
        assert_eq!(before, after);
    }
}
