//! Two-stage retrieval: a cheap dense scan proposes M candidates, then an
//! expensive pairwise scorer re-scores exactly those M. Stage-2 scores fully
//! replace stage-1 scores in the final ranking.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::encoder::{linear, transformer_layer, ModelParams, RegionSequence, TokenSequence};
use crate::error::{LdError, Result};
use crate::graph::{value_and_grad, Graph, NodeId};
use crate::index::{EmbeddingIndex, RetrievalResult};
use crate::optim::{adamw_step, AdamWHyper, AdamWState};
use crate::synth::Corpus;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum QueryPayload<'a> {
    Text(&'a TokenSequence),
    Image(&'a RegionSequence),
}

#[derive(Debug, Clone)]
pub struct Query<'a> {
    pub id: u64,
    pub payload: QueryPayload<'a>,
}

/// Rough cost class, used by the benchmark to budget pool sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatencyClass {
    Fast,
    Slow,
}

pub trait CrossScorer {
    fn score(&self, query: &Query, candidate: u64) -> Result<f64>;
    fn latency_class(&self) -> LatencyClass;
}

/// Ground-truth scorer: 1.0 for gold candidates, 0.0 otherwise. Upper-bounds
/// what any learned stage-2 scorer can achieve.
pub struct OracleScorer {
    gold: HashMap<u64, BTreeSet<u64>>,
}

impl OracleScorer {
    pub fn new(gold: HashMap<u64, BTreeSet<u64>>) -> Self {
        OracleScorer { gold }
    }

    /// Identity gold mapping: each query's sole match is the paired item.
    pub fn for_corpus(corpus: &Corpus) -> Self {
        let gold = corpus
            .examples
            .iter()
            .map(|e| (e.id, BTreeSet::from([e.id])))
            .collect();
        OracleScorer { gold }
    }
}

impl CrossScorer for OracleScorer {
    fn score(&self, query: &Query, candidate: u64) -> Result<f64> {
        Ok(self
            .gold
            .get(&query.id)
            .is_some_and(|s| s.contains(&candidate)) as u8 as f64)
    }

    fn latency_class(&self) -> LatencyClass {
        LatencyClass::Fast
    }
}

/// Stage-2 scorer that reproduces stage-1 scores exactly: dots the stored
/// candidate vector with the query embedding. Reranking with it is a no-op.
pub struct EmbeddingDotScorer<'a> {
    pub index: &'a EmbeddingIndex,
    pub query_vec: Vec<f64>,
}

impl CrossScorer for EmbeddingDotScorer<'_> {
    fn score(&self, _query: &Query, candidate: u64) -> Result<f64> {
        let row = self.index.vector_for(candidate).ok_or_else(|| {
            LdError::InvalidArgument(format!("candidate {candidate} not in index"))
        })?;
        Ok(row
            .iter()
            .zip(&self.query_vec)
            .map(|(a, b)| *a as f64 * b)
            .sum())
    }

    fn latency_class(&self) -> LatencyClass {
        LatencyClass::Fast
    }
}

// ---------------------------------------------------------------------------
// Learned single-stream cross-attention scorer
// ---------------------------------------------------------------------------

/// (name, shape, random-init?) for the cross scorer, in rng consumption order.
fn cross_layer_names(c: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let (d, ffn, v, dv, tmax) = (c.dim, c.ffn, c.vocab, c.feature_dim, c.t_max);
    let mut out: Vec<(String, Vec<usize>, bool)> = Vec::new();
    out.push(("x.tok_emb".into(), vec![v, d], true));
    out.push(("x.pos_emb".into(), vec![tmax + 1, d], true));
    out.push(("x.cls".into(), vec![1, d], true));
    out.push(("x.feat_proj.w".into(), vec![dv, d], true));
    out.push(("x.feat_proj.b".into(), vec![d], false));
    out.push(("x.geom_proj.w".into(), vec![crate::config::GEOM_DIM, d], true));
    out.push(("x.geom_proj.b".into(), vec![d], false));
    out.push(("x.emb_ln.g".into(), vec![d], false));
    out.push(("x.emb_ln.b".into(), vec![d], false));
    for l in 0..c.layers {
        let p = format!("x.l{l}");
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
    out.push(("x.final_ln.g".into(), vec![d], false));
    out.push(("x.final_ln.b".into(), vec![d], false));
    out.push(("x.head.w".into(), vec![d, 1], true));
    out.push(("x.head.b".into(), vec![1], false));
    out
}

pub fn init_cross_params(config: ModelConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).unwrap();
    let mut tensors = BTreeMap::new();
    for (name, shape, is_weight) in cross_layer_names(&config) {
        let t = if is_weight {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect()).unwrap()
        } else if name.ends_with(".g") {
            Tensor::new(shape.clone(), vec![1.0; shape.iter().product()]).unwrap()
        } else {
            Tensor::zeros(shape)
        };
        tensors.insert(name, t);
    }
    ModelParams { config, tensors }
}

/// Single-stream match score: regions and tokens attend to each other through
/// a shared transformer; a linear head on the leading [CLS] row emits the
/// logit. Returns a [1,1] node.
pub fn cross_score_node(
    g: &mut Graph,
    params: &ModelParams,
    regions: &RegionSequence,
    tokens: &TokenSequence,
) -> Result<NodeId> {
    regions.validate(&params.config)?;
    tokens.validate(&params.config)?;
    let c = &params.config;
    let n = regions.len();

    let mut feat_data = Vec::with_capacity(n * c.feature_dim);
    for f in &regions.features {
        feat_data.extend_from_slice(f);
    }
    let feats = g.constant(Tensor::matrix(n, c.feature_dim, feat_data)?);
    let mut geom_data = Vec::new();
    for b in &regions.boxes {
        geom_data.extend_from_slice(b);
    }
    let geom = g.constant(Tensor::matrix(n, crate::config::GEOM_DIM, geom_data)?);
    let fp = linear(g, params, feats, "x.feat_proj.w", "x.feat_proj.b")?;
    let gp = linear(g, params, geom, "x.geom_proj.w", "x.geom_proj.b")?;
    let img = g.add(fp, gp)?;

    let tok_emb = crate::encoder::bind(g, params, "x.tok_emb")?;
    let pos_emb = crate::encoder::bind(g, params, "x.pos_emb")?;
    let emb = g.embed(tok_emb, &tokens.ids)?;
    let positions: Vec<usize> = (0..tokens.ids.len()).collect();
    let pos = g.rows(pos_emb, &positions)?;
    let txt = g.add(emb, pos)?;

    let cls = crate::encoder::bind(g, params, "x.cls")?;
    let x = g.concat_rows(&[cls, img, txt])?;
    let mut x = crate::encoder::layer_norm_affine(g, params, x, "x.emb_ln")?;
    for l in 0..c.layers {
        x = transformer_layer(g, params, x, &format!("x.l{l}"))?;
    }
    let x = crate::encoder::layer_norm_affine(g, params, x, "x.final_ln")?;
    let head = g.rows(x, &[0])?;
    linear(g, params, head, "x.head.w", "x.head.b")
}

pub fn cross_score(
    params: &ModelParams,
    regions: &RegionSequence,
    tokens: &TokenSequence,
) -> Result<f64> {
    let mut g = Graph::new();
    let s = cross_score_node(&mut g, params, regions, tokens)?;
    let v = g.value(s).data()[0];
    if !v.is_finite() {
        return Err(LdError::NonFinite {
            what: "cross-attention score".into(),
        });
    }
    Ok(v)
}

pub struct CrossAttentionScorer<'a> {
    pub params: ModelParams,
    pub corpus: &'a Corpus,
}

impl CrossScorer for CrossAttentionScorer<'_> {
    fn score(&self, query: &Query, candidate: u64) -> Result<f64> {
        let ex = self.corpus.example(candidate)?;
        match &query.payload {
            QueryPayload::Text(tokens) => cross_score(&self.params, &ex.regions, tokens),
            QueryPayload::Image(regions) => cross_score(&self.params, regions, &ex.caption),
        }
    }

    fn latency_class(&self) -> LatencyClass {
        LatencyClass::Slow
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CrossTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CrossTrainConfig {
    fn default() -> Self {
        CrossTrainConfig {
            steps: 60,
            batch_size: 8,
            lr: 1e-3,
            seed: 17,
        }
    }
}

/// Trains the cross scorer with binary cross-entropy: every batch pair serves
/// once as a positive and once, shifted against the next caption, as a
/// negative. Returns the per-step losses.
pub fn train_cross_scorer(
    params: &mut ModelParams,
    corpus: &Corpus,
    config: &CrossTrainConfig,
) -> Result<Vec<f64>> {
    if corpus.splits.train.len() < 2 {
        return Err(LdError::EmptyInput("need at least two training pairs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamWState::default();
    let mut losses = Vec::with_capacity(config.steps as usize);
    for step in 0..config.steps {
        let n = config.batch_size.min(corpus.splits.train.len());
        let picks = rand::seq::index::sample(&mut rng, corpus.splits.train.len(), n);
        let ids: Vec<u64> = picks.iter().map(|i| corpus.splits.train[i]).collect();

        let mut g = Graph::new();
        let mut picked = Vec::with_capacity(2 * n);
        for (bi, &id) in ids.iter().enumerate() {
            let pos = corpus.example(id)?;
            let neg = corpus.example(ids[(bi + 1) % n])?;
            // log_softmax([s, 0]) = [log sigmoid(s), log(1 - sigmoid(s))]
            for (regions, tokens, label) in [
                (&pos.regions, &pos.caption, 0usize),
                (&pos.regions, &neg.caption, 1usize),
            ] {
                let s = cross_score_node(&mut g, params, regions, tokens)?;
                let zero = g.constant(Tensor::matrix(1, 1, vec![0.0])?);
                let pair = g.concat_cols(&[s, zero])?;
                let lsm = g.log_softmax(pair);
                picked.push(g.slice_cols(lsm, label, 1)?);
            }
        }
        let stacked = g.concat_rows(&picked)?;
        let total = g.sum(stacked);
        let loss = g.scale(total, -1.0 / (2 * n) as f64);
        let (value, grads) = value_and_grad(&mut g, loss)?;
        if !value.is_finite() {
            return Err(LdError::NonFinite {
                what: format!("cross scorer loss at step {step}"),
            });
        }
        let hyper = AdamWHyper {
            lr: config.lr,
            ..Default::default()
        };
        adamw_step(&mut params.tensors, &grads, &mut state, &hyper)?;
        losses.push(value);
    }
    Ok(losses)
}

// ---------------------------------------------------------------------------
// Two-stage retrieval
// ---------------------------------------------------------------------------

/// Dense top-M then rerank, returning the top-K by stage-2 score. Ties fall
/// back to stage-1 score, then ascending id. Calls the scorer exactly M times.
pub fn retrieve_rerank(
    index: &EmbeddingIndex,
    query_vec: &[f64],
    query: &Query,
    scorer: &dyn CrossScorer,
    m: usize,
    k: usize,
) -> Result<RetrievalResult> {
    if k == 0 || m == 0 {
        return Err(LdError::InvalidArgument("k and m must be > 0".into()));
    }
    if k > m {
        return Err(LdError::InvalidArgument(format!(
            "k ({k}) must not exceed rerank depth m ({m})"
        )));
    }
    if m > index.len() {
        return Err(LdError::InvalidArgument(format!(
            "rerank depth m ({m}) exceeds index size ({})",
            index.len()
        )));
    }
    let stage1 = index.top_k(query_vec, m)?;
    let mut rescored: Vec<(f64, f64, u64)> = Vec::with_capacity(stage1.entries.len());
    for &(id, s1) in &stage1.entries {
        let s2 = scorer
            .score(query, id)
            .map_err(|e| LdError::ScorerFailure {
                candidate: id,
                msg: e.to_string(),
            })?;
        if !s2.is_finite() {
            return Err(LdError::ScorerFailure {
                candidate: id,
                msg: "non-finite score".into(),
            });
        }
        rescored.push((s2, s1, id));
    }
    rescored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(b.1.partial_cmp(&a.1).unwrap())
            .then(a.2.cmp(&b.2))
    });
    rescored.truncate(k);
    Ok(RetrievalResult {
        entries: rescored.into_iter().map(|(s2, _, id)| (id, s2)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, GenConfig};
    use rand::Rng;
    use std::cell::Cell;

    fn flat_index(n: u64) -> EmbeddingIndex {
        // descending stage-1 score with id
        let mut idx = EmbeddingIndex::new(2).unwrap();
        for id in 0..n {
            idx.insert(id, &[(n - id) as f64, 1.0]).unwrap();
        }
        idx.seal();
        idx
    }

    fn text_query(tokens: &TokenSequence, id: u64) -> Query<'_> {
        Query {
            id,
            payload: QueryPayload::Text(tokens),
        }
    }

    struct ConstScorer;
    impl CrossScorer for ConstScorer {
        fn score(&self, _q: &Query, _c: u64) -> Result<f64> {
            Ok(0.0)
        }
        fn latency_class(&self) -> LatencyClass {
            LatencyClass::Fast
        }
    }

    struct CountingScorer {
        calls: Cell<usize>,
    }
    impl CrossScorer for CountingScorer {
        fn score(&self, _q: &Query, c: u64) -> Result<f64> {
            self.calls.set(self.calls.get() + 1);
            Ok(-(c as f64))
        }
        fn latency_class(&self) -> LatencyClass {
            LatencyClass::Fast
        }
    }

    struct FailingScorer;
    impl CrossScorer for FailingScorer {
        fn score(&self, _q: &Query, c: u64) -> Result<f64> {
            if c == 3 {
                Err(LdError::InvalidArgument("boom".into()))
            } else {
                Ok(0.0)
            }
        }
        fn latency_class(&self) -> LatencyClass {
            LatencyClass::Fast
        }
    }

    #[test]
    fn oracle_promotes_gold_from_last_candidate() {
        let idx = flat_index(20);
        let tokens = TokenSequence::new(vec![0]);
        // gold id 19 has the worst stage-1 score
        let gold = HashMap::from([(99u64, BTreeSet::from([19u64]))]);
        let scorer = OracleScorer::new(gold);
        let q = text_query(&tokens, 99);
        let r = retrieve_rerank(&idx, &[1.0, 0.0], &q, &scorer, 20, 5).unwrap();
        assert_eq!(r.entries[0].0, 19);
        assert_eq!(r.entries[0].1, 1.0);
    }

    #[test]
    fn constant_stage2_preserves_stage1_order() {
        let idx = flat_index(10);
        let tokens = TokenSequence::new(vec![0]);
        let q = text_query(&tokens, 0);
        let r = retrieve_rerank(&idx, &[1.0, 0.0], &q, &ConstScorer, 10, 10).unwrap();
        let ids: Vec<u64> = r.entries.iter().map(|e| e.0).collect();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn scorer_called_exactly_m_times() {
        let idx = flat_index(30);
        let tokens = TokenSequence::new(vec![0]);
        let q = text_query(&tokens, 0);
        let scorer = CountingScorer { calls: Cell::new(0) };
        retrieve_rerank(&idx, &[1.0, 0.0], &q, &scorer, 12, 4).unwrap();
        assert_eq!(scorer.calls.get(), 12);
    }

    #[test]
    fn k_exceeding_m_is_an_error() {
        let idx = flat_index(10);
        let tokens = TokenSequence::new(vec![0]);
        let q = text_query(&tokens, 0);
        assert!(retrieve_rerank(&idx, &[1.0, 0.0], &q, &ConstScorer, 5, 6).is_err());
        assert!(retrieve_rerank(&idx, &[1.0, 0.0], &q, &ConstScorer, 11, 5).is_err());
    }

    #[test]
    fn scorer_failure_names_candidate() {
        let idx = flat_index(10);
        let tokens = TokenSequence::new(vec![0]);
        let q = text_query(&tokens, 0);
        let err = retrieve_rerank(&idx, &[1.0, 0.0], &q, &FailingScorer, 10, 5).unwrap_err();
        match err {
            LdError::ScorerFailure { candidate, .. } => assert_eq!(candidate, 3),
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn embedding_dot_scorer_reproduces_dense_ranking() {
        let mut idx = EmbeddingIndex::new(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for id in 0..40u64 {
            let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            idx.insert(id, &v).unwrap();
        }
        idx.seal();
        let qv = vec![0.3, -0.7, 0.2];
        let dense = idx.top_k(&qv, 10).unwrap();
        let tokens = TokenSequence::new(vec![0]);
        let q = text_query(&tokens, 0);
        let scorer = EmbeddingDotScorer {
            index: &idx,
            query_vec: qv.clone(),
        };
        let reranked = retrieve_rerank(&idx, &qv, &q, &scorer, 40, 10).unwrap();
        let a: Vec<u64> = dense.entries.iter().map(|e| e.0).collect();
        let b: Vec<u64> = reranked.entries.iter().map(|e| e.0).collect();
        assert_eq!(a, b);
    }

    fn tiny_corpus_and_config() -> (Corpus, ModelConfig) {
        let gen = GenConfig {
            pairs: 24,
            concepts: 8,
            classes: 8,
            vocab: 64,
            val_size: 4,
            test_size: 4,
            ..Default::default()
        };
        let corpus = generate_corpus(&gen).unwrap();
        let config = ModelConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            ffn: 32,
            vocab: 64,
            classes: 8,
            feature_dim: 24,
            n_max: 12,
            t_max: 16,
        };
        (corpus, config)
    }

    #[test]
    fn cross_scorer_is_deterministic_and_finite() {
        let (corpus, config) = tiny_corpus_and_config();
        let params = init_cross_params(config, 3);
        let ex = &corpus.examples[0];
        let a = cross_score(&params, &ex.regions, &ex.caption).unwrap();
        let b = cross_score(&params, &ex.regions, &ex.caption).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn training_reduces_bce_and_separates_pairs() {
        let (corpus, config) = tiny_corpus_and_config();
        let mut params = init_cross_params(config, 3);
        let tc = CrossTrainConfig {
            steps: 40,
            batch_size: 8,
            lr: 2e-3,
            seed: 11,
        };
        let losses = train_cross_scorer(&mut params, &corpus, &tc).unwrap();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");

        // matched pairs should now outscore mismatched ones on average
        let mut matched = 0.0;
        let mut mismatched = 0.0;
        let probe = 8;
        for i in 0..probe {
            let a = &corpus.examples[i];
            let b = &corpus.examples[(i + 1) % probe];
            matched += cross_score(&params, &a.regions, &a.caption).unwrap();
            mismatched += cross_score(&params, &a.regions, &b.caption).unwrap();
        }
        assert!(matched > mismatched);
    }
}
