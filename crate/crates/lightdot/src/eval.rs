//! Retrieval quality metrics: R@K in both directions over a candidate pool,
//! and their mean (AR). All functions are pure — same inputs, same report.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_image, encode_text, ModelParams};
use crate::error::{LdError, Result};
use crate::index::{build_index, EmbeddingIndex, Modality, RetrievalResult};
use crate::rerank::{retrieve_rerank, CrossScorer, Query, QueryPayload};
use crate::synth::Corpus;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Fraction of queries whose top-k contains at least one gold id.
pub fn recall_at_k(
    results: &[RetrievalResult],
    gold: &[BTreeSet<u64>],
    k: usize,
) -> Result<f64> {
    if results.is_empty() {
        return Err(LdError::EmptyInput("no retrieval results"));
    }
    if results.len() != gold.len() {
        return Err(LdError::InvalidArgument(format!(
            "{} results vs {} gold sets",
            results.len(),
            gold.len()
        )));
    }
    if k == 0 {
        return Err(LdError::InvalidArgument("k must be > 0".into()));
    }
    let mut hits = 0usize;
    for (r, g) in results.iter().zip(gold) {
        if g.is_empty() {
            return Err(LdError::EmptyInput("gold set for a query"));
        }
        let top = r.entries.iter().take(k);
        if top.into_iter().any(|(id, _)| g.contains(id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Text query → image candidates.
    pub image_retrieval: DirectionReport,
    /// Image query → text candidates.
    pub text_retrieval: DirectionReport,
    pub average_recall: f64,
    pub pool_size: usize,
    pub query_count: usize,
    pub reranked: bool,
}

/// Mean of the six recall figures.
pub fn average_recall(ir: &DirectionReport, tr: &DirectionReport) -> f64 {
    (ir.r1 + ir.r5 + ir.r10 + tr.r1 + tr.r5 + tr.r10) / 6.0
}

/// Every pair id across all splits: the hardest candidate pool.
pub fn build_full_pool(corpus: &Corpus) -> Vec<u64> {
    let mut pool: Vec<u64> = corpus
        .splits
        .train
        .iter()
        .chain(&corpus.splits.val)
        .chain(&corpus.splits.test)
        .copied()
        .collect();
    pool.sort_unstable();
    pool
}

fn direction_report(results: &[RetrievalResult], gold: &[BTreeSet<u64>]) -> Result<DirectionReport> {
    Ok(DirectionReport {
        r1: recall_at_k(results, gold, 1)?,
        r5: recall_at_k(results, gold, 5)?,
        r10: recall_at_k(results, gold, 10)?,
    })
}

/// Runs both retrieval directions for `query_ids` against `pool_ids` and
/// reports R@{1,5,10} plus AR. With a scorer, each query goes through the
/// two-stage pipeline at depth `rerank_m`.
pub fn evaluate(
    params: &ModelParams,
    corpus: &Corpus,
    pool_ids: &[u64],
    query_ids: &[u64],
    rerank: Option<(&dyn CrossScorer, usize)>,
) -> Result<EvalReport> {
    if query_ids.is_empty() {
        return Err(LdError::EmptyInput("no queries"));
    }
    let image_index = build_index(params, corpus, pool_ids, Modality::Image)?;
    let text_index = build_index(params, corpus, pool_ids, Modality::Text)?;
    let gold: Vec<BTreeSet<u64>> = query_ids.iter().map(|&id| BTreeSet::from([id])).collect();
    let max_k = *RECALL_KS.iter().max().unwrap();

    let run = |index: &EmbeddingIndex, to_images: bool| -> Result<Vec<RetrievalResult>> {
        let mut out = Vec::with_capacity(query_ids.len());
        for &qid in query_ids {
            let ex = corpus.example(qid)?;
            let (vec, query) = if to_images {
                let enc = encode_text(params, &ex.caption)?;
                (
                    enc.global.data().to_vec(),
                    Query {
                        id: qid,
                        payload: QueryPayload::Text(&ex.caption),
                    },
                )
            } else {
                let enc = encode_image(params, &ex.regions)?;
                (
                    enc.global.data().to_vec(),
                    Query {
                        id: qid,
                        payload: QueryPayload::Image(&ex.regions),
                    },
                )
            };
            let result = match rerank {
                Some((scorer, m)) => {
                    let m = m.min(index.len()).max(max_k);
                    retrieve_rerank(index, &vec, &query, scorer, m, max_k)?
                }
                None => index.top_k(&vec, max_k)?,
            };
            out.push(result);
        }
        Ok(out)
    };

    let image_results = run(&image_index, true)?;
    let text_results = run(&text_index, false)?;
    let image_retrieval = direction_report(&image_results, &gold)?;
    let text_retrieval = direction_report(&text_results, &gold)?;
    let average_recall = average_recall(&image_retrieval, &text_retrieval);
    Ok(EvalReport {
        image_retrieval,
        text_retrieval,
        average_recall,
        pool_size: pool_ids.len(),
        query_count: query_ids.len(),
        reranked: rerank.is_some(),
    })
}

impl EvalReport {
    pub fn to_plain(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pool_size {}", self.pool_size);
        let _ = writeln!(s, "query_count {}", self.query_count);
        let _ = writeln!(s, "reranked {}", self.reranked);
        for (dir, r) in [
            ("image_retrieval", &self.image_retrieval),
            ("text_retrieval", &self.text_retrieval),
        ] {
            let _ = writeln!(s, "{dir}.r1 {:.6}", r.r1);
            let _ = writeln!(s, "{dir}.r5 {:.6}", r.r5);
            let _ = writeln!(s, "{dir}.r10 {:.6}", r.r10);
        }
        let _ = writeln!(s, "average_recall {:.6}", self.average_recall);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(ids: &[u64]) -> RetrievalResult {
        RetrievalResult {
            entries: ids.iter().enumerate().map(|(i, &id)| (id, -(i as f64))).collect(),
        }
    }

    #[test]
    fn recall_counts_hits_in_prefix() {
        let results = vec![result(&[1, 2, 3]), result(&[4, 5, 6])];
        let gold = vec![BTreeSet::from([2]), BTreeSet::from([9])];
        assert_eq!(recall_at_k(&results, &gold, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&results, &gold, 2).unwrap(), 0.5);
        assert_eq!(recall_at_k(&results, &gold, 3).unwrap(), 0.5);
    }

    #[test]
    fn any_gold_id_counts_as_hit() {
        let results = vec![result(&[7, 8])];
        let gold = vec![BTreeSet::from([8, 99])];
        assert_eq!(recall_at_k(&results, &gold, 2).unwrap(), 1.0);
    }

    #[test]
    fn empty_gold_is_an_error() {
        let results = vec![result(&[1])];
        let gold = vec![BTreeSet::new()];
        assert!(recall_at_k(&results, &gold, 1).is_err());
        assert!(recall_at_k(&[], &[], 1).is_err());
    }

    #[test]
    fn average_is_plain_mean() {
        let ir = DirectionReport { r1: 0.1, r5: 0.2, r10: 0.3 };
        let tr = DirectionReport { r1: 0.4, r5: 0.5, r10: 0.6 };
        assert!((average_recall(&ir, &tr) - 0.35).abs() < 1e-15);
    }

    #[test]
    fn full_pool_covers_all_splits() {
        let corpus = crate::synth::generate_corpus(&crate::synth::GenConfig {
            pairs: 32,
            val_size: 4,
            test_size: 4,
            ..Default::default()
        })
        .unwrap();
        let pool = build_full_pool(&corpus);
        assert_eq!(pool.len(), 32);
        assert!(pool.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn report_formats_round_trip() {
        let report = EvalReport {
            image_retrieval: DirectionReport { r1: 0.5, r5: 0.75, r10: 1.0 },
            text_retrieval: DirectionReport { r1: 0.25, r5: 0.5, r10: 0.75 },
            average_recall: 0.625,
            pool_size: 16,
            query_count: 8,
            reranked: false,
        };
        let back: EvalReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
        assert!(report.to_plain().contains("average_recall 0.625000"));
    }
}
