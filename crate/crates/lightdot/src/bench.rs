//! Wall-clock retrieval latency across pool sizes and methods. Encoding and
//! index construction happen off the clock; only query-time work is timed.
//! Pools too expensive for the time budget are linearly extrapolated from the
//! largest measured pool and flagged, never silently skipped.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_image, encode_text, ModelParams};
use crate::error::{LdError, Result};
use crate::index::EmbeddingIndex;
use crate::rerank::{retrieve_rerank, CrossScorer, Query, QueryPayload};
use crate::synth::Corpus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Dense,
    DenseRerank,
    CrossAttention,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dense, Method::DenseRerank, Method::CrossAttention];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Dense => "dense",
            Method::DenseRerank => "dense-rerank",
            Method::CrossAttention => "cross-attention",
        };
        f.write_str(s)
    }
}

impl FromStr for Method {
    type Err = LdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dense" => Ok(Method::Dense),
            "dense-rerank" => Ok(Method::DenseRerank),
            "cross-attention" => Ok(Method::CrossAttention),
            other => Err(LdError::InvalidArgument(format!(
                "unknown method '{other}' (expected dense, dense-rerank or cross-attention)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub pool_sizes: Vec<usize>,
    pub methods: Vec<Method>,
    pub query_count: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub rerank_m: usize,
    pub top_k: usize,
    pub time_budget: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            pool_sizes: vec![1000, 4000, 16000],
            methods: Method::ALL.to_vec(),
            query_count: 8,
            repetitions: 5,
            warmup: 1,
            rerank_m: 50,
            top_k: 10,
            time_budget: Duration::from_secs(480),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyEntry {
    pub method: Method,
    pub pool_size: usize,
    pub per_query_mean_s: f64,
    pub per_query_median_s: f64,
    pub per_query_p95_s: f64,
    /// cross-attention time / this method's time, per query at this pool.
    pub speedup_vs_cross: Option<f64>,
    /// True when extrapolated from a smaller pool instead of measured.
    pub estimated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub entries: Vec<LatencyEntry>,
    /// Average cost of a single stage-2 scorer invocation.
    pub scorer_call_s: f64,
    pub query_count: usize,
    pub repetitions: usize,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

fn summarize(samples: &mut Vec<f64>) -> (f64, f64, f64) {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    (mean, percentile(samples, 0.5), percentile(samples, 0.95))
}

/// Score every pool item, exact sort, top-k. The brute-force baseline.
fn cross_scan(
    scorer: &dyn CrossScorer,
    query: &Query,
    pool: &[u64],
    k: usize,
) -> Result<Vec<(u64, f64)>> {
    let mut scored = Vec::with_capacity(pool.len());
    for &id in pool {
        scored.push((id, scorer.score(query, id)?));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

pub fn bench_latency(
    params: &ModelParams,
    scorer: &dyn CrossScorer,
    corpus: &Corpus,
    config: &BenchConfig,
) -> Result<LatencyReport> {
    let max_pool = *config
        .pool_sizes
        .iter()
        .max()
        .ok_or(LdError::EmptyInput("pool sizes"))?;
    if config.query_count == 0 || config.repetitions == 0 {
        return Err(LdError::InvalidArgument(
            "query count and repetitions must be > 0".into(),
        ));
    }
    if corpus.examples.len() < max_pool {
        return Err(LdError::InvalidArgument(format!(
            "corpus has {} pairs, largest pool needs {}",
            corpus.examples.len(),
            max_pool
        )));
    }
    let mut pool_sizes = config.pool_sizes.clone();
    pool_sizes.sort_unstable();

    // Off the clock: embed the largest pool once; smaller pools are prefixes.
    let pool_ids: Vec<u64> = (0..max_pool as u64).collect();
    let mut embeddings = Vec::with_capacity(max_pool);
    for &id in &pool_ids {
        let ex = corpus.example(id)?;
        embeddings.push(encode_image(params, &ex.regions)?.global.data().to_vec());
    }
    let queries: Vec<u64> = corpus
        .examples
        .iter()
        .take(config.query_count)
        .map(|e| e.id)
        .collect();

    // Cost of one scorer call, used by the budget estimator.
    let probe_ex = corpus.example(queries[0])?;
    let probe_query = Query {
        id: probe_ex.id,
        payload: QueryPayload::Text(&probe_ex.caption),
    };
    let probe_n = 10.min(max_pool);
    let t0 = Instant::now();
    for id in 0..probe_n as u64 {
        scorer.score(&probe_query, id)?;
    }
    let scorer_call_s = t0.elapsed().as_secs_f64() / probe_n as f64;

    let started = Instant::now();
    let mut entries = Vec::new();
    // last measured (pool, per-query mean) per method — extrapolation base
    let mut base: Vec<Option<(usize, f64)>> = vec![None; Method::ALL.len()];
    let midx = |m: Method| Method::ALL.iter().position(|x| *x == m).unwrap();

    for &pool in &pool_sizes {
        let mut index = EmbeddingIndex::new(params.config.dim)?;
        for (i, v) in embeddings[..pool].iter().enumerate() {
            index.insert(i as u64, v)?;
        }
        index.seal();

        for &method in &config.methods {
            // predicted timed work at this (method, pool)
            let runs = (config.repetitions + config.warmup) * queries.len();
            let predicted = match method {
                Method::Dense => 0.0,
                Method::DenseRerank => runs as f64 * config.rerank_m as f64 * scorer_call_s,
                Method::CrossAttention => runs as f64 * pool as f64 * scorer_call_s,
            };
            let remaining = config
                .time_budget
                .saturating_sub(started.elapsed())
                .as_secs_f64();
            if predicted > remaining {
                let Some((bp, bt)) = base[midx(method)] else {
                    return Err(LdError::InvalidArgument(format!(
                        "time budget too small to measure {method} at any pool size"
                    )));
                };
                let scaled = bt * pool as f64 / bp as f64;
                let cross_t = entries
                    .iter()
                    .find(|e: &&LatencyEntry| {
                        e.method == Method::CrossAttention && e.pool_size == pool
                    })
                    .map(|e| e.per_query_mean_s);
                entries.push(LatencyEntry {
                    method,
                    pool_size: pool,
                    per_query_mean_s: scaled,
                    per_query_median_s: scaled,
                    per_query_p95_s: scaled,
                    speedup_vs_cross: cross_t.map(|c| c / scaled),
                    estimated: true,
                });
                continue;
            }

            let mut samples = Vec::with_capacity(config.repetitions * queries.len());
            for rep in 0..config.repetitions + config.warmup {
                for &qid in &queries {
                    let ex = corpus.example(qid)?;
                    let t = Instant::now();
                    match method {
                        Method::Dense => {
                            let enc = encode_text(params, &ex.caption)?;
                            index.top_k(enc.global.data(), config.top_k)?;
                        }
                        Method::DenseRerank => {
                            let enc = encode_text(params, &ex.caption)?;
                            let q = Query {
                                id: qid,
                                payload: QueryPayload::Text(&ex.caption),
                            };
                            let m = config.rerank_m.min(pool);
                            let k = config.top_k.min(m);
                            retrieve_rerank(&index, enc.global.data(), &q, scorer, m, k)?;
                        }
                        Method::CrossAttention => {
                            let q = Query {
                                id: qid,
                                payload: QueryPayload::Text(&ex.caption),
                            };
                            cross_scan(scorer, &q, &pool_ids[..pool], config.top_k)?;
                        }
                    }
                    if rep >= config.warmup {
                        samples.push(t.elapsed().as_secs_f64());
                    }
                }
            }
            let (mean, median, p95) = summarize(&mut samples);
            base[midx(method)] = Some((pool, mean));
            entries.push(LatencyEntry {
                method,
                pool_size: pool,
                per_query_mean_s: mean,
                per_query_median_s: median,
                per_query_p95_s: p95,
                speedup_vs_cross: None,
                estimated: false,
            });
        }

        // fill in speedups once the cross baseline for this pool is known
        let cross_t = entries
            .iter()
            .find(|e| e.method == Method::CrossAttention && e.pool_size == pool)
            .map(|e| e.per_query_mean_s);
        if let Some(c) = cross_t {
            for e in entries
                .iter_mut()
                .filter(|e| e.pool_size == pool && e.method != Method::CrossAttention)
            {
                e.speedup_vs_cross = Some(c / e.per_query_mean_s);
            }
        }
    }

    Ok(LatencyReport {
        entries,
        scorer_call_s,
        query_count: config.query_count,
        repetitions: config.repetitions,
    })
}

impl LatencyReport {
    pub fn entry(&self, method: Method, pool: usize) -> Option<&LatencyEntry> {
        self.entries
            .iter()
            .find(|e| e.method == method && e.pool_size == pool)
    }

    pub fn to_plain(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "query_count {}", self.query_count);
        let _ = writeln!(s, "repetitions {}", self.repetitions);
        let _ = writeln!(s, "scorer_call_s {:.9}", self.scorer_call_s);
        for e in &self.entries {
            let p = format!("{}.{}", e.method, e.pool_size);
            let _ = writeln!(s, "{p}.per_query_mean_s {:.9}", e.per_query_mean_s);
            let _ = writeln!(s, "{p}.per_query_median_s {:.9}", e.per_query_median_s);
            let _ = writeln!(s, "{p}.per_query_p95_s {:.9}", e.per_query_p95_s);
            if let Some(v) = e.speedup_vs_cross {
                let _ = writeln!(s, "{p}.speedup_vs_cross {:.3}", v);
            }
            let _ = writeln!(s, "{p}.estimated {}", e.estimated);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from(
            "method\tpool\tmean_s\tmedian_s\tp95_s\tspeedup_vs_cross\testimated\n",
        );
        for e in &self.entries {
            let speedup = e
                .speedup_vs_cross
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{}\t{}\t{:.9}\t{:.9}\t{:.9}\t{}\t{}",
                e.method,
                e.pool_size,
                e.per_query_mean_s,
                e.per_query_median_s,
                e.per_query_p95_s,
                speedup,
                e.estimated
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::rerank::OracleScorer;
    use crate::synth::{generate_corpus, GenConfig};

    fn tiny_setup() -> (Corpus, ModelParams) {
        let gen = GenConfig {
            pairs: 64,
            concepts: 8,
            classes: 8,
            vocab: 64,
            val_size: 8,
            test_size: 8,
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
        (corpus, ModelParams::init(config, 1))
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("densest".parse::<Method>().is_err());
    }

    #[test]
    fn percentiles_on_known_samples() {
        let mut s: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let (mean, median, p95) = summarize(&mut s);
        assert!((mean - 50.5).abs() < 1e-12);
        assert_eq!(median, 51.0);
        assert_eq!(p95, 95.0);
    }

    #[test]
    fn report_covers_every_method_and_pool() {
        let (corpus, params) = tiny_setup();
        let scorer = OracleScorer::for_corpus(&corpus);
        let config = BenchConfig {
            pool_sizes: vec![16, 48],
            query_count: 2,
            repetitions: 2,
            warmup: 1,
            rerank_m: 8,
            top_k: 4,
            ..Default::default()
        };
        let report = bench_latency(&params, &scorer, &corpus, &config).unwrap();
        assert_eq!(report.entries.len(), 6);
        for m in Method::ALL {
            for p in [16, 48] {
                let e = report.entry(m, p).unwrap();
                assert!(e.per_query_mean_s > 0.0);
                assert!(!e.estimated);
                if m != Method::CrossAttention {
                    assert!(e.speedup_vs_cross.is_some());
                }
            }
        }
        assert!(report.to_table().lines().count() == 7);
        assert!(report.to_plain().contains("dense.16.per_query_mean_s"));
    }

    struct SlowScorer;
    impl CrossScorer for SlowScorer {
        fn score(&self, _q: &Query, c: u64) -> crate::error::Result<f64> {
            std::thread::sleep(Duration::from_millis(1));
            Ok(-(c as f64))
        }
        fn latency_class(&self) -> crate::rerank::LatencyClass {
            crate::rerank::LatencyClass::Slow
        }
    }

    #[test]
    fn over_budget_pool_is_extrapolated_and_flagged() {
        let (corpus, params) = tiny_setup();
        let config = BenchConfig {
            pool_sizes: vec![8, 64],
            methods: vec![Method::CrossAttention],
            query_count: 1,
            repetitions: 1,
            warmup: 0,
            rerank_m: 4,
            top_k: 4,
            time_budget: Duration::from_millis(30),
            ..Default::default()
        };
        let report = bench_latency(&params, &SlowScorer, &corpus, &config).unwrap();
        let small = report.entry(Method::CrossAttention, 8).unwrap();
        let large = report.entry(Method::CrossAttention, 64).unwrap();
        assert!(!small.estimated);
        assert!(large.estimated);
        // linear extrapolation from the measured pool
        let expected = small.per_query_mean_s * 64.0 / 8.0;
        assert!((large.per_query_mean_s - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_budget_with_nothing_measured_is_an_error() {
        let (corpus, params) = tiny_setup();
        let config = BenchConfig {
            pool_sizes: vec![8],
            methods: vec![Method::CrossAttention],
            query_count: 1,
            repetitions: 1,
            warmup: 0,
            rerank_m: 4,
            top_k: 4,
            time_budget: Duration::ZERO,
            ..Default::default()
        };
        // nothing to extrapolate from: fail rather than fabricate numbers
        assert!(bench_latency(&params, &SlowScorer, &corpus, &config).is_err());
    }

    #[test]
    fn pool_larger_than_corpus_rejected() {
        let (corpus, params) = tiny_setup();
        let scorer = OracleScorer::for_corpus(&corpus);
        let config = BenchConfig {
            pool_sizes: vec![1000],
            ..Default::default()
        };
        assert!(bench_latency(&params, &scorer, &corpus, &config).is_err());
    }
}
