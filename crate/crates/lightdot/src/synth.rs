//! Deterministic generator of paired (regions, caption) corpora with a known
//! latent concept correspondence, plus the on-disk formats for pre-extracted
//! features. The region file doubles as the import format for real detector
//! output.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{CLS_ID, FIRST_FREE_ID, GEOM_DIM};
use crate::encoder::{RegionSequence, TokenSequence};
use crate::error::{io_err, LdError, Result};

pub const REGION_MAGIC: &[u8; 4] = b"LDRF";
pub const TEXT_MAGIC: &[u8; 4] = b"LDTX";
pub const FORMAT_VERSION: u32 = 1;

/// Class-distribution smoothing mass spread over non-target classes.
pub const CLASS_SMOOTHING: f64 = 0.05;

pub const MIN_CONCEPTS_PER_PAIR: usize = 2;
pub const MAX_CONCEPTS_PER_PAIR: usize = 5;
pub const MIN_CAPTION_LEN: usize = 4;
pub const MAX_CAPTION_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub pairs: usize,
    pub concepts: usize,
    pub vocab: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub seed: u64,
    pub val_size: usize,
    pub test_size: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            pairs: 512,
            concepts: 16,
            vocab: 128,
            classes: 16,
            feature_dim: 24,
            noise: 0.1,
            seed: 42,
            val_size: 32,
            test_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub id: u32,
    pub prototype: Vec<f64>,
    pub class_id: usize,
    /// Tokens appearing only in captions of this concept.
    pub exclusive_tokens: Vec<u32>,
    /// Additional tokens, possibly shared with other concepts.
    pub shared_tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub id: u64,
    pub regions: RegionSequence,
    pub caption: TokenSequence,
    /// Sorted concept ids; unique per corpus by construction.
    pub concepts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: GenConfig,
    pub concepts: Vec<ConceptSpec>,
    pub examples: Vec<PairedExample>,
    pub splits: CorpusSplit,
    /// Token id → surface string, for CLI query tokenization.
    pub vocab: Vec<String>,
}

impl Corpus {
    pub fn example(&self, id: u64) -> Result<&PairedExample> {
        self.examples
            .get(id as usize)
            .filter(|e| e.id == id)
            .ok_or_else(|| LdError::InvalidArgument(format!("unknown pair id {id}")))
    }

    pub fn token_id(&self, word: &str) -> Option<u32> {
        self.vocab.iter().position(|w| w == word).map(|i| i as u32)
    }
}

fn n_choose_k(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut r: usize = 1;
    for i in 0..k {
        r = r.saturating_mul(n - i) / (i + 1);
    }
    r
}

fn feasibility(config: &GenConfig) -> Result<()> {
    let needed_vocab = FIRST_FREE_ID as usize + config.concepts * 2 + 8;
    if config.vocab < needed_vocab {
        return Err(LdError::InvalidArgument(format!(
            "vocab {} too small: need >= {} for {} concepts with 2 exclusive tokens each plus fillers",
            config.vocab, needed_vocab, config.concepts
        )));
    }
    if config.classes < config.concepts {
        return Err(LdError::InvalidArgument(format!(
            "classes {} < concepts {}: concept classes must be distinct",
            config.classes, config.concepts
        )));
    }
    if config.concepts < MAX_CONCEPTS_PER_PAIR {
        return Err(LdError::InvalidArgument(format!(
            "need at least {MAX_CONCEPTS_PER_PAIR} concepts, got {}",
            config.concepts
        )));
    }
    let combos: usize = (MIN_CONCEPTS_PER_PAIR..=MAX_CONCEPTS_PER_PAIR)
        .map(|k| n_choose_k(config.concepts, k))
        .sum();
    if combos < config.pairs {
        return Err(LdError::InvalidArgument(format!(
            "only {} distinct concept sets available for {} pairs; add concepts",
            combos, config.pairs
        )));
    }
    if config.val_size + config.test_size + 1 > config.pairs {
        return Err(LdError::InvalidArgument(format!(
            "splits {}+{} leave no training pairs out of {}",
            config.val_size, config.test_size, config.pairs
        )));
    }
    Ok(())
}

fn build_vocab(config: &GenConfig) -> Vec<String> {
    let mut vocab = vec!["[CLS]".to_string(), "[MASK]".to_string(), "[UNK]".to_string()];
    for k in 0..config.concepts {
        vocab.push(format!("c{k}a"));
        vocab.push(format!("c{k}b"));
    }
    let mut f = 0;
    while vocab.len() < config.vocab {
        vocab.push(format!("f{f}"));
        f += 1;
    }
    vocab
}

/// Deterministic corpus generation: the rng sequence fully defines the
/// output. Concept sets are unique across the corpus, so in-batch negatives
/// are true negatives and retrieval is solvable.
pub fn generate_corpus(config: &GenConfig) -> Result<Corpus> {
    feasibility(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let vocab = build_vocab(config);
    let filler_start = FIRST_FREE_ID + 2 * config.concepts as u32;
    let fillers: Vec<u32> = (filler_start..config.vocab as u32).collect();

    let mut concepts = Vec::with_capacity(config.concepts);
    for k in 0..config.concepts {
        let prototype: Vec<f64> = (0..config.feature_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let shared: Vec<u32> = (0..rng.gen_range(1..=2))
            .map(|_| fillers[rng.gen_range(0..fillers.len())])
            .collect();
        concepts.push(ConceptSpec {
            id: k as u32,
            prototype,
            class_id: k,
            exclusive_tokens: vec![FIRST_FREE_ID + 2 * k as u32, FIRST_FREE_ID + 2 * k as u32 + 1],
            shared_tokens: shared,
        });
    }

    let mut seen_sets: BTreeSet<Vec<u32>> = BTreeSet::new();
    let mut examples = Vec::with_capacity(config.pairs);
    let noise = Normal::new(0.0, config.noise.max(0.0)).unwrap();
    for pair_id in 0..config.pairs as u64 {
        // rejection-sample an unused concept set
        let concept_ids: Vec<u32> = loop {
            let k = rng.gen_range(MIN_CONCEPTS_PER_PAIR..=MAX_CONCEPTS_PER_PAIR);
            let mut pool: Vec<u32> = (0..config.concepts as u32).collect();
            pool.shuffle(&mut rng);
            let mut set: Vec<u32> = pool.into_iter().take(k).collect();
            set.sort_unstable();
            if seen_sets.insert(set.clone()) {
                break set;
            }
        };

        let mut features = Vec::new();
        let mut boxes = Vec::new();
        let mut class_dist = Vec::new();
        for &cid in &concept_ids {
            let spec = &concepts[cid as usize];
            let feat: Vec<f64> = spec
                .prototype
                .iter()
                .map(|p| p + if config.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 })
                .collect();
            features.push(feat);
            let x1: f64 = rng.gen_range(0.0..0.5);
            let y1: f64 = rng.gen_range(0.0..0.5);
            let w: f64 = rng.gen_range(0.1..0.5);
            let h: f64 = rng.gen_range(0.1..0.5);
            boxes.push([x1, y1, x1 + w, y1 + h, w, h, w * h]);
            let mut dist = vec![CLASS_SMOOTHING / (config.classes - 1) as f64; config.classes];
            dist[spec.class_id] = 1.0 - CLASS_SMOOTHING;
            class_dist.push(dist);
        }

        // one exclusive token per concept guarantees recoverability
        let mut words: Vec<u32> = concept_ids
            .iter()
            .map(|&cid| {
                let ex = &concepts[cid as usize].exclusive_tokens;
                ex[rng.gen_range(0..ex.len())]
            })
            .collect();
        let target_len = rng
            .gen_range(MIN_CAPTION_LEN..=MAX_CAPTION_LEN)
            .max(words.len());
        while words.len() < target_len {
            // extra tokens come from the pair's own concepts or fillers, never
            // another concept's exclusive vocabulary
            if rng.gen_bool(0.5) {
                let cid = concept_ids[rng.gen_range(0..concept_ids.len())];
                let spec = &concepts[cid as usize];
                let all: Vec<u32> = spec
                    .exclusive_tokens
                    .iter()
                    .chain(&spec.shared_tokens)
                    .copied()
                    .collect();
                words.push(all[rng.gen_range(0..all.len())]);
            } else {
                words.push(fillers[rng.gen_range(0..fillers.len())]);
            }
        }
        words.shuffle(&mut rng);
        let mut ids = vec![CLS_ID];
        ids.extend(words);

        examples.push(PairedExample {
            id: pair_id,
            regions: RegionSequence {
                features,
                boxes,
                class_dist,
            },
            caption: TokenSequence::new(ids),
            concepts: concept_ids,
        });
    }

    let train_size = config.pairs - config.val_size - config.test_size;
    let ids: Vec<u64> = (0..config.pairs as u64).collect();
    let splits = CorpusSplit {
        train: ids[..train_size].to_vec(),
        val: ids[train_size..train_size + config.val_size].to_vec(),
        test: ids[train_size + config.val_size..].to_vec(),
    };

    Ok(Corpus {
        config: *config,
        concepts,
        examples,
        splits,
        vocab,
    })
}

/// Rule-based concept recovery from the caption's exclusive tokens. Certifies
/// the retrieval task is solvable without any learning.
pub fn concepts_from_caption(corpus: &Corpus, caption: &TokenSequence) -> Vec<u32> {
    let mut out = BTreeSet::new();
    for &id in &caption.ids[1..] {
        for spec in &corpus.concepts {
            if spec.exclusive_tokens.contains(&id) {
                out.insert(spec.id);
            }
        }
    }
    out.into_iter().collect()
}

/// Rule-based concept recovery from region class distributions.
pub fn concepts_from_regions(corpus: &Corpus, regions: &RegionSequence) -> Vec<u32> {
    let mut out = BTreeSet::new();
    for dist in &regions.class_dist {
        let argmax = dist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        for spec in &corpus.concepts {
            if spec.class_id == argmax {
                out.insert(spec.id);
            }
        }
    }
    out.into_iter().collect()
}

// ---------------------------------------------------------------------------
// On-disk format: manifest.json + regions.ldrf + captions.ldtx + *.ids
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: GenConfig,
    pair_count: usize,
    vocab: Vec<String>,
    concepts: Vec<ConceptSpec>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(LdError::Format {
                path: self.path.clone(),
                msg: format!("truncated: need {} bytes at offset {}", n, self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn check_header(r: &mut Reader, magic: &[u8; 4]) -> Result<()> {
    let m = r.take(4)?;
    if m != magic {
        return Err(LdError::Format {
            path: r.path.clone(),
            msg: format!("bad magic {:?}, expected {:?}", m, magic),
        });
    }
    let v = r.u32()?;
    if v != FORMAT_VERSION {
        return Err(LdError::Format {
            path: r.path.clone(),
            msg: format!("unsupported version {v}"),
        });
    }
    Ok(())
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: corpus.config,
        pair_count: corpus.examples.len(),
        vocab: corpus.vocab.clone(),
        concepts: corpus.concepts.clone(),
    };
    let mpath = dir.join("manifest.json");
    let mfile = fs::File::create(&mpath).map_err(|e| io_err(&mpath, e))?;
    serde_json::to_writer_pretty(mfile, &manifest)
        .map_err(|e| io_err(&mpath, std::io::Error::other(e)))?;

    // regions: length-prefixed records, one per pair
    let mut rbuf: Vec<u8> = Vec::new();
    rbuf.extend_from_slice(REGION_MAGIC);
    rbuf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    rbuf.extend_from_slice(&(corpus.examples.len() as u64).to_le_bytes());
    for ex in &corpus.examples {
        rbuf.extend_from_slice(&ex.id.to_le_bytes());
        let n = ex.regions.len();
        rbuf.extend_from_slice(&(n as u32).to_le_bytes());
        rbuf.extend_from_slice(&(corpus.config.feature_dim as u32).to_le_bytes());
        rbuf.extend_from_slice(&(corpus.config.classes as u32).to_le_bytes());
        for f in &ex.regions.features {
            for v in f {
                rbuf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for b in &ex.regions.boxes {
            for v in b {
                rbuf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for c in &ex.regions.class_dist {
            for v in c {
                rbuf.extend_from_slice(&v.to_le_bytes());
            }
        }
        rbuf.extend_from_slice(&(ex.concepts.len() as u32).to_le_bytes());
        for c in &ex.concepts {
            rbuf.extend_from_slice(&c.to_le_bytes());
        }
    }
    let rpath = dir.join("regions.ldrf");
    fs::write(&rpath, rbuf).map_err(|e| io_err(&rpath, e))?;

    let mut tbuf: Vec<u8> = Vec::new();
    tbuf.extend_from_slice(TEXT_MAGIC);
    tbuf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    tbuf.extend_from_slice(&(corpus.examples.len() as u64).to_le_bytes());
    for ex in &corpus.examples {
        tbuf.extend_from_slice(&ex.id.to_le_bytes());
        tbuf.extend_from_slice(&(ex.caption.ids.len() as u32).to_le_bytes());
        for id in &ex.caption.ids {
            tbuf.extend_from_slice(&id.to_le_bytes());
        }
    }
    let tpath = dir.join("captions.ldtx");
    fs::write(&tpath, tbuf).map_err(|e| io_err(&tpath, e))?;

    for (name, ids) in [
        ("train.ids", &corpus.splits.train),
        ("val.ids", &corpus.splits.val),
        ("test.ids", &corpus.splits.test),
    ] {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        for id in ids {
            writeln!(f, "{id}").map_err(|e| io_err(&path, e))?;
        }
    }
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let mpath = dir.join("manifest.json");
    let mut mstr = String::new();
    fs::File::open(&mpath)
        .map_err(|e| io_err(&mpath, e))?
        .read_to_string(&mut mstr)
        .map_err(|e| io_err(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&mstr).map_err(|e| LdError::Format {
        path: mpath.display().to_string(),
        msg: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(LdError::Format {
            path: mpath.display().to_string(),
            msg: format!("unsupported manifest version {}", manifest.format_version),
        });
    }

    let rpath = dir.join("regions.ldrf");
    let rbytes = fs::read(&rpath).map_err(|e| io_err(&rpath, e))?;
    let mut r = Reader {
        buf: &rbytes,
        pos: 0,
        path: rpath.display().to_string(),
    };
    check_header(&mut r, REGION_MAGIC)?;
    let count = r.u64()? as usize;
    let mut regions_by_id = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u64()?;
        let n = r.u32()? as usize;
        let dv = r.u32()? as usize;
        let c = r.u32()? as usize;
        let mut features = Vec::with_capacity(n);
        for _ in 0..n {
            features.push(r.f64s(dv)?);
        }
        let mut boxes = Vec::with_capacity(n);
        for _ in 0..n {
            let v = r.f64s(GEOM_DIM)?;
            boxes.push([v[0], v[1], v[2], v[3], v[4], v[5], v[6]]);
        }
        let mut class_dist = Vec::with_capacity(n);
        for _ in 0..n {
            class_dist.push(r.f64s(c)?);
        }
        let n_concepts = r.u32()? as usize;
        let mut concepts = Vec::with_capacity(n_concepts);
        for _ in 0..n_concepts {
            concepts.push(r.u32()?);
        }
        regions_by_id.push((
            id,
            RegionSequence {
                features,
                boxes,
                class_dist,
            },
            concepts,
        ));
    }

    let tpath = dir.join("captions.ldtx");
    let tbytes = fs::read(&tpath).map_err(|e| io_err(&tpath, e))?;
    let mut t = Reader {
        buf: &tbytes,
        pos: 0,
        path: tpath.display().to_string(),
    };
    check_header(&mut t, TEXT_MAGIC)?;
    let tcount = t.u64()? as usize;
    if tcount != count {
        return Err(LdError::Format {
            path: tpath.display().to_string(),
            msg: format!("caption count {} != region count {}", tcount, count),
        });
    }
    let mut examples = Vec::with_capacity(count);
    for (id, regions, concepts) in regions_by_id {
        let tid = t.u64()?;
        if tid != id {
            return Err(LdError::Format {
                path: tpath.display().to_string(),
                msg: format!("caption id {} != region id {}", tid, id),
            });
        }
        let len = t.u32()? as usize;
        let mut ids = Vec::with_capacity(len);
        for _ in 0..len {
            ids.push(t.u32()?);
        }
        examples.push(PairedExample {
            id,
            regions,
            caption: TokenSequence::new(ids),
            concepts,
        });
    }

    let read_ids = |name: &str| -> Result<Vec<u64>> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim().parse::<u64>().map_err(|e| LdError::Format {
                    path: path.display().to_string(),
                    msg: e.to_string(),
                })
            })
            .collect()
    };
    let splits = CorpusSplit {
        train: read_ids("train.ids")?,
        val: read_ids("val.ids")?,
        test: read_ids("test.ids")?,
    };

    Ok(Corpus {
        config: manifest.config,
        concepts: manifest.concepts,
        examples,
        splits,
        vocab: manifest.vocab,
    })
}
