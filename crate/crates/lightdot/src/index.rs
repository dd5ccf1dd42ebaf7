//! Flat maximum-inner-product index. Vectors are stored as f32 to halve the
//! scan footprint; scores are accumulated in f64. Search is an exact scan —
//! no pruning, no approximation — so results are reproducible byte-for-byte.

use std::fs;
use std::path::Path;

use crate::encoder::{encode_image, encode_text, ModelParams};
use crate::error::{io_err, LdError, Result};
use crate::synth::Corpus;

pub const INDEX_MAGIC: &[u8; 4] = b"LDIX";
pub const INDEX_VERSION: u32 = 1;

/// Scan block size: keeps the candidate heap small and the inner loop tight.
const BLOCK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// (id, score), scores non-increasing; equal scores ordered by id.
    pub entries: Vec<(u64, f64)>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    dim: usize,
    ids: Vec<u64>,
    vectors: Vec<f32>, // row-major, ids.len() x dim
    sealed: bool,
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(LdError::InvalidArgument("index dim must be > 0".into()));
        }
        Ok(EmbeddingIndex {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            sealed: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Stored vector for an id, if present.
    pub fn vector_for(&self, id: u64) -> Option<&[f32]> {
        self.ids.iter().position(|&x| x == id).map(|i| self.vector(i))
    }

    pub fn insert(&mut self, id: u64, vector: &[f64]) -> Result<()> {
        if self.sealed {
            return Err(LdError::IndexSealed);
        }
        if vector.len() != self.dim {
            return Err(LdError::InvalidArgument(format!(
                "vector for id {} has dim {}, index expects {}",
                id,
                vector.len(),
                self.dim
            )));
        }
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(LdError::NonFinite {
                what: format!("vector for id {id}"),
            });
        }
        if self.ids.contains(&id) {
            return Err(LdError::DuplicateId(id));
        }
        self.ids.push(id);
        self.vectors.extend(vector.iter().map(|&v| v as f32));
        Ok(())
    }

    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    /// Exact top-k by inner product. Also reports how many stored vectors
    /// were scored, which equals `len()` by construction.
    pub fn top_k_with_stats(&self, query: &[f64], k: usize) -> Result<(RetrievalResult, usize)> {
        if self.ids.is_empty() {
            return Err(LdError::EmptyInput("index has no vectors"));
        }
        if query.len() != self.dim {
            return Err(LdError::InvalidArgument(format!(
                "query dim {} != index dim {}",
                query.len(),
                self.dim
            )));
        }
        if !query.iter().all(|v| v.is_finite()) {
            return Err(LdError::NonFinite {
                what: "query vector".into(),
            });
        }
        if k == 0 {
            return Err(LdError::InvalidArgument("k must be > 0".into()));
        }
        let k = k.min(self.ids.len());
        // (score, id) kept sorted worst-last; block scan bounds resorts.
        let mut best: Vec<(f64, u64)> = Vec::with_capacity(k + BLOCK);
        let mut scanned = 0usize;
        for start in (0..self.ids.len()).step_by(BLOCK) {
            let end = (start + BLOCK).min(self.ids.len());
            for i in start..end {
                let row = self.vector(i);
                let mut s = 0.0f64;
                for (a, b) in row.iter().zip(query) {
                    s += *a as f64 * b;
                }
                scanned += 1;
                best.push((s, self.ids[i]));
            }
            best.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            best.truncate(k);
        }
        Ok((
            RetrievalResult {
                entries: best.into_iter().map(|(s, id)| (id, s)).collect(),
            },
            scanned,
        ))
    }

    pub fn top_k(&self, query: &[f64], k: usize) -> Result<RetrievalResult> {
        self.top_k_with_stats(query, k).map(|(r, _)| r)
    }

    /// Batched search, order-preserving. Fans out across threads when
    /// LIGHTDOT_THREADS > 1; results are identical either way.
    pub fn batch_top_k(&self, queries: &[Vec<f64>], k: usize) -> Result<Vec<RetrievalResult>> {
        let threads = thread_count();
        if threads <= 1 || queries.len() <= 1 {
            return queries.iter().map(|q| self.top_k(q, k)).collect();
        }
        let chunk = queries.len().div_ceil(threads);
        let mut out: Vec<Result<Vec<RetrievalResult>>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = queries
                .chunks(chunk)
                .map(|qs| scope.spawn(move || qs.iter().map(|q| self.top_k(q, k)).collect()))
                .collect();
            for h in handles {
                out.push(h.join().expect("search worker panicked"));
            }
        });
        let mut flat = Vec::with_capacity(queries.len());
        for part in out {
            flat.extend(part?);
        }
        Ok(flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        let payload_start = buf.len();
        for v in &self.vectors {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf[payload_start..]);
        buf.extend_from_slice(&crc.to_le_bytes());
        fs::write(path, buf).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        let fmt = |msg: String| LdError::Format {
            path: path.display().to_string(),
            msg,
        };
        if bytes.len() < 20 {
            return Err(fmt(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != INDEX_MAGIC {
            return Err(fmt(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let ids_end = 20 + count * 8;
        let payload_end = ids_end + count * dim * 4;
        if bytes.len() != payload_end + 4 {
            return Err(fmt(format!(
                "expected {} bytes for {} x {} vectors, file has {}",
                payload_end + 4,
                count,
                dim,
                bytes.len()
            )));
        }
        let computed = crc32fast::hash(&bytes[ids_end..payload_end]);
        let stored = u32::from_le_bytes(bytes[payload_end..].try_into().unwrap());
        if computed != stored {
            return Err(LdError::Checksum {
                path: path.display().to_string(),
                stored,
                computed,
            });
        }
        let ids: Vec<u64> = bytes[20..ids_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let vectors: Vec<f32> = bytes[ids_end..payload_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(EmbeddingIndex {
            dim,
            ids,
            vectors,
            sealed: true,
        })
    }
}

pub fn thread_count() -> usize {
    std::env::var("LIGHTDOT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Encode the chosen side of each corpus item and build a sealed index over
/// the global vectors.
pub fn build_index(
    params: &ModelParams,
    corpus: &Corpus,
    item_ids: &[u64],
    modality: Modality,
) -> Result<EmbeddingIndex> {
    if item_ids.is_empty() {
        return Err(LdError::EmptyInput("no items to index"));
    }
    let mut index = EmbeddingIndex::new(params.config.dim)?;
    for &id in item_ids {
        let ex = corpus.example(id)?;
        let enc = match modality {
            Modality::Image => encode_image(params, &ex.regions)?,
            Modality::Text => encode_text(params, &ex.caption)?,
        };
        index.insert(id, enc.global.data())?;
    }
    index.seal();
    Ok(index)
}
