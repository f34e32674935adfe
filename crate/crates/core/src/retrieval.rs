//! Exact cosine top-k over frozen embeddings and materialized candidate
//! pools.
//!
//! Pool file layout (little-endian): `b"SEMPOOLS"`, u32 version, u8 kind,
//! u32 k, u32 count, then per anchor: u32 anchor id, u32 pool length,
//! `length` × (u32 id, f32 score).

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::semantic::cache::Reader;
use crate::semantic::{EmbeddingCache, EmbeddingKind};
use crate::tensor::dot;

/// `a·b / (‖a‖‖b‖)`, clamped to [−1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero-norm vector".into()));
    }
    Ok(cosine_with_norms(a, b, na, nb))
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn cosine_with_norms(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Descending score, then ascending id.
pub fn rank_order(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool {
    pub anchor_id: u32,
    /// (id, cosine) sorted by [`rank_order`].
    pub neighbors: Vec<(u32, f64)>,
}

impl CandidatePool {
    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.neighbors.iter().map(|&(id, _)| id)
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

/// Immutable exhaustive-scan index.
#[derive(Clone, Debug)]
pub struct Index {
    ids: Vec<u32>,
    vectors: Vec<Vec<f64>>,
    norms: Vec<f64>,
    position: HashMap<u32, usize>,
}

impl Index {
    pub fn from_vectors(entries: Vec<(u32, Vec<f64>)>) -> Result<Self> {
        let dim = entries.first().map_or(0, |(_, v)| v.len());
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        let mut norms = Vec::with_capacity(entries.len());
        let mut position = HashMap::with_capacity(entries.len());
        for (id, v) in entries {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            let n = norm(&v);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::InvalidEmbedding {
                    id,
                    reason: "zero or non-finite norm".into(),
                });
            }
            if position.insert(id, ids.len()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate id {id} in index")));
            }
            ids.push(id);
            vectors.push(v);
            norms.push(n);
        }
        Ok(Self {
            ids,
            vectors,
            norms,
            position,
        })
    }

    pub fn build(cache: &EmbeddingCache) -> Result<Self> {
        if !cache.is_frozen() {
            return Err(Error::CacheNotFrozen);
        }
        Self::from_vectors(
            cache
                .iter()
                .map(|(id, v)| (id, v.iter().map(|&x| f64::from(x)).collect()))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// The `k` most similar entries other than the anchor.
    pub fn topk(&self, anchor_id: u32, k: usize) -> Result<CandidatePool> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let &a = self.position.get(&anchor_id).ok_or(Error::UnknownId(anchor_id))?;
        let (av, an) = (&self.vectors[a], self.norms[a]);
        let mut scored: Vec<(u32, f64)> = (0..self.ids.len())
            .filter(|&j| j != a)
            .map(|j| (self.ids[j], cosine_with_norms(av, &self.vectors[j], an, self.norms[j])))
            .collect();
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Ok(CandidatePool {
            anchor_id,
            neighbors: scored,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolSet {
    pub kind: EmbeddingKind,
    pub k: usize,
    pools: Vec<CandidatePool>,
    position: HashMap<u32, usize>,
}

impl PoolSet {
    pub fn new(kind: EmbeddingKind, k: usize, pools: Vec<CandidatePool>) -> Self {
        let position = pools.iter().enumerate().map(|(i, p)| (p.anchor_id, i)).collect();
        Self {
            kind,
            k,
            pools,
            position,
        }
    }

    pub fn get(&self, anchor: u32) -> Option<&CandidatePool> {
        self.position.get(&anchor).map(|&i| &self.pools[i])
    }

    pub fn pools(&self) -> &[CandidatePool] {
        &self.pools
    }

    pub fn len(&self) -> usize {
        self.pools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"SEMPOOLS");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.push(match self.kind {
            EmbeddingKind::User => 0,
            EmbeddingKind::Item => 1,
        });
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.pools.len() as u32).to_le_bytes());
        for p in &self.pools {
            out.extend_from_slice(&p.anchor_id.to_le_bytes());
            out.extend_from_slice(&(p.neighbors.len() as u32).to_le_bytes());
            for &(id, s) in &p.neighbors {
                out.extend_from_slice(&id.to_le_bytes());
                out.extend_from_slice(&(s as f32).to_le_bytes());
            }
        }
        out
    }

    /// Scores come back as the stored f32 values.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != b"SEMPOOLS" {
            return Err(Error::Parse("not a pool file (bad magic)".into()));
        }
        if r.u32()? != 1 {
            return Err(Error::Parse("unsupported pool file version".into()));
        }
        let kind = match r.u8()? {
            0 => EmbeddingKind::User,
            1 => EmbeddingKind::Item,
            c => return Err(Error::Parse(format!("unknown pool kind {c}"))),
        };
        let k = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut pools = Vec::with_capacity(count);
        for _ in 0..count {
            let anchor_id = r.u32()?;
            let len = r.u32()? as usize;
            let mut neighbors = Vec::with_capacity(len);
            for _ in 0..len {
                let id = r.u32()?;
                neighbors.push((id, f64::from(r.f32()?)));
            }
            pools.push(CandidatePool { anchor_id, neighbors });
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse("trailing bytes in pool file".into()));
        }
        Ok(Self::new(kind, k, pools))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// One pool per indexed anchor. Embeddings are frozen, so the result is
/// reused for the whole training run.
pub fn materialize_pools(index: &Index, kind: EmbeddingKind, k: usize, exec: Execution) -> Result<PoolSet> {
    let pools = exec::map(exec, index.ids(), |&id| index.topk(id, k))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(PoolSet::new(kind, k, pools))
}
