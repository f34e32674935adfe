//! Frozen semantic embedding cache and its binary file format.
//!
//! Layout (little-endian):
//! `b"SEMCACHE"`, u32 version, u8 kind, u8 frozen, u32 dim, u32 count, then
//! `count` records of u32 id followed by `dim` f32 values, ids ascending.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::embed::SemanticEmbedding;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SEMCACHE";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbeddingKind {
    User,
    Item,
}

impl EmbeddingKind {
    fn code(self) -> u8 {
        match self {
            EmbeddingKind::User => 0,
            EmbeddingKind::Item => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(EmbeddingKind::User),
            1 => Ok(EmbeddingKind::Item),
            _ => Err(Error::Parse(format!("unknown embedding kind code {c}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::User => "user",
            EmbeddingKind::Item => "item",
        }
    }
}

impl std::str::FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user" => Ok(EmbeddingKind::User),
            "item" => Ok(EmbeddingKind::Item),
            _ => Err(Error::InvalidArgument(format!("kind must be user or item, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    kind: EmbeddingKind,
    dim: usize,
    entries: BTreeMap<u32, Vec<f32>>,
    frozen: bool,
}

impl EmbeddingCache {
    pub fn new(kind: EmbeddingKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            entries: BTreeMap::new(),
            frozen: false,
        }
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn contains(&self, id: u32) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn get(&self, id: u32) -> Option<&[f32]> {
        self.entries.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[f32])> {
        self.entries.iter().map(|(&id, v)| (id, v.as_slice()))
    }

    pub fn insert(&mut self, embedding: SemanticEmbedding) -> Result<()> {
        if self.frozen {
            return Err(Error::CacheFrozen(embedding.owner_id));
        }
        if embedding.vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: embedding.vector.len(),
            });
        }
        self.entries.insert(embedding.owner_id, embedding.vector);
        Ok(())
    }

    pub fn insert_vector(&mut self, id: u32, vector: Vec<f32>) -> Result<()> {
        self.insert(SemanticEmbedding::new(id, vector)?)
    }

    /// Freezes after checking that every expected id is present.
    pub fn freeze(&mut self, expected: impl IntoIterator<Item = u32>) -> Result<()> {
        let missing: Vec<u32> = expected.into_iter().filter(|id| !self.contains(*id)).collect();
        if !missing.is_empty() {
            return Err(Error::CacheIncomplete(missing));
        }
        self.frozen = true;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(26 + self.entries.len() * (4 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.push(u8::from(self.frozen));
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (id, v) in &self.entries {
            out.extend_from_slice(&id.to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Parse("not an embedding cache (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported cache version {version}")));
        }
        let kind = EmbeddingKind::from_code(r.u8()?)?;
        let frozen = r.u8()? != 0;
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let id = r.u32()?;
            let v = (0..dim).map(|_| r.f32()).collect::<Result<Vec<f32>>>()?;
            SemanticEmbedding::new(id, v.clone())?;
            entries.insert(id, v);
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse("trailing bytes in embedding cache".into()));
        }
        Ok(Self {
            kind,
            dim,
            entries,
            frozen,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized cache.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Fills a cache for `ids` at `path`, resuming from a partial file if one
/// exists. `embed_chunk` receives ids still missing, `chunk` at a time; the
/// partial cache is saved after every chunk and on failure. The finished
/// cache is frozen and saved.
pub fn populate_cache<F>(
    kind: EmbeddingKind,
    ids: &[u32],
    dim: usize,
    path: &Path,
    chunk: usize,
    mut embed_chunk: F,
) -> Result<EmbeddingCache>
where
    F: FnMut(&[u32]) -> Vec<Result<Vec<f32>>>,
{
    let mut cache = if path.exists() {
        let existing = EmbeddingCache::load(path)?;
        if existing.kind != kind {
            return Err(Error::InvalidArgument(format!(
                "{} holds {} embeddings, expected {}",
                path.display(),
                existing.kind.as_str(),
                kind.as_str()
            )));
        }
        if existing.dim != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: existing.dim,
            });
        }
        existing
    } else {
        EmbeddingCache::new(kind, dim)
    };
    if cache.frozen {
        cache.frozen = false;
        if ids.iter().all(|id| cache.contains(*id)) {
            cache.frozen = true;
            return Ok(cache);
        }
    }
    let todo: Vec<u32> = ids.iter().copied().filter(|id| !cache.contains(*id)).collect();
    if !todo.is_empty() && !cache.is_empty() {
        tracing::info!(kind = kind.as_str(), done = cache.len(), remaining = todo.len(), "resuming cache");
    }
    for part in todo.chunks(chunk.max(1)) {
        let results = embed_chunk(part);
        let mut failure = None;
        for (&id, r) in part.iter().zip(results) {
            match r.and_then(|v| cache.insert_vector(id, v)) {
                Ok(()) => {}
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        cache.save(path)?;
        if let Some(e) = failure {
            return Err(e);
        }
    }
    cache.freeze(ids.iter().copied())?;
    cache.save(path)?;
    Ok(cache)
}
