//! Prompt → summary → embedding → frozen cache.

pub mod cache;
pub mod client;
pub mod embed;
pub mod prompt;

use std::path::Path;

pub use cache::{populate_cache, EmbeddingCache, EmbeddingKind};
pub use client::{
    summarize, summarize_batch, FixtureRecorder, HttpTransport, IdentityStub, LlmClient, RecordingClient,
    RemoteClient, RemoteConfig, ReplayClient, SystemClock,
};
pub use embed::{embed_text, HashEmbedder, HttpEmbedder, SemanticEmbedding, TextEmbedder};
pub use prompt::{build_item_prompt, build_user_prompt, PromptKind, PromptText};

use crate::datasets::{self, Dataset};
use crate::error::Result;

/// Where the text handed to the embedder comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TextSource {
    /// Prompt summarized by the language-model client.
    #[default]
    Summary,
    /// Concatenated item attributes, no summarization.
    RawAttributes,
}

pub struct SemanticPipeline<'a> {
    pub client: &'a dyn LlmClient,
    pub embedder: &'a dyn TextEmbedder,
    pub max_in_flight: usize,
    pub source: TextSource,
}

impl<'a> SemanticPipeline<'a> {
    pub fn new(client: &'a dyn LlmClient, embedder: &'a dyn TextEmbedder) -> Self {
        Self {
            client,
            embedder,
            max_in_flight: 8,
            source: TextSource::Summary,
        }
    }

    /// Only the training part of each sequence is shown to the summarizer,
    /// so validation and test targets never leak into semantic space.
    fn user_items(dataset: &Dataset, user: u32) -> &[u32] {
        datasets::truncate(datasets::train_prefix(&dataset.sequence(user).items), dataset.max_len)
    }

    pub fn user_prompt(&self, dataset: &Dataset, user: u32) -> PromptText {
        build_user_prompt(Self::user_items(dataset, user), &dataset.catalog)
    }

    /// Training prefixes containing each item, indexed by item id.
    pub fn item_contexts(dataset: &Dataset) -> Vec<Vec<u32>> {
        let mut contexts = vec![Vec::new(); dataset.num_items() + 1];
        for s in &dataset.sequences {
            let mut seen = std::collections::HashSet::new();
            for &i in datasets::train_prefix(&s.items) {
                if seen.insert(i) {
                    contexts[i as usize].push(s.user_id);
                }
            }
        }
        contexts
    }

    pub fn item_prompt(&self, dataset: &Dataset, item: u32, contexts: &[Vec<u32>]) -> PromptText {
        let seqs: Vec<&[u32]> = contexts[item as usize]
            .iter()
            .map(|&u| datasets::train_prefix(&dataset.sequence(u).items))
            .collect();
        build_item_prompt(item, &dataset.catalog, &seqs)
    }

    fn texts_for(&self, kind: EmbeddingKind, dataset: &Dataset, ids: &[u32], contexts: &[Vec<u32>]) -> Vec<Result<String>> {
        match self.source {
            TextSource::RawAttributes => ids
                .iter()
                .map(|&id| {
                    Ok(match kind {
                        EmbeddingKind::User => prompt::raw_user_text(Self::user_items(dataset, id), &dataset.catalog),
                        EmbeddingKind::Item => prompt::raw_item_text(id, &dataset.catalog),
                    })
                })
                .collect(),
            TextSource::Summary => {
                let prompts: Vec<PromptText> = ids
                    .iter()
                    .map(|&id| match kind {
                        EmbeddingKind::User => self.user_prompt(dataset, id),
                        EmbeddingKind::Item => self.item_prompt(dataset, id, contexts),
                    })
                    .collect();
                summarize_batch(&prompts, self.client, self.max_in_flight)
            }
        }
    }

    /// Builds (or resumes) and freezes the cache for every user or item.
    pub fn build_cache(&self, kind: EmbeddingKind, dataset: &Dataset, path: &Path) -> Result<EmbeddingCache> {
        let n = match kind {
            EmbeddingKind::User => dataset.num_users(),
            EmbeddingKind::Item => dataset.num_items(),
        };
        let ids: Vec<u32> = (1..=n as u32).collect();
        let contexts = match (kind, self.source) {
            (EmbeddingKind::Item, TextSource::Summary) => Self::item_contexts(dataset),
            _ => Vec::new(),
        };
        let chunk = (self.max_in_flight * 4).max(1);
        populate_cache(kind, &ids, self.embedder.dim(), path, chunk, |part| {
            self.texts_for(kind, dataset, part, &contexts)
                .into_iter()
                .zip(part)
                .map(|(text, &id)| text.and_then(|t| embed_text(id, &t, self.embedder)).map(|e| e.vector))
                .collect()
        })
    }
}
