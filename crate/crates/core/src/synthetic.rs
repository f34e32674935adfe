//! Seeded synthetic data: planted preference clusters with aligned semantic
//! vectors, small random datasets, and a text toy dataset with a catalog.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use crate::datasets::{Dataset, InteractionSequence, ItemCatalog, ItemText, Vocab};
use crate::error::{Error, Result};
use crate::rng;
use crate::semantic::{EmbeddingCache, EmbeddingKind};

/// Builds a dataset directly from dense-id sequences; keys are zero-padded
/// so that lexicographic and numeric order agree.
pub fn dataset_from_sequences(sequences: Vec<Vec<u32>>, num_items: usize, max_len: usize) -> Dataset {
    let users = Vocab::from_sorted_keys((1..=sequences.len()).map(|u| format!("u{u:06}")).collect());
    let items = Vocab::from_sorted_keys((1..=num_items).map(|i| format!("i{i:06}")).collect());
    Dataset {
        sequences: sequences
            .into_iter()
            .enumerate()
            .map(|(u, items)| InteractionSequence {
                user_id: u as u32 + 1,
                items,
            })
            .collect(),
        users,
        items,
        catalog: ItemCatalog::empty(num_items),
        max_len,
    }
}

/// Uniformly random sequences without immediate repeats.
pub fn random_dataset(users: usize, items: usize, min_len: usize, max_len: usize, seed: u64) -> Dataset {
    let mut r = rng::stream(seed, &[0x5EED]);
    let seqs = (0..users)
        .map(|_| {
            let len = r.gen_range(min_len..=max_len);
            let mut s: Vec<u32> = Vec::with_capacity(len);
            while s.len() < len {
                let v = r.gen_range(1..=items as u32);
                if s.last() != Some(&v) {
                    s.push(v);
                }
            }
            s
        })
        .collect();
    dataset_from_sequences(seqs, items, max_len.max(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedConfig {
    pub users: usize,
    pub clusters: usize,
    pub items: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that an interaction ignores the user's cluster.
    pub noise: f64,
    /// Zipf exponent of item popularity inside a cluster.
    pub zipf: f64,
    pub semantic_dim: usize,
    /// Per-coordinate std of the noise added to cluster centroids.
    pub semantic_noise: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            users: 400,
            clusters: 4,
            items: 200,
            min_len: 5,
            max_len: 12,
            noise: 0.2,
            zipf: 1.0,
            semantic_dim: 32,
            semantic_noise: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Planted {
    pub dataset: Dataset,
    /// Cluster of each user, indexed by `user_id − 1`.
    pub user_cluster: Vec<usize>,
    /// Cluster of each item, indexed by `item_id − 1`.
    pub item_cluster: Vec<usize>,
    pub user_cache: EmbeddingCache,
    pub item_cache: EmbeddingCache,
}

fn unit_gaussian(r: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn noisy(r: &mut impl Rng, centre: &[f64], std: f64) -> Vec<f32> {
    centre
        .iter()
        .map(|&c| {
            let z: f64 = StandardNormal.sample(r);
            (c + std * z) as f32
        })
        .collect()
}

/// Users belong to one of `clusters` groups; items are split evenly between
/// groups. Each interaction is, with probability `1 − noise`, an item of the
/// user's group drawn by within-group Zipf popularity, otherwise a uniform
/// item. Semantic vectors are the group centroid plus Gaussian noise.
pub fn planted(cfg: &PlantedConfig) -> Result<Planted> {
    if cfg.clusters == 0 || cfg.items < cfg.clusters || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::InvalidArgument("inconsistent planted-data config".into()));
    }
    let mut r = rng::stream(cfg.seed, &[0x9A47]);
    let item_cluster: Vec<usize> = (0..cfg.items).map(|i| i * cfg.clusters / cfg.items).collect();
    let members: Vec<Vec<u32>> = (0..cfg.clusters)
        .map(|c| {
            let mut m: Vec<u32> = (0..cfg.items).filter(|&i| item_cluster[i] == c).map(|i| i as u32 + 1).collect();
            m.shuffle(&mut r);
            m
        })
        .collect();
    let weights: Vec<Vec<f64>> = members
        .iter()
        .map(|m| {
            let w: Vec<f64> = (1..=m.len()).map(|rank| 1.0 / (rank as f64).powf(cfg.zipf)).collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(|x| x / total).collect()
        })
        .collect();
    let draw = |r: &mut rand_chacha::ChaCha8Rng, c: usize| -> u32 {
        let mut u: f64 = r.gen();
        for (item, w) in members[c].iter().zip(&weights[c]) {
            if u < *w {
                return *item;
            }
            u -= w;
        }
        *members[c].last().expect("non-empty cluster")
    };
    let user_cluster: Vec<usize> = (0..cfg.users).map(|u| u % cfg.clusters).collect();
    let seqs: Vec<Vec<u32>> = user_cluster
        .iter()
        .map(|&c| {
            let len = r.gen_range(cfg.min_len..=cfg.max_len);
            (0..len)
                .map(|_| {
                    if r.gen::<f64>() < cfg.noise {
                        r.gen_range(1..=cfg.items as u32)
                    } else {
                        draw(&mut r, c)
                    }
                })
                .collect()
        })
        .collect();

    let centroids: Vec<Vec<f64>> = (0..cfg.clusters).map(|_| unit_gaussian(&mut r, cfg.semantic_dim)).collect();
    let mut user_cache = EmbeddingCache::new(EmbeddingKind::User, cfg.semantic_dim);
    for (u, &c) in user_cluster.iter().enumerate() {
        user_cache.insert_vector(u as u32 + 1, noisy(&mut r, &centroids[c], cfg.semantic_noise))?;
    }
    user_cache.freeze(1..=cfg.users as u32)?;
    let mut item_cache = EmbeddingCache::new(EmbeddingKind::Item, cfg.semantic_dim);
    for (i, &c) in item_cluster.iter().enumerate() {
        item_cache.insert_vector(i as u32 + 1, noisy(&mut r, &centroids[c], cfg.semantic_noise))?;
    }
    item_cache.freeze(1..=cfg.items as u32)?;

    Ok(Planted {
        dataset: dataset_from_sequences(seqs, cfg.items, cfg.max_len.max(1)),
        user_cluster,
        item_cluster,
        user_cache,
        item_cache,
    })
}

const THEMES: [(&str, &[&str], &[&str]); 4] = [
    ("Beauty > Skincare", &["serum", "cream", "cleanser", "toner", "mask"], &["Lumen", "Dewy"]),
    ("Home > Kitchen", &["skillet", "kettle", "grater", "ladle", "whisk"], &["Forge", "Hearth"]),
    ("Electronics > Audio", &["headphones", "speaker", "amplifier", "earbuds", "turntable"], &["Sonic", "Pulse"]),
    ("Sports > Outdoors", &["tent", "backpack", "lantern", "compass", "hammock"], &["Ridge", "Trail"]),
];

const ADJECTIVES: [&str; 6] = ["classic", "compact", "deluxe", "travel", "everyday", "premium"];

/// Writes `interactions.tsv` and `catalog.jsonl` for a small themed
/// dataset: planted clusters whose items share category, brand and title
/// vocabulary. Returns the number of interaction lines.
pub fn write_toy(dir: impl AsRef<Path>, users: usize, items: usize, seed: u64) -> Result<usize> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = planted(&PlantedConfig {
        users,
        items,
        clusters: THEMES.len(),
        min_len: 5,
        max_len: 14,
        noise: 0.15,
        seed,
        ..PlantedConfig::default()
    })?;
    let mut r = rng::stream(seed, &[0x70F]);
    let mut tsv = String::new();
    let mut ts: i64 = 1_600_000_000;
    for s in &p.dataset.sequences {
        for &i in &s.items {
            ts += r.gen_range(60..86_400);
            writeln!(tsv, "user{:04}\titem{:04}\t{ts}", s.user_id, i).expect("write to string");
        }
    }
    let mut catalog = String::new();
    for (idx, &c) in p.item_cluster.iter().enumerate() {
        let (category, nouns, brands) = THEMES[c];
        let noun = nouns[idx % nouns.len()];
        let adj = ADJECTIVES[r.gen_range(0..ADJECTIVES.len())];
        let brand = brands[r.gen_range(0..brands.len())];
        let description = if idx % 5 == 4 {
            String::new()
        } else {
            format!("A {adj} {noun} from {brand} for {}.", category.split(" > ").last().unwrap_or(category).to_lowercase())
        };
        let line = json!({
            "item": format!("item{:04}", idx + 1),
            "title": format!("{brand} {adj} {noun}"),
            "category": category,
            "brand": brand,
            "description": description,
        });
        writeln!(catalog, "{line}").expect("write to string");
    }
    let lines = tsv.lines().count();
    for (name, body) in [("interactions.tsv", tsv), ("catalog.jsonl", catalog)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(lines)
}

/// Plain text item attributes, for tests that need a catalog in memory.
pub fn themed_catalog(item_cluster: &[usize]) -> ItemCatalog {
    ItemCatalog::from_entries(
        item_cluster
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let (category, nouns, brands) = THEMES[c % THEMES.len()];
                ItemText {
                    title: Some(format!("{} {}", brands[0], nouns[i % nouns.len()])),
                    category: Some(category.to_owned()),
                    brand: Some(brands[0].to_owned()),
                    description: None,
                }
            })
            .collect(),
    )
}
