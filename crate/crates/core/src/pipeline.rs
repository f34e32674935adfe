//! Stage functions behind the command-line tool. Each stage reads and writes
//! files in a fixed layout and leaves a manifest next to what it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use tracing::info;

use crate::config::{BackendKind, ClientKind, KvConfig, PipelineConfig};
use crate::datasets::{self, Dataset, CATALOG_FILE, SEQUENCES_FILE, STATS_FILE, VOCAB_FILE};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalOptions, Evaluation, Split};
use crate::exec::Execution;
use crate::model::{load_checkpoint, Model};
use crate::provenance::Manifest;
use crate::retrieval::{materialize_pools, Index, PoolSet};
use crate::semantic::{
    EmbeddingCache, EmbeddingKind, FixtureRecorder, HashEmbedder, HttpEmbedder, HttpTransport, IdentityStub,
    LlmClient, RemoteClient, RemoteConfig, ReplayClient, SemanticPipeline, SystemClock,
    TextEmbedder, TextSource,
};
use crate::train::{self, AblationInputs, AblationTable, FitOptions, FitOutcome, SemanticInputs, TrainConfig, Variant};

pub const DATA_DIR: &str = "data";
pub const CACHES_DIR: &str = "caches";
pub const POOLS_DIR: &str = "pools";
pub const TRAIN_DIR: &str = "train";
pub const REPORT_FILE: &str = "report.csv";
const REMOTE_TIMEOUT: Duration = Duration::from_secs(120);

fn kind_name(kind: EmbeddingKind, source: TextSource) -> &'static str {
    match (kind, source) {
        (EmbeddingKind::User, TextSource::Summary) => "user",
        (EmbeddingKind::Item, TextSource::Summary) => "item",
        (EmbeddingKind::User, TextSource::RawAttributes) => "user.raw",
        (EmbeddingKind::Item, TextSource::RawAttributes) => "item.raw",
    }
}

pub fn cache_file(kind: EmbeddingKind, source: TextSource) -> String {
    format!("{}.cache", kind_name(kind, source))
}

pub fn pools_file(kind: EmbeddingKind, source: TextSource) -> String {
    format!("{}.pools", kind_name(kind, source))
}

fn file_name(path: &Path) -> Result<(&Path, String)> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    Ok((dir, name.to_string_lossy().into_owned()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `preprocess`: writes the dataset files and stats into `out`.
pub fn preprocess_stage(
    interactions: &Path,
    catalog: Option<&Path>,
    out: &Path,
    min_core: usize,
    max_len: usize,
    echo: &str,
    seed: u64,
) -> Result<Dataset> {
    let p = datasets::preprocess(interactions, catalog, min_core, max_len)?;
    p.dataset.save(out)?;
    datasets::write_stats(out, &p.stats)?;
    Manifest::write(out, "preprocess", seed, echo, &[SEQUENCES_FILE, VOCAB_FILE, CATALOG_FILE, STATS_FILE])?;
    info!(
        stage = "preprocess",
        users = p.stats.users,
        items = p.stats.items,
        records = p.stats.filtered_records,
        "dataset written"
    );
    Ok(p.dataset)
}

/// How semantic text is produced and embedded.
#[derive(Clone, Debug)]
pub struct EmbedSettings {
    pub client: ClientKind,
    pub fixtures: Option<PathBuf>,
    pub backend: BackendKind,
    pub dim: usize,
    pub max_in_flight: usize,
    pub source: TextSource,
    pub seed: u64,
}

impl EmbedSettings {
    pub fn from_config(cfg: &PipelineConfig, source: TextSource) -> Self {
        Self {
            client: cfg.client,
            fixtures: cfg.fixtures.clone(),
            backend: cfg.backend,
            dim: cfg.semantic_dim,
            max_in_flight: cfg.max_in_flight,
            source,
            seed: cfg.train.seed,
        }
    }

    pub fn client(&self) -> Result<Box<dyn LlmClient>> {
        Ok(match self.client {
            ClientKind::Stub => Box::new(IdentityStub),
            ClientKind::Replay => {
                let dir = self
                    .fixtures
                    .as_ref()
                    .ok_or_else(|| Error::Config("the replay client needs a fixtures directory".into()))?;
                Box::new(ReplayClient::load(dir)?)
            }
            ClientKind::Remote => {
                let client = RemoteClient::new(
                    RemoteConfig::from_env()?,
                    Box::new(HttpTransport::new(REMOTE_TIMEOUT)),
                    Box::new(SystemClock::default()),
                );
                match &self.fixtures {
                    Some(dir) => Box::new(client.with_recorder(FixtureRecorder::open(dir)?)),
                    None => Box::new(client),
                }
            }
        })
    }

    pub fn embedder(&self) -> Result<Box<dyn TextEmbedder>> {
        if self.dim == 0 {
            return Err(Error::Config("semantic_dim must be positive".into()));
        }
        Ok(match self.backend {
            BackendKind::Stub => Box::new(HashEmbedder::new(self.dim, self.seed)),
            BackendKind::External => Box::new(HttpEmbedder::from_env(self.dim, Box::new(HttpTransport::new(REMOTE_TIMEOUT)))?),
        })
    }
}

/// `embed`: builds (or resumes) the frozen cache at `out`.
pub fn embed_stage(
    dataset: &Dataset,
    kind: EmbeddingKind,
    settings: &EmbedSettings,
    out: &Path,
    echo: &str,
) -> Result<EmbeddingCache> {
    let (dir, name) = file_name(out)?;
    create_dir(dir)?;
    let client = settings.client()?;
    let embedder = settings.embedder()?;
    let mut pipeline = SemanticPipeline::new(client.as_ref(), embedder.as_ref());
    pipeline.max_in_flight = settings.max_in_flight;
    pipeline.source = settings.source;
    let cache = pipeline.build_cache(kind, dataset, out)?;
    Manifest::write(dir, &format!("embed.{}", kind_name(kind, settings.source)), settings.seed, echo, &[&name])?;
    info!(stage = "embed", kind = kind.as_str(), count = cache.len(), dim = cache.dim(), "cache frozen");
    Ok(cache)
}

/// `index`: exact top-k pools for every anchor of a frozen cache.
pub fn index_stage(cache_path: &Path, k: usize, out: &Path, exec: Execution, echo: &str, seed: u64) -> Result<PoolSet> {
    let cache = EmbeddingCache::load(cache_path)?;
    let pools = materialize_pools(&Index::build(&cache)?, cache.kind(), k, exec)?;
    let (dir, name) = file_name(out)?;
    create_dir(dir)?;
    pools.save(out)?;
    Manifest::write(dir, &format!("index.{}", name.trim_end_matches(".pools")), seed, echo, &[&name])?;
    info!(stage = "index", kind = cache.kind().as_str(), anchors = pools.len(), k, "pools written");
    Ok(pools)
}

/// Loads caches and pools written by `embed` and `index` for one text source.
pub fn load_semantic(caches: &Path, pools: &Path, source: TextSource, cfg: &TrainConfig) -> Result<SemanticInputs> {
    let load_pools = |kind| -> Result<PoolSet> {
        let p = PoolSet::load(pools.join(pools_file(kind, source)))?;
        let k = cfg.k_for(kind);
        if p.k != k {
            return Err(Error::Config(format!(
                "{} pools were built with k={}, config has k={k}",
                kind.as_str(),
                p.k
            )));
        }
        Ok(p)
    };
    Ok(SemanticInputs {
        user_cache: EmbeddingCache::load(caches.join(cache_file(EmbeddingKind::User, source)))?,
        item_cache: EmbeddingCache::load(caches.join(cache_file(EmbeddingKind::Item, source)))?,
        user_pools: load_pools(EmbeddingKind::User)?,
        item_pools: load_pools(EmbeddingKind::Item)?,
    })
}

/// Whether training with `cfg` reads semantic caches at all.
pub fn needs_semantic(cfg: &TrainConfig) -> bool {
    !cfg.backbone_only() && !cfg.no_semantic
}

pub fn source_for(cfg: &TrainConfig) -> TextSource {
    if cfg.no_llm {
        TextSource::RawAttributes
    } else {
        TextSource::Summary
    }
}

/// `train`: fits and writes `best.ckpt`, `report.csv`, `config.echo`.
pub fn train_stage(
    cfg: &TrainConfig,
    dataset: &Dataset,
    semantic: Option<&SemanticInputs>,
    out: &Path,
    exec: Execution,
    dump_augmentations: Option<PathBuf>,
) -> Result<FitOutcome> {
    create_dir(out)?;
    let opts = FitOptions {
        out_dir: Some(out.to_path_buf()),
        exec,
        dump_augmentations,
    };
    let outcome = train::fit(cfg, dataset, semantic, &opts)?;
    Manifest::write(out, "train", cfg.seed, &cfg.echo(), &["config.echo", "best.ckpt", "report.csv"])?;
    Ok(outcome)
}

/// `eval`: test-split metrics of a checkpoint. Needs only the checkpoint
/// and the dataset.
pub fn eval_stage(checkpoint: &Path, data: &Path, opts: &EvalOptions, out: &Path) -> Result<Evaluation> {
    let ckpt = load_checkpoint(checkpoint)?;
    let dataset = Dataset::load(data)?;
    let ev = evaluate_model(&ckpt.model, &dataset, opts)?;
    let (dir, name) = file_name(out)?;
    create_dir(dir)?;
    ev.write_csv(out)?;
    let seed = TrainConfig::parse(&ckpt.config_echo).map(|c| c.seed).unwrap_or_default();
    Manifest::write(dir, "eval", seed, &ckpt.config_echo, &[&name])?;
    Ok(ev)
}

pub fn evaluate_model(model: &Model, dataset: &Dataset, opts: &EvalOptions) -> Result<Evaluation> {
    let ev = evaluation::evaluate(model, dataset, opts)?;
    for (k, v) in &ev.overall.ndcg {
        info!(stage = "eval", metric = "NDCG", k = *k, value = *v, n_users = ev.overall.n_users, "metric");
    }
    for (k, v) in &ev.overall.hr {
        info!(stage = "eval", metric = "HR", k = *k, value = *v, n_users = ev.overall.n_users, "metric");
    }
    Ok(ev)
}

pub fn eval_options(cfg: &PipelineConfig, exec: Execution) -> EvalOptions {
    EvalOptions {
        split: Split::Test,
        ks: cfg.eval_k.clone(),
        group_edges: cfg.groups.clone(),
        filter_seen: cfg.filter_seen,
        exec,
    }
}

fn preprocess_from(cfg: &PipelineConfig) -> Result<Dataset> {
    let interactions = cfg
        .interactions
        .as_ref()
        .ok_or_else(|| Error::Config("interactions path is not set".into()))?;
    preprocess_stage(
        interactions,
        cfg.catalog.as_deref(),
        &cfg.out.join(DATA_DIR),
        cfg.min_core,
        cfg.train.max_len,
        &cfg.echo(),
        cfg.train.seed,
    )
}

/// Embeds users and items from `source` and indexes both caches.
fn semantic_from(cfg: &PipelineConfig, dataset: &Dataset, source: TextSource, exec: Execution) -> Result<SemanticInputs> {
    let echo = cfg.echo();
    let caches = cfg.out.join(CACHES_DIR);
    let pools = cfg.out.join(POOLS_DIR);
    let settings = EmbedSettings::from_config(cfg, source);
    for kind in [EmbeddingKind::User, EmbeddingKind::Item] {
        let cache = caches.join(cache_file(kind, source));
        embed_stage(dataset, kind, &settings, &cache, &echo)?;
        index_stage(&cache, cfg.train.k_for(kind), &pools.join(pools_file(kind, source)), exec, &echo, cfg.train.seed)?;
    }
    load_semantic(&caches, &pools, source, &cfg.train)
}

/// Fails fast when inputs are missing or the config is inconsistent.
pub fn dry_run(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let mut required: Vec<(&str, &Path)> = Vec::new();
    match &cfg.interactions {
        Some(p) => required.push(("interactions", p)),
        None => return Err(Error::Config("interactions path is not set".into())),
    }
    if let Some(p) = &cfg.catalog {
        required.push(("catalog", p));
    }
    if cfg.client == ClientKind::Replay {
        match &cfg.fixtures {
            Some(p) => required.push(("fixtures", p)),
            None => return Err(Error::Config("the replay client needs a fixtures directory".into())),
        }
    }
    for (what, p) in required {
        if !p.exists() {
            return Err(Error::Config(format!("{what} not found: {}", p.display())));
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: PathBuf,
    pub evaluation: Evaluation,
    pub fit: FitOutcome,
}

/// preprocess → embed → index → train → eval, all under `cfg.out`.
pub fn run_pipeline(cfg: &PipelineConfig, exec: Execution, dump_augmentations: Option<PathBuf>) -> Result<PipelineOutcome> {
    cfg.validate()?;
    create_dir(&cfg.out)?;
    let dataset = preprocess_from(cfg)?;
    let semantic = if needs_semantic(&cfg.train) {
        Some(semantic_from(cfg, &dataset, source_for(&cfg.train), exec)?)
    } else {
        None
    };
    let train_dir = cfg.out.join(TRAIN_DIR);
    let fit = train_stage(&cfg.train, &dataset, semantic.as_ref(), &train_dir, exec, dump_augmentations)?;
    let report = cfg.out.join(REPORT_FILE);
    let evaluation = eval_stage(&train_dir.join("best.ckpt"), &cfg.out.join(DATA_DIR), &eval_options(cfg, exec), &report)?;
    Manifest::write(&cfg.out, "pipeline", cfg.train.seed, &cfg.echo(), &[REPORT_FILE])?;
    Ok(PipelineOutcome {
        report,
        evaluation,
        fit,
    })
}

/// Trains the config and each variant; writes `ablation.csv` and
/// `ablation.md` under `cfg.out`.
pub fn run_ablate(cfg: &PipelineConfig, variants: &[Variant], exec: Execution) -> Result<AblationTable> {
    cfg.validate()?;
    create_dir(&cfg.out)?;
    let dataset = preprocess_from(cfg)?;
    let want_raw = cfg.train.no_llm || variants.contains(&Variant::NoLlm);
    let inputs = AblationInputs {
        semantic: Some(semantic_from(cfg, &dataset, TextSource::Summary, exec)?),
        raw: if want_raw {
            Some(semantic_from(cfg, &dataset, TextSource::RawAttributes, exec)?)
        } else {
            None
        },
    };
    let opts = FitOptions {
        out_dir: Some(cfg.out.join("ablation")),
        exec,
        dump_augmentations: None,
    };
    let table = train::run_ablation(&cfg.train, &dataset, &inputs, variants, &opts)?;
    for (name, body) in [("ablation.csv", table.to_csv()), ("ablation.md", table.to_markdown())] {
        let p = cfg.out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Manifest::write(&cfg.out, "ablate", cfg.train.seed, &cfg.echo(), &["ablation.csv", "ablation.md"])?;
    Ok(table)
}
