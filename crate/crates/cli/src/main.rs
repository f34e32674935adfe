use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use tracing::{error, info};

use seqrec_core::config::{BackendKind, ClientKind, KvConfig, PipelineConfig};
use seqrec_core::datasets::Dataset;
use seqrec_core::evaluation::{EvalOptions, Split};
use seqrec_core::pipeline::{self, EmbedSettings};
use seqrec_core::semantic::{EmbeddingKind, TextSource};
use seqrec_core::train::Variant;
use seqrec_core::{synthetic, Execution};

#[derive(Parser, Debug)]
#[command(name = "seqrec", version, about = "Sequential recommendation with semantic-retrieval contrastive training")]
struct Cli {
    /// Overrides the seed of every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// User pool size for config-driven commands; defaults to the config's `k`.
    #[arg(long, global = true)]
    k_user: Option<usize>,
    /// Item pool size for config-driven commands.
    #[arg(long, global = true)]
    k_item: Option<usize>,
    /// Validate config and inputs, then stop.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter raw interactions and write the dataset files.
    Preprocess {
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_core: usize,
        #[arg(long, default_value_t = 20)]
        max_len: usize,
    },
    /// Build a frozen semantic cache for users or items.
    Embed(EmbedArgs),
    /// Exact top-k neighbor pools for a cache.
    Index {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from preprocessed data, caches and pools.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        caches: Option<PathBuf>,
        #[arg(long)]
        pools: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSONL log of every augmented pair.
        #[arg(long)]
        dump_augmentations: Option<PathBuf>,
    },
    /// Leave-one-out metrics of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,20")]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "7,10")]
        groups: Vec<usize>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        filter_seen: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the config and its ablations; writes ablation.csv and ablation.md.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of no_cs,no_is,no_cl,no_learnable,no_semantic,no_llm.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// preprocess → embed → index → train → eval.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        filter_seen: bool,
        #[arg(long)]
        dump_augmentations: Option<PathBuf>,
    },
    /// Write a small seeded dataset with a text catalog.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 120)]
        users: usize,
        #[arg(long, default_value_t = 60)]
        items: usize,
    },
}

#[derive(Args, Debug)]
struct EmbedArgs {
    /// Preprocessed dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, value_enum, default_value_t = ClientArg::Stub)]
    client: ClientArg,
    #[arg(long, value_enum, default_value_t = BackendArg::Stub)]
    backend: BackendArg,
    /// Fixture directory for replay, or where remote responses are recorded.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    max_in_flight: usize,
    /// Embed concatenated attributes instead of summaries.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    User,
    Item,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClientArg {
    Stub,
    Replay,
    Remote,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Stub,
    External,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

struct Overrides {
    seed: Option<u64>,
    k_user: Option<usize>,
    k_item: Option<usize>,
}

fn load_config(path: &Path, o: &Overrides, out: Option<PathBuf>) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load_from(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    cfg.train.k_user = o.k_user.or(cfg.train.k_user);
    cfg.train.k_item = o.k_item.or(cfg.train.k_item);
    cfg.validate()?;
    if let Some(o) = out {
        cfg.out = o;
    }
    Ok(cfg)
}

fn require(what: &str, p: &Path) -> Result<()> {
    if !p.exists() {
        bail!("{what} not found: {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let seed = cli.seed;
    let overrides = Overrides {
        seed,
        k_user: cli.k_user,
        k_item: cli.k_item,
    };
    match cli.command {
        Command::Preprocess {
            interactions,
            catalog,
            out,
            min_core,
            max_len,
        } => {
            require("interactions", &interactions)?;
            if let Some(c) = &catalog {
                require("catalog", c)?;
            }
            if cli.dry_run {
                return Ok(());
            }
            let echo = format!(
                "interactions={}\ncatalog={}\nmin_core={min_core}\nmax_len={max_len}\n",
                interactions.display(),
                catalog.as_ref().map(|c| c.display().to_string()).unwrap_or_default()
            );
            pipeline::preprocess_stage(&interactions, catalog.as_deref(), &out, min_core, max_len, &echo, seed.unwrap_or(0))?;
        }
        Command::Embed(a) => {
            require("data", &a.data)?;
            if cli.dry_run {
                return Ok(());
            }
            let settings = EmbedSettings {
                client: match a.client {
                    ClientArg::Stub => ClientKind::Stub,
                    ClientArg::Replay => ClientKind::Replay,
                    ClientArg::Remote => ClientKind::Remote,
                },
                fixtures: a.fixtures,
                backend: match a.backend {
                    BackendArg::Stub => BackendKind::Stub,
                    BackendArg::External => BackendKind::External,
                },
                dim: a.dim,
                max_in_flight: a.max_in_flight,
                source: if a.raw {
                    TextSource::RawAttributes
                } else {
                    TextSource::Summary
                },
                seed: seed.unwrap_or(seqrec_core::train::TrainConfig::default().seed),
            };
            let kind = match a.kind {
                KindArg::User => EmbeddingKind::User,
                KindArg::Item => EmbeddingKind::Item,
            };
            let echo = format!(
                "kind={}\nclient={}\nbackend={}\ndim={}\nraw={}\nseed={}\n",
                kind.as_str(),
                settings.client,
                settings.backend,
                settings.dim,
                a.raw,
                settings.seed
            );
            let dataset = Dataset::load(&a.data)?;
            pipeline::embed_stage(&dataset, kind, &settings, &a.out, &echo)?;
        }
        Command::Index { cache, k, out } => {
            require("cache", &cache)?;
            if k == 0 {
                bail!("--k must be at least 1");
            }
            if cli.dry_run {
                return Ok(());
            }
            pipeline::index_stage(&cache, k, &out, exec, &format!("cache={}\nk={k}\n", cache.display()), seed.unwrap_or(0))?;
        }
        Command::Train {
            config,
            data,
            caches,
            pools,
            out,
            dump_augmentations,
        } => {
            let cfg = load_config(&config, &overrides, None)?;
            require("data", &data)?;
            let semantic_dirs = if pipeline::needs_semantic(&cfg.train) {
                match (caches, pools) {
                    (Some(c), Some(p)) => {
                        require("caches", &c)?;
                        require("pools", &p)?;
                        Some((c, p))
                    }
                    // a usage error: exits 2 like any other missing flag
                    _ => Cli::command()
                        .error(
                            ErrorKind::MissingRequiredArgument,
                            "this config trains contrastive terms: --caches and --pools are required",
                        )
                        .exit(),
                }
            } else {
                None
            };
            if cli.dry_run {
                return Ok(());
            }
            let dataset = Dataset::load(&data)?;
            let semantic = semantic_dirs
                .map(|(c, p)| pipeline::load_semantic(&c, &p, pipeline::source_for(&cfg.train), &cfg.train))
                .transpose()?;
            pipeline::train_stage(&cfg.train, &dataset, semantic.as_ref(), &out, exec, dump_augmentations)?;
        }
        Command::Eval {
            checkpoint,
            data,
            k,
            groups,
            split,
            filter_seen,
            out,
        } => {
            require("checkpoint", &checkpoint)?;
            require("data", &data)?;
            seqrec_core::evaluation::buckets(&groups)?;
            if k.is_empty() || k.contains(&0) {
                bail!("--k needs positive cutoffs");
            }
            if cli.dry_run {
                return Ok(());
            }
            let opts = EvalOptions {
                split: match split {
                    SplitArg::Valid => Split::Valid,
                    SplitArg::Test => Split::Test,
                },
                ks: k,
                group_edges: groups,
                filter_seen,
                exec,
            };
            pipeline::eval_stage(&checkpoint, &data, &opts, &out)?;
        }
        Command::Ablate { config, variants, out } => {
            let cfg = load_config(&config, &overrides, out)?;
            let variants: Vec<Variant> = match variants {
                Some(v) => v.iter().map(|s| s.parse()).collect::<Result<_, _>>()?,
                None => Variant::ALL.to_vec(),
            };
            pipeline::dry_run(&cfg)?;
            if cli.dry_run {
                return Ok(());
            }
            let table = pipeline::run_ablate(&cfg, &variants, exec)?;
            print!("{}", table.to_markdown());
        }
        Command::Pipeline {
            config,
            out,
            filter_seen,
            dump_augmentations,
        } => {
            let mut cfg = load_config(&config, &overrides, out)?;
            cfg.filter_seen |= filter_seen;
            pipeline::dry_run(&cfg)?;
            if cli.dry_run {
                return Ok(());
            }
            let outcome = pipeline::run_pipeline(&cfg, exec, dump_augmentations)?;
            info!(stage = "pipeline", report = %outcome.report.display(), "done");
            print!("{}", outcome.evaluation.to_csv());
        }
        Command::Toy { out, users, items } => {
            if cli.dry_run {
                return Ok(());
            }
            let lines = synthetic::write_toy(&out, users, items, seed.unwrap_or(7))?;
            info!(stage = "toy", lines, dir = %out.display(), "toy data written");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap prints usage and exits with 2 on bad arguments
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_current_span(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!(error = format!("{e:#}"), "stage failed");
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
