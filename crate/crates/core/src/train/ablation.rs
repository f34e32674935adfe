use std::fmt::Write as _;
use std::str::FromStr;

use tracing::info;

use super::{fit, FitOptions, SemanticInputs, TrainConfig};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions, MetricReport, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    NoCs,
    NoIs,
    NoCl,
    NoLearnable,
    NoSemantic,
    NoLlm,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::NoCs,
        Variant::NoIs,
        Variant::NoCl,
        Variant::NoLearnable,
        Variant::NoSemantic,
        Variant::NoLlm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoCs => "no_cs",
            Variant::NoIs => "no_is",
            Variant::NoCl => "no_cl",
            Variant::NoLearnable => "no_learnable",
            Variant::NoSemantic => "no_semantic",
            Variant::NoLlm => "no_llm",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::NoCs => c.no_cs = true,
            Variant::NoIs => c.no_is = true,
            Variant::NoCl => {
                c.no_cs = true;
                c.no_is = true;
            }
            Variant::NoLearnable => c.no_learnable = true,
            Variant::NoSemantic => c.no_semantic = true,
            Variant::NoLlm => c.no_llm = true,
        }
        c
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s}")))
    }
}

/// Semantic inputs for the base run, plus raw-attribute ones for `no_llm`.
#[derive(Clone, Debug, Default)]
pub struct AblationInputs {
    pub semantic: Option<SemanticInputs>,
    pub raw: Option<SemanticInputs>,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub test: MetricReport,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,HR@10,HR@20,NDCG@10,NDCG@20,n_users,best_epoch\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.8},{:.8},{:.8},{:.8},{},{}",
                r.variant,
                r.test.hr(10),
                r.test.hr(20),
                r.test.ndcg(10),
                r.test.ndcg(20),
                r.test.n_users,
                r.best_epoch
            )
            .expect("write to string");
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| variant | HR@10 | HR@20 | NDCG@10 | NDCG@20 |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            writeln!(
                out,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                r.variant,
                r.test.hr(10),
                r.test.hr(20),
                r.test.ndcg(10),
                r.test.ndcg(20)
            )
            .expect("write to string");
        }
        out
    }
}

/// Trains the base config and each variant, reporting test metrics.
pub fn run_ablation(
    base: &TrainConfig,
    dataset: &Dataset,
    inputs: &AblationInputs,
    variants: &[Variant],
    opts: &FitOptions,
) -> Result<AblationTable> {
    let eval = EvalOptions {
        split: Split::Test,
        ks: vec![10, 20],
        group_edges: Vec::new(),
        filter_seen: false,
        exec: opts.exec,
    };
    let mut runs: Vec<(String, TrainConfig)> = vec![("full".to_owned(), base.clone())];
    runs.extend(variants.iter().map(|v| (v.name().to_owned(), v.apply(base))));
    let mut table = AblationTable::default();
    for (name, cfg) in runs {
        let semantic = if cfg.no_llm {
            Some(
                inputs
                    .raw
                    .as_ref()
                    .ok_or_else(|| Error::Config("no_llm needs raw-attribute caches".into()))?,
            )
        } else {
            inputs.semantic.as_ref()
        };
        let run_opts = FitOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(&name)),
            ..opts.clone()
        };
        let outcome = fit(&cfg, dataset, semantic, &run_opts)?;
        let test = evaluate(&outcome.model, dataset, &eval)?.overall;
        info!(stage = "ablate", variant = %name, ndcg10 = test.ndcg(10), "variant done");
        table.rows.push(AblationRow {
            variant: name,
            test,
            best_epoch: outcome.report.best_epoch,
        });
    }
    Ok(table)
}
