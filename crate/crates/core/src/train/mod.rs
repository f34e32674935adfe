//! Joint optimization of the recommendation loss and the two contrastive
//! terms, with early stopping on validation NDCG@20.

mod ablation;
mod config;
mod fit;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub use ablation::{run_ablation, AblationInputs, AblationRow, AblationTable, Variant};
pub use config::{Targets, TrainConfig};
pub use fit::{fit, fit_with_validator, FitOptions, FitOutcome, Validation};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::retrieval::{materialize_pools, Index, PoolSet};
use crate::semantic::{EmbeddingCache, EmbeddingKind};

/// `L_rec + α·L_cs + β·L_is`; any non-finite component is an error.
pub fn total_loss(l_rec: f64, l_cs: f64, l_is: f64, alpha: f64, beta: f64) -> Result<f64> {
    for (name, v) in [("rec", l_rec), ("cs", l_cs), ("is", l_is)] {
        if !v.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                step: 0,
                detail: format!("{name} loss is {v}"),
            });
        }
    }
    Ok(l_rec + alpha * l_cs + beta * l_is)
}

/// Frozen semantic caches plus the candidate pools built from them.
#[derive(Clone, Debug)]
pub struct SemanticInputs {
    pub user_cache: EmbeddingCache,
    pub item_cache: EmbeddingCache,
    pub user_pools: PoolSet,
    pub item_pools: PoolSet,
}

impl SemanticInputs {
    pub fn build(user_cache: EmbeddingCache, item_cache: EmbeddingCache, k: usize, exec: Execution) -> Result<Self> {
        Self::build_with(user_cache, item_cache, [k, k], exec)
    }

    /// `k` is `[users, items]`.
    pub fn build_with(user_cache: EmbeddingCache, item_cache: EmbeddingCache, k: [usize; 2], exec: Execution) -> Result<Self> {
        let user_pools = materialize_pools(&Index::build(&user_cache)?, EmbeddingKind::User, k[0], exec)?;
        let item_pools = materialize_pools(&Index::build(&item_cache)?, EmbeddingKind::Item, k[1], exec)?;
        Ok(Self {
            user_cache,
            item_cache,
            user_pools,
            item_pools,
        })
    }

    /// Frozen, complete for the dataset, and with a pool for every anchor.
    pub fn check(&self, dataset: &Dataset) -> Result<()> {
        for (cache, n) in [(&self.user_cache, dataset.num_users()), (&self.item_cache, dataset.num_items())] {
            if !cache.is_frozen() {
                return Err(Error::CacheNotFrozen);
            }
            let missing: Vec<u32> = (1..=n as u32).filter(|&id| !cache.contains(id)).collect();
            if !missing.is_empty() {
                return Err(Error::CacheIncomplete(missing));
            }
        }
        for (pools, n) in [(&self.user_pools, dataset.num_users()), (&self.item_pools, dataset.num_items())] {
            if let Some(id) = (1..=n as u32).find(|&id| pools.get(id).is_none()) {
                return Err(Error::UnknownId(id));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_cs: Option<f64>,
    pub l_is: Option<f64>,
    pub total: f64,
    pub val_hr20: f64,
    pub val_ndcg20: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_rec: f64,
    pub l_cs: Option<f64>,
    pub l_is: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: usize,
    pub best_val_ndcg20: f64,
    pub stopped_early: bool,
    pub checkpoint: Option<PathBuf>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.8}")).unwrap_or_default()
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_rec,l_cs,l_is,total,val_hr20,val_ndcg20,wall_secs,best\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{:.8},{},{},{:.8},{:.8},{:.8},{:.3},{}",
                e.epoch,
                e.l_rec,
                opt(e.l_cs),
                opt(e.l_is),
                e.total,
                e.val_hr20,
                e.val_ndcg20,
                e.wall_secs,
                u8::from(e.epoch == self.best_epoch)
            )
            .expect("write to string");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Per-step totals, the trace used to compare runs.
    pub fn loss_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.total).collect()
    }
}
