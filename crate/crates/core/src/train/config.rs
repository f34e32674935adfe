use std::fmt::Display;
use std::str::FromStr;

use crate::config::{parse_optional, parse_value, KvConfig};
use crate::error::{Error, Result};
use crate::semantic::EmbeddingKind;

/// Which positions of a training prefix carry a next-item target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Targets {
    #[default]
    PerPosition,
    Final,
}

impl FromStr for Targets {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per_position" => Ok(Self::PerPosition),
            "final" => Ok(Self::Final),
            _ => Err(format!("expected per_position|final, got {s}")),
        }
    }
}

impl Display for Targets {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerPosition => "per_position",
            Self::Final => "final",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    /// Per-kind pool sizes; `None` falls back to `k`.
    pub k_user: Option<usize>,
    pub k_item: Option<usize>,
    pub substitution_ratio: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub targets: Targets,
    /// Global-norm clip; 0 disables.
    pub grad_clip: f64,
    pub cl_temperature: f64,
    pub leaky_slope: f64,
    pub detach_candidates: bool,
    pub no_cs: bool,
    pub no_is: bool,
    pub no_learnable: bool,
    pub no_semantic: bool,
    pub no_llm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            max_len: 20,
            layers: 2,
            heads: 2,
            batch_size: 256,
            lr: 0.001,
            dropout: 0.5,
            alpha: 0.1,
            beta: 0.1,
            k: 10,
            k_user: None,
            k_item: None,
            substitution_ratio: 0.2,
            patience: 10,
            max_epochs: 200,
            seed: 42,
            targets: Targets::PerPosition,
            grad_clip: 5.0,
            cl_temperature: 1.0,
            leaky_slope: 0.01,
            detach_candidates: false,
            no_cs: false,
            no_is: false,
            no_learnable: false,
            no_semantic: false,
            no_llm: false,
        }
    }
}

impl TrainConfig {
    /// Inter-user term is computed (its weight may still be 0).
    pub fn uses_cs(&self) -> bool {
        !self.no_cs
    }

    pub fn uses_is(&self) -> bool {
        !self.no_is
    }

    pub fn k_for(&self, kind: EmbeddingKind) -> usize {
        match kind {
            EmbeddingKind::User => self.k_user,
            EmbeddingKind::Item => self.k_item,
        }
        .unwrap_or(self.k)
    }

    pub fn backbone_only(&self) -> bool {
        self.no_cs && self.no_is
    }
}

impl KvConfig for TrainConfig {
    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dim", self.dim.to_string()),
            ("max_len", self.max_len.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("dropout", self.dropout.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("k", self.k.to_string()),
            ("k_user", self.k_user.map(|k| k.to_string()).unwrap_or_default()),
            ("k_item", self.k_item.map(|k| k.to_string()).unwrap_or_default()),
            ("substitution_ratio", self.substitution_ratio.to_string()),
            ("patience", self.patience.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("targets", self.targets.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("cl_temperature", self.cl_temperature.to_string()),
            ("leaky_slope", self.leaky_slope.to_string()),
            ("detach_candidates", self.detach_candidates.to_string()),
            ("no_cs", self.no_cs.to_string()),
            ("no_is", self.no_is.to_string()),
            ("no_learnable", self.no_learnable.to_string()),
            ("no_semantic", self.no_semantic.to_string()),
            ("no_llm", self.no_llm.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "dim" => self.dim = parse_value(key, v)?,
            "max_len" => self.max_len = parse_value(key, v)?,
            "layers" => self.layers = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "dropout" => self.dropout = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "beta" => self.beta = parse_value(key, v)?,
            "k" => self.k = parse_value(key, v)?,
            "k_user" => self.k_user = parse_optional(key, v)?,
            "k_item" => self.k_item = parse_optional(key, v)?,
            "substitution_ratio" => self.substitution_ratio = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "max_epochs" => self.max_epochs = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "targets" => self.targets = parse_value(key, v)?,
            "grad_clip" => self.grad_clip = parse_value(key, v)?,
            "cl_temperature" => self.cl_temperature = parse_value(key, v)?,
            "leaky_slope" => self.leaky_slope = parse_value(key, v)?,
            "detach_candidates" => self.detach_candidates = parse_value(key, v)?,
            "no_cs" => self.no_cs = parse_value(key, v)?,
            "no_is" => self.no_is = parse_value(key, v)?,
            "no_learnable" => self.no_learnable = parse_value(key, v)?,
            "no_semantic" => self.no_semantic = parse_value(key, v)?,
            "no_llm" => self.no_llm = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return fail(format!("alpha and beta must be >= 0 (got {}, {})", self.alpha, self.beta));
        }
        if !self.backbone_only() && self.batch_size < 2 {
            return fail("batch_size must be at least 2 with contrastive terms".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and max_epochs must be positive".into());
        }
        if !(self.substitution_ratio > 0.0 && self.substitution_ratio <= 1.0) {
            return fail(format!("substitution_ratio must be in (0, 1], got {}", self.substitution_ratio));
        }
        if self.k == 0 || self.k_user == Some(0) || self.k_item == Some(0) {
            return fail("k, k_user and k_item must be at least 1".into());
        }
        if !(self.lr > 0.0) || !(self.cl_temperature > 0.0) {
            return fail("lr and cl_temperature must be positive".into());
        }
        if self.grad_clip < 0.0 {
            return fail("grad_clip must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.max_len == 0 || self.layers == 0 {
            return fail("max_len and layers must be positive".into());
        }
        Ok(())
    }
}
