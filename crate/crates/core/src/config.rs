//! Flat `key = value` config files.
//!
//! Blank lines and `#` comments are ignored, keys may appear once, and
//! unknown keys are errors. [`KvConfig::echo`] writes every field as
//! `key=value` in a fixed order, so parsing an echo and echoing again gives
//! the same bytes.

use std::collections::HashSet;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub trait KvConfig: Default {
    /// Every field in echo order.
    fn fields(&self) -> Vec<(&'static str, String)>;
    /// `Ok(false)` for keys this config does not own.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
    fn validate(&self) -> Result<()> {
        Ok(())
    }

    fn echo(&self) -> String {
        self.fields().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_owned()) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("line {}: unknown key {k}", n + 1)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

pub(crate) fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value.is_empty() {
        return Ok(None);
    }
    parse_value(key, value).map(Some)
}

pub(crate) fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|p| parse_value(key, p.trim())).collect()
}

pub(crate) fn show_list(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClientKind {
    #[default]
    Stub,
    Replay,
    Remote,
}

impl FromStr for ClientKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "stub" => Ok(Self::Stub),
            "replay" => Ok(Self::Replay),
            "remote" => Ok(Self::Remote),
            _ => Err(format!("expected stub|replay|remote, got {s}")),
        }
    }
}

impl Display for ClientKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Stub => "stub",
            Self::Replay => "replay",
            Self::Remote => "remote",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackendKind {
    #[default]
    Stub,
    External,
}

impl FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "stub" => Ok(Self::Stub),
            "external" => Ok(Self::External),
            _ => Err(format!("expected stub|external, got {s}")),
        }
    }
}

impl Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Stub => "stub",
            Self::External => "external",
        })
    }
}

/// Everything the end-to-end pipeline needs. Relative input paths are
/// resolved against the config file's directory by [`PipelineConfig::load_from`].
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub interactions: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub out: PathBuf,
    pub min_core: usize,
    pub client: ClientKind,
    pub fixtures: Option<PathBuf>,
    pub backend: BackendKind,
    pub semantic_dim: usize,
    pub max_in_flight: usize,
    pub eval_k: Vec<usize>,
    pub groups: Vec<usize>,
    pub filter_seen: bool,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            interactions: None,
            catalog: None,
            out: PathBuf::from("out"),
            min_core: 5,
            client: ClientKind::Stub,
            fixtures: None,
            backend: BackendKind::Stub,
            semantic_dim: crate::semantic::embed::DEFAULT_STUB_DIM,
            max_in_flight: 8,
            eval_k: vec![10, 20],
            groups: vec![7, 10],
            filter_seen: false,
            train: TrainConfig::default(),
        }
    }
}

impl KvConfig for PipelineConfig {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let mut f = vec![
            ("interactions", show_path(&self.interactions)),
            ("catalog", show_path(&self.catalog)),
            ("out", self.out.display().to_string()),
            ("min_core", self.min_core.to_string()),
            ("client", self.client.to_string()),
            ("fixtures", show_path(&self.fixtures)),
            ("backend", self.backend.to_string()),
            ("semantic_dim", self.semantic_dim.to_string()),
            ("max_in_flight", self.max_in_flight.to_string()),
            ("eval_k", show_list(&self.eval_k)),
            ("groups", show_list(&self.groups)),
            ("filter_seen", self.filter_seen.to_string()),
        ];
        f.extend(self.train.fields());
        f
    }

    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "interactions" => self.interactions = opt_path(v),
            "catalog" => self.catalog = opt_path(v),
            "out" => self.out = PathBuf::from(v),
            "min_core" => self.min_core = parse_value(key, v)?,
            "client" => self.client = parse_value(key, v)?,
            "fixtures" => self.fixtures = opt_path(v),
            "backend" => self.backend = parse_value(key, v)?,
            "semantic_dim" => self.semantic_dim = parse_value(key, v)?,
            "max_in_flight" => self.max_in_flight = parse_value(key, v)?,
            "eval_k" => self.eval_k = parse_list(key, v)?,
            "groups" => self.groups = parse_list(key, v)?,
            "filter_seen" => self.filter_seen = parse_value(key, v)?,
            _ => return self.train.set(key, v),
        }
        Ok(true)
    }

    fn validate(&self) -> Result<()> {
        if self.semantic_dim == 0 || self.max_in_flight == 0 {
            return Err(Error::Config("semantic_dim and max_in_flight must be positive".into()));
        }
        if self.eval_k.is_empty() || self.eval_k.contains(&0) {
            return Err(Error::Config("eval_k needs positive cutoffs".into()));
        }
        crate::evaluation::buckets(&self.groups)?;
        self.train.validate()
    }
}

impl PipelineConfig {
    /// Loads `path` and resolves relative input paths against its directory.
    pub fn load_from(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::load(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.interactions, &mut cfg.catalog, &mut cfg.fixtures].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let text = "# toy\ninteractions = a.tsv\nseed = 7\nalpha=0.25\neval_k = 5,10\nno_is = true\n";
        let cfg = PipelineConfig::parse(text).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.alpha, 0.25);
        assert!(cfg.train.no_is);
        assert_eq!(cfg.eval_k, vec![5, 10]);
        let echo = cfg.echo();
        let again = PipelineConfig::parse(&echo).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.echo(), echo);
    }

    #[test]
    fn errors() {
        assert!(PipelineConfig::parse("bogus = 1").is_err());
        assert!(PipelineConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(PipelineConfig::parse("seed").is_err());
        assert!(PipelineConfig::parse("alpha = -1").is_err());
        assert!(PipelineConfig::parse("client = carrier-pigeon").is_err());
    }
}
