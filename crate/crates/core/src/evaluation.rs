//! Full-catalog ranking and HR/NDCG with sequence-length groups.
//!
//! Evaluation reads only the backbone parameters and the sequences; the
//! semantic caches and pools are not inputs here.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datasets::{self, Dataset};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::{self, Model};

/// `1 + #{strictly higher} + #{equal with lower id}`; `scores[0]` is item 1.
pub fn rank_target(scores: &[f64], target: u32) -> Result<usize> {
    if target == 0 || target as usize > scores.len() {
        return Err(Error::UnknownId(target));
    }
    let t = target as usize - 1;
    let st = scores[t];
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > st || (s == st && j < t))
        .count();
    Ok(above + 1)
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check(ranks, k)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check(ranks, k)?;
    let sum: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(sum / ranks.len() as f64)
}

fn check(ranks: &[usize], k: usize) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("no ranks to aggregate".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankResult {
    pub user_id: u32,
    pub rank: usize,
    /// Full sequence length, used for grouping.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub n_users: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

impl MetricReport {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Self> {
        let mut hr = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for &k in ks {
            hr.insert(k, hr_at_k(ranks, k)?);
            ndcg.insert(k, ndcg_at_k(ranks, k)?);
        }
        Ok(Self {
            n_users: ranks.len(),
            hr,
            ndcg,
        })
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn hr(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// Length bucket bounded by configurable edges: with edges `[7, 10]` the
/// buckets are `<7`, `7-10` and `>10`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Bucket {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl Bucket {
    pub fn label(&self) -> String {
        match (self.lo, self.hi) {
            (0, Some(h)) => format!("len<{}", h + 1),
            (l, Some(h)) => format!("len{l}-{h}"),
            (l, None) => format!("len>{}", l - 1),
        }
    }

    pub fn contains(&self, len: usize) -> bool {
        len >= self.lo && self.hi.is_none_or(|h| len <= h)
    }
}

/// `[a, b]` → `[0, a−1]`, `[a, b]`, `[b+1, ∞)`.
pub fn buckets(edges: &[usize]) -> Result<Vec<Bucket>> {
    match edges {
        [] => Ok(vec![Bucket { lo: 0, hi: None }]),
        [a, b] if 0 < *a && a <= b => Ok(vec![
            Bucket { lo: 0, hi: Some(a - 1) },
            Bucket { lo: *a, hi: Some(*b) },
            Bucket { lo: b + 1, hi: None },
        ]),
        _ => Err(Error::Config(format!(
            "group edges must be two increasing positive lengths, got {edges:?}"
        ))),
    }
}

/// Metrics per bucket; buckets nobody falls into are absent.
pub fn group_report(results: &[RankResult], edges: &[usize], ks: &[usize]) -> Result<Vec<(Bucket, MetricReport)>> {
    let mut out = Vec::new();
    for b in buckets(edges)? {
        let ranks: Vec<usize> = results.iter().filter(|r| b.contains(r.length)).map(|r| r.rank).collect();
        if !ranks.is_empty() {
            out.push((b, MetricReport::from_ranks(&ranks, ks)?));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub split: Split,
    pub ks: Vec<usize>,
    pub group_edges: Vec<usize>,
    /// Drop items already in the input from the ranking (target excepted).
    pub filter_seen: bool,
    pub exec: Execution,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            ks: vec![10, 20],
            group_edges: vec![7, 10],
            filter_seen: false,
            exec: Execution::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub results: Vec<RankResult>,
    pub overall: MetricReport,
    pub groups: Vec<(Bucket, MetricReport)>,
    pub filter_seen: bool,
}

impl Evaluation {
    /// `scope,metric,K,value,n_users`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,metric,K,value,n_users\n");
        let scope_rows = std::iter::once(("all".to_owned(), &self.overall))
            .chain(self.groups.iter().map(|(b, r)| (b.label(), r)));
        for (scope, r) in scope_rows {
            for (name, map) in [("HR", &r.hr), ("NDCG", &r.ndcg)] {
                for (k, v) in map {
                    writeln!(out, "{scope},{name},{k},{v:.8},{}", r.n_users).expect("write to string");
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores for one input sequence (eval mode), over items `1..=|V|`.
pub fn score_sequence(model: &Model, input: &[u32], filter_seen: bool, target: u32) -> Result<Vec<f64>> {
    let rep = model::represent(model, input)?;
    let mut scores = model::score_items(model, &rep.last);
    if filter_seen {
        let seen: HashSet<u32> = input.iter().copied().collect();
        for v in seen {
            if v != target {
                scores[v as usize - 1] = f64::NEG_INFINITY;
            }
        }
    }
    Ok(scores)
}

/// Leave-one-out ranking over every user long enough to split.
pub fn evaluate(model: &Model, dataset: &Dataset, opts: &EvalOptions) -> Result<Evaluation> {
    let cases: Vec<(u32, &[u32], u32, usize)> = dataset
        .sequences
        .iter()
        .filter_map(|s| {
            let split = datasets::leave_one_out(&s.items)?;
            Some(match opts.split {
                Split::Valid => (s.user_id, split.valid_input, split.valid_target, s.len()),
                Split::Test => (s.user_id, split.test_input, split.test_target, s.len()),
            })
        })
        .collect();
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no users with at least 3 interactions".into()));
    }
    let results = exec::map(opts.exec, &cases, |&(user_id, input, target, length)| {
        let scores = score_sequence(model, input, opts.filter_seen, target)?;
        Ok(RankResult {
            user_id,
            rank: rank_target(&scores, target)?,
            length,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let ranks: Vec<usize> = results.iter().map(|r| r.rank).collect();
    Ok(Evaluation {
        overall: MetricReport::from_ranks(&ranks, &opts.ks)?,
        groups: group_report(&results, &opts.group_edges, &opts.ks)?,
        results,
        filter_seen: opts.filter_seen,
    })
}
