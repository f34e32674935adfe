//! Inter-user synthesized positives and intra-user substitution views, with
//! their InfoNCE losses.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::autograd::{Exclude, Tape, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::retrieval::PoolSet;
use crate::tensor::{softmax_in_place, Matrix};

/// Pool probabilities `p = softmax(LeakyReLU(a_q·W h̃_u + a_c·W h̃_{u'}))`
/// as a `1 × k` node. `candidates` holds one semantic vector per row.
pub fn synth_scores_on_tape(
    tape: &mut Tape<'_>,
    model: &Model,
    anchor_id: u32,
    anchor: &[f64],
    candidates: &Matrix,
) -> Result<Var> {
    let ids = model
        .ids
        .synth
        .ok_or_else(|| Error::Config("model has no synthesizer".into()))?;
    if candidates.rows() == 0 {
        return Err(Error::EmptyPool(anchor_id));
    }
    let sd = model.config.semantic_dim;
    if anchor.len() != sd || candidates.cols() != sd {
        return Err(Error::DimensionMismatch {
            expected: sd,
            actual: if anchor.len() != sd { anchor.len() } else { candidates.cols() },
        });
    }
    let d = model.config.dim;
    let w = tape.param(ids.w);
    let a = tape.param(ids.a);
    let s_anchor = tape.leaf(Matrix::row_vector(anchor.to_vec()));
    let s_cand = tape.leaf(candidates.clone());
    let z_anchor = tape.matmul_t(s_anchor, w);
    let z_cand = tape.matmul_t(s_cand, w);
    let a_query = tape.slice_cols(a, 0, d);
    let a_cand = tape.slice_cols(a, d, d);
    let q = tape.matmul_t(z_anchor, a_query);
    let c = tape.matmul_t(z_cand, a_cand);
    let raw = tape.add_scalar(c, q);
    let act = tape.leaky_relu(raw, model.config.leaky_slope);
    let row = tape.transpose(act);
    Ok(tape.softmax_rows(row))
}

pub fn synth_scores(model: &Model, anchor_id: u32, anchor: &[f64], candidates: &Matrix) -> Result<Vec<f64>> {
    let mut tape = Tape::new(&model.params);
    let p = synth_scores_on_tape(&mut tape, model, anchor_id, anchor, candidates)?;
    Ok(tape.value(p).data().to_vec())
}

/// Plain-arithmetic version of the synthesizer scores, for callers without
/// a model (and as a reference).
pub fn synth_scores_raw(w: &Matrix, a: &[f64], slope: f64, anchor: &[f64], candidates: &Matrix) -> Vec<f64> {
    let d = w.rows();
    let project = |s: &[f64]| -> Vec<f64> { (0..d).map(|i| crate::tensor::dot(w.row(i), s)).collect() };
    let zq = project(anchor);
    let q = crate::tensor::dot(&a[..d], &zq);
    let mut scores: Vec<f64> = (0..candidates.rows())
        .map(|j| {
            let s = q + crate::tensor::dot(&a[d..], &project(candidates.row(j)));
            if s < 0.0 {
                s * slope
            } else {
                s
            }
        })
        .collect();
    softmax_in_place(&mut scores);
    scores
}

/// `h⁺ = Σ p_j r_j`
pub fn synthesize_positive(p: &[f64], reps: &[&[f64]]) -> Result<Vec<f64>> {
    if p.len() != reps.len() {
        return Err(Error::Shape(format!("{} weights for {} representations", p.len(), reps.len())));
    }
    let d = reps.first().map_or(0, |r| r.len());
    let mut out = vec![0.0; d];
    for (&w, r) in p.iter().zip(reps) {
        if r.len() != d {
            return Err(Error::Shape("representations differ in width".into()));
        }
        crate::tensor::axpy(w, r, &mut out);
    }
    Ok(out)
}

fn check_pair(tape: &Tape<'_>, a: Var, b: Var) -> Result<usize> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::Shape(format!("{sa:?} vs {sb:?}")));
    }
    if sa.0 < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs at least 2 rows, got {}",
            sa.0
        )));
    }
    Ok(sa.0)
}

/// Mean over anchors `u` of `−log softmax_j(h_u·h⁺_j / τ)[u]`.
pub fn inter_user_loss_on_tape(tape: &mut Tape<'_>, h: Var, h_pos: Var, temperature: f64) -> Result<Var> {
    let n = check_pair(tape, h, h_pos)?;
    let mut logits = tape.matmul_t(h, h_pos);
    if temperature != 1.0 {
        logits = tape.scale(logits, 1.0 / temperature);
    }
    let targets: Vec<usize> = (0..n).collect();
    let sum = tape.cross_entropy_sum(logits, &targets, Exclude::None);
    Ok(tape.scale(sum, 1.0 / n as f64))
}

/// InfoNCE over the `2N` pooled views: each view's counterpart is its
/// positive, the other `2(N−1)` views are negatives, self-similarity is
/// dropped. Mean over all `2N` anchors.
pub fn intra_user_loss_on_tape(tape: &mut Tape<'_>, h1: Var, h2: Var, temperature: f64) -> Result<Var> {
    let n = check_pair(tape, h1, h2)?;
    let z = tape.concat_rows(&[h1, h2]);
    let mut logits = tape.matmul_t(z, z);
    if temperature != 1.0 {
        logits = tape.scale(logits, 1.0 / temperature);
    }
    let targets: Vec<usize> = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
    let sum = tape.cross_entropy_sum(logits, &targets, Exclude::PerRow((0..2 * n).collect()));
    Ok(tape.scale(sum, 1.0 / (2 * n) as f64))
}

fn eval_loss(f: impl FnOnce(&mut Tape<'_>, Var, Var) -> Result<Var>, a: &Matrix, b: &Matrix) -> Result<f64> {
    let store = crate::autograd::ParamStore::new();
    let mut tape = Tape::new(&store);
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let l = f(&mut tape, va, vb)?;
    Ok(tape.scalar(l))
}

pub fn inter_user_loss(h: &Matrix, h_pos: &Matrix) -> Result<f64> {
    eval_loss(|t, a, b| inter_user_loss_on_tape(t, a, b, 1.0), h, h_pos)
}

pub fn intra_user_loss(h1: &Matrix, h2: &Matrix) -> Result<f64> {
    eval_loss(|t, a, b| intra_user_loss_on_tape(t, a, b, 1.0), h1, h2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Substitution {
    pub position: usize,
    pub old_id: u32,
    pub new_id: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AugmentedView {
    pub items: Vec<u32>,
    pub log: Vec<Substitution>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AugmentedPair {
    pub first: AugmentedView,
    pub second: AugmentedView,
}

/// `max(1, round(ratio·len))`
pub fn substitution_count(len: usize, ratio: f64) -> usize {
    ((ratio * len as f64).round() as usize).max(1).min(len)
}

/// One view: up to `m` distinct positions, in random order, get an item
/// drawn uniformly from their pool. Positions whose item has an empty pool
/// are passed over in favour of the next drawn position.
pub fn augment(seq: &[u32], pools: &PoolSet, ratio: f64, rng: &mut impl Rng) -> AugmentedView {
    let mut items = seq.to_vec();
    let mut log = Vec::new();
    if seq.is_empty() {
        return AugmentedView { items, log };
    }
    let m = substitution_count(seq.len(), ratio);
    let mut order: Vec<usize> = (0..seq.len()).collect();
    order.shuffle(rng);
    for pos in order {
        if log.len() == m {
            break;
        }
        let old_id = seq[pos];
        let Some(pool) = pools.get(old_id).filter(|p| !p.is_empty()) else {
            continue;
        };
        let new_id = pool.neighbors[rng.gen_range(0..pool.len())].0;
        items[pos] = new_id;
        log.push(Substitution {
            position: pos,
            old_id,
            new_id,
        });
    }
    log.sort_by_key(|s| s.position);
    AugmentedView { items, log }
}

pub fn make_pair(seq: &[u32], pools: &PoolSet, ratio: f64, rng: &mut impl Rng) -> AugmentedPair {
    let first = augment(seq, pools, ratio, rng);
    let second = augment(seq, pools, ratio, rng);
    AugmentedPair { first, second }
}

/// The unlearned positive: one pool member, uniformly.
pub fn sample_uniform_positive(pool: &crate::retrieval::CandidatePool, rng: &mut impl Rng) -> Result<u32> {
    if pool.is_empty() {
        return Err(Error::EmptyPool(pool.anchor_id));
    }
    Ok(pool.neighbors[rng.gen_range(0..pool.len())].0)
}
