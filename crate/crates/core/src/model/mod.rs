//! Transformer backbone: item and position embeddings, pre-LN causal
//! self-attention blocks, weight-tied full-catalog scoring.
//!
//! A sequence is encoded over its real items only. Inputs are left-padded,
//! so a sequence of `T` real items occupies positions `n−T..n` and attends
//! to nothing else; the padded positions carry no information and are
//! simply never computed.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Exclude, ParamId, ParamStore, Tape, Var};
use crate::datasets::{self, PaddedBatch, PAD};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::rng;
use crate::tensor::{logsumexp, Matrix};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_items: usize,
    pub max_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Width of the semantic vectors fed to the synthesizer; 0 builds no
    /// synthesizer.
    pub semantic_dim: usize,
    pub leaky_slope: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.num_items == 0 {
            return bad("model needs at least one item");
        }
        if self.max_len == 0 || self.dim == 0 || self.layers == 0 || self.heads == 0 {
            return bad("max_len, dim, layers and heads must be positive");
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    /// Backbone scalars: `(|V|+1)d + nd + L(6d² + 10d) + 2d`.
    pub fn backbone_param_count(&self) -> usize {
        let d = self.dim;
        (self.num_items + 1) * d + self.max_len * d + self.layers * (6 * d * d + 10 * d) + 2 * d
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct SynthIds {
    /// `d × d̃`
    pub w: ParamId,
    /// `1 × 2d`: query half then candidate half.
    pub a: ParamId,
}

#[derive(Clone, Debug)]
pub struct ModelIds {
    pub item_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub synth: Option<SynthIds>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub ids: ModelIds,
}

fn truncated_normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

impl Model {
    /// Backbone parameters come from one seeded stream and the synthesizer
    /// from another, so adding or dropping the synthesizer never changes
    /// the backbone's initial weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut r = rng::stream(seed, &[rng::purpose::INIT]);
        let mut params = ParamStore::new();
        let mut normal = |rows, cols| truncated_normal(&mut r, rows, cols, INIT_STD);

        let mut item = normal(config.num_items + 1, d);
        item.row_mut(PAD as usize).fill(0.0);
        let item_emb = params.add("item_emb", item);
        let pos_emb = params.add("pos_emb", normal(config.max_len, d));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut add = |name: &str, m: Matrix| params.add(format!("layer{l}.{name}"), m);
            let ln1_g = add("ln1_g", Matrix::filled(1, d, 1.0));
            let ln1_b = add("ln1_b", Matrix::zeros(1, d));
            let wq = add("wq", normal(d, d));
            let bq = add("bq", Matrix::zeros(1, d));
            let wk = add("wk", normal(d, d));
            let bk = add("bk", Matrix::zeros(1, d));
            let wv = add("wv", normal(d, d));
            let bv = add("bv", Matrix::zeros(1, d));
            let wo = add("wo", normal(d, d));
            let bo = add("bo", Matrix::zeros(1, d));
            let ln2_g = add("ln2_g", Matrix::filled(1, d, 1.0));
            let ln2_b = add("ln2_b", Matrix::zeros(1, d));
            let w1 = add("w1", normal(d, d));
            let b1 = add("b1", Matrix::zeros(1, d));
            let w2 = add("w2", normal(d, d));
            let b2 = add("b2", Matrix::zeros(1, d));
            layers.push(LayerIds {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let lnf_g = params.add("lnf_g", Matrix::filled(1, d, 1.0));
        let lnf_b = params.add("lnf_b", Matrix::zeros(1, d));

        let synth = (config.semantic_dim > 0).then(|| {
            let mut r = rng::stream(seed, &[rng::purpose::SYNTH_INIT]);
            SynthIds {
                w: params.add("synth_w", truncated_normal(&mut r, d, config.semantic_dim, INIT_STD)),
                a: params.add("synth_a", truncated_normal(&mut r, 1, 2 * d, INIT_STD)),
            }
        });

        Ok(Self {
            config,
            params,
            ids: ModelIds {
                item_emb,
                pos_emb,
                layers,
                lnf_g,
                lnf_b,
                synth,
            },
        })
    }

    pub fn num_items(&self) -> usize {
        self.config.num_items
    }

    pub fn item_embeddings(&self) -> &Matrix {
        self.params.get(self.ids.item_emb)
    }

    fn check_items(&self, items: &[u32]) -> Result<()> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty sequence".into()));
        }
        if items.len() > self.config.max_len {
            return Err(Error::Shape(format!(
                "{} items exceed max_len {}",
                items.len(),
                self.config.max_len
            )));
        }
        match items.iter().find(|&&i| i == PAD || i as usize > self.config.num_items) {
            Some(&bad) => Err(Error::UnknownId(bad)),
            None => Ok(()),
        }
    }
}

/// Encoder output for one sequence on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `T × d`, one row per real item.
    pub states: Var,
    /// `1 × d`, the last row of `states`.
    pub last: Var,
}

fn dropout_mask(rng: &mut impl Rng, rows: usize, cols: usize, p: f64) -> Matrix {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn maybe_dropout<R: Rng>(tape: &mut Tape<'_>, x: Var, p: f64, rng: &mut Option<R>) -> Var {
    match rng {
        Some(r) if p > 0.0 => {
            let (rows, cols) = tape.value(x).shape();
            let m = dropout_mask(r, rows, cols, p);
            tape.mask(x, m)
        }
        _ => x,
    }
}

/// Embedding lookup (`E + P`) for the real items of one sequence.
pub fn embed_on_tape(tape: &mut Tape<'_>, model: &Model, items: &[u32]) -> Result<Var> {
    model.check_items(items)?;
    let n = model.config.max_len;
    let ids: Vec<usize> = items.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (n - items.len()..n).collect();
    let m = tape.param(model.ids.item_emb);
    let p = tape.param(model.ids.pos_emb);
    let e = tape.gather_rows(m, &ids);
    let pe = tape.gather_rows(p, &positions);
    Ok(tape.add(e, pe))
}

/// Runs the encoder; `dropout` is `Some` in training mode.
pub fn encode_on_tape<R: Rng>(
    tape: &mut Tape<'_>,
    model: &Model,
    items: &[u32],
    mut dropout: Option<R>,
) -> Result<Encoded> {
    let p = model.config.dropout;
    let heads = model.config.heads;
    let mut x = embed_on_tape(tape, model, items)?;
    x = maybe_dropout(tape, x, p, &mut dropout);
    for l in &model.ids.layers {
        let [g1, b1n, wq, bq, wk, bk, wv, bv, wo, bo, g2, b2n, w1, b1, w2, b2] = [
            l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_g, l.ln2_b, l.w1, l.b1,
            l.w2, l.b2,
        ]
        .map(|id| tape.param(id));
        let a = tape.layer_norm(x, g1, b1n);
        let q = affine(tape, a, wq, bq);
        let k = affine(tape, a, wk, bk);
        let v = affine(tape, a, wv, bv);
        let att = tape.causal_attention(q, k, v, heads);
        let o = affine(tape, att, wo, bo);
        let o = maybe_dropout(tape, o, p, &mut dropout);
        x = tape.add(x, o);
        let h = tape.layer_norm(x, g2, b2n);
        let f = affine(tape, h, w1, b1);
        let f = tape.gelu(f);
        let f = affine(tape, f, w2, b2);
        let f = maybe_dropout(tape, f, p, &mut dropout);
        x = tape.add(x, f);
    }
    let g = tape.param(model.ids.lnf_g);
    let b = tape.param(model.ids.lnf_b);
    let states = tape.layer_norm(x, g, b);
    let t = items.len();
    let last = tape.slice_rows(states, t - 1, 1);
    Ok(Encoded { states, last })
}

fn affine(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Logits over the whole embedding table (column 0 is the padding item and
/// is excluded wherever a distribution is formed).
pub fn score_on_tape(tape: &mut Tape<'_>, model: &Model, h: Var) -> Var {
    let m = tape.param(model.ids.item_emb);
    tape.matmul_t(h, m)
}

/// Summed next-item cross-entropy for the rows of `h` against `targets`.
pub fn rec_loss_on_tape(tape: &mut Tape<'_>, model: &Model, h: Var, targets: &[u32]) -> Var {
    let logits = score_on_tape(tape, model, h);
    let t: Vec<usize> = targets.iter().map(|&v| v as usize).collect();
    tape.cross_entropy_sum(logits, &t, Exclude::Column(PAD as usize))
}

/// Eval-mode encoding of one sequence (truncated to `max_len`).
pub struct Representation {
    pub states: Matrix,
    pub last: Vec<f64>,
}

pub fn represent(model: &Model, items: &[u32]) -> Result<Representation> {
    let items = datasets::truncate(items, model.config.max_len);
    let mut tape = Tape::new(&model.params);
    let enc = encode_on_tape::<rand_chacha::ChaCha8Rng>(&mut tape, model, items, None)?;
    Ok(Representation {
        states: tape.value(enc.states).clone(),
        last: tape.value(enc.last).data().to_vec(),
    })
}

/// `N × n × d` embedding tensor for a padded batch (eval mode); padded slots
/// hold the padding row plus their position row.
pub fn embed_sequence(model: &Model, batch: &PaddedBatch) -> Result<Vec<Matrix>> {
    let n = model.config.max_len;
    if batch.max_len != n {
        return Err(Error::Shape(format!("batch width {} but model max_len {n}", batch.max_len)));
    }
    let m = model.item_embeddings();
    let p = model.params.get(model.ids.pos_emb);
    batch
        .item_ids
        .iter()
        .map(|row| {
            let mut out = Matrix::zeros(n, model.config.dim);
            for (t, &id) in row.iter().enumerate() {
                if id as usize > model.config.num_items {
                    return Err(Error::UnknownId(id));
                }
                for (o, (a, b)) in out.row_mut(t).iter_mut().zip(m.row(id as usize).iter().zip(p.row(t))) {
                    *o = a + b;
                }
            }
            Ok(out)
        })
        .collect()
}

/// Eval-mode encoding of a padded batch: per-row `n × d` states (zero rows
/// at padded slots) and `h_u` at the last position.
pub fn encode(model: &Model, batch: &PaddedBatch, exec: Execution) -> Result<Vec<Representation>> {
    let n = model.config.max_len;
    if batch.max_len != n {
        return Err(Error::Shape(format!("batch width {} but model max_len {n}", batch.max_len)));
    }
    exec::map_indexed(exec, batch.len(), |r| {
        let rep = represent(model, batch.real_items(r))?;
        let t = rep.states.rows();
        let mut full = Matrix::zeros(n, model.config.dim);
        for i in 0..t {
            full.row_mut(n - t + i).copy_from_slice(rep.states.row(i));
        }
        Ok(Representation {
            states: full,
            last: rep.last,
        })
    })
    .into_iter()
    .collect()
}

/// `h · Mᵀ` over items `1..=|V|`; index 0 of the result is item 1.
pub fn score_items(model: &Model, h: &[f64]) -> Vec<f64> {
    let m = model.item_embeddings();
    (1..m.rows()).map(|v| crate::tensor::dot(h, m.row(v))).collect()
}

/// Mean over rows of `−logit[target] + logsumexp(logits)`; logits are over
/// items `1..=|V|` and targets are item ids.
pub fn rec_loss(logits: &[Vec<f64>], targets: &[u32]) -> Result<f64> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::Shape("rec_loss needs one target per non-empty logit row".into()));
    }
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        if t == PAD || t as usize > row.len() {
            return Err(Error::UnknownId(t));
        }
        total += logsumexp(row.iter().copied()) - row[t as usize - 1];
    }
    Ok(total / logits.len() as f64)
}
