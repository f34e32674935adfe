//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqrec_core::autograd::{Gradients, ParamId, ParamStore, Tape, Var};
use seqrec_core::contrastive::{inter_user_loss_on_tape, intra_user_loss_on_tape, synth_scores_on_tape};
use seqrec_core::model::{encode_on_tape, rec_loss_on_tape, Model, ModelConfig};
use seqrec_core::Matrix;

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// A small model with every parameter redrawn from U(−scale, scale) so that
/// gradients are far from zero.
pub fn toy_model(num_items: usize, max_len: usize, dim: usize, semantic_dim: usize, seed: u64, scale: f64) -> Model {
    let mut m = Model::new(
        ModelConfig {
            num_items,
            max_len,
            dim,
            layers: 2,
            heads: 2,
            dropout: 0.0,
            semantic_dim,
            leaky_slope: 0.01,
        },
        seed,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let ids: Vec<ParamId> = m.params.ids().collect();
    for id in ids {
        let (r, c) = m.params.get(id).shape();
        *m.params.get_mut(id) = random_matrix(&mut rng, r, c, scale);
    }
    m
}

/// A batch of training sequences, their semantic vectors and two fixed
/// augmented views of each.
pub struct ToyBatch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    pub semantic: Vec<Vec<f64>>,
    pub view1: Vec<Vec<u32>>,
    pub view2: Vec<Vec<u32>>,
}

pub fn toy_batch(users: usize, len: usize, num_items: usize, semantic_dim: usize, seed: u64) -> ToyBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let item = |rng: &mut ChaCha8Rng| rng.gen_range(1..=num_items as u32);
    let seqs: Vec<Vec<u32>> = (0..users).map(|_| (0..=len).map(|_| item(&mut rng)).collect()).collect();
    let inputs: Vec<Vec<u32>> = seqs.iter().map(|s| s[..len].to_vec()).collect();
    let targets = seqs.iter().map(|s| s[1..].to_vec()).collect();
    let semantic = (0..users)
        .map(|_| (0..semantic_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let view = |rng: &mut ChaCha8Rng| -> Vec<Vec<u32>> {
        inputs
            .iter()
            .map(|s| {
                let mut v = s.clone();
                let pos = rng.gen_range(0..v.len());
                v[pos] = item(rng);
                v
            })
            .collect()
    };
    let view1 = view(&mut rng);
    let view2 = view(&mut rng);
    ToyBatch {
        inputs,
        targets,
        semantic,
        view1,
        view2,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Rec,
    Cs,
    Is,
}

fn stack_last(tape: &mut Tape<'_>, model: &Model, seqs: &[Vec<u32>]) -> (Var, Vec<Var>) {
    let mut lasts = Vec::new();
    let mut states = Vec::new();
    for s in seqs {
        let e = encode_on_tape(tape, model, s, None::<ChaCha8Rng>).unwrap();
        lasts.push(e.last);
        states.push(e.states);
    }
    (tape.concat_rows(&lasts), states)
}

/// Builds one loss term for the batch on `tape`. The inter-user positive of
/// user `u` mixes the representations of every other user in the batch.
pub fn term_on_tape(tape: &mut Tape<'_>, model: &Model, batch: &ToyBatch, term: Term) -> Var {
    match term {
        Term::Rec => {
            let mut parts = Vec::new();
            for (s, t) in batch.inputs.iter().zip(&batch.targets) {
                let e = encode_on_tape(tape, model, s, None::<ChaCha8Rng>).unwrap();
                parts.push((rec_loss_on_tape(tape, model, e.states, t), 1.0));
            }
            tape.weighted_sum(&parts)
        }
        Term::Cs => {
            let n = batch.inputs.len();
            let mut lasts = Vec::new();
            for s in &batch.inputs {
                lasts.push(encode_on_tape(tape, model, s, None::<ChaCha8Rng>).unwrap().last);
            }
            let h = tape.concat_rows(&lasts);
            let mut positives = Vec::new();
            for u in 0..n {
                let others: Vec<usize> = (0..n).filter(|&j| j != u).collect();
                let cand = Matrix::from_rows(&others.iter().map(|&j| batch.semantic[j].clone()).collect::<Vec<_>>());
                let p = synth_scores_on_tape(tape, model, u as u32 + 1, &batch.semantic[u], &cand).unwrap();
                let reps: Vec<Var> = others.iter().map(|&j| lasts[j]).collect();
                let r = tape.concat_rows(&reps);
                positives.push(tape.matmul(p, r));
            }
            let hp = tape.concat_rows(&positives);
            inter_user_loss_on_tape(tape, h, hp, 1.0).unwrap()
        }
        Term::Is => {
            let (v1, _) = stack_last(tape, model, &batch.view1);
            let (v2, _) = stack_last(tape, model, &batch.view2);
            intra_user_loss_on_tape(tape, v1, v2, 1.0).unwrap()
        }
    }
}

pub fn weighted_loss(model: &Model, batch: &ToyBatch, weights: &[(Term, f64)]) -> (f64, Gradients) {
    let mut tape = Tape::new(&model.params);
    let parts: Vec<(Var, f64)> = weights.iter().map(|&(t, w)| (term_on_tape(&mut tape, model, batch, t), w)).collect();
    let total = tape.weighted_sum(&parts);
    let value = tape.scalar(total);
    let mut grads = Gradients::for_store(&model.params);
    tape.backward(&[(total, Matrix::scalar(1.0))], &mut grads);
    (value, grads)
}

/// Central differences of `f` w.r.t. every entry of parameter `id`.
pub fn numeric_grad(model: &Model, id: ParamId, eps: f64, f: &dyn Fn(&Model) -> f64) -> Matrix {
    let mut m = model.clone();
    let (r, c) = m.params.get(id).shape();
    let mut g = Matrix::zeros(r, c);
    for i in 0..r * c {
        let orig = m.params.get(id).data()[i];
        m.params.get_mut(id).data_mut()[i] = orig + eps;
        let up = f(&m);
        m.params.get_mut(id).data_mut()[i] = orig - eps;
        let down = f(&m);
        m.params.get_mut(id).data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; 0 when both are (numerically) zero.
pub fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.sum_sq().sqrt().max(b.sum_sq().sqrt());
    if scale < 1e-10 {
        0.0
    } else {
        diff / scale
    }
}

pub fn zero_like(store: &ParamStore, id: ParamId) -> Matrix {
    let (r, c) = store.get(id).shape();
    Matrix::zeros(r, c)
}

/// Worst relative error over all parameters of `model` for one weighted
/// combination of loss terms, with the offending parameter's name.
pub fn worst_gradient_error(model: &Model, batch: &ToyBatch, weights: &[(Term, f64)], eps: f64) -> (f64, String) {
    let (_, analytic) = weighted_loss(model, batch, weights);
    let f = |m: &Model| weighted_loss(m, batch, weights).0;
    let mut worst = (0.0, String::new());
    for id in model.params.ids() {
        let a = analytic.get(id).cloned().unwrap_or_else(|| zero_like(&model.params, id));
        let n = numeric_grad(model, id, eps, &f);
        let e = rel_err(&a, &n);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, model.params.name(id).to_owned());
        }
    }
    worst
}
