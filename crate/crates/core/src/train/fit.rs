use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tracing::{info, warn};

use super::{EpochRecord, SemanticInputs, StepRecord, Targets, TrainConfig, TrainReport};
use crate::autograd::{Gradients, Tape};
use crate::config::KvConfig;
use crate::contrastive::{
    inter_user_loss_on_tape, intra_user_loss_on_tape, make_pair, sample_uniform_positive, synth_scores_on_tape,
    AugmentedPair,
};
use crate::datasets::{self, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalOptions, Split};
use crate::exec::{self, Execution};
use crate::model::{self, save_checkpoint, Checkpoint, Encoded, Model, ModelConfig};
use crate::optim::{clip_global_norm, Adam};
use crate::retrieval::{materialize_pools, Index, PoolSet};
use crate::rng::{self, purpose};
use crate::semantic::EmbeddingKind;
use crate::tensor::Matrix;

/// Sequences per gradient-reduction chunk. Fixed so that parallel and
/// sequential runs add the same numbers in the same order.
const CHUNK: usize = 8;
const PREFETCH: usize = 2;

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Where `best.ckpt`, `report.csv` and `config.echo` go.
    pub out_dir: Option<PathBuf>,
    pub exec: Execution,
    /// JSONL log of every augmented pair.
    pub dump_augmentations: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters of the best epoch, as stored in its checkpoint.
    pub model: Model,
    pub report: TrainReport,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub hr20: f64,
    pub ndcg20: f64,
}

struct Example {
    user: u32,
    input: Vec<u32>,
    targets: Vec<u32>,
}

fn examples(dataset: &Dataset, cfg: &TrainConfig) -> (Vec<Example>, Vec<Vec<u32>>) {
    let mut out = Vec::new();
    let mut rep_inputs = vec![Vec::new(); dataset.num_users() + 1];
    let mut skipped = 0;
    for s in &dataset.sequences {
        let prefix = datasets::train_prefix(&s.items);
        let m = prefix.len();
        if m < 2 {
            rep_inputs[s.user_id as usize] = datasets::truncate(prefix, cfg.max_len).to_vec();
            skipped += 1;
            continue;
        }
        let input = datasets::truncate(&prefix[..m - 1], cfg.max_len).to_vec();
        let targets = match cfg.targets {
            Targets::PerPosition => datasets::truncate(&prefix[1..], cfg.max_len).to_vec(),
            Targets::Final => vec![prefix[m - 1]],
        };
        rep_inputs[s.user_id as usize] = input.clone();
        out.push(Example {
            user: s.user_id,
            input,
            targets,
        });
    }
    if skipped > 0 {
        warn!(skipped, "users with fewer than 2 training items have no training target");
    }
    (out, rep_inputs)
}

struct BatchPlan {
    step: usize,
    members: Vec<usize>,
    views: Vec<AugmentedPair>,
    picks: Vec<Option<u32>>,
}

/// Per-epoch semantic state: fixed for semantic runs, rebuilt from the
/// backbone every epoch when semantics are ablated.
struct EpochSemantics<'a> {
    user_pools: Option<&'a PoolSet>,
    item_pools: Option<&'a PoolSet>,
    user_vecs: &'a [Vec<f64>],
}

struct Forward<'p> {
    tape: Tape<'p>,
    enc: Encoded,
}

fn forward<'p>(model: &'p Model, items: &[u32], dropout: ChaCha8Rng) -> Result<Forward<'p>> {
    let mut tape = Tape::new(&model.params);
    let enc = model::encode_on_tape(&mut tape, model, items, Some(dropout))?;
    Ok(Forward { tape, enc })
}

fn chunked<T>(items: Vec<T>) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    let mut it = items.into_iter().peekable();
    while it.peek().is_some() {
        out.push(it.by_ref().take(CHUNK).collect());
    }
    out
}

struct StepLosses {
    rec: f64,
    cs: Option<f64>,
    is: Option<f64>,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    exec: Execution,
    examples: Vec<Example>,
    rep_inputs: Vec<Vec<u32>>,
}

impl<'a> Trainer<'a> {
    fn plan_epoch(&self, epoch: usize, sem: &EpochSemantics<'_>, tx: mpsc::SyncSender<BatchPlan>) {
        let cfg = self.cfg;
        let seed = cfg.seed;
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[purpose::SHUFFLE, epoch as u64]));
        for (step, members) in order.chunks(cfg.batch_size).enumerate() {
            let n = members.len();
            let key = |p: u64, u: u32| rng::stream(seed, &[p, epoch as u64, step as u64, u64::from(u)]);
            let views = match sem.item_pools {
                Some(pools) if cfg.uses_is() && n >= 2 => members
                    .iter()
                    .map(|&i| {
                        let ex = &self.examples[i];
                        make_pair(&ex.input, pools, cfg.substitution_ratio, &mut key(purpose::AUGMENT, ex.user))
                    })
                    .collect(),
                _ => Vec::new(),
            };
            let picks = match sem.user_pools {
                Some(pools) if cfg.uses_cs() && cfg.no_learnable => members
                    .iter()
                    .map(|&i| {
                        let u = self.examples[i].user;
                        pools
                            .get(u)
                            .and_then(|p| sample_uniform_positive(p, &mut key(purpose::UNIFORM_POSITIVE, u)).ok())
                    })
                    .collect(),
                _ => Vec::new(),
            };
            let plan = BatchPlan {
                step,
                members: members.to_vec(),
                views,
                picks,
            };
            if tx.send(plan).is_err() {
                return;
            }
        }
    }

    fn step(&self, model: &Model, epoch: usize, plan: &BatchPlan, sem: &EpochSemantics<'_>) -> Result<(Gradients, StepLosses)> {
        let cfg = self.cfg;
        let exec = self.exec;
        let seed = cfg.seed;
        let step = plan.step;
        let key = |p: u64, u: u32, extra: &[u64]| {
            let mut parts = vec![p, epoch as u64, step as u64, u64::from(u)];
            parts.extend_from_slice(extra);
            rng::stream(seed, &parts)
        };
        let members: Vec<&Example> = plan.members.iter().map(|&i| &self.examples[i]).collect();
        let n = members.len();

        let mains: Vec<Forward<'_>> = exec::map(exec, &members, |ex| {
            forward(model, &ex.input, key(purpose::DROPOUT_MAIN, ex.user, &[]))
        })
        .into_iter()
        .collect::<Result<_>>()?;

        // Anchors with a non-empty pool, and the candidate users each mixes.
        let mut anchors: Vec<(usize, Vec<u32>)> = Vec::new();
        if let (Some(pools), true) = (sem.user_pools, cfg.uses_cs() && n >= 2) {
            for (i, ex) in members.iter().enumerate() {
                let cands: Vec<u32> = if cfg.no_learnable {
                    plan.picks.get(i).copied().flatten().into_iter().collect()
                } else {
                    pools.get(ex.user).map(|p| p.ids().collect()).unwrap_or_default()
                };
                if !cands.is_empty() {
                    anchors.push((i, cands));
                }
            }
        }
        if anchors.len() < 2 {
            anchors.clear();
        }
        let cs_active = !anchors.is_empty();
        let is_active = !plan.views.is_empty();

        let mut row_of: HashMap<u32, usize> = members.iter().enumerate().map(|(i, ex)| (ex.user, i)).collect();
        let extras: Vec<u32> = anchors
            .iter()
            .flat_map(|(_, c)| c.iter().copied())
            .filter(|u| !row_of.contains_key(u))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        for (j, &u) in extras.iter().enumerate() {
            row_of.insert(u, n + j);
        }
        let extra_fw: Vec<Forward<'_>> = exec::map(exec, &extras, |&u| {
            forward(model, &self.rep_inputs[u as usize], key(purpose::DROPOUT_CANDIDATE, u, &[]))
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let view_jobs: Vec<(u32, usize, &[u32])> = plan
            .views
            .iter()
            .zip(&members)
            .flat_map(|(pair, ex)| [(ex.user, 0, &pair.first.items[..]), (ex.user, 1, &pair.second.items[..])])
            .collect();
        let view_fw: Vec<Forward<'_>> = exec::map(exec, &view_jobs, |&(u, v, items)| {
            forward(model, items, key(purpose::DROPOUT_VIEW, u, &[v as u64]))
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let mut grads = Gradients::for_store(&model.params);
        let mut losses = StepLosses {
            rec: 0.0,
            cs: None,
            is: None,
        };
        let mut last_grads: Vec<Option<Vec<f64>>> = vec![None; n + extras.len()];
        let mut view_grads: Vec<Option<Vec<f64>>> = vec![None; view_fw.len()];

        if cs_active || is_active {
            let mut bt = Tape::new(&model.params);
            let mut terms = Vec::new();
            let mut h_all_var = None;
            if cs_active {
                let rows: Vec<&[f64]> = mains
                    .iter()
                    .chain(&extra_fw)
                    .map(|f| f.tape.value(f.enc.last).data())
                    .collect();
                let h_all = Matrix::from_rows(&rows);
                let h = bt.leaf(h_all.clone());
                h_all_var = Some(h);
                let src = if cfg.detach_candidates { bt.leaf(h_all) } else { h };
                let mut positives = Vec::with_capacity(anchors.len());
                for (i, cands) in &anchors {
                    let idx: Vec<usize> = cands.iter().map(|c| row_of[c]).collect();
                    let r = bt.gather_rows(src, &idx);
                    if cfg.no_learnable {
                        positives.push(r);
                    } else {
                        let user = members[*i].user;
                        let cand_sem: Vec<&[f64]> = cands.iter().map(|&c| &sem.user_vecs[c as usize][..]).collect();
                        let p = synth_scores_on_tape(
                            &mut bt,
                            model,
                            user,
                            &sem.user_vecs[user as usize],
                            &Matrix::from_rows(&cand_sem),
                        )?;
                        positives.push(bt.matmul(p, r));
                    }
                }
                let anchor_rows: Vec<usize> = anchors.iter().map(|(i, _)| *i).collect();
                let ha = bt.gather_rows(h, &anchor_rows);
                let hp = bt.concat_rows(&positives);
                let l = inter_user_loss_on_tape(&mut bt, ha, hp, cfg.cl_temperature)?;
                losses.cs = Some(bt.scalar(l));
                terms.push((l, cfg.alpha));
            }
            let mut view_vars = None;
            if is_active {
                let rows = |parity: usize| -> Matrix {
                    let r: Vec<&[f64]> = view_fw
                        .iter()
                        .skip(parity)
                        .step_by(2)
                        .map(|f| f.tape.value(f.enc.last).data())
                        .collect();
                    Matrix::from_rows(&r)
                };
                let v1 = bt.leaf(rows(0));
                let v2 = bt.leaf(rows(1));
                let l = intra_user_loss_on_tape(&mut bt, v1, v2, cfg.cl_temperature)?;
                losses.is = Some(bt.scalar(l));
                terms.push((l, cfg.beta));
                view_vars = Some((v1, v2));
            }
            let aux = bt.weighted_sum(&terms);
            let ng = bt.backward(&[(aux, Matrix::scalar(1.0))], &mut grads);
            if let Some(g) = h_all_var.and_then(|v| ng.get(v)) {
                for (r, slot) in last_grads.iter_mut().enumerate() {
                    *slot = Some(g.row(r).to_vec());
                }
            }
            if let Some((v1, v2)) = view_vars {
                for (parity, v) in [v1, v2].into_iter().enumerate() {
                    if let Some(g) = ng.get(v) {
                        for i in 0..n {
                            view_grads[2 * i + parity] = Some(g.row(i).to_vec());
                        }
                    }
                }
            }
        }

        let total_targets: usize = members.iter().map(|e| e.targets.len()).sum();
        let rec_scale = 1.0 / total_targets as f64;
        let mut extra_last = last_grads.split_off(n);
        if cfg.detach_candidates {
            extra_last.clear();
        }

        let main_jobs: Vec<_> = mains.into_iter().zip(members.iter().copied()).zip(last_grads).collect();
        let main_parts = exec::map_owned(exec, chunked(main_jobs), |chunk| {
            let mut g = Gradients::for_store(&model.params);
            let mut rec = 0.0;
            for ((mut f, ex), lg) in chunk {
                let h = match cfg.targets {
                    Targets::PerPosition => f.enc.states,
                    Targets::Final => f.enc.last,
                };
                let l = model::rec_loss_on_tape(&mut f.tape, model, h, &ex.targets);
                rec += f.tape.scalar(l);
                let mut seeds = vec![(l, Matrix::scalar(rec_scale))];
                if let Some(lg) = lg {
                    seeds.push((f.enc.last, Matrix::row_vector(lg)));
                }
                f.tape.backward(&seeds, &mut g);
            }
            (g, rec)
        });
        let aux_jobs: Vec<(Forward<'_>, Vec<f64>)> = extra_fw
            .into_iter()
            .zip(extra_last)
            .chain(view_fw.into_iter().zip(view_grads))
            .filter_map(|(f, g)| g.map(|g| (f, g)))
            .collect();
        let aux_parts = exec::map_owned(exec, chunked(aux_jobs), |chunk| {
            let mut g = Gradients::for_store(&model.params);
            for (f, lg) in chunk {
                f.tape.backward(&[(f.enc.last, Matrix::row_vector(lg))], &mut g);
            }
            g
        });
        for (g, rec) in &main_parts {
            grads.merge(g);
            losses.rec += rec;
        }
        for g in &aux_parts {
            grads.merge(g);
        }
        losses.rec *= rec_scale;
        Ok((grads, losses))
    }
}

fn model_config(cfg: &TrainConfig, dataset: &Dataset, semantic: Option<&SemanticInputs>) -> ModelConfig {
    let semantic_dim = if cfg.uses_cs() && !cfg.no_learnable {
        if cfg.no_semantic {
            cfg.dim
        } else {
            semantic.map_or(0, |s| s.user_cache.dim())
        }
    } else {
        0
    };
    ModelConfig {
        num_items: dataset.num_items(),
        max_len: cfg.max_len,
        dim: cfg.dim,
        layers: cfg.layers,
        heads: cfg.heads,
        dropout: cfg.dropout,
        semantic_dim,
        leaky_slope: cfg.leaky_slope,
    }
}

/// Pools and synthesizer inputs from the backbone itself: users by their
/// current eval-mode representation, items by their embedding rows.
fn backbone_semantics(
    model: &Model,
    rep_inputs: &[Vec<u32>],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(PoolSet, PoolSet, Vec<Vec<f64>>)> {
    let users: Vec<u32> = (1..rep_inputs.len() as u32).collect();
    let reps: Vec<Vec<f64>> = exec::map(exec, &users, |&u| model::represent(model, &rep_inputs[u as usize]).map(|r| r.last))
        .into_iter()
        .collect::<Result<_>>()?;
    let user_index = Index::from_vectors(users.iter().copied().zip(reps.iter().cloned()).collect())?;
    let m = model.item_embeddings();
    let item_index = Index::from_vectors((1..m.rows()).map(|v| (v as u32, m.row(v).to_vec())).collect())?;
    let mut vecs = vec![Vec::new()];
    vecs.extend(reps);
    Ok((
        materialize_pools(&user_index, EmbeddingKind::User, cfg.k_for(EmbeddingKind::User), exec)?,
        materialize_pools(&item_index, EmbeddingKind::Item, cfg.k_for(EmbeddingKind::Item), exec)?,
        vecs,
    ))
}

pub fn fit(
    cfg: &TrainConfig,
    dataset: &Dataset,
    semantic: Option<&SemanticInputs>,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    let eval_opts = EvalOptions {
        split: Split::Valid,
        ks: vec![20],
        group_edges: Vec::new(),
        filter_seen: false,
        exec: opts.exec,
    };
    let mut validator = |m: &Model, _epoch: usize| -> Result<Validation> {
        let ev = evaluation::evaluate(m, dataset, &eval_opts)?;
        Ok(Validation {
            hr20: ev.overall.hr(20),
            ndcg20: ev.overall.ndcg(20),
        })
    };
    fit_with_validator(cfg, dataset, semantic, opts, &mut validator)
}

/// [`fit`] with the per-epoch validation metric supplied by the caller.
pub fn fit_with_validator(
    cfg: &TrainConfig,
    dataset: &Dataset,
    semantic: Option<&SemanticInputs>,
    opts: &FitOptions,
    validator: &mut dyn FnMut(&Model, usize) -> Result<Validation>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let needs_semantic = !cfg.backbone_only() && !cfg.no_semantic;
    match semantic {
        Some(s) => s.check(dataset)?,
        None if needs_semantic => {
            return Err(Error::Config(
                "contrastive training needs frozen semantic caches and pools".into(),
            ))
        }
        None => {}
    }
    let echo = cfg.echo();
    let mut model = Model::new(model_config(cfg, dataset, semantic), cfg.seed)?;
    let (examples, rep_inputs) = examples(dataset, cfg);
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no user has a training target".into()));
    }
    let trainer = Trainer {
        cfg,
        exec: opts.exec,
        examples,
        rep_inputs,
    };
    let fixed_vecs: Vec<Vec<f64>> = match semantic {
        Some(s) if !cfg.no_semantic => {
            let mut v = vec![Vec::new(); dataset.num_users() + 1];
            for (id, x) in s.user_cache.iter() {
                v[id as usize] = x.iter().map(|&f| f64::from(f)).collect();
            }
            v
        }
        _ => Vec::new(),
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.echo");
        fs::write(&p, &echo).map_err(|e| Error::io(&p, e))?;
    }
    let mut dump = match &opts.dump_augmentations {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };

    let mut opt = Adam::new(&model.params, cfg.lr);
    let mut report = TrainReport {
        best_val_ndcg20: f64::NEG_INFINITY,
        ..TrainReport::default()
    };
    let mut best: Option<Vec<u8>> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let rebuilt = if cfg.no_semantic && !cfg.backbone_only() {
            Some(backbone_semantics(&model, &trainer.rep_inputs, cfg, opts.exec)?)
        } else {
            None
        };
        let sem = match (&rebuilt, semantic) {
            (Some((up, ip, vecs)), _) => EpochSemantics {
                user_pools: Some(up),
                item_pools: Some(ip),
                user_vecs: vecs,
            },
            (None, Some(s)) => EpochSemantics {
                user_pools: Some(&s.user_pools),
                item_pools: Some(&s.item_pools),
                user_vecs: &fixed_vecs,
            },
            (None, None) => EpochSemantics {
                user_pools: None,
                item_pools: None,
                user_vecs: &[],
            },
        };
        let sem = if cfg.backbone_only() {
            EpochSemantics {
                user_pools: None,
                item_pools: None,
                user_vecs: &[],
            }
        } else {
            sem
        };

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut counts = (0usize, 0usize, 0usize);
        let step_result: Result<()> = std::thread::scope(|scope| {
            let (tx, rx) = mpsc::sync_channel(PREFETCH);
            let trainer = &trainer;
            let sem_ref = &sem;
            scope.spawn(move || trainer.plan_epoch(epoch, sem_ref, tx));
            for plan in rx {
                if let Some(w) = dump.as_mut() {
                    for (pair, &i) in plan.views.iter().zip(&plan.members) {
                        let line = json!({
                            "epoch": epoch,
                            "step": plan.step,
                            "user": trainer.examples[i].user,
                            "pair": pair,
                        });
                        writeln!(w, "{line}").map_err(|e| Error::io("augmentation dump", e))?;
                    }
                }
                let (mut grads, l) = trainer.step(&model, epoch, &plan, &sem)?;
                let total = l.rec + cfg.alpha * l.cs.unwrap_or(0.0) + cfg.beta * l.is.unwrap_or(0.0);
                let finite = total.is_finite() && grads.all_finite();
                if !finite {
                    let detail = format!("rec={} cs={:?} is={:?} grad_norm={}", l.rec, l.cs, l.is, grads.global_norm());
                    if let Some(dir) = &opts.out_dir {
                        save_checkpoint(&model, &echo, dir.join("last_good.ckpt"))?;
                        let diag = json!({"epoch": epoch, "step": plan.step, "rec": l.rec, "cs": l.cs, "is": l.is});
                        let p = dir.join("diagnostics.json");
                        fs::write(&p, diag.to_string()).map_err(|e| Error::io(&p, e))?;
                    }
                    return Err(Error::Diverged {
                        epoch,
                        step: plan.step,
                        detail,
                    });
                }
                clip_global_norm(&mut grads, cfg.grad_clip);
                opt.step(&mut model.params, &grads);
                report.steps.push(StepRecord {
                    epoch,
                    step: plan.step,
                    l_rec: l.rec,
                    l_cs: l.cs,
                    l_is: l.is,
                    total,
                });
                sums.0 += l.rec;
                sums.3 += total;
                counts.0 += 1;
                if let Some(c) = l.cs {
                    sums.1 += c;
                    counts.1 += 1;
                }
                if let Some(i) = l.is {
                    sums.2 += i;
                    counts.2 += 1;
                }
            }
            Ok(())
        });
        step_result?;
        drop(rebuilt);

        let val = validator(&model, epoch)?;
        let mean = |s: f64, c: usize| (c > 0).then(|| s / c as f64);
        let record = EpochRecord {
            epoch,
            l_rec: sums.0 / counts.0 as f64,
            l_cs: mean(sums.1, counts.1),
            l_is: mean(sums.2, counts.2),
            total: sums.3 / counts.0 as f64,
            val_hr20: val.hr20,
            val_ndcg20: val.ndcg20,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        info!(
            stage = "train",
            epoch,
            l_rec = record.l_rec,
            total = record.total,
            val_ndcg20 = val.ndcg20,
            "epoch done"
        );
        report.epochs.push(record);
        if val.ndcg20 > report.best_val_ndcg20 {
            report.best_val_ndcg20 = val.ndcg20;
            report.best_epoch = epoch;
            since_best = 0;
            let bytes = Checkpoint::to_bytes(&model, &echo);
            if let Some(dir) = &opts.out_dir {
                let p = dir.join("best.ckpt");
                fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
                report.checkpoint = Some(p);
            }
            best = Some(bytes);
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some(w) = dump.as_mut() {
        w.flush().map_err(|e| Error::io("augmentation dump", e))?;
    }
    let best = best.ok_or_else(|| Error::InvalidArgument("validation never produced a finite metric".into()))?;
    let model = Checkpoint::from_bytes(&best)?.model;
    if let Some(dir) = &opts.out_dir {
        report.write_csv(dir.join("report.csv"))?;
    }
    Ok(FitOutcome { model, report })
}
