mod common;

use std::path::Path;

use common::{toy_batch, toy_model, weighted_loss, Term};
use seqrec_core::config::{BackendKind, ClientKind, KvConfig};
use seqrec_core::datasets::Dataset;
use seqrec_core::evaluation::{evaluate, EvalOptions, Split};
use seqrec_core::model::load_checkpoint;
use seqrec_core::pipeline::{self, EmbedSettings};
use seqrec_core::provenance::file_hash;
use seqrec_core::semantic::{EmbeddingKind, TextSource};
use seqrec_core::synthetic::{self, planted, PlantedConfig};
use seqrec_core::train::{fit, FitOptions, SemanticInputs, TrainConfig};
use seqrec_core::{Error, Execution};

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        dim: 16,
        max_len: 12,
        batch_size: 64,
        lr: 0.005,
        dropout: 0.2,
        max_epochs: 4,
        patience: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn small_planted() -> synthetic::Planted {
    planted(&PlantedConfig {
        users: 120,
        items: 60,
        ..PlantedConfig::default()
    })
    .unwrap()
}

#[test]
fn total_gradient_is_the_weighted_sum_of_term_gradients() {
    let model = toy_model(8, 6, 4, 6, 21, 0.5);
    let batch = toy_batch(4, 6, 8, 6, 5);
    let (alpha, beta) = (0.3, 1.7);
    let (total, joint) = weighted_loss(&model, &batch, &[(Term::Rec, 1.0), (Term::Cs, alpha), (Term::Is, beta)]);
    let parts: Vec<_> = [(Term::Rec, 1.0), (Term::Cs, alpha), (Term::Is, beta)]
        .into_iter()
        .map(|(t, w)| (weighted_loss(&model, &batch, &[(t, 1.0)]), w))
        .collect();
    let summed: f64 = parts.iter().map(|((v, _), w)| v * w).sum();
    assert!((total - summed).abs() < 1e-12 * total.abs().max(1.0));
    for id in model.params.ids() {
        let mut expect = common::zero_like(&model.params, id);
        for ((_, g), w) in &parts {
            if let Some(g) = g.get(id) {
                let mut scaled = g.clone();
                scaled.scale_assign(*w);
                expect.add_assign(&scaled);
            }
        }
        let got = joint.get(id).cloned().unwrap_or_else(|| common::zero_like(&model.params, id));
        let err = common::rel_err(&got, &expect);
        assert!(err < 1e-10, "{}: {err}", model.params.name(id));
    }
}

#[test]
fn epoch_losses_fall_over_the_first_ten_epochs() {
    let data = planted(&PlantedConfig::default()).unwrap();
    let cfg = TrainConfig {
        max_epochs: 10,
        patience: 10,
        max_len: 12,
        ..TrainConfig::default()
    };
    let sem = SemanticInputs::build(data.user_cache, data.item_cache, cfg.k, Execution::Parallel).unwrap();
    let report = fit(&cfg, &data.dataset, Some(&sem), &FitOptions::default()).unwrap().report;
    assert_eq!(report.epochs.len(), 10);
    let totals: Vec<f64> = report.epochs.iter().map(|e| e.total).collect();
    for w in totals.windows(2) {
        assert!(w[1] < w[0], "epoch losses {totals:?}");
    }
}

#[test]
fn fit_leaves_the_frozen_caches_untouched() {
    let data = small_planted();
    let sums = (data.user_cache.checksum(), data.item_cache.checksum());
    let sem = SemanticInputs::build(data.user_cache, data.item_cache, 10, Execution::Parallel).unwrap();
    fit(&small_config(1), &data.dataset, Some(&sem), &FitOptions::default()).unwrap();
    assert_eq!((sem.user_cache.checksum(), sem.item_cache.checksum()), sums);
}

#[test]
fn contrastive_training_requires_semantic_inputs() {
    let data = small_planted();
    let err = fit(&small_config(1), &data.dataset, None, &FitOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let plain = TrainConfig {
        no_cs: true,
        no_is: true,
        ..small_config(1)
    };
    fit(&plain, &data.dataset, None, &FitOptions::default()).unwrap();
}

#[cfg(feature = "parallel")]
#[test]
fn parallel_and_sequential_runs_agree_bitwise() {
    let data = small_planted();
    let sem = SemanticInputs::build(data.user_cache, data.item_cache, 10, Execution::Parallel).unwrap();
    let run = |exec| {
        let opts = FitOptions {
            exec,
            ..FitOptions::default()
        };
        fit(&small_config(3), &data.dataset, Some(&sem), &opts).unwrap().report
    };
    let (a, b) = (run(Execution::Parallel), run(Execution::Sequential));
    assert_eq!(a.loss_trace(), b.loss_trace());
    assert_eq!(a.best_val_ndcg20, b.best_val_ndcg20);
}

#[test]
fn best_checkpoint_reproduces_its_validation_score() {
    let data = small_planted();
    let sem = SemanticInputs::build(data.user_cache, data.item_cache, 10, Execution::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = FitOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..FitOptions::default()
    };
    let out = fit(&small_config(4), &data.dataset, Some(&sem), &opts).unwrap();
    let best = out.report.best_val_ndcg20;
    assert_eq!(
        best,
        out.report.epochs.iter().map(|e| e.val_ndcg20).fold(f64::MIN, f64::max)
    );
    let eval_opts = EvalOptions {
        split: Split::Valid,
        ks: vec![20],
        group_edges: Vec::new(),
        filter_seen: false,
        exec: Execution::Parallel,
    };
    let from_outcome = evaluate(&out.model, &data.dataset, &eval_opts).unwrap().overall.ndcg(20);
    let restored = load_checkpoint(dir.path().join("best.ckpt")).unwrap();
    let from_disk = evaluate(&restored.model, &data.dataset, &eval_opts).unwrap().overall.ndcg(20);
    assert!((from_outcome - best).abs() <= 1e-7, "{from_outcome} vs {best}");
    assert!((from_disk - best).abs() <= 1e-7, "{from_disk} vs {best}");
    assert_eq!(restored.config_echo, small_config(4).echo());
}

fn toy_dataset(dir: &Path) -> Dataset {
    synthetic::write_toy(dir, 60, 30, 3).unwrap();
    pipeline::preprocess_stage(
        &dir.join("interactions.tsv"),
        Some(&dir.join("catalog.jsonl")),
        &dir.join("data"),
        5,
        12,
        "",
        0,
    )
    .unwrap()
}

#[test]
fn stub_caches_are_byte_identical_across_runs_and_cover_every_id() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = toy_dataset(dir.path());
    let settings = EmbedSettings {
        client: ClientKind::Stub,
        fixtures: None,
        backend: BackendKind::Stub,
        dim: 16,
        max_in_flight: 4,
        source: TextSource::Summary,
        seed: 0,
    };
    for kind in [EmbeddingKind::User, EmbeddingKind::Item] {
        let hashes: Vec<String> = ["a", "b"]
            .iter()
            .map(|run| {
                let path = dir.path().join(run).join(format!("{}.cache", kind.as_str()));
                let cache = pipeline::embed_stage(&dataset, kind, &settings, &path, "").unwrap();
                let n = match kind {
                    EmbeddingKind::User => dataset.num_users(),
                    EmbeddingKind::Item => dataset.num_items(),
                };
                assert!(cache.is_frozen());
                assert!((1..=n as u32).all(|id| cache.contains(id)));
                assert_eq!(cache.len(), n);
                file_hash(&path).unwrap()
            })
            .collect();
        assert_eq!(hashes[0], hashes[1], "{}", kind.as_str());
    }
}
