use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn seqrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqrec"))
        .args(args)
        .output()
        .expect("spawn seqrec")
}

fn toy_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy/toy.cfg")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn pipeline(out: &Path) -> Output {
    seqrec(&["pipeline", "--config", toy_cfg().to_str().unwrap(), "--out", out.to_str().unwrap()])
}

#[test]
fn pipeline_writes_a_report_and_every_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = pipeline(dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(report.lines().next().unwrap().starts_with("scope,metric,K,value"), "{report}");
    assert_eq!(String::from_utf8_lossy(&o.stdout), report);
    for stage in ["data/preprocess", "train/train", "pipeline", "caches/embed.user", "pools/index.user"] {
        let manifest = dir.path().join(format!("{stage}.manifest.json"));
        assert!(manifest.exists(), "missing {}", manifest.display());
    }
    // logs are JSON lines
    let first = stderr(&o).lines().next().unwrap_or_default().to_owned();
    assert!(first.starts_with('{') && first.contains("\"level\""), "{first}");
}

#[test]
fn same_seed_gives_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(pipeline(d.path()).status.success());
    }
    assert_eq!(
        fs::read(a.path().join("report.csv")).unwrap(),
        fs::read(b.path().join("report.csv")).unwrap()
    );
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let o = seqrec(&["index", "--k", "5", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--cache"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = seqrec(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dry_run_validates_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = seqrec(&["--dry-run", "pipeline", "--config", toy_cfg().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn stage_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tsv");
    let o = seqrec(&[
        "preprocess",
        "--interactions",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("data").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.tsv"), "{}", stderr(&o));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "dim = 30\nheads = 4\n").unwrap();
    let o = seqrec(&["pipeline", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn stages_chain_by_hand() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let ok = |args: &[&str]| {
        let o = seqrec(args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    ok(&["toy", "--out", &p("raw"), "--users", "60", "--items", "30"]);
    ok(&[
        "preprocess",
        "--interactions",
        &p("raw/interactions.tsv"),
        "--catalog",
        &p("raw/catalog.jsonl"),
        "--out",
        &p("data"),
        "--max-len",
        "12",
    ]);
    for kind in ["user", "item"] {
        ok(&["embed", "--data", &p("data"), "--kind", kind, "--dim", "16", "--out", &p(&format!("caches/{kind}.cache"))]);
        ok(&["index", "--cache", &p(&format!("caches/{kind}.cache")), "--k", "5", "--out", &p(&format!("pools/{kind}.pools"))]);
    }
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "dim = 16\nmax_len = 12\nk = 5\nmax_epochs = 2\nbatch_size = 32\n").unwrap();
    let cfg = cfg.to_str().unwrap();

    // contrastive training refuses to start without the semantic inputs
    let o = seqrec(&["train", "--config", cfg, "--data", &p("data"), "--out", &p("train")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--caches"), "{}", stderr(&o));

    ok(&[
        "train",
        "--config",
        cfg,
        "--data",
        &p("data"),
        "--caches",
        &p("caches"),
        "--pools",
        &p("pools"),
        "--out",
        &p("train"),
    ]);
    ok(&["eval", "--checkpoint", &p("train/best.ckpt"), "--data", &p("data"), "--out", &p("report.csv")]);
    let report = fs::read_to_string(p("report.csv")).unwrap();
    assert!(report.lines().count() >= 2, "{report}");
}
