use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bigs_core::analysis::first_layer_forward_branch;
use bigs_core::cli::load_dataset;
use bigs_core::model::load_checkpoint;
use bigs_core::pretrain::IGNORE;

fn bigs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bigs")).args(args).output().expect("spawn bigs")
}

fn ok(args: &[&str]) -> String {
    let out = bigs(args);
    assert!(
        out.status.success(),
        "bigs {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = bigs(args);
    assert!(!out.status.success(), "bigs {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn prepare_is_byte_identical_for_a_seed() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    let small = ["--set", "synthetic_docs=300"];
    ok(&[&["--seed", "3", "--out", s(&a)], &small[..], &["prepare"]].concat());
    ok(&[&["--seed", "3", "--out", s(&b)], &small[..], &["prepare"]].concat());
    ok(&[&["--seed", "4", "--out", s(&c)], &small[..], &["prepare"]].concat());
    let (fa, fb, fc) = (files(&a), files(&b), files(&c));
    assert!(fa.iter().any(|(n, _)| n == "train-00000.bin"));
    for name in ["vocab.txt", "heldout.bin", "stats.json", "config.toml"] {
        assert!(fa.iter().any(|(n, _)| n == name), "{name} missing");
    }
    assert_eq!(fa, fb);
    let shard = |f: &[(String, Vec<u8>)]| f.iter().find(|(n, _)| n == "heldout.bin").unwrap().1.clone();
    assert_ne!(shard(&fa), shard(&fc));
}

#[test]
fn tiny_corpus_round_trips_through_the_vocabulary() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("corpus.txt");
    let lines = ["the cat sat on the mat", "a dog ran to the park", "the bird sang a song"];
    fs::write(&corpus, lines.join("\n")).unwrap();
    let out = t.path().join("data");
    ok(&["--out", s(&out), "--set", "n_shards=1", "--set", "heldout_frac=0.34", "prepare", "--corpus", s(&corpus)]);
    let data = load_dataset(&out).unwrap();
    for sh in [&data.train, &data.heldout] {
        for i in 0..sh.len() {
            let (ids, labels) = sh.sequence(i);
            let original: Vec<u32> = ids
                .iter()
                .zip(labels)
                .map(|(&id, &l)| if l == IGNORE { id } else { l as u32 })
                .collect();
            let text = data.vocab.decode(&original);
            assert!(lines.iter().any(|l| text.trim_end().starts_with(l)), "`{text}`");
        }
    }
}

#[test]
fn masking_statistics_are_reported() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("data");
    ok(&["--seed", "1", "--out", s(&out), "--set", "synthetic_docs=3000", "prepare"]);
    let st = json(out.join("stats.json"));
    assert!(st["masking"]["eligible"].as_u64().unwrap() >= 100_000);
    let f = st["selected_fraction"].as_f64().unwrap();
    assert!((0.14..=0.16).contains(&f), "{f}");
}

#[test]
fn bad_inputs_exit_nonzero() {
    let t = tempfile::tempdir().unwrap();
    let o = t.path().join("o");
    let empty = t.path().join("empty.txt");
    fs::write(&empty, "\n\n").unwrap();
    assert!(fails(&["--out", s(&o), "prepare", "--corpus", s(&empty)]).contains("empty corpus"));
    fails(&["--out", s(&o), "prepare", "--corpus", s(&t.path().join("missing.txt"))]);
    fails(&["--out", s(&o), "train", "--data", s(&t.path().join("nodata"))]);
    fails(&["--out", s(&o), "eval", "--data", s(&t.path().join("nodata"))]);
    fails(&["--out", s(&o), "dump-kernels", "--checkpoint", s(&t.path().join("nockpt"))]);
    assert!(fails(&["--out", s(&o), "--set", "no_such_key=1", "flops"]).contains("no_such_key"));
    fails(&["--out", s(&o), "--set", "mask_rate=2", "flops"]);
}

#[test]
fn flops_emits_eight_totals() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("f");
    ok(&["--out", s(&out), "flops"]);
    let table = fs::read_to_string(out.join("flops_table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    let csv = fs::read_to_string(out.join("flops.csv")).unwrap();
    assert!(csv.starts_with("model,length,component,flops\n"));
    assert_eq!(csv.lines().filter(|l| l.contains(",total,")).count(), 8);
    assert!(out.join("config.toml").is_file());
}

#[test]
fn config_file_overrides_and_snapshot() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("run.toml");
    fs::write(&cfg, "seed = 5\n[model]\nd_model = 32\n[data]\nmask_rate = 0.2\n").unwrap();
    let out = t.path().join("f");
    ok(&["--config", s(&cfg), "--set", "mask_rate=0.1", "--out", s(&out), "flops"]);
    let snap = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(snap.contains("seed = 5"));
    assert!(snap.contains("d_model = 32"));
    assert!(snap.contains("mask_rate = 0.1"));
    // The snapshot is itself a valid config that resolves to the same run.
    let again = t.path().join("g");
    ok(&["--config", s(&out.join("config.toml")), "--out", s(&again), "flops"]);
    assert_eq!(fs::read_to_string(again.join("config.toml")).unwrap(), snap);
    let seeded = t.path().join("h");
    ok(&["--config", s(&cfg), "--seed", "9", "--out", s(&seeded), "flops"]);
    assert!(fs::read_to_string(seeded.join("config.toml")).unwrap().contains("seed = 9"));
}

#[test]
fn train_eval_extend_dump_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let p = |n: &str| t.path().join(n);
    ok(&["--seed", "11", "--out", s(&p("data")), "prepare"]);

    // Untrained model: uniform over its output vocabulary.
    ok(&["--seed", "11", "--out", s(&p("eval0")), "eval", "--data", s(&p("data"))]);
    let e = json(p("eval0").join("eval.json"));
    let ppl = e["perplexity"].as_f64().unwrap();
    assert!((ppl - 512.0).abs() < 51.2, "untrained perplexity {ppl}");

    ok(&[
        "--seed", "11", "--out", s(&p("run")), "--set", "steps=500", "--set", "eval_every=50",
        "--set", "target_ppl_ratio=0.5", "train", "--data", s(&p("data")),
    ]);
    let r = json(p("run").join("report.json"));
    let (a, b) = (
        r["initial_eval"]["perplexity"].as_f64().unwrap(),
        r["final_eval"]["perplexity"].as_f64().unwrap(),
    );
    assert!(b < 0.5 * a, "perplexity {a} -> {b}");
    assert!(r["final_step"].as_u64().unwrap() <= 500);
    for f in ["loss.csv", "eval.csv", "config.toml", "checkpoint/manifest.json", "checkpoint/params.bin"] {
        assert!(p("run").join(f).is_file(), "{f} missing");
    }

    ok(&["--out", s(&p("eval1")), "eval", "--checkpoint", s(&p("run/checkpoint")), "--data", s(&p("data"))]);
    let e1 = json(p("eval1").join("eval.json"))["perplexity"].as_f64().unwrap();
    assert!((e1 - b).abs() < 1e-9 * b, "{e1} vs {b}");

    // Kernel dump, twice, byte-identical.
    for d in ["k1", "k2"] {
        ok(&["--out", s(&p(d)), "dump-kernels", "--checkpoint", s(&p("run/checkpoint"))]);
    }
    assert_eq!(files(&p("k1")).into_iter().filter(|(n, _)| n != "config.toml").collect::<Vec<_>>(),
               files(&p("k2")).into_iter().filter(|(n, _)| n != "config.toml").collect::<Vec<_>>());
    let csv = fs::read_to_string(p("k1").join("kernels.csv")).unwrap();
    let groups: std::collections::BTreeSet<(String, String)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let n: f64 = f[4].parse().unwrap();
            assert!((0.0..=1.0).contains(&n));
            (f[0].to_string(), f[1].to_string())
        })
        .collect();
    assert_eq!(groups.len(), 4);

    // Extension with no further steps keeps prefix activations exactly.
    ok(&["--seed", "11", "--out", s(&p("data128")), "--set", "max_len=128", "--set", "synthetic_docs=400", "prepare"]);
    ok(&[
        "--out", s(&p("ext")), "extend", "--checkpoint", s(&p("run/checkpoint")), "--data", s(&p("data128")),
        "--new-len", "128", "--steps", "0",
    ]);
    let before = load_checkpoint(&p("run/checkpoint")).unwrap().model().unwrap();
    let after = load_checkpoint(&p("ext/checkpoint")).unwrap().model().unwrap();
    assert_eq!(after.cfg.max_len, 128);
    let long: Vec<u32> = (0..128).map(|i| 5 + (i * 7 % 300) as u32).collect();
    let x = first_layer_forward_branch(&before, &long[..32]).unwrap();
    let y = first_layer_forward_branch(&after, &long).unwrap();
    let diff = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10, "{diff}");

    // A few real extension steps run and report.
    ok(&[
        "--out", s(&p("ext2")), "--set", "eval_every=5", "extend", "--checkpoint", s(&p("run/checkpoint")),
        "--data", s(&p("data128")), "--new-len", "128", "--steps", "5", "--lr", "1e-4",
    ]);
    assert!(json(p("ext2").join("report.json"))["final_step"].as_u64().unwrap() >= 5);
}
