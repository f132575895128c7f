use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn pcirc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcirc")).args(args).env_remove("PCIRC_THREADS").output().expect("spawn pcirc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "pcirc failed: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A single variable with `n` equiprobable categories under a one-child sum.
fn uniform_model(n: u32) -> String {
    let mut out = format!("pcirc 1 1 2 {}\nI 0 0 {n} 0\nS 1 1 0 {n}\nPARAMS\n", n + 1);
    for _ in 0..n {
        let _ = writeln!(out, "{:e}", 1.0 / n as f64);
    }
    out.push_str("1e0\n");
    out
}

fn metric_value(out: &str, name: &str) -> f64 {
    let line = out.lines().find(|l| l.starts_with(&format!("metric={name} "))).expect("metric line");
    line.rsplit("value=").next().unwrap().parse().unwrap()
}

#[test]
fn build_is_deterministic_and_round_trips() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "pd.cfg");
    fs::write(&cfg, "# patch structure\nkind=pd\nshape=4x4\nhidden_dim=3\nnum_categories=4\nseed=7\n").unwrap();
    let (a, b) = (path(&dir, "a.pc"), path(&dir, "b.pc"));
    ok(pcirc(&["build", s(&cfg), "-o", s(&a)]));
    ok(pcirc(&["build", s(&cfg), "-o", s(&b)]));
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let g = pcirc_core::graph::parse_model(&text).unwrap();
    assert_eq!(pcirc_core::graph::write_model(&g), text);
}

#[test]
fn invalid_config_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "bad.cfg");
    fs::write(&cfg, "kind=hmm\nhidden_dim=0\n").unwrap();
    let o = pcirc(&["build", s(&cfg), "-o", s(&path(&dir, "x.pc"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!path(&dir, "x.pc").exists());
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(pcirc(&["eval"]).status.code(), Some(1));
    assert_eq!(pcirc(&["train", "m.pc", "d.csv", "-o", "x", "--em", "sometimes"]).status.code(), Some(1));
    assert_eq!(pcirc(&["--help"]).status.code(), Some(0));
}

#[test]
fn uniform_byte_model_has_eight_bits_per_dim() {
    let dir = TempDir::new().unwrap();
    let model = path(&dir, "u256.pc");
    fs::write(&model, uniform_model(256)).unwrap();
    let data = path(&dir, "d.csv");
    fs::write(&data, "0\n17\n255\n128\n?\n").unwrap();
    let bpd = metric_value(&ok(pcirc(&["eval", s(&model), s(&data), "--metric", "bpd"])), "bpd");
    // the missing row contributes log 1, so the mean is 4/5 of a byte
    assert!((bpd - 8.0 * 4.0 / 5.0).abs() < 1e-5, "bpd {bpd}");

    fs::write(&data, "0\n17\n255\n128\n").unwrap();
    let bpd = metric_value(&ok(pcirc(&["eval", s(&model), s(&data), "--metric", "bpd"])), "bpd");
    assert!((bpd - 8.0).abs() < 1e-5, "bpd {bpd}");
}

#[test]
fn uniform_coin_has_perplexity_two() {
    let dir = TempDir::new().unwrap();
    let model = path(&dir, "u2.pc");
    fs::write(&model, uniform_model(2)).unwrap();
    let data = path(&dir, "d.bin");
    let batch = pcirc_core::Batch::from_rows(1, [[Some(0)], [Some(1)], [Some(1)]].iter().map(|r| &r[..]));
    pcirc_core::data::save(&batch, &data).unwrap();
    let ppl = metric_value(&ok(pcirc(&["eval", s(&model), s(&data), "--metric", "ppl"])), "ppl");
    assert!((ppl - 2.0).abs() < 1e-5, "ppl {ppl}");
    let nll = metric_value(&ok(pcirc(&["eval", s(&model), s(&data)])), "nll");
    assert!((nll - std::f64::consts::LN_2).abs() < 1e-5);
}

#[test]
fn out_of_range_data_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let model = path(&dir, "u2.pc");
    fs::write(&model, uniform_model(2)).unwrap();
    let data = path(&dir, "d.csv");
    fs::write(&data, "0\n5\n").unwrap();
    assert_eq!(pcirc(&["eval", s(&model), s(&data)]).status.code(), Some(1));
}

#[test]
fn train_accepts_small_alpha_and_clips_batch_size() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "hmm.cfg");
    fs::write(&cfg, "kind=hmm\nseq_len=5\nhidden_dim=3\nvocab_size=4\nseed=1\n").unwrap();
    let model = path(&dir, "hmm.pc");
    ok(pcirc(&["build", s(&cfg), "-o", s(&model)]));
    let data = path(&dir, "d.csv");
    ok(pcirc(&["sample", s(&model), "-n", "40", "--seed", "3", "-o", s(&data)]));
    assert_eq!(fs::read_to_string(&data).unwrap().lines().count(), 40);

    let trained = path(&dir, "t.pc");
    let o = pcirc(&[
        "train",
        s(&model),
        s(&data),
        "-o",
        s(&trained),
        "--em",
        "mini",
        "--alpha",
        "0.01",
        "--epochs",
        "2",
        "--batch-size",
        "1000",
    ]);
    let err = String::from_utf8_lossy(&o.stderr).into_owned();
    let out = ok(o);
    assert!(err.contains("exceeds"), "expected a clipping warning, got {err:?}");
    assert_eq!(out.lines().filter(|l| l.starts_with("epoch=")).count(), 2);
    let g = pcirc_core::graph::parse_model(&fs::read_to_string(&trained).unwrap()).unwrap();
    assert!(g.validate().into_result().is_ok());
}

#[test]
fn full_em_improves_likelihood_and_uses_cache() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "hmm.cfg");
    fs::write(&cfg, "kind=hmm\nseq_len=6\nhidden_dim=4\nvocab_size=5\nseed=2\n").unwrap();
    let (truth, init) = (path(&dir, "truth.pc"), path(&dir, "init.pc"));
    ok(pcirc(&["build", s(&cfg), "-o", s(&truth)]));
    fs::write(&cfg, "kind=hmm\nseq_len=6\nhidden_dim=4\nvocab_size=5\nseed=9\n").unwrap();
    ok(pcirc(&["build", s(&cfg), "-o", s(&init)]));
    let data = path(&dir, "d.bin");
    ok(pcirc(&["sample", s(&truth), "-n", "500", "-o", s(&data)]));

    let cache = path(&dir, "init.cache");
    let trained = path(&dir, "t.pc");
    let out = ok(pcirc(&[
        "train", s(&init), s(&data), "-o", s(&trained), "--epochs", "5", "--block-size", "4", "--cache", s(&cache),
    ]));
    assert!(cache.exists());
    let lls: Vec<f64> = out
        .lines()
        .filter_map(|l| l.split_whitespace().find_map(|t| t.strip_prefix("mean_ll=")))
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(lls.len(), 5);
    assert!(lls.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{lls:?}");

    let before = metric_value(&ok(pcirc(&["eval", s(&init), s(&data), "--cache", s(&cache)])), "nll");
    let after = metric_value(&ok(pcirc(&["eval", s(&trained), s(&data)])), "nll");
    assert!(after < before, "nll {before} -> {after}");
}

#[test]
fn compile_and_bench_report() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "r.cfg");
    fs::write(&cfg, "kind=ratspn\nnum_vars=8\ndepth=2\nnum_sums_per_region=4\nnum_input_components=4\n").unwrap();
    let model = path(&dir, "r.pc");
    ok(pcirc(&["build", s(&cfg), "-o", s(&model)]));
    let cache = path(&dir, "r.cache");
    let desc = ok(pcirc(&["compile", s(&model), "--block-size", "4", "-o", s(&cache)]));
    assert!(desc.contains("layer 0"));
    assert!(fs::metadata(&cache).unwrap().len() > 0);

    let tsv = path(&dir, "b.tsv");
    ok(pcirc(&[
        "--threads", "2", "bench", s(&model), "--block-sizes", "1,4,128", "--repeats", "1", "--samples", "64", "-o",
        s(&tsv),
    ]));
    let report = fs::read_to_string(&tsv).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).take_while(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("1\t1\t"));
}
