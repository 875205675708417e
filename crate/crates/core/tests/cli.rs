use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kvtune::cachepool::{read_chunk_file, CtkvLayout};
use kvtune::cli::GeometryArgs;
use kvtune::pipesim::build_count_plan;
use kvtune::scheduler::{ttft_model, HardwareProfile};
use kvtune::spectral::selection_count;

fn kvtune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvtune"))
        .current_dir(dir)
        .env_remove("CACHETUNE_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = kvtune(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|rest| rest.split_whitespace().next()))
        .unwrap_or_else(|| panic!("no `{key}` in {text}"))
        .parse()
        .unwrap()
}

fn ranking_block(path: &Path) -> Vec<u8> {
    let (chunk, _) = read_chunk_file(path).unwrap();
    let bytes = fs::read(path).unwrap();
    let layout = CtkvLayout::new(chunk.geometry(), chunk.dtype);
    bytes[layout.kv_end()..].to_vec()
}

#[test]
fn analyze_is_deterministic_and_defaults_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let spec = "N=64,H=2,D=8,L=4,seed=7";
    let first = ok(dir.path(), &["analyze", "--synthetic", spec, "--out", "a.ctkv"]);
    ok(dir.path(), &["analyze", "--synthetic", spec, "--out", "b.ctkv"]);
    assert!(first.contains("alpha 0.5"));
    let (a, b) = (ranking_block(&dir.path().join("a.ctkv")), ranking_block(&dir.path().join("b.ctkv")));
    assert!(!a.is_empty());
    assert_eq!(a, b);

    let (_, ranking) = read_chunk_file(&dir.path().join("a.ctkv")).unwrap();
    let ranking = ranking.expect("ranking written");
    assert_eq!(ranking.alpha, 0.5);
    assert_eq!(ranking.indices_for_ratio(0.15).unwrap().len(), (0.15f64 * 64.0).ceil() as usize);
}

#[test]
fn analyze_in_place_and_seed_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let via_env = Command::new(env!("CARGO_BIN_EXE_kvtune"))
        .current_dir(dir.path())
        .env("CACHETUNE_SEED", "21")
        .args(["analyze", "--synthetic", "N=32,H=1,D=4,L=2", "--out", "env.ctkv"])
        .output()
        .unwrap();
    assert!(via_env.status.success());
    ok(dir.path(), &["--seed", "21", "analyze", "--synthetic", "N=32,H=1,D=4,L=2", "--out", "flag.ctkv"]);
    assert_eq!(fs::read(dir.path().join("env.ctkv")).unwrap(), fs::read(dir.path().join("flag.ctkv")).unwrap());

    let out = ok(dir.path(), &["analyze", "--input", "flag.ctkv", "--alpha", "0.25"]);
    assert!(out.contains("alpha 0.25"));
    let (_, r) = read_chunk_file(&dir.path().join("flag.ctkv")).unwrap();
    assert_eq!(r.unwrap().alpha, 0.25);
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.ctkv"), b"NOPE0000").unwrap();
    for args in [
        &["analyze", "--input", "bad.ctkv"][..],
        &["analyze", "--input", "missing.ctkv"],
        &["analyze", "--synthetic", "N=8,D=3"],
        &["simulate", "--sweep", "0.9:0.1:0.1"],
        &["simulate", "--r", "1.5"],
        &["attn-experiment", "--strategy", "bogus"],
        &["pool-put", "--tier", "hdd", "--input", "bad.ctkv"],
        &["simulate", "--no-such-flag"],
    ] {
        let out = kvtune(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn pool_put_then_fetch() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["analyze", "--synthetic", "N=40,H=2,D=8,L=3", "--out", "c.ctkv"]);
    let put = ok(dir.path(), &["pool-put", "--tier", "ssd", "--pool-dir", "pool", "--input", "c.ctkv", "--id", "doc"]);
    assert!(put.contains("chunk doc"));
    assert!(dir.path().join("pool/doc.ctkv").exists());
    let again = kvtune(dir.path(), &["pool-put", "--tier", "ssd", "--pool-dir", "pool", "--input", "c.ctkv", "--id", "doc"]);
    assert_eq!(again.status.code(), Some(2));

    let got = ok(dir.path(), &["pool-fetch", "--tier", "ssd", "--pool-dir", "pool", "--id", "doc", "--layer", "2", "--r", "0.25"]);
    let keep = 40 - selection_count(40, 0.25);
    assert_eq!(field(&got, "keep_tokens ") as usize, keep);
    assert_eq!(field(&got, "bytes_read ") as usize, keep * 2 * 8 * 4 * 2);
    assert_eq!(field(&got, "expected_bytes ") as usize, keep * 2 * 8 * 4 * 2);
}

#[test]
fn calibrate_sim_orders_tiers() {
    let dir = tempfile::tempdir().unwrap();
    let hdd = ok(dir.path(), &["calibrate", "--tier", "hdd", "--out", "hdd.txt"]);
    let cpu = ok(dir.path(), &["calibrate", "--tier", "cpu-mem", "--out", "cpu.txt"]);
    assert!(field(&hdd, "r_star ") > field(&cpu, "r_star "));
    let report = fs::read_to_string(dir.path().join("hdd.txt")).unwrap();
    assert!(report.contains("cal_size 10"));
    assert!(report.contains("epsilon 0.01"));
    let evals = field(&report, "evals ");
    assert!(evals <= 11.0);
    assert_eq!(report.lines().filter(|l| l.starts_with("trace ") && !l.starts_with("trace iter")).count(), evals as usize);
}

#[test]
fn calibrate_real_evaluator_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["calibrate", "--tier", "ssd", "--pool-dir", "pool", "--evaluator", "real", "--cal-n", "2", "--out", "real.txt"]);
    let r = field(&out, "r_star ");
    assert!((0.15..=0.9).contains(&r));
    let report = fs::read_to_string(dir.path().join("real.txt")).unwrap();
    assert!(report.contains("measured"));
}

#[test]
fn simulate_is_deterministic_with_regime_split() {
    let dir = tempfile::tempdir().unwrap();
    for (tier, out) in [("hdd", "h1"), ("hdd", "h2"), ("cpu-mem", "c1")] {
        ok(dir.path(), &["simulate", "--tier", tier, "--sweep", "0:1:0.05", "--out-dir", out, "--svg"]);
    }
    let h1 = fs::read(dir.path().join("h1/sweep.csv")).unwrap();
    assert_eq!(h1, fs::read(dir.path().join("h2/sweep.csv")).unwrap());
    assert!(dir.path().join("h1/sweep.svg").exists());
    assert_eq!(h1.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count(), 22);

    let hdd = ok(dir.path(), &["simulate", "--tier", "hdd", "--sweep", "0:1:0.05", "--out-dir", "h3"]);
    let cpu = ok(dir.path(), &["simulate", "--tier", "cpu-mem", "--sweep", "0:1:0.05", "--out-dir", "c2"]);
    assert!(field(&hdd, "grid_argmin ") > 0.15);
    assert_eq!(field(&cpu, "grid_argmin "), 0.15);

    ok(dir.path(), &["simulate", "--tier", "hdd", "--r", "0.4", "--out-dir", "t1"]);
    ok(dir.path(), &["simulate", "--tier", "hdd", "--r", "0.4", "--out-dir", "t2", "--svg"]);
    assert_eq!(fs::read(dir.path().join("t1/timeline.csv")).unwrap(), fs::read(dir.path().join("t2/timeline.csv")).unwrap());
    assert!(dir.path().join("t2/timeline.svg").exists());
}

#[test]
fn simulate_endpoints_match_model_within_bubble() {
    let dir = tempfile::tempdir().unwrap();
    let g = GeometryArgs::default();
    let p: HardwareProfile = g.profile(&kvtune::cachepool::TierConfig::ssd()).unwrap();
    for r in [0.0, 1.0] {
        let out = ok(dir.path(), &["simulate", "--tier", "ssd", "--r", &r.to_string(), "--out-dir", "e"]);
        let sim = field(&out, "ttft_s ");
        let plan = build_count_plan(&vec![g.chunk_len; g.chunks], g.heads, g.head_dim, r, g.layers, g.suffix).unwrap();
        let n = plan.context_tokens;
        let model = ttft_model(r, n, g.layers, &p);
        let rec = (if r == 1.0 { n } else { 0 } + g.suffix) as f64 * p.t_c;
        let xfer = if r == 0.0 { n } else { 0 } as f64 * p.t_i;
        let bubble = rec.min(xfer) + g.layers as f64 * g.suffix as f64 * p.t_c;
        assert!(sim >= model * (1.0 - 1e-9), "r={r}: sim {sim} < model {model}");
        assert!(sim - model <= bubble * (1.0 + 1e-9) + 1e-12, "r={r}: sim {sim} model {model} bubble {bubble}");
    }
}

#[test]
fn attn_experiment_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["attn-experiment", "--out", "dev.csv"]);
    let csv = fs::read_to_string(dir.path().join("dev.csv")).unwrap();
    assert_eq!(out, csv);
    let mean = |name: &str| -> f64 {
        let line = csv.lines().find(|l| l.starts_with(&format!("mean,{name},"))).unwrap();
        line.rsplit(',').next().unwrap().parse().unwrap()
    };
    let full_rows: Vec<f64> = csv
        .lines()
        .filter(|l| l.contains(",full,"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(full_rows.len(), 26);
    assert!(full_rows.iter().all(|&d| d <= 1e-5));
    let none = mean("none");
    for s in ["lowfreq", "highfreq", "random", "full"] {
        assert!(mean(s) < none, "{s}");
    }
    assert!(mean("lowfreq") <= mean("random"));

    let again = ok(dir.path(), &["attn-experiment", "--out", "dev2.csv"]);
    assert_eq!(again, out);

    let one = ok(dir.path(), &["attn-experiment", "--seeds", "3,4", "--strategy", "lowfreq,none", "--out", "small.csv"]);
    assert_eq!(one.lines().count(), 1 + 4 + 2);
}

#[test]
fn spectrum_report_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["spectrum-report", "--synthetic", "N=64,H=2,D=8,L=4", "--out", "s.csv", "--svg"]);
    assert!(out.starts_with("decile,keys,values\n"));
    assert_eq!(out.lines().count(), 11);
    assert!(dir.path().join("s.svg").exists());
    let total: f64 = out.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-6);
}
