use std::path::Path;
use std::process::{Command, Output};

fn lamo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lamo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn gen_seq(out: &Path, seed: &str) -> Output {
    lamo(&[
        "gen-data",
        "--kind",
        "seq1d",
        "--grid",
        "1x16",
        "--n-train",
        "8",
        "--n-test",
        "4",
        "--seed",
        seed,
        "--steps",
        "2",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn gen_data_is_deterministic_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = lamo(&[
            "gen-data", "--kind", "darcy", "--grid", "8x8", "--n-train", "3", "--n-test", "2", "--seed", "7", "--out",
            d.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", text(&o));
    }
    for f in ["train.ldst", "test.ldst", "manifest.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    for line in ["kind = darcy", "grid = 8x8", "n_train = 3", "n_test = 2", "seed = 7"] {
        assert!(manifest.contains(line), "{manifest}");
    }
}

#[test]
fn small_grid_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lamo(&[
        "gen-data", "--kind", "darcy", "--grid", "7x7", "--n-train", "1", "--n-test", "1", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains('8'), "{}", text(&o));
    let o = lamo(&["gen-data", "--kind", "darcy", "--grid", "big"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gen_seq(&data, "1").status.success());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny run\nn_layers = 1\nembed_dim = 8\nlatent_tokens = 4\nstate_dim = 4\nepochs = 2\n").unwrap();
    let out = dir.path().join("run");
    let o = lamo(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--threads",
        "1",
        "batch_size=2",
        "seed=5",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["metrics.csv", "best.ckpt", "last.ckpt", "config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let echo = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echo.contains("batch_size = 2") && echo.contains("seed = 5") && echo.contains("embed_dim = 8"), "{echo}");
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");

    let o = lamo(&["eval", "--checkpoint", out.join("last.ckpt").to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("rel_l2"));
    let per = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(per.lines().count(), 5);
    // The last epoch's test error is what eval reports.
    let last: f64 = csv.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    let shown: f64 = String::from_utf8_lossy(&o.stdout).split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((last - shown).abs() < 1e-6, "{last} vs {shown}");
}

#[test]
fn unknown_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gen_seq(&data, "2").status.success());
    let o = lamo(&["train", "--data", data.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap(), "epoch=3"]);
    assert_eq!(o.status.code(), Some(2));
    let msg = text(&o);
    for k in ["epochs", "max_lr", "embed_dim", "directions", "precision"] {
        assert!(msg.contains(k), "{msg}");
    }
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = lamo(&["train", "--data", dir.path().to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    let o = lamo(&["eval", "--checkpoint", "/nonexistent/x.ckpt", "--data", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
}

#[test]
fn non_finite_loss_aborts_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gen_seq(&data, "3").status.success());
    let o = lamo(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
        "n_layers=1",
        "embed_dim=8",
        "latent_tokens=4",
        "state_dim=4",
        "epochs=3",
        "max_lr=1e300",
        "grad_clip=0",
        "precision=single",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", text(&o));
}

#[test]
fn verify_passes_and_detects_injected_fault() {
    let o = lamo(&["verify", "--suite", "scan"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
    let o = lamo(&["verify", "--suite", "zoh", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    let o = lamo(&["verify", "--suite", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_scan_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let o = lamo(&[
        "bench-scan",
        "--lengths",
        "64,256",
        "--state",
        "4",
        "--threads",
        "1,4",
        "--reps",
        "1",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let body = std::fs::read_to_string(csv).unwrap();
    assert!(body.starts_with("length,channels,state,mode,threads,ns_per_element"));
    assert_eq!(body.lines().count(), 1 + 2 * 3);
}
