use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lamo::arch::{load_checkpoint, LamoModel};
use lamo::config::{parse_grid, parse_override};
use lamo::data::{gen_darcy, gen_seq1d, load_dataset, save_dataset, Dataset, Seq1dConfig, Seq1dKind};
use lamo::ssm::{scan_parallel, scan_sequential};
use lamo::train::{evaluate, train as run_training, EpochMetrics};
use lamo::verify::{self, Suite, VerifyOptions};
use lamo::{Rng, Scalar};

use crate::error::CliError;
use crate::run_config::{Precision, RunConfig};
use crate::{BenchArgs, DataKind, EvalArgs, GenDataArgs, TrainArgs, VerifyArgs};

pub const TRAIN_FILE: &str = "train.ldst";
pub const TEST_FILE: &str = "test.ldst";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_ECHO: &str = "config.txt";

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let (h, w) = parse_grid(&a.grid).ok_or_else(|| CliError::usage(format!("--grid expects HxW, got {:?}", a.grid)))?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "kind = {}", if a.kind == DataKind::Darcy { "darcy" } else { "seq1d" });
    let _ = writeln!(manifest, "grid = {h}x{w}");
    let _ = writeln!(manifest, "n_train = {}", a.n_train);
    let _ = writeln!(manifest, "n_test = {}", a.n_test);
    let _ = writeln!(manifest, "seed = {}", a.seed);
    let (train, test) = match a.kind {
        DataKind::Darcy => gen_darcy(h, w, a.n_train, a.n_test, a.seed)?,
        DataKind::Seq1d => {
            if h != 1 {
                return Err(CliError::usage(format!("seq1d data is one-dimensional; use --grid 1x{w}")));
            }
            let kind: Seq1dKind = a.task.parse().map_err(CliError::usage)?;
            let cfg = Seq1dConfig {
                kind,
                points: w,
                steps: a.steps,
                coef: a.coef,
            };
            let _ = writeln!(manifest, "task = {kind}");
            let _ = writeln!(manifest, "steps = {}", a.steps);
            let _ = writeln!(manifest, "coef = {}", a.coef);
            gen_seq1d(&cfg, a.n_train, a.n_test, a.seed)?
        }
    };
    let _ = writeln!(manifest, "points = {}", train.points());
    let _ = writeln!(manifest, "in_channels = {}", train.in_channels());
    let _ = writeln!(manifest, "out_channels = {}", train.out_channels());
    let _ = writeln!(manifest, "train_file = {TRAIN_FILE}");
    let _ = writeln!(manifest, "test_file = {TEST_FILE}");

    create_dir(&a.out)?;
    save_dataset(&train, &a.out.join(TRAIN_FILE))?;
    save_dataset(&test, &a.out.join(TEST_FILE))?;
    write_file(&a.out.join(MANIFEST_FILE), manifest.as_bytes())?;
    println!("wrote {} train and {} test samples to {}", train.len(), test.len(), a.out.display());
    Ok(())
}

fn load(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::io(path, "no such file"));
    }
    Ok(load_dataset(path)?)
}

fn print_epoch(m: &EpochMetrics) {
    eprintln!(
        "epoch {:>4}  step {:>6}  lr {:.3e}  train {:.5}  test rel_l2 {:.5}",
        m.epoch, m.step, m.lr, m.train_loss, m.test_rel_l2
    );
}

fn fit<T: Scalar>(cfg: &RunConfig, train: &Dataset, test: &Dataset, out: &Path) -> Result<f64, CliError> {
    let model: LamoModel<T> = LamoModel::new(cfg.model.clone(), cfg.train.seed)?;
    eprintln!("{} parameters", model.param_count());
    let outcome = run_training(model, train, test, &cfg.train, Some(out), print_epoch)?;
    Ok(outcome.best_test_rel_l2)
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let text = match &a.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
        None => None,
    };
    let overrides = a
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cfg = RunConfig::from_sources(text.as_deref(), &overrides)?;
    let train = load(&a.data.join(TRAIN_FILE))?;
    let test = load(&a.data.join(TEST_FILE))?;
    cfg.fit_to(&train);
    cfg.model.validate()?;
    cfg.train.validate()?;

    create_dir(&a.out)?;
    write_file(&a.out.join(CONFIG_ECHO), cfg.to_text().as_bytes())?;
    let go = || match cfg.precision {
        Precision::Single => fit::<f32>(&cfg, &train, &test, &a.out),
        Precision::Double => fit::<f64>(&cfg, &train, &test, &a.out),
    };
    let best = match a.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::usage(format!("thread pool: {e}")))?
            .install(go)?,
        None => go()?,
    };
    println!("best test rel_l2 {best:.6}");
    Ok(())
}

fn report<T: Scalar>(ckpt: &Path, ds: &Dataset) -> Result<(f64, Vec<f64>), CliError> {
    let model: LamoModel<T> = load_checkpoint(ckpt)?;
    let r = evaluate(&model, ds)?;
    Ok((r.mean, r.per_sample))
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let precision = Precision::parse(&a.precision)
        .ok_or_else(|| CliError::usage(format!("--precision expects single or double, got {:?}", a.precision)))?;
    let data = if a.data.is_dir() { a.data.join(TEST_FILE) } else { a.data.clone() };
    let ds = load(&data)?;
    if !a.checkpoint.exists() {
        return Err(CliError::io(&a.checkpoint, "no such file"));
    }
    let (mean, per) = match precision {
        Precision::Single => report::<f32>(&a.checkpoint, &ds)?,
        Precision::Double => report::<f64>(&a.checkpoint, &ds)?,
    };
    let out = a.out.unwrap_or_else(|| {
        let dir = a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        dir.join("eval.csv")
    });
    let mut csv = String::from("sample,rel_l2\n");
    for (i, e) in per.iter().enumerate() {
        let _ = writeln!(csv, "{i},{e:e}");
    }
    write_file(&out, csv.as_bytes())?;
    println!("rel_l2 {mean:.6} over {} samples", per.len());
    Ok(())
}

pub fn verify(a: VerifyArgs) -> Result<(), CliError> {
    let suite: Suite = a.suite.parse().map_err(CliError::usage)?;
    let opts = VerifyOptions {
        seed: a.seed,
        inject_fault: a.inject_fault,
    };
    let start = Instant::now();
    let checks = verify::run(suite, &opts);
    print!("{}", verify::render_table(&checks));
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed in {:.1} s", checks.len() - failed, checks.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(CliError::verify(format!("{failed} check(s) failed")));
    }
    Ok(())
}

fn best_of<R>(reps: usize, mut f: impl FnMut() -> R) -> (f64, R) {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        let r = f();
        best = best.min(t.elapsed().as_secs_f64());
        last = Some(r);
    }
    (best, last.expect("at least one repetition"))
}

pub fn bench_scan(a: BenchArgs) -> Result<(), CliError> {
    if a.lengths.is_empty() || a.threads.is_empty() || a.state == 0 || a.channels == 0 {
        return Err(CliError::usage("lengths, threads, state and channels must be non-empty and positive"));
    }
    let mut csv = String::from("length,channels,state,mode,threads,ns_per_element,max_dev_vs_sequential\n");
    let mut mismatches = Vec::new();
    let mut rng = Rng::new(a.seed, 0x4253);
    for &len in &a.lengths {
        if len == 0 {
            return Err(CliError::usage("lengths must be positive"));
        }
        let d = verify::random_system(len, a.channels, a.state, false, &mut rng).map_err(|e| CliError::usage(e.to_string()))?;
        let h0 = vec![0.0; a.channels * a.state];
        let elems = (len * a.channels * a.state) as f64;
        let (t_seq, seq) = best_of(a.reps, || scan_sequential(&d, &h0));
        let (y_seq, _) = seq.map_err(|e| CliError::usage(e.to_string()))?;
        let _ = writeln!(csv, "{len},{},{},sequential,1,{:.3},0", a.channels, a.state, t_seq * 1e9 / elems);
        let mut reference = None;
        for &threads in &a.threads {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build()
                .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
            let (t_par, par) = pool.install(|| best_of(a.reps, || scan_parallel(&d, &h0)));
            let out = par.map_err(|e| CliError::usage(e.to_string()))?;
            let dev = out.0.max_abs_diff(&y_seq);
            let _ = writeln!(csv, "{len},{},{},parallel,{threads},{:.3},{dev:e}", a.channels, a.state, t_par * 1e9 / elems);
            match &reference {
                None => reference = Some((threads, out)),
                Some((t0, r)) if *r != out => mismatches.push(format!("L={len}: {t0} vs {threads} threads")),
                Some(_) => {}
            }
        }
    }
    match &a.out {
        Some(p) => write_file(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    if !mismatches.is_empty() {
        return Err(CliError::verify(format!(
            "parallel scan output differs across thread counts: {}",
            mismatches.join("; ")
        )));
    }
    eprintln!("parallel outputs identical across thread counts {:?}", a.threads);
    Ok(())
}
