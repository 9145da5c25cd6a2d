//! Property suites: scan-form equivalence, discretization accuracy,
//! gradients and coder identities. Each check reports its worst observed
//! value against a fixed bound.

use std::fmt;
use std::str::FromStr;

use crate::arch::{CoderMode, Directions, LamoModel, ModelConfig, ModelError, PatchGeom};
use crate::autodiff::{grad_check_fn, random_case, OpKind, Tape};
use crate::ssm::{
    apply_matrix, discretize_projected, materialize_matrix, scan_parallel, scan_parallel_threads, scan_sequential,
    zoh_coefficients, zoh_row, DiscreteStep, LtiSystem, SsmError, ZohMode,
};
use crate::tensor::{Rng, Tensor, TensorError};

pub const SCAN_TOL: f64 = 1e-10;
pub const ZOH_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-4;
pub const CODER_TOL: f64 = 1e-6;
pub const EULER_RATIO: (f64, f64) = (0.2, 0.3);

pub const SCAN_LENS: [usize; 6] = [1, 2, 3, 17, 64, 255];
pub const SCAN_STATES: [usize; 3] = [1, 4, 16];
pub const SCAN_INSTANCES: usize = 50;
pub const LINEARITY_TRIALS: usize = 20;
/// Perturbation added to `B̄` in fault-injection mode.
pub const FAULT_DELTA: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Scan,
    Grad,
    Coder,
    Zoh,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::All => "all",
            Suite::Scan => "scan",
            Suite::Grad => "grad",
            Suite::Coder => "coder",
            Suite::Zoh => "zoh",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(Suite::All),
            "scan" => Ok(Suite::Scan),
            "grad" => Ok(Suite::Grad),
            "coder" => Ok(Suite::Coder),
            "zoh" => Ok(Suite::Zoh),
            _ => Err(format!("unknown suite `{s}` (expected all, scan, grad, coder, zoh)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Perturbs `B̄` by [`FAULT_DELTA`] wherever a check forms it, so the
    /// suites must fail.
    pub inject_fault: bool,
}

#[derive(Clone, Debug)]
pub struct Check {
    pub suite: Suite,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn bound(suite: Suite, name: &'static str, worst: f64, tol: f64) -> Check {
        Check {
            suite,
            name,
            // Written so NaN fails.
            passed: worst < tol,
            detail: format!("max {worst:.3e} (bound {tol:.0e})"),
        }
    }

    fn failed(suite: Suite, name: &'static str, err: impl fmt::Display) -> Check {
        Check {
            suite,
            name,
            passed: false,
            detail: format!("error: {err}"),
        }
    }
}

/// Runs one suite, or every suite for [`Suite::All`].
pub fn run(suite: Suite, opts: &VerifyOptions) -> Vec<Check> {
    match suite {
        Suite::All => [Suite::Scan, Suite::Zoh, Suite::Coder, Suite::Grad]
            .into_iter()
            .flat_map(|s| run(s, opts))
            .collect(),
        Suite::Scan => vec![scan_equivalence(opts), pseudo_linearity(opts), thread_determinism(opts)],
        Suite::Zoh => vec![zoh_exact(opts), euler_order()],
        Suite::Grad => vec![op_gradients(opts), model_gradients(opts)],
        Suite::Coder => vec![assignment_mass(opts), one_hot_is_patchify(), residual_identity(opts)],
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

/// Fixed-width pass/fail table.
pub fn render_table(checks: &[Check]) -> String {
    let w = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for c in checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        s += &format!("{verdict}  {:<6} {:<w$}  {}\n", c.suite.name(), c.name, c.detail);
    }
    s
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn normals(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Random discretized system with `A ∈ [-10, -0.01]` and `Δ ∈ [1e-3, 0.5]`.
/// Time-invariant systems share one set of coefficients across all steps.
pub fn random_system(len: usize, channels: usize, state: usize, lti: bool, rng: &mut Rng) -> Result<DiscreteStep<f64>, SsmError> {
    let steps = if lti { 1 } else { len };
    let a_log: Vec<f64> = (0..channels * state).map(|_| rng.uniform(0.01f64.ln(), 10f64.ln())).collect();
    let delta: Vec<f64> = (0..steps * channels).map(|_| rng.uniform(1e-3, 0.5)).collect();
    let b = normals(steps * state, rng);
    let c = normals(steps * state, rng);
    let x = normals(len * channels, rng);
    let skip = normals(channels, rng);
    let first = discretize_projected(
        (steps, channels, state),
        &delta,
        &a_log,
        &b,
        &c,
        &x[..steps * channels],
        &skip,
        ZohMode::Exact,
    )?;
    if lti {
        DiscreteStep::repeated(len, &first.a_bar, &first.b_bar, &first.c, x, skip)
    } else {
        first.with_input(x)
    }
}

fn perturbed(d: &DiscreteStep<f64>) -> DiscreteStep<f64> {
    let mut d = d.clone();
    d.b_bar.iter_mut().for_each(|b| *b += FAULT_DELTA);
    d
}

/// Largest pairwise deviation among the sequential, parallel, convolution
/// (time-invariant cases) and dense-operator forms.
pub fn scan_equivalence(opts: &VerifyOptions) -> Check {
    let name = "three-form equivalence";
    let mut rng = Rng::new(opts.seed, 0x5343);
    let mut worst = 0.0f64;
    for i in 0..SCAN_INSTANCES {
        let len = SCAN_LENS[i % SCAN_LENS.len()];
        let state = SCAN_STATES[(i / SCAN_LENS.len()) % SCAN_STATES.len()];
        let channels = 1 + rng.below(3);
        let lti = i % 2 == 0;
        let outcome = (|| -> Result<f64, SsmError> {
            let d = random_system(len, channels, state, lti, &mut rng)?;
            let h0 = vec![0.0; channels * state];
            let (seq, h_seq) = scan_sequential(&d, &h0)?;
            let par_in = if opts.inject_fault { perturbed(&d) } else { d.clone() };
            let (par, h_par) = scan_parallel(&par_in, &h0)?;
            let m = materialize_matrix(&d)?;
            let mut forms = vec![seq.into_data(), par.into_data(), apply_matrix(&m, &d.x, &d.skip).into_data()];
            if lti {
                forms.push(LtiSystem::from_step(&d)?.apply(&d.x)?.into_data());
            }
            let mut dev = max_dev(h_seq.data(), h_par.data());
            for a in 0..forms.len() {
                for b in a + 1..forms.len() {
                    dev = dev.max(max_dev(&forms[a], &forms[b]));
                }
            }
            Ok(dev)
        })();
        match outcome {
            Ok(dev) => worst = worst.max(dev),
            Err(e) => return Check::failed(Suite::Scan, name, format!("instance {i}: {e}")),
        }
    }
    Check::bound(Suite::Scan, name, worst, SCAN_TOL)
}

/// `‖f(αu+βv) − αf(u) − βf(v)‖∞` for a frozen system without the direct term.
pub fn pseudo_linearity(opts: &VerifyOptions) -> Check {
    let name = "pseudo-linearity";
    let mut rng = Rng::new(opts.seed, 0x4c49);
    let mut worst = 0.0f64;
    for trial in 0..LINEARITY_TRIALS {
        let len = [17, 64, 255][trial % 3];
        let (channels, state) = (2, 4);
        let outcome = (|| -> Result<f64, SsmError> {
            let d = random_system(len, channels, state, false, &mut rng)?.without_skip();
            let (alpha, beta) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
            let u = normals(len * channels, &mut rng);
            let v = normals(len * channels, &mut rng);
            let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
            let h0 = vec![0.0; channels * state];
            let f = |x: Vec<f64>| -> Result<Vec<f64>, SsmError> { Ok(scan_sequential(&d.with_input(x)?, &h0)?.0.into_data()) };
            let (fm, fu, fv) = (f(mix)?, f(u)?, f(v)?);
            let lin: Vec<f64> = fu.iter().zip(&fv).map(|(a, b)| alpha * a + beta * b).collect();
            Ok(max_dev(&fm, &lin))
        })();
        match outcome {
            Ok(dev) => worst = worst.max(dev),
            Err(e) => return Check::failed(Suite::Scan, name, format!("trial {trial}: {e}")),
        }
    }
    Check::bound(Suite::Scan, name, worst, SCAN_TOL)
}

/// Parallel scan on 1 and 4 worker threads must agree bit for bit.
pub fn thread_determinism(opts: &VerifyOptions) -> Check {
    let name = "parallel scan bitwise across threads";
    let mut rng = Rng::new(opts.seed, 0x5448);
    let outcome = (|| -> Result<bool, SsmError> {
        let d = random_system(4096, 4, 16, false, &mut rng)?;
        let h0 = vec![0.0; 64];
        let one = scan_parallel_threads(&d, &h0, 1)?;
        let four = scan_parallel_threads(&d, &h0, 4)?;
        Ok(one == four)
    })();
    match outcome {
        Ok(same) => Check {
            suite: Suite::Scan,
            name,
            passed: same,
            detail: if same { "identical (1 vs 4 threads)".into() } else { "outputs differ".into() },
        },
        Err(e) => Check::failed(Suite::Scan, name, e),
    }
}

/// Independent `B̄/B = Δ·(e^z − 1)/z` with `z = ΔA`: a 30-term series when
/// `|z| < 1`, the closed form otherwise (no cancellation there).
pub fn reference_b_bar(a: f64, delta: f64) -> f64 {
    let z = a * delta;
    if z.abs() < 1.0 {
        let (mut term, mut sum) = (1.0, 0.0);
        for k in 1..=30 {
            sum += term;
            term *= z / (k + 1) as f64;
        }
        delta * sum
    } else {
        delta * (z.exp() - 1.0) / z
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
}

/// Exact `B̄` from both the scalar path and the fused row kernel against
/// [`reference_b_bar`], relative error.
pub fn zoh_exact(opts: &VerifyOptions) -> Check {
    let mut worst = 0.0f64;
    let fault = if opts.inject_fault { 1.0 + FAULT_DELTA } else { 1.0 };
    let a_vals: Vec<f64> = log_grid(0.01, 10.0, 41).map(|a| -a).collect();
    let (mut abar, mut phi, mut dphi) = (vec![0.0; 41], vec![0.0; 41], vec![0.0; 41]);
    for delta in log_grid(1e-4, 1.0, 41) {
        zoh_row::<f64, false>(delta, &a_vals, &mut abar, &mut phi, &mut dphi);
        for (j, &a) in a_vals.iter().enumerate() {
            let want = reference_b_bar(a, delta);
            let (_, scalar) = zoh_coefficients(a, delta, ZohMode::Exact);
            let fused = delta * phi[j];
            for got in [scalar * fault, fused * fault] {
                worst = worst.max((got - want).abs() / want.abs());
            }
        }
    }
    Check::bound(Suite::Zoh, "exact B̄ vs reference", worst, ZOH_TOL)
}

/// `e(Δ) = |exp(ΔA) − (1 + ΔA)|` should shrink by about 4 when Δ halves.
pub fn euler_order() -> Check {
    let (lo, hi) = EULER_RATIO;
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    let a = -1.0;
    for delta in log_grid(0.01, 0.5, 25) {
        let e = |d: f64| {
            let (abar, _) = zoh_coefficients(a, d, ZohMode::Exact);
            (abar - (1.0 + d * a)).abs()
        };
        let r = e(delta / 2.0) / e(delta);
        min = min.min(r);
        max = max.max(r);
    }
    Check {
        suite: Suite::Zoh,
        name: "Euler remainder ratio",
        passed: min >= lo && max <= hi,
        detail: format!("e(Δ/2)/e(Δ) in [{min:.4}, {max:.4}] (bound [{lo}, {hi}])"),
    }
}

/// Trials per op in [`op_gradients`].
pub const OP_TRIALS: usize = 10;

/// Every differentiable op on random inputs.
pub fn op_gradients(opts: &VerifyOptions) -> Check {
    let name = "op gradients";
    let mut rng = Rng::new(opts.seed, 0x4f50);
    let mut worst = 0.0f64;
    for kind in OpKind::DIFFERENTIABLE {
        for trial in 0..OP_TRIALS {
            let (inputs, f) = random_case(kind, &mut rng);
            match grad_check_fn(&f, &inputs, 1e-5) {
                Ok(errs) => worst = errs.into_iter().fold(worst, f64::max),
                Err(e) => return Check::failed(Suite::Grad, name, format!("{} trial {trial}: {e}", kind.name())),
            }
        }
    }
    Check::bound(Suite::Grad, name, worst, GRAD_TOL)
}

/// Small multidirectional model on a 4×4 grid.
pub fn grad_check_config(coder: CoderMode) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        embed_dim: 8,
        latent_tokens: 4,
        state_dim: 4,
        heads: 2,
        coder,
        directions: Directions::Multi4,
        grid: Some((4, 4)),
        ..ModelConfig::default()
    }
}

pub fn grid_coords(h: usize, w: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..h * w)
        .flat_map(|i| [(i / w) as f64 / (h - 1).max(1) as f64, (i % w) as f64 / (w - 1).max(1) as f64])
        .collect();
    Tensor::new(&[h * w, 2], data).unwrap()
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::contract("model", other.to_string()),
    }
}

/// Parameter gradients of the relative-L2 loss through the whole model,
/// learned and patch coders. Returns the worst error per parameter, named.
pub fn model_grad_errors(coder: CoderMode, seed: u64) -> Result<Vec<(String, f64)>, ModelError> {
    let model: LamoModel<f64> = LamoModel::new(grad_check_config(coder), seed)?;
    let mut rng = Rng::new(seed, 0x4d47);
    let x = Tensor::randn(&[2, 16, 1], &mut rng);
    let truth = Tensor::randn(&[2, 16, 1], &mut rng);
    let c = grid_coords(4, 4);
    let errs = grad_check_fn(
        |t, p| {
            let (xv, cv) = (t.constant(x.clone()), t.constant(c.clone()));
            let y = model.forward(t, p, xv, cv).map_err(model_err)?;
            t.rel_l2(y, &truth)
        },
        model.params().values(),
        1e-3,
    )?;
    Ok(errs.into_iter().enumerate().map(|(i, e)| (model.params().name(i).to_string(), e)).collect())
}

pub fn model_gradients(opts: &VerifyOptions) -> Check {
    let name = "full-model gradients (4x4 grid)";
    let mut worst = (0.0f64, String::new());
    for coder in [CoderMode::Learned, CoderMode::Patchify] {
        match model_grad_errors(coder, opts.seed.wrapping_add(21)) {
            Ok(errs) => {
                for (p, e) in errs {
                    if !(e <= worst.0) {
                        worst = (e, p);
                    }
                }
            }
            Err(e) => return Check::failed(Suite::Grad, name, e),
        }
    }
    let mut c = Check::bound(Suite::Grad, name, worst.0, GRAD_TOL);
    c.detail += &format!(" at {}", worst.1);
    c
}

fn encoder_only(embed: usize, tokens: usize, points: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: embed,
        latent_tokens: tokens,
        fixed_points: points,
        n_layers: 0,
        ..ModelConfig::default()
    }
}

/// Encoder and decoder assignment probabilities sum to one.
pub fn assignment_mass(opts: &VerifyOptions) -> Check {
    let name = "assignment probability mass";
    let outcome = (|| -> Result<f64, ModelError> {
        let (m, n, d, b) = (5, 23, 6, 2);
        let model: LamoModel<f64> = LamoModel::new(encoder_only(d, m, n), opts.seed)?;
        let mut rng = Rng::new(opts.seed, 0x434d);
        let mut t = Tape::new();
        let p = model.bind(&mut t, false);
        let x = t.constant(Tensor::randn(&[b, n, d], &mut rng));
        let (_, enc_w) = model.encode(&mut t, &p, x)?;
        let z = t.constant(Tensor::randn(&[b, m, d], &mut rng));
        let (_, dec_w) = model.decode(&mut t, &p, z)?;
        let (Some(enc_w), Some(dec_w)) = (enc_w, dec_w) else {
            return Err(ModelError::Config("learned coder produced no assignments".into()));
        };
        let mut worst = 0.0f64;
        // Encoder: each point's row over tokens.
        for row in t.value(enc_w).data().chunks(m) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        // Decoder: each point's column over tokens.
        let w = t.value(dec_w).data();
        for bi in 0..b {
            for i in 0..n {
                let s: f64 = (0..m).map(|j| w[(bi * m + j) * n + i]).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        Ok(worst)
    })();
    match outcome {
        Ok(w) => Check::bound(Suite::Coder, name, w, CODER_TOL),
        Err(e) => Check::failed(Suite::Coder, name, e),
    }
}

/// A normalized encoder whose logits are a scaled one-hot patch indicator
/// reproduces patch means.
pub fn one_hot_is_patchify() -> Check {
    let name = "one-hot encoder equals patchify";
    let outcome = (|| -> Result<f64, ModelError> {
        let g = PatchGeom::new((4, 4), (2, 2))?;
        let (n, m, extra) = (16, 4, 3);
        let d = m + extra;
        let mut cfg = encoder_only(d, m, n);
        cfg.normalize_latents = true;
        let mut model: LamoModel<f64> = LamoModel::new(cfg, 0)?;
        let scale = 60.0;
        let set = |model: &mut LamoModel<f64>, key: &str, f: &dyn Fn(usize) -> f64| -> Result<(), ModelError> {
            let t = model
                .params_mut()
                .by_name_mut(key)
                .ok_or_else(|| ModelError::Parameter(key.to_string()))?;
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
            Ok(())
        };
        set(&mut model, "enc.w", &|i| if i / m == i % m { scale } else { 0.0 })?;
        set(&mut model, "enc.b", &|_| 0.0)?;
        let mut rng = Rng::new(12, 0);
        let mut x = vec![0.0; n * d];
        for i in 0..n {
            x[i * d + g.token_of(i)] = 1.0;
            for k in m..d {
                x[i * d + k] = rng.normal();
            }
        }
        let mut t = Tape::new();
        let p = model.bind(&mut t, false);
        let xv = t.constant(Tensor::new(&[1, n, d], x)?);
        let (z, _) = model.encode(&mut t, &p, xv)?;
        let zp = t.patchify(xv, g)?;
        Ok(t.value(z).max_abs_diff(t.value(zp)))
    })();
    match outcome {
        Ok(w) => Check::bound(Suite::Coder, name, w, CODER_TOL),
        Err(e) => Check::failed(Suite::Coder, name, e),
    }
}

/// With the SSM output projection and the second MLP layer zeroed, a latent
/// block returns its input unchanged.
pub fn residual_identity(opts: &VerifyOptions) -> Check {
    let name = "residual identity";
    let outcome = (|| -> Result<bool, ModelError> {
        let mut cfg = grad_check_config(CoderMode::Learned);
        cfg.heads = 1;
        cfg.embed_dim = 8;
        let mut model: LamoModel<f64> = LamoModel::new(cfg, opts.seed)?;
        for key in ["out.w", "out.b", "mlp2.w", "mlp2.b"] {
            let key = format!("blocks.0.{key}");
            let t = model
                .params_mut()
                .by_name_mut(&key)
                .ok_or_else(|| ModelError::Parameter(key.clone()))?;
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let z = Tensor::randn(&[2, 4, 8], &mut Rng::new(opts.seed, 0x5249));
        let mut t = Tape::new();
        let p = model.bind(&mut t, false);
        let zv = t.constant(z.clone());
        let out = model.block(&mut t, &p, 0, zv)?.out;
        Ok(t.value(out) == &z)
    })();
    match outcome {
        Ok(same) => Check {
            suite: Suite::Coder,
            name,
            passed: same,
            detail: if same { "exact".into() } else { "block output differs from input".into() },
        },
        Err(e) => Check::failed(Suite::Coder, name, e),
    }
}
