use std::sync::Arc;

use lamo::arch::{
    decode_checkpoint, direction_order, encode_checkpoint, invert_permutation, CoderMode, Directions, LamoModel, ModelConfig,
    PatchGeom,
};
use lamo::autodiff::grad_check_fn;
use lamo::ssm::{zoh_phi, ZohMode};
use lamo::tensor::{silu_scalar, softplus_scalar};
use lamo::{Rng, Tape, Tensor, Var};

fn grid_config(h: usize, w: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        embed_dim: 8,
        latent_tokens: 4,
        state_dim: 4,
        grid: Some((h, w)),
        ..ModelConfig::default()
    }
}

fn coords(h: usize, w: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..h * w)
        .flat_map(|i| [(i / w) as f64 / (h - 1) as f64, (i % w) as f64 / (w - 1) as f64])
        .collect();
    Tensor::from_f64(&[h * w, 2], &data).unwrap()
}

fn set(model: &mut LamoModel<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let t = model.params_mut().by_name_mut(name).unwrap_or_else(|| panic!("no parameter {name}"));
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

fn param(model: &LamoModel<f64>, name: &str) -> Vec<f64> {
    model.params().by_name(name).unwrap().data().to_vec()
}

/// Random positive-weighted sum, so every output coordinate matters.
fn weighted_sum(t: &mut Tape<f64>, y: Var) -> Var {
    let mut r = Rng::new(77, 3);
    let w = t.constant(Tensor::uniform(t.shape(y), 0.5, 1.5, &mut r));
    let yw = t.mul(y, w).unwrap();
    t.sum(yw)
}

/// Runs `f` on a fresh tape with every parameter bound as a constant.
fn eval(model: &LamoModel<f64>, f: impl FnOnce(&mut Tape<f64>, &[Var]) -> Var) -> Tensor<f64> {
    let mut t = Tape::new();
    let p = model.bind(&mut t, false);
    let y = f(&mut t, &p);
    t.value(y).clone()
}

#[test]
fn lift_is_pointwise() {
    let model: LamoModel<f64> = LamoModel::new(grid_config(4, 4), 3).unwrap();
    let mut rng = Rng::new(1, 0);
    let x = Tensor::randn(&[1, 16, 1], &mut rng);
    let c = coords(4, 4);
    let mut perm: Vec<usize> = (0..16).collect();
    rng.shuffle(&mut perm);
    let xp = x.gather_rows(&perm).unwrap();
    let cp = c.clone().reshape(&[1, 16, 2]).unwrap().gather_rows(&perm).unwrap().reshape(&[16, 2]).unwrap();

    let run = |m: &LamoModel<f64>, x: &Tensor<f64>, c: &Tensor<f64>| {
        eval(m, |t, p| {
            let (xv, cv) = (t.constant(x.clone()), t.constant(c.clone()));
            m.lift(t, p, xv, cv).unwrap()
        })
    };
    let y = run(&model, &x, &c);
    assert_eq!(run(&model, &xp, &cp), y.gather_rows(&perm).unwrap());

    let mut zeroed = model.clone();
    for name in ["lift.wx", "lift.wc", "lift.b1", "lift.l2.w"] {
        set(&mut zeroed, name, |_| 0.0);
    }
    set(&mut zeroed, "lift.l2.b", |i| i as f64 - 2.0);
    for row in run(&zeroed, &x, &c).data().chunks(8) {
        assert_eq!(row, &[-2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    let mut inputs = vec![x, c];
    inputs.extend(model.params().values().iter().cloned());
    let errs = grad_check_fn(
        |t, v| {
            let y = model.lift(t, &v[2..], v[0], v[1]).unwrap();
            Ok(weighted_sum(t, y))
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < 1e-4, "input {i}: {e}");
    }
}

/// Model with `embed_dim = d` and encoder logits `scale · X[:, :m]`.
fn one_hot_encoder(d: usize, m: usize, n: usize, scale: f64, normalize: bool) -> LamoModel<f64> {
    let cfg = ModelConfig {
        embed_dim: d,
        latent_tokens: m,
        fixed_points: n,
        normalize_latents: normalize,
        n_layers: 0,
        ..ModelConfig::default()
    };
    let mut model = LamoModel::new(cfg, 0).unwrap();
    set(&mut model, "enc.w", |i| if i / m == i % m { scale } else { 0.0 });
    set(&mut model, "enc.b", |_| 0.0);
    model
}

fn encode(model: &LamoModel<f64>, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut t = Tape::new();
    let p = model.bind(&mut t, false);
    let xv = t.constant(x.clone());
    let (z, w) = model.encode(&mut t, &p, xv).unwrap();
    (t.value(z).clone(), t.value(w.unwrap()).clone())
}

#[test]
fn encoder_identity_and_mean_assignment() {
    let x = Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    for normalize in [true, false] {
        let model = one_hot_encoder(2, 2, 2, 1000.0, normalize);
        let (z, w) = encode(&model, &x);
        assert_eq!(w.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(z.max_abs_diff(&x) < 1e-7);
    }

    // X = [[2],[4]] with both rows assigned to latent 1: a second channel
    // carries the assignment logits.
    let mut m = one_hot_encoder(2, 2, 2, 100.0, true);
    set(&mut m, "enc.w", |i| if i == 0 { 100.0 } else { 0.0 });
    let x = Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 1.0, 4.0]).unwrap();
    let (z, _) = encode(&m, &x);
    assert!((z.data()[1] - 3.0).abs() < 1e-7);
    assert!(z.data()[3].abs() < 1e-30);
}

#[test]
fn assignments_are_probability_vectors() {
    let cfg = ModelConfig {
        embed_dim: 6,
        latent_tokens: 5,
        fixed_points: 23,
        n_layers: 0,
        ..ModelConfig::default()
    };
    let model: LamoModel<f64> = LamoModel::new(cfg, 9).unwrap();
    let x = Tensor::randn(&[2, 23, 6], &mut Rng::new(4, 0));
    let (_, w) = encode(&model, &x);
    for row in w.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let z = Tensor::randn(&[2, 5, 6], &mut Rng::new(5, 0));
    let mut t = Tape::new();
    let p = model.bind(&mut t, false);
    let zv = t.constant(z);
    let (y, w) = model.decode(&mut t, &p, zv).unwrap();
    let w = t.value(w.unwrap()).data();
    assert_eq!(t.shape(y), &[2, 23, 6]);
    for b in 0..2 {
        for i in 0..23 {
            let s: f64 = (0..5).map(|j| w[(b * 5 + j) * 23 + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn decoder_convexity() {
    for m in [1, 3] {
        let cfg = ModelConfig {
            embed_dim: 4,
            latent_tokens: m,
            fixed_points: 7,
            n_layers: 0,
            ..ModelConfig::default()
        };
        let model: LamoModel<f64> = LamoModel::new(cfg, 2).unwrap();
        let latent = [0.5, -1.0, 2.0, 3.0];
        let z = Tensor::from_f64(&[1, m, 4], &latent.repeat(m)).unwrap();
        let y = eval(&model, |t, p| {
            let zv = t.constant(z.clone());
            model.decode(t, p, zv).unwrap().0
        });
        for row in y.data().chunks(4) {
            for (a, b) in row.iter().zip(latent) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        if m == 1 {
            assert!(y.data().chunks(4).all(|r| r == latent));
        }
    }
}

#[test]
fn patchify_examples() {
    let g = PatchGeom::new((2, 2), (1, 1)).unwrap();
    let field = Tensor::from_f64(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut t: Tape<f64> = Tape::new();
    let f = t.constant(field.clone());
    let z = t.patchify(f, g).unwrap();
    assert_eq!(t.value(z), &field);

    let g = PatchGeom::new((4, 4), (2, 2)).unwrap();
    let c = t.constant(Tensor::full(&[1, 16, 1], 2.5));
    let z = t.patchify(c, g).unwrap();
    assert!(t.value(z).data().iter().all(|&v| v == 2.5));

    let g = PatchGeom::new((4, 6), (2, 3)).unwrap();
    let x = t.constant(Tensor::randn(&[2, 24, 3], &mut Rng::new(8, 0)));
    let once = t.patchify(x, g).unwrap();
    let back = t.unpatchify(once, g).unwrap();
    let twice = t.patchify(back, g).unwrap();
    let back2 = t.unpatchify(twice, g).unwrap();
    assert!(t.value(twice).max_abs_diff(t.value(once)) < 1e-15);
    assert!(t.value(back2).max_abs_diff(t.value(back)) < 1e-15);
    let xv = t.value(x).data();
    let bv = t.value(back).data();
    for b in 0..2 {
        for i in 0..24 {
            let j = g.token_of(i);
            let members: Vec<usize> = (0..24).filter(|&k| g.token_of(k) == j).collect();
            for ch in 0..3 {
                let mean = members.iter().map(|&k| xv[(b * 24 + k) * 3 + ch]).sum::<f64>() / 6.0;
                assert!((bv[(b * 24 + i) * 3 + ch] - mean).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn one_hot_encoder_equals_patchify() {
    let g = PatchGeom::new((4, 4), (2, 2)).unwrap();
    let (n, m, extra) = (16, 4, 3);
    let d = m + extra;
    let model = one_hot_encoder(d, m, n, 60.0, true);
    let mut rng = Rng::new(12, 0);
    let mut x = vec![0.0; n * d];
    for i in 0..n {
        x[i * d + g.token_of(i)] = 1.0;
        for k in m..d {
            x[i * d + k] = rng.normal();
        }
    }
    let x = Tensor::from_f64(&[1, n, d], &x).unwrap();
    let (z, _) = encode(&model, &x);
    let mut t: Tape<f64> = Tape::new();
    let xv = t.constant(x);
    let zp = t.patchify(xv, g).unwrap();
    assert!(z.max_abs_diff(t.value(zp)) < 1e-6);
}

#[test]
fn direction_plumbing_round_trips() {
    // Zero readout and unit skip make the scan the identity on its input.
    let (h, w, c) = (3, 4, 2);
    let x = Tensor::randn(&[1, h * w, c], &mut Rng::new(3, 0));
    for d in 0..4 {
        let order = direction_order((h, w), d);
        let inv = invert_permutation(&order);
        let mut t: Tape<f64> = Tape::new();
        let xv = t.constant(x.clone());
        let xd = t.gather_rows(xv, Arc::from(order)).unwrap();
        let delta = t.constant(Tensor::full(&[1, h * w, c], 1e-12));
        let a_log = t.constant(Tensor::zeros(&[c, 3]));
        let b = t.constant(Tensor::ones(&[1, h * w, 3]));
        let cm = t.constant(Tensor::zeros(&[1, h * w, 3]));
        let skip = t.constant(Tensor::ones(&[c]));
        let y = t.selective_scan(xd, delta, a_log, b, cm, skip, ZohMode::Exact).unwrap();
        let back = t.gather_rows(y, Arc::from(inv)).unwrap();
        assert_eq!(t.value(back), &x);
    }
}

fn matvec(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    (0..n).map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * n + j]).sum::<f64>()).collect()
}

#[test]
fn single_token_latent_ssm_matches_direct_evaluation() {
    let cfg = ModelConfig {
        embed_dim: 4,
        latent_tokens: 1,
        fixed_points: 5,
        state_dim: 3,
        heads: 2,
        n_layers: 1,
        ..ModelConfig::default()
    };
    let model: LamoModel<f64> = LamoModel::new(cfg.clone(), 6).unwrap();
    let mut r = Rng::new(2, 0);
    let zin: Vec<f64> = (0..4).map(|_| r.normal()).collect();
    let z = Tensor::from_f64(&[1, 1, 4], &zin).unwrap();
    let got = eval(&model, |t, p| {
        let zv = t.constant(z.clone());
        model.latent_ssm(t, p, 0, zv).unwrap()
    });

    let pm = |n: &str| param(&model, &format!("blocks.0.{n}"));
    let xh = matvec(&zin, &pm("in_x.w"), &pm("in_x.b"));
    let zh = matvec(&zin, &pm("in_z.w"), &pm("in_z.b"));
    let (inner, hd, p) = (cfg.inner_dim(), cfg.head_dim(), cfg.state_dim);
    let mut sum = vec![0.0; inner];
    for d in 0..2 {
        let (cw, cb) = (pm(&format!("d{d}.conv.w")), pm(&format!("d{d}.conv.b")));
        let k = cfg.conv_width;
        let u: Vec<f64> = (0..inner).map(|c| silu_scalar(cw[c * k + k - 1] * xh[c] + cb[c])).collect();
        for h in 0..2 {
            let hp = |n: &str| pm(&format!("d{d}.h{h}.{n}"));
            let uh = &u[h * hd..(h + 1) * hd];
            let delta: Vec<f64> = matvec(uh, &hp("delta.w"), &hp("delta.b")).into_iter().map(softplus_scalar).collect();
            let bv = matvec(uh, &hp("b.w"), &hp("b.b"));
            let cv = matvec(uh, &hp("c.w"), &hp("c.b"));
            let (a_log, skip) = (hp("a_log"), hp("skip"));
            for c in 0..hd {
                let mut y = skip[c] * uh[c];
                for s in 0..p {
                    let zz = -a_log[c * p + s].exp() * delta[c];
                    y += cv[s] * delta[c] * zoh_phi(zz, zz.exp_m1()) * bv[s] * uh[c];
                }
                sum[h * hd + c] += y;
            }
        }
    }
    let gated: Vec<f64> = sum.iter().zip(&zh).map(|(s, g)| s * silu_scalar(*g)).collect();
    let want = matvec(&gated, &pm("out.w"), &pm("out.b"));
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn dead_backward_branch_equals_unidirectional() {
    let bi_cfg = ModelConfig {
        directions: Directions::Bi,
        latent_tokens: 6,
        fixed_points: 10,
        embed_dim: 4,
        state_dim: 3,
        ..ModelConfig::default()
    };
    let mut bi: LamoModel<f64> = LamoModel::new(bi_cfg.clone(), 4).unwrap();
    for l in 0..bi_cfg.n_layers {
        set(&mut bi, &format!("blocks.{l}.d1.h0.c.w"), |_| 0.0);
        set(&mut bi, &format!("blocks.{l}.d1.h0.c.b"), |_| 0.0);
        set(&mut bi, &format!("blocks.{l}.d1.h0.skip"), |_| 0.0);
    }
    let mut uni: LamoModel<f64> = LamoModel::new(
        ModelConfig {
            directions: Directions::Uni,
            ..bi_cfg
        },
        0,
    )
    .unwrap();
    for i in 0..uni.params().len() {
        let name = uni.params().name(i).to_string();
        *uni.params_mut().get_mut(i) = bi.params().by_name(&name).unwrap().clone();
    }
    let x = Tensor::randn(&[2, 10, 1], &mut Rng::new(1, 1));
    let c = Tensor::randn(&[10, 2], &mut Rng::new(1, 2));
    assert_eq!(bi.predict(&x, &c).unwrap(), uni.predict(&x, &c).unwrap());
}

#[test]
fn zeroed_sublayers_are_identity() {
    let mut model: LamoModel<f64> = LamoModel::new(grid_config(4, 4), 5).unwrap();
    for name in ["out.w", "out.b", "mlp2.w", "mlp2.b"] {
        set(&mut model, &format!("blocks.0.{name}"), |_| 0.0);
    }
    let z = Tensor::randn(&[2, 4, 8], &mut Rng::new(6, 0));
    let out = eval(&model, |t, p| {
        let zv = t.constant(z.clone());
        model.block(t, p, 0, zv).unwrap().out
    });
    assert_eq!(out, z);
}

#[test]
fn deep_stack_stays_bounded() {
    for dirs in [Directions::Uni, Directions::Multi4] {
        let cfg = ModelConfig {
            n_layers: 8,
            embed_dim: 16,
            latent_tokens: 16,
            directions: dirs,
            ..grid_config(8, 8)
        };
        let model: LamoModel<f64> = LamoModel::new(cfg, 11).unwrap();
        let z = Tensor::randn(&[1, 16, 16], &mut Rng::new(7, 0));
        let out = eval(&model, |t, p| {
            let mut zv = t.constant(z.clone());
            for l in 0..8 {
                zv = model.block(t, p, l, zv).unwrap().out;
                assert_eq!(t.shape(zv), &[1, 16, 16]);
            }
            zv
        });
        assert!(out.all_finite() && out.max_abs() < 1e3, "{}", out.max_abs());
    }
}

#[test]
fn symmetric_heads_agree() {
    let cfg = ModelConfig {
        embed_dim: 4,
        expand: 1,
        heads: 2,
        latent_tokens: 5,
        fixed_points: 5,
        directions: Directions::Uni,
        conv_width: 0,
        n_layers: 1,
        ..ModelConfig::default()
    };
    let mut model: LamoModel<f64> = LamoModel::new(cfg, 8).unwrap();
    for n in ["a_log", "delta.w", "delta.b", "b.w", "b.b", "c.w", "c.b", "skip"] {
        let src = param(&model, &format!("blocks.0.d0.h0.{n}"));
        set(&mut model, &format!("blocks.0.d0.h1.{n}"), |i| src[i]);
    }
    // in_x maps both halves of the inner width identically.
    let w = param(&model, "blocks.0.in_x.w");
    set(&mut model, "blocks.0.in_x.w", |i| w[(i / 4) * 4 + i % 2]);
    set(&mut model, "blocks.0.in_x.b", |_| 0.1);
    let z = Tensor::randn(&[1, 5, 4], &mut Rng::new(9, 0));
    let mut t = Tape::new();
    let p = model.bind(&mut t, false);
    let zv = t.constant(z);
    model.latent_ssm(&mut t, &p, 0, zv).unwrap();
    let scans: Vec<Var> = (0..t.len())
        .filter_map(|i| t.var(i))
        .filter(|&v| t.kind(v) == lamo::autodiff::OpKind::SelectiveScan)
        .collect();
    assert_eq!(scans.len(), 2);
    assert_eq!(t.value(scans[0]), t.value(scans[1]));
}

#[test]
fn construction_reports_parameters() {
    let model: LamoModel<f32> = LamoModel::new(grid_config(4, 4), 0).unwrap();
    let names = model.params().names();
    let mut sorted = names.to_vec();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    assert!(model.param_count() > 0);
    let mut t = Tape::new();
    let p = model.bind(&mut t, true);
    assert_eq!(p.len(), names.len());
    assert_eq!(t.len(), names.len());
}

#[test]
fn forward_shapes_and_finiteness() {
    for (coder, dirs, share) in [
        (CoderMode::Learned, Directions::Bi, Some(false)),
        (CoderMode::Learned, Directions::Multi4, Some(true)),
        (CoderMode::Patchify, Directions::Multi4, None),
        (CoderMode::Patchify, Directions::Uni, Some(true)),
    ] {
        let cfg = ModelConfig {
            coder,
            directions: dirs,
            share_coders: share,
            out_channels: 2,
            ..grid_config(4, 4)
        };
        let model: LamoModel<f32> = LamoModel::new(cfg, 1).unwrap();
        let x = Tensor::randn(&[3, 16, 1], &mut Rng::new(0, 0));
        let y = model.predict(&x, &coords(4, 4).cast()).unwrap();
        assert_eq!(y.shape(), &[3, 16, 2]);
        assert!(y.all_finite());
    }
    let model: LamoModel<f64> = LamoModel::new(grid_config(4, 4), 1).unwrap();
    assert!(model.predict(&Tensor::zeros(&[1, 9, 1]), &coords(3, 3)).is_err());
}

#[test]
fn full_model_grad_check() {
    for coder in [CoderMode::Learned, CoderMode::Patchify] {
        let cfg = ModelConfig {
            coder,
            directions: Directions::Multi4,
            heads: 2,
            ..grid_config(4, 4)
        };
        let model: LamoModel<f64> = LamoModel::new(cfg, 21).unwrap();
        let mut rng = Rng::new(22, 0);
        let x = Tensor::randn(&[2, 16, 1], &mut rng);
        let truth = Tensor::randn(&[2, 16, 1], &mut rng);
        let c = coords(4, 4);
        let errs = grad_check_fn(
            |t, p| {
                let (xv, cv) = (t.constant(x.clone()), t.constant(c.clone()));
                let y = model.forward(t, p, xv, cv).unwrap();
                t.rel_l2(y, &truth)
            },
            model.params().values(),
            1e-3,
        )
        .unwrap();
        for (i, e) in errs.iter().enumerate() {
            assert!(*e < 1e-4, "{:?} {}: {e:e}", coder, model.params().name(i));
        }
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let cfg = ModelConfig {
        coder: CoderMode::Patchify,
        directions: Directions::Multi4,
        ..grid_config(4, 4)
    };
    let model: LamoModel<f32> = LamoModel::new(cfg, 13).unwrap();
    let bytes = encode_checkpoint(&model);
    assert_eq!(&bytes[..4], b"LCKP");
    let back: LamoModel<f32> = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.params(), model.params());
    assert_eq!(encode_checkpoint(&back), bytes);

    let mut bad = bytes.clone();
    bad[40] ^= 1;
    assert!(decode_checkpoint::<f32>(&bad).unwrap_err().to_string().contains("checksum"));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint::<f32>(&bad).is_err());
    assert!(decode_checkpoint::<f32>(&bytes[..3]).is_err());
}
