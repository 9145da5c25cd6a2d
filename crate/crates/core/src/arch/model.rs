use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::ssm::DiagSsmParams;
use crate::tensor::{Rng, Scalar, Tensor};

use super::{direction_order, invert_permutation, CoderMode, ModelConfig, ModelError, ParamStore, PatchGeom};

pub const LN_EPS: f64 = 1e-5;
/// Added to each latent's assignment mass before dividing.
pub const LATENT_MASS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct SsmIds {
    a_log: usize,
    delta: Linear,
    b: Linear,
    c: Linear,
    skip: Option<usize>,
}

#[derive(Clone, Debug)]
struct DirIds {
    order: Option<(Arc<[usize]>, Arc<[usize]>)>,
    conv: Option<Linear>,
    heads: Vec<SsmIds>,
}

#[derive(Clone, Debug)]
struct BlockIds {
    norm1: Linear,
    in_x: Linear,
    in_z: Linear,
    dirs: Vec<DirIds>,
    out: Linear,
    norm2: Linear,
    mlp1: Linear,
    mlp2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    lift_x: usize,
    lift_c: usize,
    lift_b: usize,
    lift2: Linear,
    enc: Option<Linear>,
    dec: Option<Linear>,
    blocks: Vec<BlockIds>,
    proj1: Linear,
    proj2: Linear,
}

/// Intermediate values of one latent block, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub ssm: Var,
    pub out: Var,
}

/// The composed operator with its parameters.
#[derive(Clone, Debug)]
pub struct LamoModel<T> {
    config: ModelConfig,
    geom: Option<PatchGeom>,
    params: ParamStore<T>,
    layout: Layout,
}

struct Builder<'a, T> {
    store: ParamStore<T>,
    rng: &'a mut Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        self.store.add(name, t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.uniform(format!("{name}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Linear {
        let w = self.store.add(format!("{name}.g"), Tensor::ones(&[d]));
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[d]));
        Linear { w, b }
    }

    fn ssm(&mut self, name: &str, channels: usize, state: usize, skip: bool) -> SsmIds {
        let p: DiagSsmParams<T> = DiagSsmParams::init(channels, state, self.rng);
        let mut add = |suffix: &str, t: Tensor<T>| self.store.add(format!("{name}.{suffix}"), t);
        SsmIds {
            a_log: add("a_log", p.a_log),
            delta: Linear {
                w: add("delta.w", p.delta_weight),
                b: add("delta.b", p.delta_bias),
            },
            b: Linear {
                w: add("b.w", p.b_weight),
                b: add("b.b", p.b_bias),
            },
            c: Linear {
                w: add("c.w", p.c_weight),
                b: add("c.b", p.c_bias),
            },
            skip: skip.then(|| add("skip", p.skip)),
        }
    }
}

impl<T: Scalar> LamoModel<T> {
    /// Builds and initializes a model; all randomness comes from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let geom = config.patch_geom()?;
        let mut rng = Rng::new(seed, 0);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let (de, m, n) = (config.embed_dim, config.latent_tokens, config.points());
        let fan = config.in_channels + config.coord_channels;
        let bound = 1.0 / (fan as f64).sqrt();
        let lift_x = b.uniform("lift.wx".into(), &[config.in_channels, de], bound);
        let lift_c = b.uniform("lift.wc".into(), &[config.coord_channels, de], bound);
        let lift_b = b.store.add("lift.b1", Tensor::zeros(&[de]));
        let lift2 = b.linear("lift.l2", de, de);
        let (enc, dec) = match config.coder {
            CoderMode::Learned => (Some(b.linear("enc", de, m)), Some(b.linear("dec", de, n))),
            CoderMode::Patchify => (None, None),
        };
        let latent_grid = config.latent_grid()?;
        let inner = config.inner_dim();
        let hd = config.head_dim();
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let pre = format!("blocks.{l}");
            let norm1 = b.norm(&format!("{pre}.norm1"), de);
            let in_x = b.linear(&format!("{pre}.in_x"), de, inner);
            let in_z = b.linear(&format!("{pre}.in_z"), de, inner);
            let mut dirs = Vec::new();
            for d in 0..config.directions.count() {
                let order = direction_order(latent_grid, d);
                let identity = order.iter().enumerate().all(|(i, &j)| i == j);
                let order = (!identity).then(|| {
                    let inv = invert_permutation(&order);
                    (Arc::from(order), Arc::from(inv))
                });
                let conv = (config.conv_width > 0).then(|| {
                    let k = config.conv_width;
                    let w = b.uniform(format!("{pre}.d{d}.conv.w"), &[inner, k], 1.0 / (k as f64).sqrt());
                    let bias = b.store.add(format!("{pre}.d{d}.conv.b"), Tensor::zeros(&[inner]));
                    Linear { w, b: bias }
                });
                let heads = (0..config.heads)
                    .map(|h| b.ssm(&format!("{pre}.d{d}.h{h}"), hd, config.state_dim, config.skip))
                    .collect();
                dirs.push(DirIds { order, conv, heads });
            }
            let out = b.linear(&format!("{pre}.out"), inner, de);
            let norm2 = b.norm(&format!("{pre}.norm2"), de);
            let mlp1 = b.linear(&format!("{pre}.mlp1"), de, 2 * de);
            let mlp2 = b.linear(&format!("{pre}.mlp2"), 2 * de, de);
            blocks.push(BlockIds {
                norm1,
                in_x,
                in_z,
                dirs,
                out,
                norm2,
                mlp1,
                mlp2,
            });
        }
        let ph = if config.proj_hidden == 0 { de } else { config.proj_hidden };
        let proj1 = b.linear("proj.l1", de, ph);
        let proj2 = b.linear("proj.l2", ph, config.out_channels);
        let params = b.store;
        Ok(LamoModel {
            config,
            geom,
            params,
            layout: Layout {
                lift_x,
                lift_c,
                lift_b,
                lift2,
                enc,
                dec,
                blocks,
                proj1,
                proj2,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> LamoModel<U> {
        LamoModel {
            config: self.config.clone(),
            geom: self.geom,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Registers every parameter on the tape once, as leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .values()
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    fn linear(&self, tape: &mut Tape<T>, p: &[Var], x: Var, l: Linear) -> Result<Var, ModelError> {
        let y = tape.matmul(x, p[l.w])?;
        Ok(tape.add(y, p[l.b])?)
    }

    /// Pointwise lifting of `x: [B, N, d_a]` with shared `coords: [N, d_c]`.
    pub fn lift(&self, tape: &mut Tape<T>, p: &[Var], x: Var, coords: Var) -> Result<Var, ModelError> {
        let (cfg, lay) = (&self.config, &self.layout);
        let sx = tape.shape(x).to_vec();
        let sc = tape.shape(coords).to_vec();
        if sx.len() != 3 || sx[2] != cfg.in_channels || sc.len() != 2 || sc[1] != cfg.coord_channels || sc[0] != sx[1] {
            return Err(ModelError::Config(format!(
                "inputs {sx:?} / coords {sc:?} do not match in_channels {} and coord_channels {}",
                cfg.in_channels, cfg.coord_channels
            )));
        }
        let hx = tape.matmul(x, p[lay.lift_x])?;
        let hc = tape.matmul(coords, p[lay.lift_c])?;
        let h = tape.add(hx, hc)?;
        let h = tape.add(h, p[lay.lift_b])?;
        let h = tape.silu(h);
        self.linear(tape, p, h, lay.lift2)
    }

    /// Physical `[B, N, Dₑ]` to latent `[B, M, Dₑ]`. Also returns the
    /// assignment `W: [B, N, M]` in learned mode.
    pub fn encode(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<(Var, Option<Var>), ModelError> {
        if let Some(g) = self.geom {
            return Ok((tape.patchify(x, g)?, None));
        }
        let enc = self.layout.enc.expect("learned coder has encoder weights");
        let logits = self.linear(tape, p, x, enc)?;
        let w = tape.softmax(logits, 2)?;
        let mut z = tape.matmul_t(w, x, true, false)?;
        if self.config.normalize_latents {
            let mass = tape.sum_axis(w, 1)?;
            z = tape.row_div(z, mass, T::of(LATENT_MASS_EPS))?;
        }
        Ok((z, Some(w)))
    }

    /// Latent `[B, M, Dₑ]` to physical `[B, N, Dₑ]`. Also returns the
    /// assignment `W: [B, M, N]` in learned mode.
    pub fn decode(&self, tape: &mut Tape<T>, p: &[Var], z: Var) -> Result<(Var, Option<Var>), ModelError> {
        if let Some(g) = self.geom {
            return Ok((tape.unpatchify(z, g)?, None));
        }
        let dec = self.layout.dec.expect("learned coder has decoder weights");
        let logits = self.linear(tape, p, z, dec)?;
        let w = tape.softmax(logits, 1)?;
        Ok((tape.matmul_t(w, z, true, false)?, Some(w)))
    }

    /// The gated multidirectional latent SSM on already-normalized `z`.
    pub fn latent_ssm(&self, tape: &mut Tape<T>, p: &[Var], block: usize, z: Var) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let ids = &self.layout.blocks[block];
        let xh = self.linear(tape, p, z, ids.in_x)?;
        let zh = self.linear(tape, p, z, ids.in_z)?;
        let hd = cfg.head_dim();
        let mut acc: Option<Var> = None;
        for dir in &ids.dirs {
            let mut xd = match &dir.order {
                Some((perm, _)) => tape.gather_rows(xh, perm.clone())?,
                None => xh,
            };
            if let Some(conv) = dir.conv {
                xd = tape.causal_conv(xd, p[conv.w], p[conv.b])?;
            }
            xd = tape.silu(xd);
            let mut outs = Vec::with_capacity(dir.heads.len());
            for (h, s) in dir.heads.iter().enumerate() {
                let u = if cfg.heads == 1 { xd } else { tape.slice_last(xd, h * hd, hd)? };
                let dl = self.linear(tape, p, u, s.delta)?;
                let dl = tape.softplus(dl);
                let bm = self.linear(tape, p, u, s.b)?;
                let cm = self.linear(tape, p, u, s.c)?;
                let skip = match s.skip {
                    Some(i) => p[i],
                    None => tape.constant(Tensor::zeros(&[hd])),
                };
                outs.push(tape.selective_scan(u, dl, p[s.a_log], bm, cm, skip, cfg.zoh)?);
            }
            let mut yd = if outs.len() == 1 { outs[0] } else { tape.concat_last(&outs)? };
            if let Some((_, inv)) = &dir.order {
                yd = tape.gather_rows(yd, inv.clone())?;
            }
            acc = Some(match acc {
                None => yd,
                Some(a) => tape.add(a, yd)?,
            });
        }
        let gate = tape.silu(zh);
        let y = tape.mul(acc.expect("at least one direction"), gate)?;
        self.linear(tape, p, y, ids.out)
    }

    /// One pre-norm residual block: latent SSM then channel MLP.
    pub fn block(&self, tape: &mut Tape<T>, p: &[Var], block: usize, z: Var) -> Result<BlockOutput, ModelError> {
        let ids = &self.layout.blocks[block];
        let eps = T::of(LN_EPS);
        let zn = tape.layernorm(z, p[ids.norm1.w], p[ids.norm1.b], eps)?;
        let s = self.latent_ssm(tape, p, block, zn)?;
        let z = tape.add(z, s)?;
        let zn = tape.layernorm(z, p[ids.norm2.w], p[ids.norm2.b], eps)?;
        let h = self.linear(tape, p, zn, ids.mlp1)?;
        let h = tape.silu(h);
        let h = self.linear(tape, p, h, ids.mlp2)?;
        Ok(BlockOutput {
            ssm: z,
            out: tape.add(z, h)?,
        })
    }

    fn project(&self, tape: &mut Tape<T>, p: &[Var], y: Var) -> Result<Var, ModelError> {
        let h = self.linear(tape, p, y, self.layout.proj1)?;
        let h = tape.silu(h);
        self.linear(tape, p, h, self.layout.proj2)
    }

    /// Full operator on `x: [B, N, d_a]`, `coords: [N, d_c]`, giving `[B, N, d_u]`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], x: Var, coords: Var) -> Result<Var, ModelError> {
        let n = tape.shape(x).get(1).copied().unwrap_or(0);
        if n != self.config.points() && (self.geom.is_some() || self.config.coder == CoderMode::Learned) {
            return Err(ModelError::Config(format!(
                "input has {n} points, model was built for {}",
                self.config.points()
            )));
        }
        let lifted = self.lift(tape, p, x, coords)?;
        let y = if self.config.shares_coders() {
            let mut h = lifted;
            for l in 0..self.config.n_layers {
                let (z, _) = self.encode(tape, p, h)?;
                let z = self.block(tape, p, l, z)?.out;
                let (d, _) = self.decode(tape, p, z)?;
                h = tape.add(h, d)?;
            }
            h
        } else {
            let (mut z, _) = self.encode(tape, p, lifted)?;
            for l in 0..self.config.n_layers {
                z = self.block(tape, p, l, z)?.out;
            }
            let (d, _) = self.decode(tape, p, z)?;
            if self.config.phys_skip {
                tape.add(d, lifted)?
            } else {
                d
            }
        };
        self.project(tape, p, y)
    }

    /// Inference without recording gradients.
    pub fn predict(&self, x: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cv = tape.constant(coords.clone());
        let y = self.forward(&mut tape, &p, xv, cv)?;
        Ok(tape.value(y).clone())
    }
}
