//! Tokenisation, conditioning and the PSWA transformer block.

use std::sync::Arc;

use crate::attention::AttentionVars;
use crate::error::{Error, Result};
use crate::numerics::ops::LAYERNORM_EPS;
use crate::numerics::{FlopCategory, Graph, Rng, Tensor, Var};
use crate::pswa::{self, BridgeVars, PswaLayerConfig, PswaParams, PswaVars};

/// Gather index taking `x[B×C×(H·p)×(W·p)]` to `[B×H×W×(p·p·C)]`. Within a
/// patch the feature order is `(row, col, channel)`.
pub fn patchify_index(shape: &[usize], p: usize) -> Result<(Vec<usize>, [usize; 4])> {
    let [b, c, ih, iw] = *shape else {
        return Err(Error::dim("patchify", shape, &[0, 0, 0, 0]));
    };
    if p == 0 || ih % p != 0 || iw % p != 0 {
        return Err(Error::Config(format!(
            "image {ih}x{iw} is not divisible into {p}x{p} patches"
        )));
    }
    let (h, w) = (ih / p, iw / p);
    let mut index = Vec::with_capacity(b * c * ih * iw);
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                for pr in 0..p {
                    for pc in 0..p {
                        for ci in 0..c {
                            index.push(((bi * c + ci) * ih + i * p + pr) * iw + j * p + pc);
                        }
                    }
                }
            }
        }
    }
    Ok((index, [b, h, w, p * p * c]))
}

/// Gather index taking `[B×H×W×(p·p·C)]` back to `[B×C×(H·p)×(W·p)]`.
pub fn unpatchify_index(shape: &[usize], p: usize, channels: usize) -> Result<(Vec<usize>, [usize; 4])> {
    let [b, h, w, f] = *shape else {
        return Err(Error::dim("unpatchify", shape, &[0, 0, 0, 0]));
    };
    if f != p * p * channels {
        return Err(Error::dim("unpatchify", shape, &[b, h, w, p * p * channels]));
    }
    let (ih, iw) = (h * p, w * p);
    let mut index = Vec::with_capacity(b * f * h * w);
    for bi in 0..b {
        for ci in 0..channels {
            for y in 0..ih {
                for x in 0..iw {
                    let (i, pr, j, pc) = (y / p, y % p, x / p, x % p);
                    index.push(((bi * h + i) * w + j) * f + (pr * p + pc) * channels + ci);
                }
            }
        }
    }
    Ok((index, [b, channels, ih, iw]))
}

/// Rearranges an image batch into per-token patch vectors.
pub fn patchify_tokens(x: &Tensor, p: usize) -> Result<Tensor> {
    let (index, shape) = patchify_index(x.shape(), p)?;
    x.gather(&index, &shape)
}

pub fn unpatchify_tokens(tokens: &Tensor, p: usize, channels: usize) -> Result<Tensor> {
    let (index, shape) = unpatchify_index(tokens.shape(), p, channels)?;
    tokens.gather(&index, &shape)
}

/// Non-overlapping `p×p` patches of `x[B×C×H_img×W_img]`, linearly embedded
/// with `weight[(p·p·C)×d]` and `bias[d]`.
pub fn patchify(x: &Tensor, p: usize, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (w, b) = (g.constant(weight.clone()), g.constant(bias.clone()));
    let y = patch_embed_graph(&mut g, xv, p, w, b)?;
    Ok(g.value(y).clone())
}

pub(crate) fn patch_embed_graph(g: &mut Graph, x: Var, p: usize, weight: Var, bias: Var) -> Result<Var> {
    let (index, shape) = patchify_index(g.shape(x), p)?;
    let patches = g.gather(x, Arc::new(index), &shape)?;
    g.set_category(FlopCategory::PatchEmbed);
    let y = g.matmul(patches, weight)?;
    g.add_trailing(y, bias)
}

/// Fixed 2-D sin-cos position embedding `[H×W×d]`: the first half of the
/// channels encode the row, the second half the column.
pub fn position_embedding(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "2-D position embedding needs d divisible by 4, got {d}"
        )));
    }
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(h * w * d);
    for i in 0..h {
        for j in 0..w {
            for pos in [i as f64, j as f64] {
                out.extend(omega.iter().map(|o| (pos * o).sin()));
                out.extend(omega.iter().map(|o| (pos * o).cos()));
            }
        }
    }
    Tensor::new(&[h, w, d], out)
}

/// Sinusoidal features `[cos(t·ω_i), sin(t·ω_i)]` with
/// `ω_i = 10000^(−i/(dim/2))`, one row per timestep.
pub fn timestep_features(t: &[usize], dim: usize) -> Result<Tensor> {
    if dim < 2 || !dim.is_multiple_of(2) || t.is_empty() {
        return Err(Error::Config(format!(
            "timestep features need an even dim >= 2, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * step as f64);
        let args: Vec<f64> = freqs.collect();
        out.extend(args.iter().map(|a| a.cos()));
        out.extend(args.iter().map(|a| a.sin()));
    }
    Tensor::new(&[t.len(), dim], out)
}

/// Two-layer MLP (`Linear → SiLU → Linear`) over timestep features.
#[derive(Clone, Debug)]
pub struct TimestepMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct TimestepVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl TimestepMlp {
    pub fn random(freq_dim: usize, dim: usize, std: f64, rng: &mut Rng) -> Self {
        TimestepMlp {
            w1: Tensor::randn(&[freq_dim, dim], std, rng),
            b1: Tensor::zeros(&[dim]),
            w2: Tensor::randn(&[dim, dim], std, rng),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn freq_dim(&self) -> usize {
        self.w1.shape()[0]
    }
}

pub(crate) fn timestep_graph(g: &mut Graph, t: &[usize], steps: usize, vars: &TimestepVars) -> Result<Var> {
    if let Some(&bad) = t.iter().find(|&&s| s >= steps) {
        return Err(Error::Domain(format!("timestep {bad} outside [0, {steps})")));
    }
    let freq_dim = g.shape(vars.w1)[0];
    let feats = g.constant(timestep_features(t, freq_dim)?);
    g.set_category(FlopCategory::Conditioning);
    let h = g.matmul(feats, vars.w1)?;
    let h = g.add_trailing(h, vars.b1)?;
    let h = g.silu(h);
    let h = g.matmul(h, vars.w2)?;
    g.add_trailing(h, vars.b2)
}

/// Embedding `[dim]` of diffusion step `t` out of `steps`.
pub fn timestep_embedding(t: usize, steps: usize, mlp: &TimestepMlp) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = TimestepVars {
        w1: g.constant(mlp.w1.clone()),
        b1: g.constant(mlp.b1.clone()),
        w2: g.constant(mlp.w2.clone()),
        b2: g.constant(mlp.b2.clone()),
    };
    let e = timestep_graph(&mut g, &[t], steps, &vars)?;
    let d = g.shape(e)[1];
    g.value(e).reshape(&[d])
}

/// Repeats per-sample rows `[B×d]` over the token grid of `like[B×…×d]`.
pub(crate) fn broadcast_index(like: &[usize]) -> Arc<Vec<usize>> {
    let b = like[0];
    let d = like[like.len() - 1];
    let per = like.iter().product::<usize>() / (b * d);
    let mut index = Vec::with_capacity(b * per * d);
    for bi in 0..b {
        for _ in 0..per {
            index.extend((0..d).map(|c| bi * d + c));
        }
    }
    Arc::new(index)
}

/// `x + x·scale + shift`, with `scale` and `shift` given per sample.
pub(crate) fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var, index: &Arc<Vec<usize>>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let shift = g.gather(shift, index.clone(), &shape)?;
    let scale = g.gather(scale, index.clone(), &shape)?;
    let xs = g.mul(x, scale)?;
    let y = g.add(x, xs)?;
    g.add(y, shift)
}

/// Weights of one PSWA transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub pswa: PswaParams,
    /// `[d × 6d]` projection of `SiLU(cond)` to shift/scale/gate for the
    /// mixer and the MLP.
    pub mod_w: Tensor,
    pub mod_b: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

impl BlockParams {
    /// Normal weights everywhere, including the modulation, so that the
    /// gates are active.
    pub fn random(cfg: &PswaLayerConfig, hidden: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let d = cfg.channels;
        Ok(BlockParams {
            pswa: PswaParams::random(cfg, std, rng)?,
            mod_w: Tensor::randn(&[d, 6 * d], std, rng),
            mod_b: Tensor::randn(&[6 * d], std, rng),
            mlp_w1: Tensor::randn(&[d, hidden], std, rng),
            mlp_b1: Tensor::randn(&[hidden], std, rng),
            mlp_w2: Tensor::randn(&[hidden, d], std, rng),
            mlp_b2: Tensor::randn(&[d], std, rng),
        })
    }

    pub fn bind_constants(&self, g: &mut Graph) -> BlockVars {
        BlockVars {
            pswa: self.pswa.bind_constants(g),
            mod_w: g.constant(self.mod_w.clone()),
            mod_b: g.constant(self.mod_b.clone()),
            mlp_w1: g.constant(self.mlp_w1.clone()),
            mlp_b1: g.constant(self.mlp_b1.clone()),
            mlp_w2: g.constant(self.mlp_w2.clone()),
            mlp_b2: g.constant(self.mlp_b2.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub pswa: PswaVars,
    pub mod_w: Var,
    pub mod_b: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

impl BlockVars {
    pub(crate) fn from_ids(vars: &[Var], ids: &BlockIds, num_heads: usize) -> BlockVars {
        BlockVars {
            pswa: PswaVars {
                attention: ids.attention.map(|a| {
                    (
                        AttentionVars {
                            num_heads,
                            wq: vars[a.wq],
                            wk: vars[a.wk],
                            wv: vars[a.wv],
                            wo: vars[a.wo],
                        },
                        Some(vars[a.rel_bias]),
                    )
                }),
                bridge: ids.bridge.map(|b| BridgeVars {
                    kernels: vars[b.kernels],
                    pointwise: vars[b.pointwise],
                    bias: Some(vars[b.bias]),
                }),
            },
            mod_w: vars[ids.mod_w],
            mod_b: vars[ids.mod_b],
            mlp_w1: vars[ids.mlp_w1],
            mlp_b1: vars[ids.mlp_b1],
            mlp_w2: vars[ids.mlp_w2],
            mlp_b2: vars[ids.mlp_b2],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub rel_bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BridgeIds {
    pub kernels: usize,
    pub pointwise: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockIds {
    pub attention: Option<AttentionIds>,
    pub bridge: Option<BridgeIds>,
    pub mod_w: usize,
    pub mod_b: usize,
    pub mlp_w1: usize,
    pub mlp_b1: usize,
    pub mlp_w2: usize,
    pub mlp_b2: usize,
}

/// Recorded outputs of one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub out: Var,
    /// Token-mixer (PSWA) output before gating, `[B×H×W×d]`.
    pub mixer: Var,
    pub attn: Option<Var>,
}

/// `SiLU(cond)·W + b`, split into `chunks` equal slices of width `d`.
pub(crate) fn modulation_chunks(g: &mut Graph, cond: Var, w: Var, b: Var, chunks: usize) -> Result<Vec<Var>> {
    let d = g.shape(cond)[1];
    let act = g.silu(cond);
    let m = g.matmul(act, w)?;
    let m = g.add_trailing(m, b)?;
    (0..chunks).map(|i| g.slice_last(m, i * d, (i + 1) * d)).collect()
}

/// Pre-norm residual block on `x[B×H×W×d]` conditioned on `cond[B×d]`:
/// `x + g₁·PSWA(mod(norm x))`, then `x + g₂·MLP(mod(norm x))`.
pub fn block_graph(g: &mut Graph, x: Var, cond: Var, vars: &BlockVars, cfg: &PswaLayerConfig) -> Result<BlockTrace> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[3] != cfg.channels || g.shape(cond) != [shape[0], cfg.channels] {
        return Err(Error::dim("block", &shape, g.shape(cond)));
    }
    let index = broadcast_index(&shape);

    g.set_category(FlopCategory::Modulation);
    let m = modulation_chunks(g, cond, vars.mod_w, vars.mod_b, 6)?;
    let (shift1, scale1, gate1, shift2, scale2, gate2) = (m[0], m[1], m[2], m[3], m[4], m[5]);

    let h = g.normalize(x, LAYERNORM_EPS);
    let h = modulate(g, h, shift1, scale1, &index)?;
    let mixed = pswa::pswa_graph(g, h, cfg, &vars.pswa)?;
    let gate = g.gather(gate1, index.clone(), &shape)?;
    let gated = g.mul(mixed.out, gate)?;
    let x = g.add(x, gated)?;

    let h = g.normalize(x, LAYERNORM_EPS);
    let h = modulate(g, h, shift2, scale2, &index)?;
    g.set_category(FlopCategory::Mlp);
    let h = g.matmul(h, vars.mlp_w1)?;
    let h = g.add_trailing(h, vars.mlp_b1)?;
    let h = g.gelu(h);
    let h = g.matmul(h, vars.mlp_w2)?;
    let h = g.add_trailing(h, vars.mlp_b2)?;
    let gate = g.gather(gate2, index, &shape)?;
    let gated = g.mul(h, gate)?;
    let out = g.add(x, gated)?;
    g.set_category(FlopCategory::Other);
    Ok(BlockTrace {
        out,
        mixer: mixed.out,
        attn: mixed.attn,
    })
}

/// One block on `tokens[B×H×W×d]` with conditioning `cond[B×d]`.
pub fn block_forward(tokens: &Tensor, cond: &Tensor, params: &BlockParams, cfg: &PswaLayerConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let c = g.constant(cond.clone());
    let vars = params.bind_constants(&mut g);
    let trace = block_graph(&mut g, x, c, &vars, cfg)?;
    Ok(g.value(trace.out).clone())
}
