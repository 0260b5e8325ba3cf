//! A toy isotropic Swin-DiT noise predictor.
//!
//! Images are cut into `p×p` patches and embedded, pass through `depth`
//! PSWA transformer blocks conditioned on the diffusion step (and
//! optionally a class label) by adaLN scale-shift-gate modulation, and are
//! projected back to pixel space. Block `l` routes `h_l` channels to window
//! attention as given by a [`ChannelPlan`].

mod config;
mod layers;
mod params;

pub use config::{ModelConfig, PccaConfig};
pub use layers::{
    block_forward, block_graph, patchify, patchify_index, patchify_tokens, position_embedding, timestep_embedding,
    timestep_features, unpatchify_index, unpatchify_tokens, BlockParams, BlockTrace, BlockVars, TimestepMlp,
};
pub(crate) use layers::{timestep_graph, TimestepVars};
pub use params::ParamSet;

use std::sync::Arc;

use crate::attention::bias_table_len;
use crate::diagnostics::AttentionMaps;
use crate::error::{Error, Result};
use crate::numerics::ops::LAYERNORM_EPS;
use crate::numerics::{FlopCategory, Graph, Rng, Tensor, Var};
use crate::pswa::{ChannelPlan, PswaLayerConfig};
use layers::{AttentionIds, BlockIds, BridgeIds};

/// Standard deviation of the normal initialisation of weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    t_w1: usize,
    t_b1: usize,
    t_w2: usize,
    t_b2: usize,
    class_table: Option<usize>,
    blocks: Vec<BlockIds>,
    final_mod_w: usize,
    final_mod_b: usize,
    final_w: usize,
    final_b: usize,
}

/// Recorded values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Predicted noise, same shape as the input image batch.
    pub eps: Var,
    pub blocks: Vec<BlockTrace>,
}

#[derive(Clone, Debug)]
pub struct SwinDiT {
    config: ModelConfig,
    plan: ChannelPlan,
    layers: Vec<PswaLayerConfig>,
    /// Number of diffusion steps the timestep embedding accepts.
    steps: usize,
    params: ParamSet,
    layout: Layout,
    pos_embed: Option<Tensor>,
}

impl SwinDiT {
    /// Model with weights drawn as `N(0, 0.02)`, biases at zero and all
    /// modulation projections at zero, so every block starts as identity.
    pub fn new(config: &ModelConfig, plan: &ChannelPlan, steps: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        config.check_plan(plan)?;
        if steps == 0 {
            return Err(Error::Config("the model needs at least one diffusion step".into()));
        }
        let layers = plan
            .window_channels
            .iter()
            .map(|&h| config.layer_config(h))
            .collect::<Result<Vec<_>>>()?;
        let d = config.d_model;
        let hidden = config.mlp_hidden();
        let p = config.patch_dim();
        let (wh, ww) = config.window;
        let k = config.kernel_size();

        let mut ps = ParamSet::default();
        let mut weight =
            |ps: &mut ParamSet, name: String, shape: &[usize]| ps.push(name, Tensor::randn(shape, INIT_STD, rng));
        let zeros = |ps: &mut ParamSet, name: String, shape: &[usize]| ps.push(name, Tensor::zeros(shape));

        let patch_w = weight(&mut ps, "patch_embed.weight".into(), &[p, d]);
        let patch_b = zeros(&mut ps, "patch_embed.bias".into(), &[d]);
        let t_w1 = weight(&mut ps, "t_embed.w1".into(), &[config.freq_dim, d]);
        let t_b1 = zeros(&mut ps, "t_embed.b1".into(), &[d]);
        let t_w2 = weight(&mut ps, "t_embed.w2".into(), &[d, d]);
        let t_b2 = zeros(&mut ps, "t_embed.b2".into(), &[d]);
        let class_table =
            (config.num_classes > 0).then(|| weight(&mut ps, "class_embed".into(), &[config.num_classes, d]));

        let mut blocks = Vec::with_capacity(config.depth);
        for (l, cfg) in layers.iter().enumerate() {
            let name = |s: &str| format!("blocks.{l}.{s}");
            let mod_w = zeros(&mut ps, name("mod.weight"), &[d, 6 * d]);
            let mod_b = zeros(&mut ps, name("mod.bias"), &[6 * d]);
            let attention = (cfg.window_channels > 0).then(|| {
                let h = cfg.window_channels;
                AttentionIds {
                    wq: weight(&mut ps, name("attn.wq"), &[h, h]),
                    wk: weight(&mut ps, name("attn.wk"), &[h, h]),
                    wv: weight(&mut ps, name("attn.wv"), &[h, h]),
                    wo: weight(&mut ps, name("attn.wo"), &[h, h]),
                    rel_bias: weight(
                        &mut ps,
                        name("attn.rel_pos_bias"),
                        &[cfg.num_heads(), bias_table_len(wh, ww)],
                    ),
                }
            });
            let bridge = (cfg.bridge_channels() > 0).then(|| {
                let cb = cfg.bridge_channels();
                BridgeIds {
                    kernels: weight(&mut ps, name("bridge.depthwise"), &[cb, k, k]),
                    pointwise: weight(&mut ps, name("bridge.pointwise"), &[cb, cb]),
                    bias: zeros(&mut ps, name("bridge.bias"), &[cb]),
                }
            });
            let mlp_w1 = weight(&mut ps, name("mlp.w1"), &[d, hidden]);
            let mlp_b1 = zeros(&mut ps, name("mlp.b1"), &[hidden]);
            let mlp_w2 = weight(&mut ps, name("mlp.w2"), &[hidden, d]);
            let mlp_b2 = zeros(&mut ps, name("mlp.b2"), &[d]);
            blocks.push(BlockIds {
                attention,
                bridge,
                mod_w,
                mod_b,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
            });
        }
        let final_mod_w = zeros(&mut ps, "final.mod.weight".into(), &[d, 2 * d]);
        let final_mod_b = zeros(&mut ps, "final.mod.bias".into(), &[2 * d]);
        let final_w = weight(&mut ps, "final.weight".into(), &[d, p]);
        let final_b = zeros(&mut ps, "final.bias".into(), &[p]);

        let (gh, gw) = config.grid();
        let pos_embed = config.pos_embed.then(|| position_embedding(gh, gw, d)).transpose()?;
        Ok(SwinDiT {
            config: config.clone(),
            plan: plan.clone(),
            layers,
            steps,
            params: ps,
            layout: Layout {
                patch_w,
                patch_b,
                t_w1,
                t_b1,
                t_w2,
                t_b2,
                class_table,
                blocks,
                final_mod_w,
                final_mod_b,
                final_w,
                final_b,
            },
            pos_embed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &ChannelPlan {
        &self.plan
    }

    pub fn layer_configs(&self) -> &[PswaLayerConfig] {
        &self.layers
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces every parameter with `N(0, std)` noise, modulation
    /// included. Used to exercise all paths in gradient checks.
    pub fn randomize(&mut self, std: f64, rng: &mut Rng) {
        for t in self.params.tensors_mut() {
            *t = Tensor::randn(t.shape(), std, rng);
        }
    }

    /// Records every parameter on `g` as a differentiable input.
    pub fn bind_inputs(&self, g: &mut Graph) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.input(t.clone())).collect()
    }

    pub fn bind_constants(&self, g: &mut Graph) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.constant(t.clone())).collect()
    }

    fn check_input(&self, shape: &[usize], t: &[usize], labels: Option<&[usize]>) -> Result<()> {
        let c = &self.config;
        let expected = [
            shape.first().copied().unwrap_or(0),
            c.in_channels,
            c.image_size.0,
            c.image_size.1,
        ];
        if shape != expected || shape[0] == 0 {
            return Err(Error::dim("model_forward", shape, &expected));
        }
        if t.len() != shape[0] {
            return Err(Error::dim("model_forward timesteps", &[t.len()], &[shape[0]]));
        }
        match (c.num_classes, labels) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(Error::Usage("labels given to an unconditional model".into())),
            (_, None) => Err(Error::Usage("class-conditional model needs labels".into())),
            (n, Some(l)) => {
                if l.len() != shape[0] {
                    return Err(Error::dim("model_forward labels", &[l.len()], &[shape[0]]));
                }
                match l.iter().find(|&&y| y >= n) {
                    Some(y) => Err(Error::Domain(format!("label {y} outside [0, {n})"))),
                    None => Ok(()),
                }
            }
        }
    }

    /// Records the forward pass on `g` with parameters bound to `params`
    /// (from [`SwinDiT::bind_inputs`] or [`SwinDiT::bind_constants`]).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &[Var],
        x: Var,
        t: &[usize],
        labels: Option<&[usize]>,
    ) -> Result<ForwardTrace> {
        if params.len() != self.params.len() {
            return Err(Error::dim("model params", &[params.len()], &[self.params.len()]));
        }
        self.check_input(g.shape(x), t, labels)?;
        let c = &self.config;
        let lay = &self.layout;
        let b = g.shape(x)[0];

        let mut h = layers::patch_embed_graph(g, x, c.patch_size, params[lay.patch_w], params[lay.patch_b])?;
        if let Some(pe) = &self.pos_embed {
            let pe = g.constant(pe.clone());
            h = g.add_trailing(h, pe)?;
        }

        let tv = TimestepVars {
            w1: params[lay.t_w1],
            b1: params[lay.t_b1],
            w2: params[lay.t_w2],
            b2: params[lay.t_b2],
        };
        let mut cond = layers::timestep_graph(g, t, self.steps, &tv)?;
        if let (Some(table), Some(labels)) = (lay.class_table, labels) {
            let d = c.d_model;
            let index: Vec<usize> = labels.iter().flat_map(|&y| (0..d).map(move |k| y * d + k)).collect();
            let emb = g.gather(params[table], Arc::new(index), &[b, c.d_model])?;
            cond = g.add(cond, emb)?;
        }

        let mut blocks = Vec::with_capacity(self.layers.len());
        for (ids, cfg) in lay.blocks.iter().zip(&self.layers) {
            let vars = BlockVars::from_ids(params, ids, cfg.num_heads());
            let trace = block_graph(g, h, cond, &vars, cfg)?;
            h = trace.out;
            blocks.push(trace);
        }

        g.set_category(FlopCategory::FinalLayer);
        let m = layers::modulation_chunks(g, cond, params[lay.final_mod_w], params[lay.final_mod_b], 2)?;
        let index = layers::broadcast_index(g.shape(h));
        let hn = g.normalize(h, LAYERNORM_EPS);
        let hn = layers::modulate(g, hn, m[0], m[1], &index)?;
        g.set_category(FlopCategory::FinalLayer);
        let out = g.matmul(hn, params[lay.final_w])?;
        let out = g.add_trailing(out, params[lay.final_b])?;
        g.set_category(FlopCategory::Other);
        let (index, shape) = unpatchify_index(g.shape(out), c.patch_size, c.in_channels)?;
        let eps = g.gather(out, Arc::new(index), &shape)?;
        Ok(ForwardTrace { eps, blocks })
    }

    /// Predicted noise for `x_noisy[B×C×H×W]` at steps `t`.
    pub fn forward(&self, x_noisy: &Tensor, t: &[usize], labels: Option<&[usize]>) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind_constants(&mut g);
        let x = g.constant(x_noisy.clone());
        let trace = self.forward_graph(&mut g, &params, x, t, labels)?;
        Ok(g.value(trace.eps).clone())
    }

    /// Forward pass returning the graph for inspection of intermediate
    /// values.
    pub fn trace(&self, x_noisy: &Tensor, t: &[usize], labels: Option<&[usize]>) -> Result<(Graph, ForwardTrace)> {
        let mut g = Graph::new();
        let params = self.bind_constants(&mut g);
        let x = g.constant(x_noisy.clone());
        let trace = self.forward_graph(&mut g, &params, x, t, labels)?;
        Ok((g, trace))
    }

    /// Per-layer window attention maps for one forward pass.
    pub fn attention_maps(
        &self,
        x_noisy: &Tensor,
        t: &[usize],
        labels: Option<&[usize]>,
    ) -> Result<Vec<Option<AttentionMaps>>> {
        let (g, trace) = self.trace(x_noisy, t, labels)?;
        trace
            .blocks
            .iter()
            .map(|b| {
                b.attn
                    .map(|a| AttentionMaps::new(g.value(a).clone(), self.config.window.1))
                    .transpose()
            })
            .collect()
    }

    /// Multiply-accumulates per category for a forward pass over `batch`
    /// zero images.
    pub fn count_forward_macs(&self, batch: usize) -> Result<std::collections::BTreeMap<FlopCategory, u64>> {
        let c = &self.config;
        let x = Tensor::zeros(&[batch, c.in_channels, c.image_size.0, c.image_size.1]);
        let labels = (c.num_classes > 0).then(|| vec![0; batch]);
        let (g, _) = self.trace(&x, &vec![0; batch], labels.as_deref())?;
        Ok(g.macs().clone())
    }
}
