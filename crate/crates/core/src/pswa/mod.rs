//! Pseudo shifted window attention.
//!
//! The channels of a `[B×H×W×C]` token grid are split contiguously:
//! channels `[0, h)` go through static window attention and channels
//! `[h, C)` through a depthwise-separable convolution ("bridge") whose
//! `(2K−1)×(2K−1)` receptive field straddles window borders. The two branch
//! outputs are concatenated back along channels; neither branch reads the
//! other's channels.

mod schedule;
mod similarity;

pub use schedule::{pcca_schedule, AllocationArm, ChannelPlan, PccaSchedule, ScheduleShape};
pub use similarity::{aggregate_neighborhood, kth_neighborhood, kth_order_similarity, GridPos, NeighborhoodK};

use crate::attention::{self, AttentionParams, AttentionVars, WindowSpec};
use crate::error::{Error, Result};
use crate::numerics::{FlopCategory, Graph, Rng, Tensor, Var};

/// Channel split and geometry of one PSWA layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PswaLayerConfig {
    pub channels: usize,
    /// Channels routed to window attention (`h_l`).
    pub window_channels: usize,
    pub head_dim: usize,
    /// Neighbourhood order `K`; the bridge kernel is `2K−1` wide.
    pub order: usize,
    pub window: (usize, usize),
}

impl PswaLayerConfig {
    pub fn new(
        channels: usize,
        window_channels: usize,
        head_dim: usize,
        order: usize,
        window: (usize, usize),
    ) -> Result<Self> {
        let cfg = PswaLayerConfig {
            channels,
            window_channels,
            head_dim,
            order,
            window,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_channels > self.channels {
            return Err(Error::Config(format!(
                "window channels {} exceed total channels {}",
                self.window_channels, self.channels
            )));
        }
        if self.head_dim == 0 || !self.window_channels.is_multiple_of(self.head_dim) {
            return Err(Error::Config(format!(
                "window channels {} are not a whole number of {}-wide heads",
                self.window_channels, self.head_dim
            )));
        }
        if self.order == 0 {
            return Err(Error::Config("neighbourhood order K must be >= 1".into()));
        }
        if self.window.0 == 0 || self.window.1 == 0 {
            return Err(Error::Config("window extents must be >= 1".into()));
        }
        Ok(())
    }

    pub fn bridge_channels(&self) -> usize {
        self.channels - self.window_channels
    }

    pub fn kernel_size(&self) -> usize {
        2 * self.order - 1
    }

    pub fn num_heads(&self) -> usize {
        self.window_channels / self.head_dim
    }
}

/// Weights of the depthwise-separable bridge branch.
#[derive(Clone, Debug)]
pub struct BridgeParams {
    /// `[C_b × k × k]`
    pub kernels: Tensor,
    /// `[C_b × C_b]`, indexed `[out, in]`.
    pub pointwise: Tensor,
    /// `[C_b]`
    pub bias: Tensor,
}

impl BridgeParams {
    pub fn random(channels: usize, kernel: usize, std: f64, rng: &mut Rng) -> Self {
        BridgeParams {
            kernels: Tensor::randn(&[channels, kernel, kernel], std, rng),
            pointwise: Tensor::randn(&[channels, channels], std, rng),
            bias: Tensor::zeros(&[channels]),
        }
    }
}

/// Parameters of one PSWA layer. A branch with zero channels has no params.
#[derive(Clone, Debug)]
pub struct PswaParams {
    pub attention: Option<(AttentionParams, WindowSpec)>,
    pub bridge: Option<BridgeParams>,
}

impl PswaParams {
    pub fn random(cfg: &PswaLayerConfig, std: f64, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let attention = if cfg.window_channels > 0 {
            let heads = cfg.num_heads();
            let p = AttentionParams::random(cfg.window_channels, heads, std, rng)?;
            let (wh, ww) = cfg.window;
            let table = Tensor::randn(&[heads, attention::bias_table_len(wh, ww)], std, rng);
            Some((p, WindowSpec::with_bias(wh, ww, table)?))
        } else {
            None
        };
        let bridge = (cfg.bridge_channels() > 0)
            .then(|| BridgeParams::random(cfg.bridge_channels(), cfg.kernel_size(), std, rng));
        Ok(PswaParams { attention, bridge })
    }

    /// Records every weight as a constant on `g`.
    pub fn bind_constants(&self, g: &mut Graph) -> PswaVars {
        PswaVars {
            attention: self.attention.as_ref().map(|(p, spec)| {
                let vars = p.bind(g);
                (vars, Some(g.constant(spec.rel_pos_bias.clone())))
            }),
            bridge: self.bridge.as_ref().map(|b| BridgeVars {
                kernels: g.constant(b.kernels.clone()),
                pointwise: g.constant(b.pointwise.clone()),
                bias: Some(g.constant(b.bias.clone())),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BridgeVars {
    pub kernels: Var,
    pub pointwise: Var,
    pub bias: Option<Var>,
}

/// PSWA weights recorded on a graph. The bias table is optional so that
/// `P_w = 0` can be expressed without a table.
#[derive(Clone, Copy, Debug)]
pub struct PswaVars {
    pub attention: Option<(AttentionVars, Option<Var>)>,
    pub bridge: Option<BridgeVars>,
}

#[derive(Clone, Copy, Debug)]
pub struct PswaOutput {
    pub out: Var,
    /// Per-window attention weights `[(B·nWin)×heads×n×n]`, when the window
    /// branch is active.
    pub attn: Option<Var>,
}

/// Splits `x[B×H×W×C]` into the window-branch channels `[0, h)` and the
/// bridge channels `[h, C)`. An empty side is `None`.
pub fn channel_split(x: &Tensor, cfg: &PswaLayerConfig) -> Result<(Option<Tensor>, Option<Tensor>)> {
    cfg.validate()?;
    if x.rank() != 4 || x.last_dim() != cfg.channels {
        return Err(Error::dim("channel_split", x.shape(), &[0, 0, 0, cfg.channels]));
    }
    let h = cfg.window_channels;
    let c = cfg.channels;
    let win = (h > 0).then(|| x.slice_last(0, h)).transpose()?;
    let bridge = (h < c).then(|| x.slice_last(h, c)).transpose()?;
    Ok((win, bridge))
}

/// Depthwise `k×k` convolution followed by a pointwise channel mix on a
/// recorded channels-last grid `[B×H×W×C_b]`.
pub fn bridge_graph(g: &mut Graph, x: Var, p: &BridgeVars) -> Result<Var> {
    let nchw = g.permute(x, &[0, 3, 1, 2])?;
    g.set_category(FlopCategory::BridgeDepthwise);
    let dw = g.depthwise_conv2d(nchw, p.kernels)?;
    g.set_category(FlopCategory::BridgePointwise);
    let pw = g.pointwise_conv2d(dw, p.pointwise, p.bias)?;
    g.permute(pw, &[0, 2, 3, 1])
}

/// Bridge branch on `x_bridge[B×H×W×C_b]`. A missing (zero-channel) input
/// passes through as `None`.
pub fn bridge_branch(x_bridge: Option<&Tensor>, params: &BridgeParams) -> Result<Option<Tensor>> {
    let Some(x) = x_bridge else { return Ok(None) };
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = BridgeVars {
        kernels: g.constant(params.kernels.clone()),
        pointwise: g.constant(params.pointwise.clone()),
        bias: Some(g.constant(params.bias.clone())),
    };
    let y = bridge_graph(&mut g, xv, &vars)?;
    Ok(Some(g.value(y).clone()))
}

/// Records a PSWA layer on `g` for the grid `x[B×H×W×C]`.
pub fn pswa_graph(g: &mut Graph, x: Var, cfg: &PswaLayerConfig, vars: &PswaVars) -> Result<PswaOutput> {
    cfg.validate()?;
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[3] != cfg.channels {
        return Err(Error::dim("pswa", &shape, &[0, 0, 0, cfg.channels]));
    }
    let (h, c) = (cfg.window_channels, cfg.channels);
    if vars.attention.is_some() != (h > 0) || vars.bridge.is_some() != (h < c) {
        return Err(Error::Config(format!(
            "PSWA params do not match the {h}/{} channel split",
            c - h
        )));
    }

    let mut attn = None;
    let win_out = match &vars.attention {
        Some((avars, bias)) => {
            let xw = if h == c { x } else { g.slice_last(x, 0, h)? };
            let (y, a) = attention::window_attention_graph(g, xw, avars, cfg.window, *bias)?;
            attn = Some(a);
            Some(y)
        }
        None => None,
    };
    let bridge_out = match &vars.bridge {
        Some(bvars) => {
            let xb = if h == 0 { x } else { g.slice_last(x, h, c)? };
            Some(bridge_graph(g, xb, bvars)?)
        }
        None => None,
    };
    let out = match (win_out, bridge_out) {
        (Some(a), Some(b)) => g.concat_last(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("validated channel split"),
    };
    Ok(PswaOutput { out, attn })
}

/// PSWA forward on `x[B×H×W×C]`.
pub fn pswa_forward(x: &Tensor, cfg: &PswaLayerConfig, params: &PswaParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = params.bind_constants(&mut g);
    let out = pswa_graph(&mut g, xv, cfg, &vars)?;
    Ok(g.value(out.out).clone())
}
