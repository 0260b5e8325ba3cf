//! Closed-form FLOPs and parameter counts for the toy Swin-DiT.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::Result;
use crate::model::ModelConfig;
use crate::numerics::FlopCategory;
use crate::pswa::ChannelPlan;

pub const FLOPS_CONVENTION: &str =
    "1 multiply-accumulate = 2 FLOPs; softmax, normalisation, activations and bias adds excluded; per sample";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComponentCount {
    pub category: FlopCategory,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsReport {
    pub components: Vec<ComponentCount>,
    pub total_flops: u64,
    pub total_params: u64,
}

impl FlopsReport {
    fn from_parts(flops: &BTreeMap<FlopCategory, u64>, params: &BTreeMap<FlopCategory, u64>) -> Self {
        let components: Vec<ComponentCount> = FlopCategory::ALL
            .iter()
            .map(|&category| ComponentCount {
                category,
                flops: flops.get(&category).copied().unwrap_or(0),
                params: params.get(&category).copied().unwrap_or(0),
            })
            .collect();
        FlopsReport {
            total_flops: components.iter().map(|c| c.flops).sum(),
            total_params: components.iter().map(|c| c.params).sum(),
            components,
        }
    }

    /// Report built from multiply-accumulates counted by a recorded forward
    /// pass over `batch` samples. Parameter counts are left at zero.
    pub fn from_instrumented(macs: &BTreeMap<FlopCategory, u64>, batch: usize) -> Self {
        let flops = macs.iter().map(|(&c, &m)| (c, 2 * m / batch as u64)).collect();
        FlopsReport::from_parts(&flops, &BTreeMap::new())
    }

    pub fn flops(&self, category: FlopCategory) -> u64 {
        self.component(category).flops
    }

    pub fn params(&self, category: FlopCategory) -> u64 {
        self.component(category).params
    }

    fn component(&self, category: FlopCategory) -> ComponentCount {
        self.components
            .iter()
            .copied()
            .find(|c| c.category == category)
            .unwrap_or(ComponentCount {
                category,
                flops: 0,
                params: 0,
            })
    }

    /// Query-key logits plus the weighted sum of values.
    pub fn pair_term(&self) -> u64 {
        self.flops(FlopCategory::AttentionPair)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "# pswa flops report v1: {FLOPS_CONVENTION}")?;
        writeln!(out, "component,flops,params")?;
        for c in &self.components {
            writeln!(out, "{},{},{}", c.category.name(), c.flops, c.params)?;
        }
        writeln!(out, "total,{},{}", self.total_flops, self.total_params)?;
        Ok(())
    }
}

/// Per-sample FLOPs and parameters of `model` under `plan`.
pub fn flops_report(model: &ModelConfig, plan: &ChannelPlan) -> Result<FlopsReport> {
    model.validate()?;
    model.check_plan(plan)?;
    let n = model.tokens() as u64;
    let d = model.d_model as u64;
    let p = model.patch_dim() as u64;
    let f = model.freq_dim as u64;
    let hidden = model.mlp_hidden() as u64;
    let k2 = (model.kernel_size() * model.kernel_size()) as u64;
    let area = (model.window.0 * model.window.1) as u64;
    let table = ((2 * model.window.0 - 1) * (2 * model.window.1 - 1)) as u64;
    let head_dim = model.head_dim() as u64;

    let mut macs = BTreeMap::new();
    let mut params = BTreeMap::new();
    let mut add = |c: FlopCategory, m: u64, q: u64| {
        *macs.entry(c).or_insert(0) += m;
        *params.entry(c).or_insert(0) += q;
    };

    add(FlopCategory::PatchEmbed, n * p * d, p * d + d);
    add(
        FlopCategory::Conditioning,
        f * d + d * d,
        f * d + d + d * d + d + model.num_classes as u64 * d,
    );
    for &h in &plan.window_channels {
        let h = h as u64;
        let cb = d - h;
        add(FlopCategory::Modulation, 6 * d * d, 6 * d * d + 6 * d);
        if h > 0 {
            add(FlopCategory::Projection, 4 * n * h * h, 4 * h * h);
            add(FlopCategory::AttentionPair, 2 * n * area * h, (h / head_dim) * table);
        }
        if cb > 0 {
            add(FlopCategory::BridgeDepthwise, n * k2 * cb, cb * k2);
            add(FlopCategory::BridgePointwise, n * cb * cb, cb * cb + cb);
        }
        add(FlopCategory::Mlp, 2 * n * d * hidden, 2 * d * hidden + hidden + d);
    }
    add(
        FlopCategory::FinalLayer,
        2 * d * d + n * d * p,
        2 * d * d + 2 * d + d * p + p,
    );

    let flops = macs.into_iter().map(|(c, m)| (c, 2 * m)).collect();
    Ok(FlopsReport::from_parts(&flops, &params))
}
