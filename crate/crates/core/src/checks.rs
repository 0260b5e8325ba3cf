//! Finite-difference gradient suites over every differentiable operation,
//! grouped by module.
//!
//! Each case reduces its op's output to a scalar with fixed random weights,
//! so no gradient is structurally zero, and compares the tape gradient of
//! every input entry against central differences.

use std::sync::Arc;

use crate::attention::{self, AttentionVars};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{
    block_graph, timestep_graph, BlockParams, ModelConfig, PccaConfig, SwinDiT, TimestepMlp, TimestepVars,
};
use crate::numerics::{gradcheck_inputs, GradcheckOptions, GradcheckReport, Graph, Rng, Tensor, Var};
use crate::pswa::{self, BridgeVars, PswaLayerConfig, PswaParams, PswaVars};

/// Relative-error bound for single operations.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Relative-error bound for whole-model and loss checks.
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
/// Finite-difference step for whole-model and loss checks, where rounding
/// in the deeper forward pass outweighs truncation at smaller steps.
pub const END_TO_END_STEP: f64 = 3e-5;

/// Scale of the random weights in whole-model checks; zero-initialised
/// gates would make most gradients vanish.
const MODEL_STD: f64 = 0.3;

pub const MODULES: [&str; 5] = ["numerics", "attention", "pswa", "model", "diffusion"];

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub module: &'static str,
    pub name: String,
    pub tolerance: f64,
    pub report: GradcheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

type Loss = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    module: &'static str,
    name: String,
    tolerance: f64,
    step: Option<f64>,
    inputs: Vec<Tensor>,
    loss: Loss,
}

/// `Σ y ⊙ w` for a fixed weight tensor `w`.
fn weighted(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

/// Builds the case from a function producing a non-scalar output; the
/// output is reduced with weights drawn once from `rng`.
fn op_case<F>(module: &'static str, name: &str, inputs: Vec<Tensor>, rng: &mut Rng, f: F) -> Result<Case>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let w = Tensor::randn(g.shape(y), 1.0, rng);
    Ok(Case {
        module,
        name: name.into(),
        tolerance: OP_TOLERANCE,
        step: None,
        inputs,
        loss: Box::new(move |g, v| {
            let y = f(g, v)?;
            weighted(g, y, &w)
        }),
    })
}

fn numerics_cases(rng: &mut Rng) -> Result<Vec<Case>> {
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, rng);
    let ins = vec![
        ("matmul", vec![r(&[5, 7]), r(&[7, 3])]),
        ("bmm", vec![r(&[2, 3, 4]), r(&[2, 4, 5])]),
        ("bmm_transposed", vec![r(&[2, 3, 4]), r(&[2, 5, 4])]),
        ("add", vec![r(&[3, 4]), r(&[3, 4])]),
        ("sub", vec![r(&[3, 4]), r(&[3, 4])]),
        ("mul", vec![r(&[3, 4]), r(&[3, 4])]),
        ("add_trailing", vec![r(&[2, 3, 4]), r(&[3, 4])]),
        ("mul_trailing", vec![r(&[2, 3, 4]), r(&[4])]),
        ("scale", vec![r(&[3, 4])]),
        ("add_scalar", vec![r(&[3, 4])]),
        ("gather", vec![r(&[3, 4])]),
        ("reshape_permute", vec![r(&[2, 3, 4])]),
        ("slice_last", vec![r(&[2, 3, 5])]),
        ("concat_last", vec![r(&[2, 3]), r(&[2, 4])]),
        ("softmax_rows", vec![r(&[4, 8])]),
        ("normalize", vec![r(&[4, 8])]),
        ("layernorm", vec![r(&[4, 8]), r(&[8]), r(&[8])]),
        ("gelu", vec![r(&[3, 5])]),
        ("silu", vec![r(&[3, 5])]),
        ("depthwise_conv2d", vec![r(&[1, 2, 5, 5]), r(&[2, 3, 3])]),
        ("pointwise_conv2d", vec![r(&[2, 3, 4, 4]), r(&[2, 3]), r(&[2])]),
        ("mean", vec![r(&[3, 4])]),
        ("mse", vec![r(&[3, 4]), r(&[3, 4])]),
    ];
    let gather_index: Arc<Vec<usize>> = Arc::new((0..20).map(|i| (i * 7) % 12).collect());
    let mut cases = Vec::new();
    for (name, inputs) in ins {
        let index = gather_index.clone();
        let f: Loss = match name {
            "matmul" => Box::new(|g, v| g.matmul(v[0], v[1])),
            "bmm" => Box::new(|g, v| g.bmm(v[0], v[1], false)),
            "bmm_transposed" => Box::new(|g, v| g.bmm(v[0], v[1], true)),
            "add" => Box::new(|g, v| g.add(v[0], v[1])),
            "sub" => Box::new(|g, v| g.sub(v[0], v[1])),
            "mul" => Box::new(|g, v| g.mul(v[0], v[1])),
            "add_trailing" => Box::new(|g, v| g.add_trailing(v[0], v[1])),
            "mul_trailing" => Box::new(|g, v| g.mul_trailing(v[0], v[1])),
            "scale" => Box::new(|g, v| Ok(g.scale(v[0], -1.7))),
            "add_scalar" => Box::new(|g, v| {
                let y = g.add_scalar(v[0], 0.3);
                g.mul(y, y)
            }),
            "gather" => Box::new(move |g, v| g.gather(v[0], index.clone(), &[4, 5])),
            "reshape_permute" => Box::new(|g, v| {
                let y = g.reshape(v[0], &[6, 4])?;
                let y = g.reshape(y, &[2, 3, 4])?;
                g.permute(y, &[2, 0, 1])
            }),
            "slice_last" => Box::new(|g, v| g.slice_last(v[0], 1, 4)),
            "concat_last" => Box::new(|g, v| g.concat_last(v[0], v[1])),
            "softmax_rows" => Box::new(|g, v| Ok(g.softmax_rows(v[0]))),
            "normalize" => Box::new(|g, v| Ok(g.normalize(v[0], 1e-6))),
            "layernorm" => Box::new(|g, v| g.layernorm(v[0], v[1], v[2], 1e-6)),
            "gelu" => Box::new(|g, v| Ok(g.gelu(v[0]))),
            "silu" => Box::new(|g, v| Ok(g.silu(v[0]))),
            "depthwise_conv2d" => Box::new(|g, v| g.depthwise_conv2d(v[0], v[1])),
            "pointwise_conv2d" => Box::new(|g, v| g.pointwise_conv2d(v[0], v[1], Some(v[2]))),
            "mean" => Box::new(|g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.mean(y))
            }),
            "mse" => Box::new(|g, v| g.mse(v[0], v[1])),
            _ => unreachable!(),
        };
        cases.push(op_case("numerics", name, inputs, rng, f)?);
    }
    Ok(cases)
}

fn attention_cases(rng: &mut Rng) -> Result<Vec<Case>> {
    let (c, heads) = (8, 2);
    let n = 6;
    let mut inputs = vec![Tensor::randn(&[2, n, c], 1.0, rng)];
    inputs.extend((0..4).map(|_| Tensor::randn(&[c, c], 0.5, rng)));
    inputs.push(Tensor::randn(&[heads, n, n], 0.5, rng));
    let full = op_case("attention", "mhsa", inputs, rng, move |g, v| {
        let p = AttentionVars {
            num_heads: heads,
            wq: v[1],
            wk: v[2],
            wv: v[3],
            wo: v[4],
        };
        Ok(attention::mhsa_graph(g, v[0], &p, Some(v[5]))?.0)
    })?;

    let (wh, ww) = (2, 2);
    let mut inputs = vec![Tensor::randn(&[1, 4, 4, c], 1.0, rng)];
    inputs.extend((0..4).map(|_| Tensor::randn(&[c, c], 0.5, rng)));
    inputs.push(Tensor::randn(&[heads, attention::bias_table_len(wh, ww)], 0.5, rng));
    let window = op_case("attention", "window_attention", inputs, rng, move |g, v| {
        let p = AttentionVars {
            num_heads: heads,
            wq: v[1],
            wk: v[2],
            wv: v[3],
            wo: v[4],
        };
        Ok(attention::window_attention_graph(g, v[0], &p, (wh, ww), Some(v[5]))?.0)
    })?;
    Ok(vec![full, window])
}

fn pswa_cases(rng: &mut Rng) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for order in [1, 2, 3] {
        let k = 2 * order - 1;
        let inputs = vec![
            Tensor::randn(&[1, 4, 4, 3], 1.0, rng),
            Tensor::randn(&[3, k, k], 0.5, rng),
            Tensor::randn(&[3, 3], 0.5, rng),
            Tensor::randn(&[3], 0.5, rng),
        ];
        cases.push(op_case("pswa", &format!("bridge_k{order}"), inputs, rng, |g, v| {
            let b = BridgeVars {
                kernels: v[1],
                pointwise: v[2],
                bias: Some(v[3]),
            };
            pswa::bridge_graph(g, v[0], &b)
        })?);
    }
    let cfg = PswaLayerConfig::new(8, 4, 2, 2, (2, 2))?;
    let params = PswaParams::random(&cfg, 0.5, rng)?;
    let (ap, spec) = params
        .attention
        .clone()
        .ok_or_else(|| Error::Config("no window branch".into()))?;
    let bp = params
        .bridge
        .clone()
        .ok_or_else(|| Error::Config("no bridge branch".into()))?;
    let inputs = vec![
        Tensor::randn(&[1, 4, 4, 8], 1.0, rng),
        ap.wq,
        ap.wk,
        ap.wv,
        ap.wo,
        spec.rel_pos_bias,
        bp.kernels,
        bp.pointwise,
        bp.bias,
    ];
    let heads = cfg.num_heads();
    cases.push(op_case("pswa", "pswa_forward", inputs, rng, move |g, v| {
        let vars = PswaVars {
            attention: Some((
                AttentionVars {
                    num_heads: heads,
                    wq: v[1],
                    wk: v[2],
                    wv: v[3],
                    wo: v[4],
                },
                Some(v[5]),
            )),
            bridge: Some(BridgeVars {
                kernels: v[6],
                pointwise: v[7],
                bias: Some(v[8]),
            }),
        };
        Ok(pswa::pswa_graph(g, v[0], &cfg, &vars)?.out)
    })?);
    Ok(cases)
}

/// The small configuration used for whole-model checks: an 8×8 single
/// channel image, 2×2 patches, width 16 and depth 2. Order, conditioning,
/// position embedding and channel allocation follow `base`.
pub fn gradcheck_model_config(base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        image_size: (8, 8),
        in_channels: 1,
        patch_size: 2,
        d_model: 16,
        depth: 2,
        heads: 4,
        window: (2, 2),
        mlp_ratio: 2.0,
        freq_dim: 8,
        ..base.clone()
    }
}

fn model_cases(base: &ModelConfig, pcca: &PccaConfig, rng: &mut Rng) -> Result<Vec<Case>> {
    let steps = 50;
    let mlp = TimestepMlp::random(8, 6, 0.5, rng);
    let timestep = op_case(
        "model",
        "timestep_mlp",
        vec![mlp.w1, mlp.b1, mlp.w2, mlp.b2],
        rng,
        move |g, v| {
            let vars = TimestepVars {
                w1: v[0],
                b1: v[1],
                w2: v[2],
                b2: v[3],
            };
            timestep_graph(g, &[3, 41], steps, &vars)
        },
    )?;

    let cfg = PswaLayerConfig::new(8, 4, 2, 2, (2, 2))?;
    let bp = BlockParams::random(&cfg, 16, 0.4, rng)?;
    let inputs = vec![Tensor::randn(&[2, 4, 4, 8], 1.0, rng), Tensor::randn(&[2, 8], 1.0, rng)];
    let mut all = inputs;
    let (ap, spec) = bp
        .pswa
        .attention
        .clone()
        .ok_or_else(|| Error::Config("no window branch".into()))?;
    let br = bp
        .pswa
        .bridge
        .clone()
        .ok_or_else(|| Error::Config("no bridge branch".into()))?;
    all.extend([
        ap.wq,
        ap.wk,
        ap.wv,
        ap.wo,
        spec.rel_pos_bias,
        br.kernels,
        br.pointwise,
        br.bias,
    ]);
    all.extend([bp.mod_w, bp.mod_b, bp.mlp_w1, bp.mlp_b1, bp.mlp_w2, bp.mlp_b2]);
    let heads = cfg.num_heads();
    let block = op_case("model", "block", all, rng, move |g, v| {
        let vars = crate::model::BlockVars {
            pswa: PswaVars {
                attention: Some((
                    AttentionVars {
                        num_heads: heads,
                        wq: v[2],
                        wk: v[3],
                        wv: v[4],
                        wo: v[5],
                    },
                    Some(v[6]),
                )),
                bridge: Some(BridgeVars {
                    kernels: v[7],
                    pointwise: v[8],
                    bias: Some(v[9]),
                }),
            },
            mod_w: v[10],
            mod_b: v[11],
            mlp_w1: v[12],
            mlp_b1: v[13],
            mlp_w2: v[14],
            mlp_b2: v[15],
        };
        Ok(block_graph(g, v[0], v[1], &vars, &cfg)?.out)
    })?;

    let mc = gradcheck_model_config(base);
    let plan = pcca.plan(&mc)?;
    let mut model = SwinDiT::new(&mc, &plan, steps, rng)?;
    model.randomize(MODEL_STD, rng);
    let x = Tensor::randn(&[2, 1, 8, 8], 1.0, rng);
    let labels = (mc.num_classes > 0).then(|| vec![0, mc.num_classes - 1]);
    let inputs = model.params().tensors().to_vec();
    let mut case = op_case("model", "swin_dit_depth2", inputs, rng, move |g, v| {
        let xv = g.constant(x.clone());
        Ok(model.forward_graph(g, v, xv, &[5, 33], labels.as_deref())?.eps)
    })?;
    case.tolerance = END_TO_END_TOLERANCE;
    case.step = Some(END_TO_END_STEP);
    Ok(vec![timestep, block, case])
}

fn diffusion_cases(base: &ModelConfig, pcca: &PccaConfig, rng: &mut Rng) -> Result<Vec<Case>> {
    let mc = gradcheck_model_config(base);
    let plan = pcca.plan(&mc)?;
    let schedule = NoiseSchedule::linear(50, 1e-4, 2e-2)?;
    let mut model = SwinDiT::new(&mc, &plan, schedule.steps(), rng)?;
    model.randomize(MODEL_STD, rng);
    let x0 = Tensor::uniform(&[2, 1, 8, 8], -1.0, 1.0, rng);
    let noise = Tensor::randn(x0.shape(), 1.0, rng);
    let t = [7, 40];
    let x_t = crate::diffusion::q_sample_batch(&schedule, &x0, &t, &noise)?;
    let labels = (mc.num_classes > 0).then(|| vec![1 % mc.num_classes, 0]);
    let inputs = model.params().tensors().to_vec();
    Ok(vec![Case {
        module: "diffusion",
        name: "training_loss".into(),
        tolerance: END_TO_END_TOLERANCE,
        step: Some(END_TO_END_STEP),
        inputs,
        loss: Box::new(move |g, v| {
            let xv = g.constant(x_t.clone());
            let target = g.constant(noise.clone());
            let eps = model.forward_graph(g, v, xv, &t, labels.as_deref())?.eps;
            g.mse(eps, target)
        }),
    }])
}

/// Runs the gradient suites of the selected module (all when `module` is
/// `None`). The diffusion suite checks a subsample of each parameter,
/// capped by `max_entries_per_input` in `opts` or 16 entries. Whole-model
/// cases use [`END_TO_END_STEP`] in place of `opts.step`.
pub fn gradient_suite(
    module: Option<&str>,
    base: &ModelConfig,
    pcca: &PccaConfig,
    opts: &GradcheckOptions,
    seed: u64,
) -> Result<Vec<CaseResult>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::Usage(format!(
                "unknown module {m}; expected one of {}",
                MODULES.join(", ")
            )));
        }
    }
    let root = Rng::new(seed);
    let wanted = |m: &str| module.is_none_or(|x| x == m);
    let mut cases = Vec::new();
    if wanted("numerics") {
        cases.extend(numerics_cases(&mut root.split(0))?);
    }
    if wanted("attention") {
        cases.extend(attention_cases(&mut root.split(1))?);
    }
    if wanted("pswa") {
        cases.extend(pswa_cases(&mut root.split(2))?);
    }
    if wanted("model") {
        cases.extend(model_cases(base, pcca, &mut root.split(3))?);
    }
    if wanted("diffusion") {
        cases.extend(diffusion_cases(base, pcca, &mut root.split(4))?);
    }
    cases
        .into_iter()
        .map(|c| {
            let mut o = opts.clone();
            o.step = c.step.unwrap_or(o.step);
            if c.module == "diffusion" && o.max_entries_per_input.is_none() {
                o.max_entries_per_input = Some(16);
            }
            let report = gradcheck_inputs(&c.loss, &c.inputs, &o)?;
            Ok(CaseResult {
                module: c.module,
                name: c.name,
                tolerance: c.tolerance,
                report,
            })
        })
        .collect()
}
