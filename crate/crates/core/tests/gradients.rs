use pswa::checks::{gradient_suite, MODULES, OP_TOLERANCE};
use pswa::model::{ModelConfig, PccaConfig};
use pswa::numerics::{gradcheck_inputs, GradcheckOptions};
use std::sync::Arc;

use proptest::prelude::*;
use pswa::{Graph, Rng, Tensor, Var};

#[test]
fn every_module_suite_passes() {
    let results = gradient_suite(
        None,
        &ModelConfig::default(),
        &PccaConfig::default(),
        &GradcheckOptions::default(),
        0,
    )
    .unwrap();
    for m in MODULES {
        assert!(results.iter().any(|r| r.module == m), "no cases for {m}");
    }
    for r in &results {
        assert!(r.report.checked > 0, "{} checked nothing", r.name);
        assert!(
            r.passed(),
            "{}/{}: {:e} >= {:e}",
            r.module,
            r.name,
            r.report.max_rel_error,
            r.tolerance
        );
    }
}

#[test]
fn conditional_model_suite_passes() {
    let base = ModelConfig {
        num_classes: 3,
        order: 3,
        ..Default::default()
    };
    for r in gradient_suite(
        Some("model"),
        &base,
        &PccaConfig::default(),
        &GradcheckOptions::default(),
        2,
    )
    .unwrap()
    {
        assert!(r.passed(), "{}: {:e}", r.name, r.report.max_rel_error);
    }
}

#[test]
fn corrupted_gradients_are_caught() {
    let opts = GradcheckOptions {
        corrupt_analytic: 1e-3,
        ..Default::default()
    };
    let results = gradient_suite(
        Some("numerics"),
        &ModelConfig::default(),
        &PccaConfig::default(),
        &opts,
        0,
    )
    .unwrap();
    assert!(results.iter().all(|r| !r.passed()));
}

#[test]
fn unknown_module_is_rejected() {
    let err = gradient_suite(
        Some("optics"),
        &ModelConfig::default(),
        &PccaConfig::default(),
        &GradcheckOptions::default(),
        0,
    );
    assert!(matches!(err, Err(pswa::Error::Usage(_))));
}

fn weighted_check(inputs: &[Tensor], seed: u64, op: impl Fn(&mut Graph, &[Var]) -> pswa::Result<Var>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = op(&mut g, &vars).unwrap();
    let w = Tensor::randn(g.shape(y), 1.0, &mut Rng::new(seed));
    let f = |g: &mut Graph, v: &[Var]| {
        let y = op(g, v)?;
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv)?;
        Ok(g.sum(p))
    };
    gradcheck_inputs(f, inputs, &GradcheckOptions::default())
        .unwrap()
        .max_rel_error
}

#[test]
fn fixed_shape_ops_are_within_one_part_per_million() {
    let mut rng = Rng::new(21);
    let mut r = |s: &[usize]| Tensor::randn(s, 1.0, &mut rng);
    let cases: Vec<(&str, f64)> = vec![
        (
            "matmul 5x7 7x3",
            weighted_check(&[r(&[5, 7]), r(&[7, 3])], 1, |g, v| g.matmul(v[0], v[1])),
        ),
        (
            "softmax 6x6",
            weighted_check(&[r(&[6, 6])], 2, |g, v| Ok(g.softmax_rows(v[0]))),
        ),
        (
            "depthwise 1x2x5x5",
            weighted_check(&[r(&[1, 2, 5, 5]), r(&[2, 3, 3])], 3, |g, v| {
                g.depthwise_conv2d(v[0], v[1])
            }),
        ),
        (
            "pointwise 2x3x4x5",
            weighted_check(&[r(&[2, 3, 4, 5]), r(&[4, 3]), r(&[4])], 4, |g, v| {
                g.pointwise_conv2d(v[0], v[1], Some(v[2]))
            }),
        ),
        (
            "layernorm 4x8",
            weighted_check(&[r(&[4, 8]), r(&[8]), r(&[8])], 5, |g, v| {
                g.layernorm(v[0], v[1], v[2], 1e-6)
            }),
        ),
    ];
    for (name, err) in cases {
        assert!(err < 1e-6, "{name}: {err:e}");
    }
}

#[test]
fn sum_of_squares_closed_form() {
    let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
    let err = pswa::numerics::gradcheck(
        |g, v| {
            let y = g.mul(v, v)?;
            Ok(g.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err.max_rel_error < 1e-8);
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> pswa::Result<Var>>;

/// Every differentiable op with inputs of the given dimensions.
fn ops_at(m: usize, k: usize, n: usize, rng: &mut Rng) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, rng);
    let index: Arc<Vec<usize>> = Arc::new((0..m * n + 3).map(|i| (i * 5 + 1) % (m * k)).collect());
    vec![
        (
            "matmul",
            vec![r(&[m, k]), r(&[k, n])],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "bmm",
            vec![r(&[2, m, k]), r(&[2, k, n])],
            Box::new(|g, v| g.bmm(v[0], v[1], false)),
        ),
        (
            "bmm_t",
            vec![r(&[2, m, k]), r(&[2, n, k])],
            Box::new(|g, v| g.bmm(v[0], v[1], true)),
        ),
        ("add", vec![r(&[m, k]), r(&[m, k])], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![r(&[m, k]), r(&[m, k])], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![r(&[m, k]), r(&[m, k])], Box::new(|g, v| g.mul(v[0], v[1]))),
        (
            "add_trailing",
            vec![r(&[m, n, k]), r(&[k])],
            Box::new(|g, v| g.add_trailing(v[0], v[1])),
        ),
        (
            "mul_trailing",
            vec![r(&[m, n, k]), r(&[n, k])],
            Box::new(|g, v| g.mul_trailing(v[0], v[1])),
        ),
        ("scale", vec![r(&[m, k])], Box::new(|g, v| Ok(g.scale(v[0], 0.7)))),
        (
            "add_scalar",
            vec![r(&[m, k])],
            Box::new(|g, v| {
                let y = g.add_scalar(v[0], 1.5);
                g.mul(y, v[0])
            }),
        ),
        (
            "gather",
            vec![r(&[m, k])],
            Box::new(move |g, v| g.gather(v[0], index.clone(), &[m * n + 3])),
        ),
        (
            "reshape_permute",
            vec![r(&[m, k, n])],
            Box::new(move |g, v| {
                let y = g.permute(v[0], &[2, 0, 1])?;
                g.reshape(y, &[n * m, k])
            }),
        ),
        (
            "slice_last",
            vec![r(&[m, k + 1])],
            Box::new(move |g, v| g.slice_last(v[0], 1, k + 1)),
        ),
        (
            "concat_last",
            vec![r(&[m, k]), r(&[m, n])],
            Box::new(|g, v| g.concat_last(v[0], v[1])),
        ),
        (
            "softmax_rows",
            vec![r(&[m, k + 1])],
            Box::new(|g, v| Ok(g.softmax_rows(v[0]))),
        ),
        (
            "normalize",
            vec![r(&[m, k + 2])],
            Box::new(|g, v| Ok(g.normalize(v[0], 1e-6))),
        ),
        (
            "layernorm",
            vec![r(&[m, k + 2]), r(&[k + 2]), r(&[k + 2])],
            Box::new(|g, v| g.layernorm(v[0], v[1], v[2], 1e-6)),
        ),
        ("gelu", vec![r(&[m, k])], Box::new(|g, v| Ok(g.gelu(v[0])))),
        ("silu", vec![r(&[m, k])], Box::new(|g, v| Ok(g.silu(v[0])))),
        (
            "depthwise",
            vec![r(&[1, n, m + 2, k + 2]), r(&[n, 3, 3])],
            Box::new(|g, v| g.depthwise_conv2d(v[0], v[1])),
        ),
        (
            "pointwise",
            vec![r(&[1, k, m, n]), r(&[n, k]), r(&[n])],
            Box::new(|g, v| g.pointwise_conv2d(v[0], v[1], Some(v[2]))),
        ),
        (
            "sum",
            vec![r(&[m, k])],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.sum(y))
            }),
        ),
        (
            "mean",
            vec![r(&[m, k])],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.mean(y))
            }),
        ),
        ("mse", vec![r(&[m, k]), r(&[m, k])], Box::new(|g, v| g.mse(v[0], v[1]))),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_op_on_random_shapes(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        for (name, inputs, op) in ops_at(m, k, n, &mut rng) {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let y = op(&mut g, &vars).unwrap();
            let w = Tensor::randn(g.shape(y), 1.0, &mut rng);
            let f = |g: &mut Graph, v: &[Var]| {
                let y = op(g, v)?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                Ok(g.sum(p))
            };
            let r = gradcheck_inputs(f, &inputs, &GradcheckOptions::default()).unwrap();
            prop_assert!(r.max_rel_error < OP_TOLERANCE, "{name} {m}x{k}x{n}: {:e} {:?}", r.max_rel_error, r.worst);
        }
    }
}
