//! Acceptance harness: runs every primary criterion, prints one PASS/FAIL
//! line per criterion and exits nonzero when any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::{brute_neighborhood, distance_oracle, similarity_oracle};
use pswa::attention::{
    block_diagonal_mask, masked_full_attention_oracle, window_attention, AttentionParams, WindowSpec,
};
use pswa::checks::gradient_suite;
use pswa::diagnostics::{attention_distance, flops_report, AttentionMapSource, FlopsReport};
use pswa::diffusion::{DiffusionProbe, NoiseSchedule, ToyDataset};
use pswa::experiment::{mixer_spectrum, train_run, RunConfig};
use pswa::model::{ModelConfig, PccaConfig, SwinDiT};
use pswa::numerics::{FlopCategory, GradcheckOptions};
use pswa::pswa::{
    bridge_branch, kth_neighborhood, kth_order_similarity, AllocationArm, BridgeParams, ChannelPlan, GridPos,
    ScheduleShape,
};
use pswa::{Rng, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: pswa::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn window_attention_matches_masked_oracle() -> Outcome {
    let mut count = 0;
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(0);
    for (h, w) in [(8, 8), (4, 8), (8, 4), (4, 4), (2, 6), (6, 6)] {
        for (wh, ww) in [(1, 1), (2, 2), (4, 4), (h, w)] {
            if h % wh != 0 || w % ww != 0 {
                continue;
            }
            for _ in 0..6 {
                let heads = [1, 2, 4][rng.below(3)];
                let c = heads * (1 + rng.below(4));
                let batch = 1 + rng.below(2);
                let x = Tensor::randn(&[batch, h, w, c], 1.0, &mut rng);
                let params = ok(AttentionParams::random(c, heads, 0.5, &mut rng))?;
                let spec = ok(WindowSpec::new(wh, ww, heads))?;
                let y = ok(window_attention(&x, &params, &spec))?;
                let flat = ok(x.reshape(&[batch, h * w, c]))?;
                let mask = ok(block_diagonal_mask(h, w, wh, ww))?;
                let reference = ok(masked_full_attention_oracle(&flat, &params, &mask))?;
                let err = ok(y.reshape(&[batch, h * w, c]))?.max_abs_diff(&reference);
                ensure(err <= 1e-10, || format!("{h}x{w} window {wh}x{ww}: error {err:e}"))?;
                worst = worst.max(err);
                count += 1;
            }
        }
    }
    ensure(count >= 100, || format!("only {count} instances"))?;
    Ok(format!("{count} instances, max abs error {worst:.2e}"))
}

fn gradients_match_finite_differences() -> Outcome {
    let cases = ok(gradient_suite(
        None,
        &ModelConfig::default(),
        &PccaConfig::default(),
        &GradcheckOptions::default(),
        0,
    ))?;
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| {
            format!(
                "{}/{} {:.2e} >= {:.0e}",
                c.module, c.name, c.report.max_rel_error, c.tolerance
            )
        })
        .collect();
    ensure(failed.is_empty(), || failed.join("; "))?;
    let worst = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    Ok(format!("{} cases, max rel error {worst:.2e}", cases.len()))
}

fn attention_distance_is_exact() -> Outcome {
    let mut rng = Rng::new(1);
    for _ in 0..1000 {
        let (h, w) = (1 + rng.below(6), 1 + rng.below(6));
        let n = h * w;
        let a = Tensor::from_fn(&[n, n], |_| rng.uniform());
        let got = ok(attention_distance(&a, w))?;
        let want = distance_oracle(a.data(), h, w);
        ensure((got.0 - want.0).abs() < 1e-12 && (got.1 - want.1).abs() < 1e-12, || {
            format!("{h}x{w}: {got:?} vs {want:?}")
        })?;
    }
    let uniform = ok(attention_distance(&Tensor::full(&[4, 4], 0.25), 2))?;
    ensure(uniform == (0.5, 0.5), || format!("uniform 2x2 gave {uniform:?}"))?;

    let mut maps_checked = 0;
    for window in [(2, 2), (4, 4), (2, 4)] {
        let cfg = ModelConfig {
            image_size: (16, 16),
            window,
            depth: 3,
            ..Default::default()
        };
        let plan = ok(PccaConfig::default().plan(&cfg))?;
        let mut rng = Rng::new(2);
        let mut model = ok(SwinDiT::new(&cfg, &plan, 100, &mut rng))?;
        model.randomize(0.5, &mut rng);
        let schedule = ok(NoiseSchedule::linear(100, 1e-4, 2e-2))?;
        let probe = DiffusionProbe {
            model: &model,
            schedule: &schedule,
            labels: None,
            seed: 3,
        };
        let images = ok(ok(ToyDataset::new(0, 1, (16, 16)))?.batch_of(&[0, 1]))?.images;
        for t in [0, 50, 99] {
            for maps in ok(probe.attention_maps(&images, t))?.into_iter().flatten() {
                for g in 0..maps.groups() {
                    for head in 0..maps.heads() {
                        let (r, c) = ok(maps.distance(g, head))?;
                        ensure(r < window.0 as f64 && c < window.1 as f64, || {
                            format!("distance ({r}, {c}) in window {window:?}")
                        })?;
                        maps_checked += 1;
                    }
                }
            }
        }
    }
    Ok(format!(
        "1000 random maps exact, uniform 2x2 = (0.5, 0.5), {maps_checked} window maps in bounds"
    ))
}

fn neighborhoods_and_similarity_are_exact() -> Outcome {
    let mut centers = 0;
    for order in 1..=5 {
        for (h, w) in [(1, 1), (3, 5), (8, 8), (16, 16), (7, 12)] {
            for r in 0..h {
                for c in 0..w {
                    let center = GridPos::new(r, c);
                    let mut got = ok(kth_neighborhood(center, order, (h, w)))?.members;
                    got.sort_by_key(|p| (p.row, p.col));
                    ensure(got == brute_neighborhood(center, order, h, w), || {
                        format!("K={order} center ({r}, {c}) on {h}x{w}")
                    })?;
                    centers += 1;
                }
            }
        }
    }

    let mut rng = Rng::new(3);
    for trial in 0..200 {
        let (h, w, c) = (2 + rng.below(7), 2 + rng.below(7), 1 + rng.below(6));
        let order = 1 + trial % 5;
        let k = 2 * order - 1;
        let phi = Tensor::randn(&[h, w, c], 1.0, &mut rng);
        let psi = Tensor::randn(&[h, w, c], 1.0, &mut rng);
        let alpha: Vec<f64> = (0..k * k).map(|_| rng.normal()).collect();
        let i = GridPos::new(rng.below(h), rng.below(w));
        let j = GridPos::new(rng.below(h), rng.below(w));
        let got = ok(kth_order_similarity(&phi, &psi, i, j, order, &alpha, 0..c))?;
        let want = similarity_oracle(&phi, &psi, i, j, order, &alpha, 0..c);
        ensure((got - want).abs() <= 1e-12 * want.abs().max(1.0), || {
            format!("similarity K={order}: {got} vs {want}")
        })?;
    }

    let (h, w, c) = (5, 4, 6);
    let q = Tensor::randn(&[h, w, c], 1.0, &mut rng);
    let kt = Tensor::randn(&[h, w, c], 1.0, &mut rng);
    for _ in 0..20 {
        let i = GridPos::new(rng.below(h), rng.below(w));
        let j = GridPos::new(rng.below(h), rng.below(w));
        let got = ok(kth_order_similarity(&q, &kt, i, j, 1, &[1.0], 0..c))?;
        let qi = &q.data()[(i.row * w + i.col) * c..][..c];
        let kj = &kt.data()[(j.row * w + j.col) * c..][..c];
        let logit: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
        ensure((got - logit).abs() < 1e-12, || {
            format!("K=1 similarity {got} vs logit {logit}")
        })?;
    }
    Ok(format!(
        "{centers} neighbourhoods, 200 similarities, 20 first-order logits"
    ))
}

fn bridge_impulse_response_is_the_neighborhood() -> Outcome {
    let mut checked = 0;
    for order in 1..=5 {
        let k = 2 * order - 1;
        let mut rng = Rng::new(order as u64);
        for (grid, center) in [
            ((12, 12), (6, 5)),
            ((9, 9), (0, 0)),
            ((7, 10), (6, 9)),
            ((12, 12), (2, 11)),
        ] {
            let (h, w) = grid;
            let center = GridPos::new(center.0, center.1);
            let mut x = Tensor::zeros(&[1, h, w, 1]);
            x.set(&[0, center.row, center.col, 0], 1.0);
            let params = BridgeParams {
                kernels: Tensor::from_fn(&[1, k, k], |_| 0.5 + rng.uniform()),
                pointwise: Tensor::full(&[1, 1], 1.0),
                bias: Tensor::zeros(&[1]),
            };
            let y = ok(bridge_branch(Some(&x), &params))?.ok_or("bridge branch produced nothing")?;
            let support: Vec<GridPos> = (0..h)
                .flat_map(|r| (0..w).map(move |c| GridPos::new(r, c)))
                .filter(|p| y.get(&[0, p.row, p.col, 0]) != 0.0)
                .collect();
            let mut want = ok(kth_neighborhood(center, order, grid))?.members;
            want.sort_by_key(|p| (p.row, p.col));
            ensure(support == want, || {
                format!("K={order} impulse at {center:?} on {grid:?}")
            })?;
            checked += 1;
        }
    }
    Ok(format!("{checked} impulses, K = 1..5"))
}

fn flop_accounting_is_exact() -> Outcome {
    for (window, image) in [
        ((4, 4), (16, 16)),
        ((2, 2), (16, 16)),
        ((2, 4), (16, 32)),
        ((1, 1), (8, 8)),
    ] {
        let windowed = ModelConfig {
            image_size: image,
            window,
            ..Default::default()
        };
        let full = ModelConfig {
            window: windowed.grid(),
            ..windowed.clone()
        };
        let plan = ok(ChannelPlan::from_arm(
            AllocationArm::WindowOnly,
            4,
            0.0,
            1.0,
            32,
            8,
            ScheduleShape::Linear,
        ))?;
        let fw = ok(flops_report(&windowed, &plan))?.pair_term();
        let ff = ok(flops_report(&full, &plan))?.pair_term();
        let ratio = (windowed.tokens() / (window.0 * window.1)) as u64;
        ensure(ff == fw * ratio, || {
            format!("window {window:?}: {ff} != {fw} x {ratio}")
        })?;
    }

    let base = ModelConfig::default();
    let configs = [
        (base.clone(), AllocationArm::Increasing),
        (
            ModelConfig {
                window: (8, 8),
                ..base.clone()
            },
            AllocationArm::WindowOnly,
        ),
        (
            ModelConfig {
                depth: 3,
                order: 3,
                num_classes: 2,
                ..base.clone()
            },
            AllocationArm::BridgeOnly,
        ),
        (
            ModelConfig {
                image_size: (8, 16),
                in_channels: 3,
                window: (2, 4),
                depth: 5,
                ..base.clone()
            },
            AllocationArm::Decreasing,
        ),
        (
            ModelConfig {
                image_size: (12, 12),
                patch_size: 3,
                d_model: 48,
                heads: 6,
                window: (2, 2),
                depth: 2,
                mlp_ratio: 3.0,
                order: 1,
                ..base
            },
            AllocationArm::Constant,
        ),
    ];
    for (i, (cfg, arm)) in configs.into_iter().enumerate() {
        let plan = ok(PccaConfig {
            arm,
            ..Default::default()
        }
        .plan(&cfg))?;
        let model = ok(SwinDiT::new(&cfg, &plan, 10, &mut Rng::new(i as u64)))?;
        let report = ok(flops_report(&cfg, &plan))?;
        for batch in [1, 3] {
            let counted = FlopsReport::from_instrumented(&ok(model.count_forward_macs(batch))?, batch);
            for c in FlopCategory::ALL {
                if c != FlopCategory::Other {
                    ensure(counted.flops(c) == report.flops(c), || {
                        format!(
                            "config {i} {c:?}: counted {} vs closed form {}",
                            counted.flops(c),
                            report.flops(c)
                        )
                    })?;
                }
            }
        }
        ensure(report.total_params == model.params().numel() as u64, || {
            format!("config {i}: parameter count mismatch")
        })?;
    }
    Ok("pair-term ratio N/w on 4 grids, instrumented == closed form on 5 configs".into())
}

fn train_for_spectrum(cfg: &RunConfig) -> Result<(f64, f64, Vec<u8>), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (model, report) = ok(train_run(cfg, Some(dir.path())))?;
    let hf = ok(mixer_spectrum(cfg, &model))?.high_frequency_fraction();
    let n = report.losses.len();
    let drop = 1.0 - report.mean_loss(n.saturating_sub(50)..n) / report.mean_loss(0..50);
    let metrics = std::fs::read(dir.path().join("metrics.csv")).map_err(|e| e.to_string())?;
    Ok((hf, drop, metrics))
}

fn attention_only_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.window = cfg.model.grid();
    cfg.pcca.arm = AllocationArm::WindowOnly;
    cfg
}

fn pswa_keeps_more_high_frequency(first_metrics: &mut Option<Vec<u8>>) -> Outcome {
    let (pswa_hf, loss_drop, metrics) = train_for_spectrum(&RunConfig::default())?;
    let (attention_hf, attention_drop, _) = train_for_spectrum(&attention_only_config())?;
    *first_metrics = Some(metrics);
    ensure(loss_drop >= 0.3 && attention_drop >= 0.3, || {
        format!("loss drop {loss_drop:.2} / {attention_drop:.2} below 0.30")
    })?;
    ensure(pswa_hf > attention_hf, || {
        format!("high-frequency fraction PSWA {pswa_hf:.4} <= attention-only {attention_hf:.4}")
    })?;
    Ok(format!(
        "high-frequency fraction PSWA {pswa_hf:.4} > attention-only {attention_hf:.4}; loss drop {:.0}% / {:.0}%",
        100.0 * loss_drop,
        100.0 * attention_drop
    ))
}

fn allocation_arms_come_from_config() -> Outcome {
    let names = ["bridge_only", "window_only", "decreasing", "constant", "increasing"];
    let mut plans = Vec::new();
    for name in names {
        let cfg = ok(RunConfig::from_toml(&format!("[pcca]\narm = \"{name}\"")))?;
        plans.push((name, ok(cfg.plan())?.window_channels));
    }
    for (i, (a, pa)) in plans.iter().enumerate() {
        for (b, pb) in &plans[i + 1..] {
            ensure(pa != pb, || format!("{a} and {b} give the same plan {pa:?}"))?;
        }
    }
    let get = |n: &str| {
        plans
            .iter()
            .find(|(m, _)| *m == n)
            .map(|(_, p)| p.clone())
            .unwrap_or_default()
    };
    let increasing = get("increasing");
    let decreasing = get("decreasing");
    ensure(increasing.windows(2).all(|w| w[0] <= w[1]), || {
        format!("increasing plan {increasing:?} is not nondecreasing")
    })?;
    ensure(!decreasing.windows(2).all(|w| w[0] <= w[1]), || {
        format!("decreasing plan {decreasing:?} is nondecreasing")
    })?;
    let default_plan = ok(RunConfig::default().plan())?.window_channels;
    ensure(
        RunConfig::default().pcca.arm == AllocationArm::Increasing && default_plan == increasing,
        || "the default arm is not increasing".into(),
    )?;
    Ok(format!(
        "5 distinct plans; increasing {increasing:?} is the default, decreasing {decreasing:?}"
    ))
}

fn training_is_bit_reproducible(first_metrics: &Option<Vec<u8>>) -> Outcome {
    let first = first_metrics.as_ref().ok_or("the spectrum run did not complete")?;
    let (_, _, metrics) = train_for_spectrum(&RunConfig::default())?;
    ensure(!metrics.is_empty() && &metrics == first, || {
        "metrics.csv differs between two runs with the same seed and config".into()
    })?;
    Ok(format!(
        "{} bytes of metrics.csv identical across two runs",
        metrics.len()
    ))
}

fn run(label: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS  {label} ({secs:.1}s): {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL  {label} ({secs:.1}s): {detail}");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut spectrum = None;
    let results = [
        run(
            "1 window attention equals masked full attention",
            window_attention_matches_masked_oracle,
        ),
        run(
            "2 analytic gradients match finite differences",
            gradients_match_finite_differences,
        ),
        run("3 attention distance is exact", attention_distance_is_exact),
        run(
            "4 neighbourhoods and Kth-order similarity",
            neighborhoods_and_similarity_are_exact,
        ),
        run(
            "5 bridge impulse response covers the neighbourhood",
            bridge_impulse_response_is_the_neighborhood,
        ),
        run("6 FLOP accounting", flop_accounting_is_exact),
        run("7 PSWA keeps more high frequency than attention", || {
            pswa_keeps_more_high_frequency(&mut spectrum)
        }),
        run("8 allocation arms from config", allocation_arms_come_from_config),
        run("9 training is bit-reproducible", || {
            training_is_bit_reproducible(&spectrum)
        }),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
