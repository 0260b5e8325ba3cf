use proptest::prelude::*;
use pswa::attention::{
    block_diagonal_mask, full_mhsa, masked_full_attention_oracle, window_attention, AttentionParams, WindowSpec,
};
use pswa::{Rng, Tensor};

fn window_case(seed: u64, h: usize, w: usize, wh: usize, ww: usize, heads: usize, c: usize) -> f64 {
    let mut rng = Rng::new(seed);
    let x = Tensor::randn(&[2, h, w, c], 1.0, &mut rng);
    let params = AttentionParams::random(c, heads, 0.5, &mut rng).unwrap();
    let spec = WindowSpec::new(wh, ww, heads).unwrap();
    let y = window_attention(&x, &params, &spec).unwrap();
    let flat = x.reshape(&[2, h * w, c]).unwrap();
    let mask = block_diagonal_mask(h, w, wh, ww).unwrap();
    let reference = masked_full_attention_oracle(&flat, &params, &mask).unwrap();
    y.reshape(&[2, h * w, c]).unwrap().max_abs_diff(&reference)
}

#[test]
fn window_attention_matches_masked_oracle_over_window_sizes() {
    let mut count = 0;
    for (i, (h, w)) in [(8, 8), (4, 8), (8, 4), (4, 4), (2, 6)].into_iter().enumerate() {
        let windows = [(1, 1), (2, 2), (4, 4), (h, w)];
        for (j, (wh, ww)) in windows.into_iter().enumerate() {
            if h % wh != 0 || w % ww != 0 {
                continue;
            }
            for k in 0..6 {
                let seed = (i * 100 + j * 10 + k) as u64;
                let err = window_case(seed, h, w, wh, ww, 2, 8);
                assert!(err < 1e-10, "{h}x{w} window {wh}x{ww}: {err:e}");
                count += 1;
            }
        }
    }
    assert!(count >= 60);
}

#[test]
fn full_grid_window_is_full_attention() {
    let mut rng = Rng::new(11);
    let (h, w, c) = (4, 6, 8);
    let x = Tensor::randn(&[3, h, w, c], 1.0, &mut rng);
    let params = AttentionParams::random(c, 4, 0.5, &mut rng).unwrap();
    let y = window_attention(&x, &params, &WindowSpec::new(h, w, 4).unwrap()).unwrap();
    let (full, _) = full_mhsa(&x.reshape(&[3, h * w, c]).unwrap(), &params).unwrap();
    assert!(y.reshape(&[3, h * w, c]).unwrap().max_abs_diff(&full) < 1e-12);
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = Rng::new(2);
    let x = Tensor::randn(&[2, 9, 8], 1.0, &mut rng);
    let params = AttentionParams::random(8, 2, 0.7, &mut rng).unwrap();
    let (_, attn) = full_mhsa(&x, &params).unwrap();
    for row in attn.data().chunks(9) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn window_attention_is_equivariant_to_whole_window_moves() {
    let mut rng = Rng::new(5);
    let (h, w, c, wh) = (4, 4, 4, 2);
    let x = Tensor::randn(&[1, h, w, c], 1.0, &mut rng);
    let params = AttentionParams::random(c, 2, 0.5, &mut rng).unwrap();
    let table = Tensor::randn(&[2, 9], 0.5, &mut rng);
    let spec = WindowSpec::with_bias(wh, wh, table).unwrap();
    let shift = |t: &Tensor| {
        Tensor::from_fn(t.shape(), |i| {
            let (r, rest) = (i / (w * c), i % (w * c));
            t.data()[((r + wh) % h) * w * c + rest]
        })
    };
    let a = shift(&window_attention(&x, &params, &spec).unwrap());
    let b = window_attention(&shift(&x), &params, &spec).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn oracle_equivalence_on_random_grids(
        rows in 1usize..5, cols in 1usize..5, wh in 1usize..3, ww in 1usize..3, heads in 1usize..3, seed in any::<u64>()
    ) {
        let (h, w) = (rows * wh, cols * ww);
        let err = window_case(seed, h, w, wh, ww, heads, 2 * heads);
        prop_assert!(err < 1e-10, "{err:e}");
    }
}
