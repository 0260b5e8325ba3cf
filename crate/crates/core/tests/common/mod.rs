//! Independent reference implementations shared by the integration tests
//! and the acceptance harness. Each is a direct loop over grid coordinates
//! and shares no code with the library.

#![allow(dead_code)]

use pswa::pswa::GridPos;
use pswa::Tensor;

/// `(D_row, D_col)` of an `[N×N]` map by looping over 2-D query and key
/// coordinates.
pub fn distance_oracle(a: &[f64], h: usize, w: usize) -> (f64, f64) {
    let n = h * w;
    let (mut total, mut dr, mut dc) = (0.0, 0.0, 0.0);
    for qr in 0..h {
        for qc in 0..w {
            for kr in 0..h {
                for kc in 0..w {
                    let v = a[(qr * w + qc) * n + kr * w + kc];
                    total += v;
                    dr += v * (qr as f64 - kr as f64).abs();
                    dc += v * (qc as f64 - kc as f64).abs();
                }
            }
        }
    }
    (dr / total, dc / total)
}

/// Neighbourhood membership by exhaustive scan with signed Chebyshev
/// distance, in row-major order.
pub fn brute_neighborhood(center: GridPos, order: usize, h: usize, w: usize) -> Vec<GridPos> {
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let dr = (r as i64 - center.row as i64).abs();
            let dc = (c as i64 - center.col as i64).abs();
            if dr.max(dc) < order as i64 {
                out.push(GridPos::new(r, c));
            }
        }
    }
    out
}

/// Kth-order similarity by a double loop over both neighbourhoods and all
/// channels of `phi, psi[H×W×C]`.
pub fn similarity_oracle(
    phi: &Tensor,
    psi: &Tensor,
    i: GridPos,
    j: GridPos,
    order: usize,
    alpha: &[f64],
    channels: std::ops::Range<usize>,
) -> f64 {
    let [h, w, c] = *phi.shape() else { unreachable!() };
    let k = 2 * order - 1;
    let r = order as i64 - 1;
    let weight = |p: (i64, i64), center: GridPos| -> Option<f64> {
        let (dr, dc) = (p.0 - center.row as i64, p.1 - center.col as i64);
        (dr.abs() <= r && dc.abs() <= r).then(|| alpha[((dr + r) as usize) * k + (dc + r) as usize])
    };
    let mut total = 0.0;
    for ch in channels {
        let (mut a, mut b) = (0.0, 0.0);
        for pr in 0..h as i64 {
            for pc in 0..w as i64 {
                let idx = ((pr as usize) * w + pc as usize) * c + ch;
                if let Some(wt) = weight((pr, pc), i) {
                    a += wt * phi.data()[idx];
                }
                if let Some(wt) = weight((pr, pc), j) {
                    b += wt * psi.data()[idx];
                }
            }
        }
        total += a * b;
    }
    total
}
