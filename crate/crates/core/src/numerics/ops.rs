//! Forward kernels and their vector-Jacobian products.
//!
//! These are plain functions on [`Tensor`]s. [`crate::numerics::Graph`]
//! records them on a tape and calls the `*_backward` halves in reverse.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-6;

// ── dense products ───────────────────────────────────────────────────

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Matrix product contracting the trailing axis of `a` with the leading
/// axis of the 2-D `b`. Leading axes of `a` are treated as rows.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a, b)?;
    let mut out = vec![0.0; m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_op(shape, out))
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if b.rank() != 2 || a.last_dim() != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let k = a.last_dim();
    Ok((a.len() / k, k, b.shape()[1]))
}

/// Gradients of `matmul`: `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> (Tensor, Tensor) {
    let (m, k, n) = matmul_dims(a, b).expect("validated in forward");
    let mut da = vec![0.0; m * k];
    gemm_nt(dc.data(), b.data(), &mut da, m, n, k);
    let mut db = vec![0.0; k * n];
    gemm_tn(a.data(), dc.data(), &mut db, m, k, n);
    (
        Tensor::from_op(a.shape().to_vec(), da),
        Tensor::from_op(b.shape().to_vec(), db),
    )
}

/// Batched product `[G×m×k] · [G×k×n]`, or `[G×m×k] · [G×n×k]ᵀ` when
/// `transpose_b` is set.
pub fn bmm(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let (g, m, k, n) = bmm_dims(a, b, transpose_b)?;
    let mut out = vec![0.0; g * m * n];
    for i in 0..g {
        let ab = &a.data()[i * m * k..(i + 1) * m * k];
        let bb = &b.data()[i * k * n..(i + 1) * k * n];
        let ob = &mut out[i * m * n..(i + 1) * m * n];
        if transpose_b {
            gemm_nt(ab, bb, ob, m, k, n);
        } else {
            gemm_nn(ab, bb, ob, m, k, n);
        }
    }
    Ok(Tensor::from_op(vec![g, m, n], out))
}

pub(crate) fn bmm_dims(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<(usize, usize, usize, usize)> {
    let err = || Error::dim("bmm", a.shape(), b.shape());
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(err());
    }
    let (g, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bk, n) = if transpose_b {
        (b.shape()[2], b.shape()[1])
    } else {
        (b.shape()[1], b.shape()[2])
    };
    if bk != k {
        return Err(err());
    }
    Ok((g, m, k, n))
}

pub fn bmm_backward(a: &Tensor, b: &Tensor, transpose_b: bool, dc: &Tensor) -> (Tensor, Tensor) {
    let (g, m, k, n) = bmm_dims(a, b, transpose_b).expect("validated in forward");
    let mut da = vec![0.0; g * m * k];
    let mut db = vec![0.0; g * k * n];
    for i in 0..g {
        let ab = &a.data()[i * m * k..(i + 1) * m * k];
        let bb = &b.data()[i * k * n..(i + 1) * k * n];
        let dcb = &dc.data()[i * m * n..(i + 1) * m * n];
        let dab = &mut da[i * m * k..(i + 1) * m * k];
        let dbb = &mut db[i * k * n..(i + 1) * k * n];
        if transpose_b {
            // C = A·Bᵀ with B stored [n×k]: dA = dC·B, dB = dCᵀ·A.
            gemm_nn(dcb, bb, dab, m, n, k);
            gemm_tn(dcb, ab, dbb, m, n, k);
        } else {
            gemm_nt(dcb, bb, dab, m, n, k);
            gemm_tn(ab, dcb, dbb, m, k, n);
        }
    }
    (
        Tensor::from_op(a.shape().to_vec(), da),
        Tensor::from_op(b.shape().to_vec(), db),
    )
}

// ── softmax ──────────────────────────────────────────────────────────

/// Softmax over the trailing axis, computed with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_op(x.shape().to_vec(), out)
}

/// `dx = y ⊙ (dy − ⟨dy, y⟩)` row by row, given the forward output `y`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let n = y.last_dim();
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y.data().chunks(n).zip(dy.data().chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    Tensor::from_op(y.shape().to_vec(), dx)
}

// ── convolutions ─────────────────────────────────────────────────────

pub(crate) fn depthwise_dims(x: &Tensor, kernels: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    if x.rank() != 4 || kernels.rank() != 3 || kernels.shape()[0] != x.shape()[1] {
        return Err(Error::dim("depthwise_conv2d", x.shape(), kernels.shape()));
    }
    let k = kernels.shape()[1];
    if kernels.shape()[2] != k {
        return Err(Error::dim("depthwise_conv2d", x.shape(), kernels.shape()));
    }
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("depthwise kernel size must be odd, got {k}")));
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3], k))
}

/// Per-channel `k×k` cross-correlation of `x[B×C×H×W]` with `kernels[C×k×k]`,
/// zero padded so the spatial extent is preserved.
///
/// `out[b,c,y,x] = Σ_{dy,dx} kernels[c,dy,dx] · x[b,c,y+dy−r,x+dx−r]` with
/// `r = (k−1)/2`. The kernel size must be odd.
pub fn depthwise_conv2d(x: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let (b, c, h, w, k) = depthwise_dims(x, kernels)?;
    let r = (k / 2) as isize;
    let xd = x.data();
    let kd = kernels.data();
    let mut out = vec![0.0; x.len()];
    for bc in 0..b * c {
        let ch = bc % c;
        let plane = &xd[bc * h * w..(bc + 1) * h * w];
        let kern = &kd[ch * k * k..(ch + 1) * k * k];
        let oplane = &mut out[bc * h * w..(bc + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for dy in 0..k {
                    let sy = y as isize + dy as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = xx as isize + dx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        acc += kern[dy * k + dx] * plane[sy as usize * w + sx as usize];
                    }
                }
                oplane[y * w + xx] = acc;
            }
        }
    }
    Ok(Tensor::from_op(x.shape().to_vec(), out))
}

pub fn depthwise_conv2d_backward(x: &Tensor, kernels: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (b, c, h, w, k) = depthwise_dims(x, kernels).expect("validated in forward");
    let r = (k / 2) as isize;
    let xd = x.data();
    let kd = kernels.data();
    let gd = dy.data();
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernels.len()];
    for bc in 0..b * c {
        let ch = bc % c;
        let base = bc * h * w;
        for y in 0..h {
            for xx in 0..w {
                let g = gd[base + y * w + xx];
                if g == 0.0 {
                    continue;
                }
                for ky in 0..k {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = base + sy as usize * w + sx as usize;
                        let kidx = ch * k * k + ky * k + kx;
                        dx[src] += kd[kidx] * g;
                        dk[kidx] += xd[src] * g;
                    }
                }
            }
        }
    }
    (
        Tensor::from_op(x.shape().to_vec(), dx),
        Tensor::from_op(kernels.shape().to_vec(), dk),
    )
}

pub(crate) fn pointwise_dims(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 || w.rank() != 2 || w.shape()[1] != x.shape()[1] {
        return Err(Error::dim("pointwise_conv2d", x.shape(), w.shape()));
    }
    let cout = w.shape()[0];
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim("pointwise_conv2d", w.shape(), b.shape()));
        }
    }
    let s = x.shape();
    Ok((s[0], s[1], cout, s[2] * s[3]))
}

/// 1×1 convolution: `out[b,o,p] = Σ_i w[o,i]·x[b,i,p] + bias[o]`.
pub fn pointwise_conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, cin, cout, hw) = pointwise_dims(x, w, bias)?;
    let mut out = vec![0.0; b * cout * hw];
    for bi in 0..b {
        let xb = &x.data()[bi * cin * hw..(bi + 1) * cin * hw];
        let ob = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
        gemm_nn(w.data(), xb, ob, cout, cin, hw);
        if let Some(bias) = bias {
            for (o, &bv) in ob.chunks_mut(hw).zip(bias.data()) {
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    let s = x.shape();
    Ok(Tensor::from_op(vec![b, cout, s[2], s[3]], out))
}

/// Returns `(dx, dw, dbias)`.
pub fn pointwise_conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (b, cin, cout, hw) = pointwise_dims(x, w, None).expect("validated in forward");
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for bi in 0..b {
        let xb = &x.data()[bi * cin * hw..(bi + 1) * cin * hw];
        let gb = &dy.data()[bi * cout * hw..(bi + 1) * cout * hw];
        gemm_tn(w.data(), gb, &mut dx[bi * cin * hw..(bi + 1) * cin * hw], cout, cin, hw);
        gemm_nt(gb, xb, &mut dw, cout, hw, cin);
        for (d, g) in db.iter_mut().zip(gb.chunks(hw)) {
            *d += g.iter().sum::<f64>();
        }
    }
    (
        Tensor::from_op(x.shape().to_vec(), dx),
        Tensor::from_op(w.shape().to_vec(), dw),
        Tensor::from_op(vec![cout], db),
    )
}

// ── normalization ────────────────────────────────────────────────────

/// Normalizes each trailing-axis row to zero mean and unit variance.
/// Returns the normalized tensor and the per-row reciprocal std.
pub fn normalize_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let c = x.last_dim();
    let mut out = x.data().to_vec();
    let mut rstds = Vec::with_capacity(x.len() / c);
    for row in out.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
        rstds.push(rstd);
    }
    (Tensor::from_op(x.shape().to_vec(), out), rstds)
}

/// Backward of [`normalize_rows`] given its output `y` and saved `rstds`:
/// `dx = rstd · (dy − mean(dy) − y·mean(dy⊙y))`.
pub fn normalize_rows_backward(y: &Tensor, rstds: &[f64], dy: &Tensor) -> Tensor {
    let c = y.last_dim();
    let mut dx = vec![0.0; y.len()];
    for (((yr, gr), dr), &rstd) in y
        .data()
        .chunks(c)
        .zip(dy.data().chunks(c))
        .zip(dx.chunks_mut(c))
        .zip(rstds)
    {
        let mean_g = gr.iter().sum::<f64>() / c as f64;
        let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
        for ((d, &g), &yv) in dr.iter_mut().zip(gr).zip(yr) {
            *d = rstd * (g - mean_g - yv * mean_gy);
        }
    }
    Tensor::from_op(y.shape().to_vec(), dx)
}

/// Layer normalization over the trailing axis followed by the affine map
/// `gamma ⊙ x̂ + beta`.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.last_dim();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim("layernorm", x.shape(), gamma.shape()));
    }
    let (mut y, _) = normalize_rows(x, eps);
    for row in y.data_mut().chunks_mut(c) {
        for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Ok(y)
}

// ── pointwise nonlinearities ─────────────────────────────────────────

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_COEF * v * v * v)).tanh())
}

pub fn gelu_grad(v: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (v + GELU_COEF * v * v * v);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}
