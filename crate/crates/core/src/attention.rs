//! Multi-head self-attention over token sequences and non-overlapping
//! spatial windows.
//!
//! Tokens are channels-last. Window attention partitions a `[B×H×W×C]` grid
//! into `wh×ww` tiles, runs
//! `softmax(Q_w K_wᵀ / √d + P_w) V_w` independently inside every tile, and
//! merges the tiles back. `P_w` is a learned table with one entry per head
//! and relative offset `(Δrow, Δcol)`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{FlopCategory, Graph, Rng, Tensor, Var};

/// Projection weights for multi-head attention on `C` channels.
///
/// Tokens are row vectors, so a projection is `x·W` with `W` stored
/// `[C_in × C_out]`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub num_heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttentionParams {
    pub fn new(num_heads: usize, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Result<Self> {
        let c = wq.shape()[0];
        for w in [&wq, &wk, &wv, &wo] {
            if w.shape() != [c, c] {
                return Err(Error::dim("attention params", wq.shape(), w.shape()));
            }
        }
        if num_heads == 0 || !c.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "{c} channels cannot be split into {num_heads} heads"
            )));
        }
        Ok(AttentionParams {
            num_heads,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn random(channels: usize, num_heads: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let mut w = || Tensor::randn(&[channels, channels], std, rng);
        Self::new(num_heads, w(), w(), w(), w())
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.num_heads
    }

    pub fn bind(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            num_heads: self.num_heads,
            wq: g.constant(self.wq.clone()),
            wk: g.constant(self.wk.clone()),
            wv: g.constant(self.wv.clone()),
            wo: g.constant(self.wo.clone()),
        }
    }
}

/// Attention projections already recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub num_heads: usize,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Window geometry and relative position bias table.
#[derive(Clone, Debug)]
pub struct WindowSpec {
    pub window_h: usize,
    pub window_w: usize,
    /// `[heads × (2·wh−1)·(2·ww−1)]`
    pub rel_pos_bias: Tensor,
}

impl WindowSpec {
    /// Window with an all-zero bias table.
    pub fn new(window_h: usize, window_w: usize, num_heads: usize) -> Result<Self> {
        if window_h == 0 || window_w == 0 || num_heads == 0 {
            return Err(Error::Config(format!(
                "window {window_h}x{window_w} with {num_heads} heads is empty"
            )));
        }
        let table = bias_table_len(window_h, window_w);
        Ok(WindowSpec {
            window_h,
            window_w,
            rel_pos_bias: Tensor::zeros(&[num_heads, table]),
        })
    }

    pub fn with_bias(window_h: usize, window_w: usize, rel_pos_bias: Tensor) -> Result<Self> {
        let table = bias_table_len(window_h, window_w);
        if rel_pos_bias.rank() != 2 || rel_pos_bias.shape()[1] != table {
            return Err(Error::dim("rel_pos_bias", rel_pos_bias.shape(), &[0, table]));
        }
        Ok(WindowSpec {
            window_h,
            window_w,
            rel_pos_bias,
        })
    }

    pub fn area(&self) -> usize {
        self.window_h * self.window_w
    }

    pub fn num_heads(&self) -> usize {
        self.rel_pos_bias.shape()[0]
    }

    /// Column of the bias table holding offset `(Δrow, Δcol)`.
    pub fn bias_column(&self, d_row: isize, d_col: isize) -> usize {
        bias_column(self.window_h, self.window_w, d_row, d_col)
    }

    /// The `[heads × n × n]` bias added to in-window logits, `n = wh·ww`.
    pub fn bias_matrix(&self) -> Tensor {
        let (index, shape) = bias_gather_index(self.window_h, self.window_w, self.num_heads());
        self.rel_pos_bias.gather(&index, &shape).expect("index built for table")
    }

    pub fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        check_divisible(h, w, self.window_h, self.window_w)
    }
}

pub fn bias_table_len(window_h: usize, window_w: usize) -> usize {
    (2 * window_h - 1) * (2 * window_w - 1)
}

fn bias_column(wh: usize, ww: usize, d_row: isize, d_col: isize) -> usize {
    debug_assert!(d_row.unsigned_abs() < wh && d_col.unsigned_abs() < ww);
    let r = (d_row + wh as isize - 1) as usize;
    let c = (d_col + ww as isize - 1) as usize;
    r * (2 * ww - 1) + c
}

/// Gather index expanding a `[heads × table]` bias into `[heads × n × n]`.
pub(crate) fn bias_gather_index(wh: usize, ww: usize, heads: usize) -> (Vec<usize>, Vec<usize>) {
    let n = wh * ww;
    let table = bias_table_len(wh, ww);
    let mut index = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let d_row = (i / ww) as isize - (j / ww) as isize;
                let d_col = (i % ww) as isize - (j % ww) as isize;
                index.push(h * table + bias_column(wh, ww, d_row, d_col));
            }
        }
    }
    (index, vec![heads, n, n])
}

fn check_divisible(h: usize, w: usize, wh: usize, ww: usize) -> Result<()> {
    if wh == 0 || ww == 0 || !h.is_multiple_of(wh) || !w.is_multiple_of(ww) {
        return Err(Error::Config(format!(
            "a {h}x{w} grid must be divisible by the {wh}x{ww} window \
             (height by {wh}, width by {ww})"
        )));
    }
    Ok(())
}

fn grid_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::dim("window grid", shape, &[0, 0, 0, 0])),
    }
}

/// Gather index for `[B×H×W×C] → [(B·nWin)×(wh·ww)×C]`. Windows and the
/// tokens inside each window are both in row-major order.
pub fn partition_index(b: usize, h: usize, w: usize, c: usize, wh: usize, ww: usize) -> Result<Vec<usize>> {
    check_divisible(h, w, wh, ww)?;
    let (nh, nw) = (h / wh, w / ww);
    let mut index = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for iy in 0..wh {
                    for ix in 0..ww {
                        let row = ((bi * h + wy * wh + iy) * w + wx * ww + ix) * c;
                        index.extend(row..row + c);
                    }
                }
            }
        }
    }
    Ok(index)
}

/// Gather index for the inverse of [`partition_index`].
pub fn merge_index(b: usize, h: usize, w: usize, c: usize, wh: usize, ww: usize) -> Result<Vec<usize>> {
    check_divisible(h, w, wh, ww)?;
    let (nh, nw, n) = (h / wh, w / ww, wh * ww);
    let mut index = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let win = (bi * nh + y / wh) * nw + x / ww;
                let slot = (y % wh) * ww + x % ww;
                let row = (win * n + slot) * c;
                index.extend(row..row + c);
            }
        }
    }
    Ok(index)
}

pub fn window_partition(x: &Tensor, spec: &WindowSpec) -> Result<Tensor> {
    let (b, h, w, c) = grid_dims(x.shape())?;
    let (wh, ww) = (spec.window_h, spec.window_w);
    let index = partition_index(b, h, w, c, wh, ww)?;
    x.gather(&index, &[b * (h / wh) * (w / ww), wh * ww, c])
}

pub fn window_merge(wins: &Tensor, spec: &WindowSpec, h: usize, w: usize) -> Result<Tensor> {
    let (wh, ww) = (spec.window_h, spec.window_w);
    check_divisible(h, w, wh, ww)?;
    let per_image = (h / wh) * (w / ww);
    let [count, n, c] = *wins.shape() else {
        return Err(Error::dim("window_merge", wins.shape(), &[per_image, wh * ww, 0]));
    };
    if n != wh * ww || count % per_image != 0 {
        return Err(Error::dim("window_merge", wins.shape(), &[per_image, wh * ww, c]));
    }
    let b = count / per_image;
    let index = merge_index(b, h, w, c, wh, ww)?;
    wins.gather(&index, &[b, h, w, c])
}

/// Multi-head attention over `x[G×n×C]`, each of the `G` groups attending
/// only within itself. `bias`, when present, is `[heads×n×n]` and added to
/// the scaled logits of every group.
///
/// Returns the output `[G×n×C]` and the attention weights `[G×heads×n×n]`.
pub fn mhsa_graph(g: &mut Graph, x: Var, p: &AttentionVars, bias: Option<Var>) -> Result<(Var, Var)> {
    let [groups, n, c] = *g.shape(x) else {
        return Err(Error::dim("mhsa", g.shape(x), &[0, 0, 0]));
    };
    if g.shape(p.wq) != [c, c] {
        return Err(Error::dim("mhsa", g.shape(x), g.shape(p.wq)));
    }
    let heads = p.num_heads;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "{c} channels cannot be split into {heads} heads"
        )));
    }
    let d = c / heads;

    g.set_category(FlopCategory::Projection);
    let q = g.matmul(x, p.wq)?;
    let k = g.matmul(x, p.wk)?;
    let v = g.matmul(x, p.wv)?;
    let split = |g: &mut Graph, t: Var| -> Result<Var> {
        let t = g.reshape(t, &[groups, n, heads, d])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[groups * heads, n, d])
    };
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);

    g.set_category(FlopCategory::AttentionPair);
    let logits = g.bmm(q, k, true)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let logits = g.reshape(logits, &[groups, heads, n, n])?;
    let logits = match bias {
        Some(b) => g.add_trailing(logits, b)?,
        None => logits,
    };
    let attn = g.softmax_rows(logits);
    let flat = g.reshape(attn, &[groups * heads, n, n])?;
    let out = g.bmm(flat, v, false)?;

    let out = g.reshape(out, &[groups, heads, n, d])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[groups, n, c])?;
    g.set_category(FlopCategory::Projection);
    let y = g.matmul(out, p.wo)?;
    Ok((y, attn))
}

/// Window attention on a recorded `[B×H×W×C]` grid.
///
/// `rel_pos_bias` is the `[heads × table]` bias table; `None` means `P_w = 0`.
/// Returns the merged output and the per-window attention weights
/// `[(B·nWin)×heads×n×n]`.
pub fn window_attention_graph(
    g: &mut Graph,
    x: Var,
    p: &AttentionVars,
    window: (usize, usize),
    rel_pos_bias: Option<Var>,
) -> Result<(Var, Var)> {
    let (b, h, w, c) = grid_dims(g.shape(x))?;
    let (wh, ww) = window;
    let index = partition_index(b, h, w, c, wh, ww)?;
    let wins = g.gather(x, Arc::new(index), &[b * (h / wh) * (w / ww), wh * ww, c])?;
    let bias = match rel_pos_bias {
        Some(table) => {
            let expected = [p.num_heads, bias_table_len(wh, ww)];
            if g.shape(table) != expected {
                return Err(Error::dim("rel_pos_bias", g.shape(table), &expected));
            }
            let (index, shape) = bias_gather_index(wh, ww, p.num_heads);
            Some(g.gather(table, Arc::new(index), &shape)?)
        }
        None => None,
    };
    let (y, attn) = mhsa_graph(g, wins, p, bias)?;
    let merged = g.gather(y, Arc::new(merge_index(b, h, w, c, wh, ww)?), &[b, h, w, c])?;
    Ok((merged, attn))
}

/// Standard multi-head self-attention over `x[B×N×C]`.
///
/// Returns `y[B×N×C]` and the attention maps `[B×heads×N×N]`.
pub fn full_mhsa(x: &Tensor, params: &AttentionParams) -> Result<(Tensor, Tensor)> {
    if x.rank() != 3 || x.shape()[2] != params.channels() {
        return Err(Error::dim("full_mhsa", x.shape(), params.wq.shape()));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = params.bind(&mut g);
    let (y, attn) = mhsa_graph(&mut g, xv, &vars, None)?;
    Ok((g.value(y).clone(), g.value(attn).clone()))
}

/// Window attention on `x[B×H×W×C]` using the bias table in `spec`.
pub fn window_attention(x: &Tensor, params: &AttentionParams, spec: &WindowSpec) -> Result<Tensor> {
    let (_, h, w, c) = grid_dims(x.shape())?;
    if c != params.channels() {
        return Err(Error::dim("window_attention", x.shape(), params.wq.shape()));
    }
    spec.check_grid(h, w)?;
    if spec.num_heads() != params.num_heads {
        return Err(Error::dim(
            "window_attention",
            spec.rel_pos_bias.shape(),
            &[params.num_heads, bias_table_len(spec.window_h, spec.window_w)],
        ));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = params.bind(&mut g);
    let table = g.constant(spec.rel_pos_bias.clone());
    let (y, _) = window_attention_graph(&mut g, xv, &vars, (spec.window_h, spec.window_w), Some(table))?;
    Ok(g.value(y).clone())
}

/// Row-major `N×N` mask over a flattened `H×W` grid allowing exactly the
/// pairs that share a `wh×ww` window.
pub fn block_diagonal_mask(h: usize, w: usize, wh: usize, ww: usize) -> Result<Vec<bool>> {
    check_divisible(h, w, wh, ww)?;
    let n = h * w;
    let window_of = |i: usize| ((i / w) / wh, (i % w) / ww);
    Ok((0..n * n).map(|p| window_of(p / n) == window_of(p % n)).collect())
}

/// Dense attention with masked logits excluded from the softmax.
///
/// Written with explicit loops and no shared kernels so it can serve as an
/// independent reference for [`window_attention`]. `mask` is row-major
/// `N×N`; `true` allows query `i` to attend key `j`.
pub fn masked_full_attention_oracle(x: &Tensor, params: &AttentionParams, mask: &[bool]) -> Result<Tensor> {
    let [b, n, c] = *x.shape() else {
        return Err(Error::dim("masked attention", x.shape(), &[0, 0, 0]));
    };
    if c != params.channels() {
        return Err(Error::dim("masked attention", x.shape(), params.wq.shape()));
    }
    if mask.len() != n * n {
        return Err(Error::dim("masked attention mask", &[mask.len()], &[n * n]));
    }
    if let Some(row) = (0..n).find(|&i| !mask[i * n..(i + 1) * n].iter().any(|&m| m)) {
        return Err(Error::UndefinedRow(row));
    }
    let heads = params.num_heads;
    let d = params.head_dim();
    let xd = x.data();
    let project = |w: &Tensor, bi: usize, i: usize, o: usize| -> f64 {
        (0..c).map(|k| xd[(bi * n + i) * c + k] * w.data()[k * c + o]).sum()
    };
    let mut out = vec![0.0; b * n * c];
    for bi in 0..b {
        let mut q = vec![0.0; n * c];
        let mut kk = vec![0.0; n * c];
        let mut v = vec![0.0; n * c];
        for i in 0..n {
            for o in 0..c {
                q[i * c + o] = project(&params.wq, bi, i, o);
                kk[i * c + o] = project(&params.wk, bi, i, o);
                v[i * c + o] = project(&params.wv, bi, i, o);
            }
        }
        let mut mixed = vec![0.0; n * c];
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            for i in 0..n {
                let mut logits = vec![f64::NEG_INFINITY; n];
                for j in 0..n {
                    if mask[i * n + j] {
                        let dot: f64 = cols.clone().map(|o| q[i * c + o] * kk[j * c + o]).sum();
                        logits[j] = dot / (d as f64).sqrt();
                    }
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                for o in cols.clone() {
                    mixed[i * c + o] = (0..n).map(|j| weights[j] / total * v[j * c + o]).sum();
                }
            }
        }
        for i in 0..n {
            for o in 0..c {
                out[(bi * n + i) * c + o] = (0..c).map(|k| mixed[i * c + k] * params.wo.data()[k * c + o]).sum();
            }
        }
    }
    Tensor::new(&[b, n, c], out)
}
