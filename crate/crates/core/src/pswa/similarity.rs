//! Kth-order neighbourhoods and the similarity they induce.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridPos {
    pub row: usize,
    pub col: usize,
}

impl GridPos {
    pub fn new(row: usize, col: usize) -> Self {
        GridPos { row, col }
    }
}

/// Grid positions within Chebyshev distance `order − 1` of `center`,
/// clipped to the grid. Members are listed in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborhoodK {
    pub center: GridPos,
    pub order: usize,
    pub members: Vec<GridPos>,
}

impl NeighborhoodK {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, p: GridPos) -> bool {
        let r = self.order - 1;
        p.row.abs_diff(self.center.row) <= r && p.col.abs_diff(self.center.col) <= r
    }
}

fn check_on_grid(p: GridPos, grid: (usize, usize)) -> Result<()> {
    if p.row >= grid.0 || p.col >= grid.1 {
        return Err(Error::Domain(format!(
            "position ({}, {}) is off the {}x{} grid",
            p.row, p.col, grid.0, grid.1
        )));
    }
    Ok(())
}

pub fn kth_neighborhood(center: GridPos, order: usize, grid: (usize, usize)) -> Result<NeighborhoodK> {
    check_on_grid(center, grid)?;
    if order == 0 {
        return Err(Error::Domain("neighbourhood order K must be >= 1".into()));
    }
    let r = order - 1;
    let rows = center.row.saturating_sub(r)..(center.row + r + 1).min(grid.0);
    let cols = center.col.saturating_sub(r)..(center.col + r + 1).min(grid.1);
    let members = rows
        .flat_map(|row| cols.clone().map(move |col| GridPos { row, col }))
        .collect();
    Ok(NeighborhoodK { center, order, members })
}

/// `Σ_{p ∈ N_K(center)} α[p − center] · features[p, channels]`.
///
/// `alpha` has `(2K−1)²` entries indexed by offset, row-major from
/// `(−(K−1), −(K−1))`; this is the layout of a depthwise kernel applied as
/// a cross-correlation, so one kernel slice can be passed directly.
pub fn aggregate_neighborhood(
    features: &Tensor,
    center: GridPos,
    order: usize,
    alpha: &[f64],
    channels: Range<usize>,
) -> Result<Vec<f64>> {
    let (h, w, c) = grid_dims(features)?;
    let k = 2 * order.max(1) - 1;
    if alpha.len() != k * k {
        return Err(Error::dim("kth_order_similarity", &[alpha.len()], &[k * k]));
    }
    if channels.start > channels.end || channels.end > c {
        return Err(Error::dim(
            "kth_order_similarity",
            &[channels.start, channels.end],
            &[c],
        ));
    }
    let hood = kth_neighborhood(center, order, (h, w))?;
    let r = order - 1;
    let data = features.data();
    let mut out = vec![0.0; channels.len()];
    for p in &hood.members {
        let a = alpha[(p.row + r - center.row) * k + (p.col + r - center.col)];
        let base = (p.row * w + p.col) * c;
        for (o, ch) in out.iter_mut().zip(channels.clone()) {
            *o += a * data[base + ch];
        }
    }
    Ok(out)
}

fn grid_dims(features: &Tensor) -> Result<(usize, usize, usize)> {
    match *features.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::dim("kth_order_similarity", s, &[0, 0, 0])),
    }
}

/// Kth-order similarity between positions `i` and `j`: the inner product
/// over `channels` of the `alpha`-weighted aggregations of `phi` around `i`
/// and `psi` around `j`. With `order = 1` and `alpha = [1]` this is the
/// plain dot product `phi_i · psi_j`.
pub fn kth_order_similarity(
    phi: &Tensor,
    psi: &Tensor,
    i: GridPos,
    j: GridPos,
    order: usize,
    alpha: &[f64],
    channels: Range<usize>,
) -> Result<f64> {
    if phi.shape() != psi.shape() {
        return Err(Error::dim("kth_order_similarity", phi.shape(), psi.shape()));
    }
    let a = aggregate_neighborhood(phi, i, order, alpha, channels.clone())?;
    let b = aggregate_neighborhood(psi, j, order, alpha, channels)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn first_order_is_the_center() {
        let n = kth_neighborhood(GridPos::new(3, 4), 1, (8, 8)).unwrap();
        assert_eq!(n.members, vec![GridPos::new(3, 4)]);
    }

    #[test]
    fn member_counts() {
        assert_eq!(kth_neighborhood(GridPos::new(4, 4), 3, (9, 9)).unwrap().len(), 25);
        assert_eq!(kth_neighborhood(GridPos::new(0, 0), 2, (8, 8)).unwrap().len(), 4);
        assert_eq!(kth_neighborhood(GridPos::new(0, 3), 2, (8, 8)).unwrap().len(), 6);
    }

    #[test]
    fn off_grid_center() {
        assert!(matches!(
            kth_neighborhood(GridPos::new(8, 0), 2, (8, 8)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn zero_features() {
        let f = Tensor::zeros(&[4, 4, 3]);
        let s = kth_order_similarity(&f, &f, GridPos::new(1, 1), GridPos::new(2, 3), 2, &[1.0; 9], 0..3).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn first_order_is_a_logit() {
        let mut rng = Rng::new(5);
        let q = Tensor::randn(&[3, 3, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 3, 4], 1.0, &mut rng);
        let (i, j) = (GridPos::new(0, 1), GridPos::new(2, 2));
        let s = kth_order_similarity(&q, &k, i, j, 1, &[1.0], 0..4).unwrap();
        let dot: f64 = (0..4).map(|c| q.get(&[0, 1, c]) * k.get(&[2, 2, c])).sum();
        assert_eq!(s, dot);
    }

    #[test]
    fn weight_count_mismatch() {
        let f = Tensor::zeros(&[4, 4, 1]);
        let err = kth_order_similarity(&f, &f, GridPos::new(0, 0), GridPos::new(0, 0), 2, &[1.0; 4], 0..1);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }
}
