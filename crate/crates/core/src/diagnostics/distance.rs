//! Attention distance: how far, in tokens, an attention map reaches.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Mass-weighted mean row and column offset `(D_row, D_col)` of a single
/// `[N×N]` attention map over a token grid of width `width`. Token `i` sits
/// at row `i / width`, column `i % width`.
pub fn attention_distance(attn: &Tensor, width: usize) -> Result<(f64, f64)> {
    let [n, m] = *attn.shape() else {
        return Err(Error::dim("attention_distance", attn.shape(), &[0, 0]));
    };
    if n != m || width == 0 || n % width != 0 {
        return Err(Error::dim("attention_distance", attn.shape(), &[width, width]));
    }
    distance_of_slice(attn.data(), n, width)
}

fn distance_of_slice(a: &[f64], n: usize, width: usize) -> Result<(f64, f64)> {
    let (mut total, mut rows, mut cols) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (ri, ci) = (i / width, i % width);
        for j in 0..n {
            let v = a[i * n + j];
            if v.is_nan() || v < 0.0 {
                return Err(Error::Domain(format!("attention weight {v} at ({i}, {j}) is not >= 0")));
            }
            total += v;
            rows += v * (j / width).abs_diff(ri) as f64;
            cols += v * (j % width).abs_diff(ci) as f64;
        }
    }
    if total <= 0.0 {
        return Err(Error::DegenerateMap(total));
    }
    Ok((rows / total, cols / total))
}

/// A stack of square attention maps `[G×heads×n×n]` over a grid of the
/// given width (for window attention, `G` counts batch × windows).
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    pub maps: Tensor,
    pub width: usize,
}

impl AttentionMaps {
    pub fn new(maps: Tensor, width: usize) -> Result<Self> {
        let [_, _, n, m] = *maps.shape() else {
            return Err(Error::dim("attention_maps", maps.shape(), &[0, 0, 0, 0]));
        };
        if n != m || width == 0 || n % width != 0 {
            return Err(Error::dim("attention_maps", maps.shape(), &[width, width]));
        }
        Ok(AttentionMaps { maps, width })
    }

    pub fn groups(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn distance(&self, group: usize, head: usize) -> Result<(f64, f64)> {
        let n = self.tokens();
        let start = (group * self.heads() + head) * n * n;
        distance_of_slice(&self.maps.data()[start..start + n * n], n, self.width)
    }
}

/// Anything that can expose per-layer attention maps for a batch at a
/// diffusion timestep.
pub trait AttentionMapSource {
    /// Attention heads per layer; zero for a layer without attention.
    fn heads_per_layer(&self) -> Vec<usize>;

    /// One entry per layer, `None` where the layer has no attention.
    fn attention_maps(&self, batch: &Tensor, timestep: usize) -> Result<Vec<Option<AttentionMaps>>>;
}

/// Per-map distances and their histogram with unit-token buckets.
///
/// Both `D_row` and `D_col` of every sampled map fall into the one
/// histogram; bucket `b` counts values in `[b, b+1)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistanceStats {
    pub distances: Vec<(f64, f64)>,
    pub histogram: Vec<u64>,
}

impl DistanceStats {
    pub fn from_distances(distances: Vec<(f64, f64)>) -> Self {
        let mut histogram = Vec::new();
        for &(r, c) in &distances {
            for d in [r, c] {
                let b = d.floor() as usize;
                if histogram.len() <= b {
                    histogram.resize(b + 1, 0);
                }
                histogram[b] += 1;
            }
        }
        DistanceStats { distances, histogram }
    }

    pub fn samples(&self) -> usize {
        self.distances.len()
    }

    pub fn mean(&self) -> (f64, f64) {
        let n = self.distances.len().max(1) as f64;
        let (r, c) = self.distances.iter().fold((0.0, 0.0), |(a, b), &(r, c)| (a + r, b + c));
        (r / n, c / n)
    }

    pub fn max(&self) -> (f64, f64) {
        self.distances
            .iter()
            .fold((0.0f64, 0.0f64), |(a, b), &(r, c)| (a.max(r), b.max(c)))
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(
            out,
            "# pswa distance histogram v1: D_row and D_col of {} sampled maps, unit-token buckets",
            self.samples()
        )?;
        writeln!(out, "bucket_lo,bucket_hi,count")?;
        for (b, count) in self.histogram.iter().enumerate() {
            writeln!(out, "{},{},{}", b, b + 1, count)?;
        }
        Ok(())
    }
}

/// Samples `budget` attention maps from `source` and collects their
/// distances.
///
/// Each draw picks a `(layer, head, timestep)` triple uniformly among the
/// layers that have attention, then a `(batch, window)` map uniformly,
/// both with replacement. Maps are computed once per distinct timestep.
pub fn distance_survey(
    source: &dyn AttentionMapSource,
    batch: &Tensor,
    timesteps: &[usize],
    budget: usize,
    rng: &mut Rng,
) -> Result<DistanceStats> {
    if budget == 0 {
        return Err(Error::Usage("distance survey budget must be >= 1".into()));
    }
    if timesteps.is_empty() {
        return Err(Error::Usage("distance survey needs at least one timestep".into()));
    }
    let pairs: Vec<(usize, usize)> = source
        .heads_per_layer()
        .iter()
        .enumerate()
        .flat_map(|(layer, &heads)| (0..heads).map(move |h| (layer, h)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Usage("model exposes no attention maps".into()));
    }

    let draws: Vec<(usize, usize, usize)> = (0..budget)
        .map(|_| {
            let triple = rng.below(pairs.len() * timesteps.len());
            let (layer, head) = pairs[triple / timesteps.len()];
            (layer, head, timesteps[triple % timesteps.len()])
        })
        .collect();

    let mut by_timestep: BTreeMap<usize, Vec<Option<AttentionMaps>>> = BTreeMap::new();
    let mut distances = Vec::with_capacity(budget);
    for (layer, head, t) in draws {
        if let std::collections::btree_map::Entry::Vacant(e) = by_timestep.entry(t) {
            e.insert(source.attention_maps(batch, t)?);
        }
        let maps = by_timestep[&t][layer]
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("layer {layer} reported heads but no attention maps")))?;
        let group = rng.below(maps.groups());
        distances.push(maps.distance(group, head)?);
    }
    Ok(DistanceStats::from_distances(distances))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_map_is_zero() {
        assert_eq!(attention_distance(&Tensor::eye(16), 4).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn uniform_two_by_two() {
        let a = Tensor::full(&[4, 4], 0.25);
        assert_eq!(attention_distance(&a, 2).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn scale_invariant() {
        let mut rng = Rng::new(9);
        let a = Tensor::uniform(&[12, 12], 0.0, 1.0, &mut rng);
        let (r, c) = attention_distance(&a, 3).unwrap();
        let (r2, c2) = attention_distance(&a.scale(7.5), 3).unwrap();
        assert!((r - r2).abs() < 1e-12 && (c - c2).abs() < 1e-12);
    }

    #[test]
    fn degenerate_and_malformed() {
        assert!(matches!(
            attention_distance(&Tensor::zeros(&[4, 4]), 2),
            Err(Error::DegenerateMap(_))
        ));
        assert!(matches!(
            attention_distance(&Tensor::zeros(&[6, 6]), 4),
            Err(Error::Dimension { .. })
        ));
        let mut a = Tensor::eye(4);
        a.set(&[0, 1], -0.5);
        assert!(matches!(attention_distance(&a, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn histogram_buckets() {
        let s = DistanceStats::from_distances(vec![(0.0, 0.5), (1.25, 2.0)]);
        assert_eq!(s.histogram, vec![2, 1, 1]);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1) == Some("bucket_lo,bucket_hi,count"));
        assert!(text.contains("\n2,3,1\n"));
    }
}
