use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Image family drawn by [`ToyDataset`]; doubles as the class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    Rectangles = 0,
    Stripes = 1,
}

pub const TOY_CLASSES: usize = 2;

/// Procedural images with hard edges: a few overlapping flat rectangles, or
/// binary stripes at a random orientation and period. Pixels lie in
/// `[−1, 1]` and image `i` depends only on `(seed, i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub seed: u64,
    pub channels: usize,
    pub size: (usize, usize),
}

/// Images `[B×C×H×W]` with their family labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl ToyDataset {
    pub fn new(seed: u64, channels: usize, size: (usize, usize)) -> Result<Self> {
        if channels == 0 || size.0 < 2 || size.1 < 2 {
            return Err(Error::Config(format!(
                "toy images need >= 1 channel and >= 2x2 pixels, got {channels} x {}x{}",
                size.0, size.1
            )));
        }
        Ok(ToyDataset { seed, channels, size })
    }

    /// Image `index` as `[C×H×W]` and its family.
    pub fn image(&self, index: u64) -> (Vec<f64>, ToyKind) {
        let mut rng = Rng::new(self.seed).split(index);
        let (h, w) = self.size;
        let kind = if rng.below(2) == 0 {
            ToyKind::Rectangles
        } else {
            ToyKind::Stripes
        };
        let mut out = Vec::with_capacity(self.channels * h * w);
        match kind {
            ToyKind::Rectangles => {
                let background: Vec<f64> = (0..self.channels).map(|_| rng.uniform() * 2.0 - 1.0).collect();
                let mut plane: Vec<Vec<f64>> = background.iter().map(|&b| vec![b; h * w]).collect();
                for _ in 0..1 + rng.below(3) {
                    let (r0, r1) = span(&mut rng, h);
                    let (c0, c1) = span(&mut rng, w);
                    for p in plane.iter_mut() {
                        let v = rng.uniform() * 2.0 - 1.0;
                        for r in r0..r1 {
                            p[r * w + c0..r * w + c1].fill(v);
                        }
                    }
                }
                out.extend(plane.into_iter().flatten());
            }
            ToyKind::Stripes => {
                let period = 2 + rng.below(3);
                let phase = rng.below(period);
                let orientation = rng.below(3);
                let (lo, hi) = (-1.0 + 0.5 * rng.uniform(), 1.0 - 0.5 * rng.uniform());
                for _ in 0..self.channels {
                    for r in 0..h {
                        for c in 0..w {
                            let coord = match orientation {
                                0 => r,
                                1 => c,
                                _ => r + c,
                            };
                            let on = ((coord + phase) / period.div_ceil(2)).is_multiple_of(2);
                            out.push(if on { hi } else { lo });
                        }
                    }
                }
            }
        }
        (out, kind)
    }

    /// Images at the given indices.
    pub fn batch_of(&self, indices: &[u64]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Usage("batch must hold at least one image".into()));
        }
        let (h, w) = self.size;
        let mut data = Vec::with_capacity(indices.len() * self.channels * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (img, kind) = self.image(i);
            data.extend(img);
            labels.push(kind as usize);
        }
        Ok(Batch {
            images: Tensor::new(&[indices.len(), self.channels, h, w], data)?,
            labels,
        })
    }

    /// `size` images at indices drawn from `rng`.
    pub fn sample_batch(&self, size: usize, rng: &mut Rng) -> Result<Batch> {
        let indices: Vec<u64> = (0..size).map(|_| rng.next_u64()).collect();
        self.batch_of(&indices)
    }
}

/// A random half-open interval of length ≥ 1 inside `[0, n)`.
fn span(rng: &mut Rng, n: usize) -> (usize, usize) {
    let a = rng.below(n);
    let b = rng.below(n);
    (a.min(b), a.max(b) + 1)
}
