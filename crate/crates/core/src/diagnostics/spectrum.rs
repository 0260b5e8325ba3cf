//! Radially averaged log-magnitude Fourier spectra of feature maps.

use std::io::Write;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SPECTRUM_BINS: usize = 16;

/// Largest normalised radius, reached at the `(½, ½)` corner frequency.
pub const MAX_RADIUS: f64 = 0.5 * std::f64::consts::SQRT_2;

/// Mean `log(1 + |F|)` per annular bin of normalised frequency radius.
///
/// Bin `b` covers `[b, b+1) · MAX_RADIUS / bins`; the outermost bin also
/// takes the corner. Bins with no frequency sample hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumProfile {
    pub log_magnitude: Vec<f64>,
    pub counts: Vec<usize>,
}

impl SpectrumProfile {
    pub fn bins(&self) -> usize {
        self.log_magnitude.len()
    }

    pub fn bin_width(&self) -> f64 {
        MAX_RADIUS / self.bins() as f64
    }

    pub fn bin_center(&self, b: usize) -> f64 {
        (b as f64 + 0.5) * self.bin_width()
    }

    /// Share of total binned log-magnitude that falls in the outer half of
    /// the bins. Zero for an all-zero profile.
    pub fn high_frequency_fraction(&self) -> f64 {
        let total: f64 = self.log_magnitude.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let outer: f64 = self.log_magnitude[self.bins() / 2..].iter().sum();
        outer / total
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(
            out,
            "# pswa spectrum profile v1: {} annular bins over normalised radius [0, {:.6}], inclusive lower edge, radius = bin centre",
            self.bins(),
            MAX_RADIUS
        )?;
        writeln!(out, "radius,log_magnitude")?;
        for (b, v) in self.log_magnitude.iter().enumerate() {
            writeln!(out, "{:.6},{}", self.bin_center(b), v)?;
        }
        Ok(())
    }
}

/// `log(1 + |F|)` of the 2-D DFT of `feature[H×W]`, with zero frequency
/// moved to `(H/2, W/2)`.
pub fn centered_log_magnitude(feature: &Tensor) -> Result<Tensor> {
    let (h, w) = plane_dims(feature)?;
    let mut buf: Vec<Complex<f64>> = feature.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (su, sv) = ((u + h / 2) % h, (v + w / 2) % w);
            out[su * w + sv] = buf[u * w + v].norm().ln_1p();
        }
    }
    Tensor::new(&[h, w], out)
}

fn plane_dims(feature: &Tensor) -> Result<(usize, usize)> {
    match *feature.shape() {
        [h, w] if h >= 2 && w >= 2 => Ok((h, w)),
        ref s => Err(Error::dim("radial_spectrum", s, &[2, 2])),
    }
}

/// Bin index of every position of a centred `h×w` spectrum.
pub fn radial_bin_index(h: usize, w: usize, bins: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(h * w);
    for su in 0..h {
        let fy = (su as f64 - (h / 2) as f64) / h as f64;
        for sv in 0..w {
            let fx = (sv as f64 - (w / 2) as f64) / w as f64;
            let r = (fy * fy + fx * fx).sqrt();
            index.push(((r / MAX_RADIUS * bins as f64).floor() as usize).min(bins - 1));
        }
    }
    index
}

fn bin_average(spectrum: &[f64], index: &[usize], bins: usize) -> SpectrumProfile {
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0; bins];
    for (&v, &b) in spectrum.iter().zip(index) {
        sums[b] += v;
        counts[b] += 1;
    }
    let log_magnitude = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect();
    SpectrumProfile { log_magnitude, counts }
}

pub fn radial_spectrum_with_bins(feature: &Tensor, bins: usize) -> Result<SpectrumProfile> {
    if bins < 2 {
        return Err(Error::Config(format!("spectrum needs >= 2 bins, got {bins}")));
    }
    let (h, w) = plane_dims(feature)?;
    let spec = centered_log_magnitude(feature)?;
    Ok(bin_average(spec.data(), &radial_bin_index(h, w, bins), bins))
}

pub fn radial_spectrum(feature: &Tensor) -> Result<SpectrumProfile> {
    radial_spectrum_with_bins(feature, SPECTRUM_BINS)
}

/// Per-plane profiles of `x[B×C×H×W]`, averaged bin by bin.
pub fn radial_spectrum_batch(x: &Tensor) -> Result<SpectrumProfile> {
    let [b, c, h, w] = *x.shape() else {
        return Err(Error::dim("radial_spectrum", x.shape(), &[0, 0, 0, 0]));
    };
    let planes = b * c;
    let mut acc = vec![0.0; SPECTRUM_BINS];
    let mut counts = vec![0; SPECTRUM_BINS];
    for p in 0..planes {
        let plane = Tensor::new(&[h, w], x.data()[p * h * w..(p + 1) * h * w].to_vec())?;
        let prof = radial_spectrum(&plane)?;
        for (a, v) in acc.iter_mut().zip(&prof.log_magnitude) {
            *a += v;
        }
        counts = prof.counts;
    }
    Ok(SpectrumProfile {
        log_magnitude: acc.into_iter().map(|s| s / planes as f64).collect(),
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_dc_only() {
        let p = radial_spectrum(&Tensor::full(&[8, 8], 3.0)).unwrap();
        let dc = (3.0f64 * 64.0).ln_1p();
        assert_eq!(p.counts[0], 1);
        assert!((p.log_magnitude[0] - dc).abs() < 1e-12);
        assert!(p.log_magnitude[1..].iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn checkerboard_is_outermost() {
        let x = Tensor::from_fn(&[8, 8], |i| if (i / 8 + i % 8) % 2 == 0 { 1.0 } else { -1.0 });
        let p = radial_spectrum(&x).unwrap();
        assert!(p.log_magnitude[15] > 0.0);
        assert!(p.log_magnitude[..15].iter().all(|&v| v.abs() < 1e-12));
        assert!(p.high_frequency_fraction() > 0.999);
    }

    #[test]
    fn center_holds_dc() {
        let s = centered_log_magnitude(&Tensor::ones(&[4, 6])).unwrap();
        assert!((s.get(&[2, 3]) - 24f64.ln_1p()).abs() < 1e-12);
    }

    #[test]
    fn every_bin_index_is_in_range() {
        let idx = radial_bin_index(5, 7, 16);
        assert!(idx.iter().all(|&b| b < 16));
        assert_eq!(idx[2 * 7 + 3], 0);
    }

    #[test]
    fn rejects_tiny_planes() {
        assert!(radial_spectrum(&Tensor::zeros(&[1, 8])).is_err());
        assert!(radial_spectrum_with_bins(&Tensor::zeros(&[4, 4]), 1).is_err());
    }

    #[test]
    fn csv_layout() {
        let p = radial_spectrum(&Tensor::zeros(&[4, 4])).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1), Some("radius,log_magnitude"));
        assert_eq!(text.lines().count(), 2 + SPECTRUM_BINS);
    }
}
