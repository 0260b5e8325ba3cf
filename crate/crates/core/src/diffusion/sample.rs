use crate::error::{Error, Result};
use crate::model::SwinDiT;
use crate::numerics::{Rng, Tensor};

use super::data::Batch;
use super::schedule::{q_sample_batch, NoiseSchedule};

/// Anything that predicts the noise in `x_t[B×…]` at per-sample steps `t`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], labels: Option<&[usize]>) -> Result<Tensor>;
}

/// Labels are ignored by an unconditional model.
impl NoisePredictor for SwinDiT {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], labels: Option<&[usize]>) -> Result<Tensor> {
        let labels = labels.filter(|_| self.config().num_classes > 0);
        self.forward(x_t, t, labels)
    }
}

/// Draws one step per sample and unit normal noise, returning
/// `(t, noise, x_t)`. Steps are drawn before noise.
pub fn draw_noised(schedule: &NoiseSchedule, x0: &Tensor, rng: &mut Rng) -> Result<(Vec<usize>, Tensor, Tensor)> {
    let b = x0.shape()[0];
    let t: Vec<usize> = (0..b).map(|_| rng.below(schedule.steps())).collect();
    let noise = Tensor::randn(x0.shape(), 1.0, rng);
    let x_t = q_sample_batch(schedule, x0, &t, &noise)?;
    Ok((t, noise, x_t))
}

/// Mean squared error between the injected noise and the model's
/// prediction, with a uniform step per sample.
pub fn training_loss(
    model: &dyn NoisePredictor,
    batch: &Batch,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("training loss needs a nonempty batch".into()));
    }
    let (t, noise, x_t) = draw_noised(schedule, &batch.images, rng)?;
    let pred = model.predict_noise(&x_t, &t, Some(&batch.labels))?;
    let diff = pred.sub(&noise)?;
    Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
}

/// Ancestral DDPM sampling from `x_T ~ N(0, I)` down to step 0 with
/// `σ_t² = β_t`. `x_T` is drawn first, then one noise tensor per step
/// `t ≥ 1`.
pub fn ddpm_sample(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    shape: &[usize],
    labels: Option<&[usize]>,
    rng: &mut Rng,
) -> Result<Tensor> {
    let mut x = Tensor::randn(shape, 1.0, rng);
    let b = shape[0];
    for t in (0..schedule.steps()).rev() {
        let eps = model.predict_noise(&x, &vec![t; b], labels)?;
        if eps.shape() != shape {
            return Err(Error::dim("ddpm_sample", eps.shape(), shape));
        }
        let (alpha, beta, ab) = (schedule.alphas[t], schedule.betas[t], schedule.alpha_bars[t]);
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let mean = x.zip_with(&eps, |xv, e| inv * (xv - coef * e))?;
        x = if t > 0 {
            let z = Tensor::randn(shape, 1.0, rng);
            let sigma = beta.sqrt();
            mean.zip_with(&z, |m, zv| m + sigma * zv)?
        } else {
            mean
        };
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("sample diverged at step {t}")));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::data::ToyDataset;

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict_noise(&self, x_t: &Tensor, _: &[usize], _: Option<&[usize]>) -> Result<Tensor> {
            Ok(Tensor::zeros(x_t.shape()))
        }
    }

    /// Recovers the injected noise from the known clean batch.
    struct Exact<'a> {
        x0: &'a Tensor,
        schedule: &'a NoiseSchedule,
    }

    impl NoisePredictor for Exact<'_> {
        fn predict_noise(&self, x_t: &Tensor, t: &[usize], _: Option<&[usize]>) -> Result<Tensor> {
            let per = x_t.len() / t.len();
            let mut out = Vec::with_capacity(x_t.len());
            for (i, &step) in t.iter().enumerate() {
                let ab = self.schedule.alpha_bars[step];
                for k in i * per..(i + 1) * per {
                    out.push((x_t.data()[k] - ab.sqrt() * self.x0.data()[k]) / (1.0 - ab).sqrt());
                }
            }
            Tensor::new(x_t.shape(), out)
        }
    }

    #[test]
    fn exact_noise_model_has_zero_loss() {
        let s = NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap();
        let batch = ToyDataset::new(0, 1, (8, 8))
            .unwrap()
            .sample_batch(8, &mut Rng::new(1))
            .unwrap();
        let oracle = Exact {
            x0: &batch.images,
            schedule: &s,
        };
        let loss = training_loss(&oracle, &batch, &s, &mut Rng::new(2)).unwrap();
        assert!(loss < 1e-20, "loss {loss}");
    }

    #[test]
    fn zero_model_loss_is_noise_power() {
        let s = NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap();
        let batch = ToyDataset::new(0, 1, (16, 16))
            .unwrap()
            .sample_batch(32, &mut Rng::new(1))
            .unwrap();
        let loss = training_loss(&Zero, &batch, &s, &mut Rng::new(3)).unwrap();
        assert!((loss - 1.0).abs() < 0.05, "loss {loss}");
    }

    #[test]
    fn zero_model_sampling_follows_the_recursion() {
        let s = NoiseSchedule::linear(5, 1e-2, 0.2).unwrap();
        let got = ddpm_sample(&Zero, &s, &[2, 3], None, &mut Rng::new(7)).unwrap();
        let mut rng = Rng::new(7);
        let mut x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        for t in (0..5).rev() {
            let z: Vec<f64> = if t > 0 {
                (0..6).map(|_| rng.normal()).collect()
            } else {
                vec![0.0; 6]
            };
            for (xv, zv) in x.iter_mut().zip(z) {
                *xv = *xv / s.alphas[t].sqrt() + s.betas[t].sqrt() * zv;
            }
        }
        assert_eq!(got.shape(), &[2, 3]);
        for (a, b) in got.data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let s = NoiseSchedule::linear(4, 1e-2, 0.2).unwrap();
        let a = ddpm_sample(&Zero, &s, &[1, 4], None, &mut Rng::new(3)).unwrap();
        assert_eq!(a, ddpm_sample(&Zero, &s, &[1, 4], None, &mut Rng::new(3)).unwrap());
    }
}
