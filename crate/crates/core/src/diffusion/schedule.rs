use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Parameters of a linear beta schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// DDPM noise tables indexed by step `t ∈ [0, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        NoiseSchedule::from_betas(betas)
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        NoiseSchedule::linear(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Domain(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
pub fn q_sample(schedule: &NoiseSchedule, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bars[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_with(noise, |x, n| a * x + b * n)
}

/// [`q_sample`] with a separate step per sample along the leading axis.
pub fn q_sample_batch(schedule: &NoiseSchedule, x0: &Tensor, t: &[usize], noise: &Tensor) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return Err(Error::dim("q_sample", x0.shape(), noise.shape()));
    }
    if t.len() != x0.shape()[0] {
        return Err(Error::dim("q_sample timesteps", &[t.len()], &[x0.shape()[0]]));
    }
    let per = x0.len() / t.len();
    let mut out = Vec::with_capacity(x0.len());
    for (i, &step) in t.iter().enumerate() {
        schedule.check_step(step)?;
        let ab = schedule.alpha_bars[step];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = i * per..(i + 1) * per;
        out.extend(
            x0.data()[range.clone()]
                .iter()
                .zip(&noise.data()[range])
                .map(|(x, n)| a * x + b * n),
        );
    }
    Tensor::new(x0.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn default_tables() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.betas[0], 1e-4);
        assert!((s.betas[99] - 2e-2).abs() < 1e-15);
        assert!(s.alpha_bars[0] < 1.0);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(NoiseSchedule::from_betas(vec![0.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.5, 1.0]).is_err());
        assert!(NoiseSchedule::linear(0, 1e-4, 2e-2).is_err());
    }

    #[test]
    fn zero_noise_scales() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let x = Tensor::full(&[2, 3], 2.0);
        let y = q_sample(&s, &x, 4, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0 * s.alpha_bars[4].sqrt()));
        assert!(matches!(q_sample(&s, &x, 10, &x), Err(Error::Domain(_))));
    }

    #[test]
    fn tiny_beta_keeps_signal() {
        let s = NoiseSchedule::from_betas(vec![1e-12]).unwrap();
        let mut rng = Rng::new(0);
        let x = Tensor::randn(&[16], 1.0, &mut rng);
        let n = Tensor::randn(&[16], 1.0, &mut rng);
        assert!(q_sample(&s, &x, 0, &n).unwrap().max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn batch_uses_per_sample_steps() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let mut rng = Rng::new(1);
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let n = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let y = q_sample_batch(&s, &x, &[1, 7], &n).unwrap();
        let row = |t: &Tensor, i: usize| Tensor::new(&[4], t.data()[i * 4..(i + 1) * 4].to_vec()).unwrap();
        assert_eq!(row(&y, 0), q_sample(&s, &row(&x, 0), 1, &row(&n, 0)).unwrap());
        assert_eq!(row(&y, 1), q_sample(&s, &row(&x, 1), 7, &row(&n, 1)).unwrap());
    }
}
