//! Diagnostics that look inside a model on noised data.

use crate::diagnostics::{radial_spectrum_batch, AttentionMapSource, AttentionMaps, SpectrumProfile};
use crate::error::{Error, Result};
use crate::model::SwinDiT;
use crate::numerics::{Rng, Tensor};

use super::schedule::{q_sample_batch, NoiseSchedule};

/// Runs a model on clean images noised to the requested step. The noise
/// for step `t` is drawn from `Rng::new(seed).split(t)`, so every layer and
/// head sees the same input at a given step.
pub struct DiffusionProbe<'a> {
    pub model: &'a SwinDiT,
    pub schedule: &'a NoiseSchedule,
    pub labels: Option<Vec<usize>>,
    pub seed: u64,
}

impl DiffusionProbe<'_> {
    pub fn noised(&self, x0: &Tensor, t: usize) -> Result<Tensor> {
        let mut rng = Rng::new(self.seed).split(t as u64);
        let noise = Tensor::randn(x0.shape(), 1.0, &mut rng);
        q_sample_batch(self.schedule, x0, &vec![t; x0.shape()[0]], &noise)
    }

    fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref().filter(|_| self.model.config().num_classes > 0)
    }

    /// Token-mixer output of block `layer` as `[B×d×H×W]`.
    pub fn mixer_features(&self, x0: &Tensor, t: usize, layer: usize) -> Result<Tensor> {
        let x_t = self.noised(x0, t)?;
        let b = x0.shape()[0];
        let (g, trace) = self.model.trace(&x_t, &vec![t; b], self.labels())?;
        let block = trace
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Usage(format!("layer {layer} outside a depth-{} model", trace.blocks.len())))?;
        g.value(block.mixer).permute(&[0, 3, 1, 2])
    }

    /// Radial spectrum of block `layer`'s token-mixer output, averaged over
    /// samples and channels.
    pub fn mixer_spectrum(&self, x0: &Tensor, t: usize, layer: usize) -> Result<SpectrumProfile> {
        radial_spectrum_batch(&self.mixer_features(x0, t, layer)?)
    }
}

impl AttentionMapSource for DiffusionProbe<'_> {
    fn heads_per_layer(&self) -> Vec<usize> {
        self.model.layer_configs().iter().map(|c| c.num_heads()).collect()
    }

    fn attention_maps(&self, batch: &Tensor, timestep: usize) -> Result<Vec<Option<AttentionMaps>>> {
        let x_t = self.noised(batch, timestep)?;
        self.model
            .attention_maps(&x_t, &vec![timestep; batch.shape()[0]], self.labels())
    }
}
