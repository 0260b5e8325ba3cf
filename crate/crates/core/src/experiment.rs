//! Run configuration and the seeded protocol shared by the command line and
//! the acceptance harness.
//!
//! A run seed `s` fixes everything: model initialisation draws from
//! `Rng::new(s).split(1)`, training from `Rng::new(s).split(2)`, sampling
//! from `Rng::new(s).split(3)`, the distance survey from
//! `Rng::new(s).split(4)`, and the toy dataset is seeded with `s`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{distance_survey, DistanceStats, SpectrumProfile};
use crate::diffusion::{
    train, Batch, DiffusionProbe, NoiseSchedule, ScheduleConfig, ToyDataset, TrainConfig, TrainReport, TOY_CLASSES,
};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PccaConfig, SwinDiT};
use crate::numerics::io::DType;
use crate::numerics::Rng;
use crate::pswa::ChannelPlan;

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;
const SURVEY_STREAM: u64 = 4;

/// Settings of the attention-distance survey and the feature-spectrum probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Diffusion step at which feature spectra are measured.
    pub spectrum_timestep: usize,
    /// Block whose token-mixer output is measured; `depth / 2` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum_layer: Option<usize>,
    /// Number of probe images.
    pub batch_size: usize,
    /// Seed of the draw that picks the probe images.
    pub batch_seed: u64,
    /// Seed of the noise that corrupts the probe images.
    pub noise_seed: u64,
    /// Number of attention maps sampled by the distance survey.
    pub distance_budget: usize,
    /// Diffusion steps the distance survey draws from.
    pub distance_timesteps: Vec<usize>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            spectrum_timestep: 0,
            spectrum_layer: None,
            batch_size: 16,
            batch_seed: 99,
            noise_seed: 7,
            distance_budget: 256,
            distance_timesteps: vec![0, 25, 50, 75, 99],
        }
    }
}

/// Every setting of a run. Unknown keys are rejected and every field has a
/// default, so an empty document is a valid configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Parameter storage precision, `"f64"` or `"f32"`.
    pub precision: DType,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub pcca: PccaConfig,
    pub training: TrainConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    /// The fully resolved document, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.plan()?;
        self.noise_schedule()?;
        self.training_config().validate()?;
        let classes = self.model.num_classes;
        if classes != 0 && classes < TOY_CLASSES {
            return Err(Error::Config(format!(
                "the toy dataset has {TOY_CLASSES} classes; num_classes must be 0 or >= {TOY_CLASSES}, got {classes}"
            )));
        }
        let diag = &self.diagnostics;
        if diag.batch_size == 0 {
            return Err(Error::Config("diagnostics.batch_size must be >= 1".into()));
        }
        if self.spectrum_layer() >= self.model.depth.max(1) {
            return Err(Error::Config(format!(
                "diagnostics.spectrum_layer {} outside a depth-{} model",
                self.spectrum_layer(),
                self.model.depth
            )));
        }
        let steps = self.schedule.steps;
        if let Some(t) = std::iter::once(diag.spectrum_timestep)
            .chain(diag.distance_timesteps.iter().copied())
            .find(|&t| t >= steps)
        {
            return Err(Error::Config(format!("diagnostic timestep {t} outside [0, {steps})")));
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<ChannelPlan> {
        self.pcca.plan(&self.model)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_config(&self.schedule)
    }

    pub fn dataset(&self) -> Result<ToyDataset> {
        ToyDataset::new(self.seed, self.model.in_channels, self.model.image_size)
    }

    pub fn training_config(&self) -> TrainConfig {
        TrainConfig {
            param_dtype: self.precision,
            ..self.training.clone()
        }
    }

    pub fn spectrum_layer(&self) -> usize {
        self.diagnostics.spectrum_layer.unwrap_or(self.model.depth / 2)
    }

    /// The model at initialisation.
    pub fn init_model(&self) -> Result<SwinDiT> {
        let mut rng = Rng::new(self.seed).split(INIT_STREAM);
        SwinDiT::new(&self.model, &self.plan()?, self.schedule.steps, &mut rng)
    }

    pub fn sample_rng(&self) -> Rng {
        Rng::new(self.seed).split(SAMPLE_STREAM)
    }

    /// The probe images shared by the spectrum and distance diagnostics.
    pub fn probe_batch(&self) -> Result<Batch> {
        let mut rng = Rng::new(self.diagnostics.batch_seed);
        self.dataset()?.sample_batch(self.diagnostics.batch_size, &mut rng)
    }
}

/// Initialises and trains the model described by `cfg`.
pub fn train_run(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<(SwinDiT, TrainReport)> {
    cfg.validate()?;
    let mut model = cfg.init_model()?;
    let mut rng = Rng::new(cfg.seed).split(TRAIN_STREAM);
    let report = train(
        &mut model,
        &cfg.dataset()?,
        &cfg.noise_schedule()?,
        &cfg.training_config(),
        &mut rng,
        out_dir,
    )?;
    Ok((model, report))
}

fn probe<'a>(cfg: &RunConfig, model: &'a SwinDiT, schedule: &'a NoiseSchedule, batch: &Batch) -> DiffusionProbe<'a> {
    DiffusionProbe {
        model,
        schedule,
        labels: Some(batch.labels.clone()),
        seed: cfg.diagnostics.noise_seed,
    }
}

/// Radial spectrum of the configured block's token-mixer output on the
/// probe images at the configured step.
pub fn mixer_spectrum(cfg: &RunConfig, model: &SwinDiT) -> Result<SpectrumProfile> {
    let schedule = cfg.noise_schedule()?;
    let batch = cfg.probe_batch()?;
    probe(cfg, model, &schedule, &batch).mixer_spectrum(
        &batch.images,
        cfg.diagnostics.spectrum_timestep,
        cfg.spectrum_layer(),
    )
}

/// Attention-distance survey of `model` on the probe images.
pub fn distance_stats(cfg: &RunConfig, model: &SwinDiT) -> Result<DistanceStats> {
    let schedule = cfg.noise_schedule()?;
    let batch = cfg.probe_batch()?;
    let source = probe(cfg, model, &schedule, &batch);
    let mut rng = Rng::new(cfg.seed).split(SURVEY_STREAM);
    distance_survey(
        &source,
        &batch.images,
        &cfg.diagnostics.distance_timesteps,
        cfg.diagnostics.distance_budget,
        &mut rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_document_round_trips() {
        let mut cfg = RunConfig {
            seed: 12,
            precision: DType::F32,
            ..Default::default()
        };
        cfg.diagnostics.spectrum_layer = Some(1);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("[diagnostics]") && text.contains("precision = \"f32\""));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for doc in [
            "sede = 3",
            "[model]\ndepht = 2",
            "[training]\nlr = -1.0",
            "[diagnostics]\nspectrum_timestep = 100",
            "[model]\nnum_classes = 1",
            "[diagnostics]\nspectrum_layer = 4",
        ] {
            assert!(matches!(RunConfig::from_toml(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn seeds_fix_the_initial_model() {
        let cfg = RunConfig::default();
        let a = cfg.init_model().unwrap();
        let b = cfg.init_model().unwrap();
        assert_eq!(a.params().tensors(), b.params().tensors());
        assert_eq!(cfg.probe_batch().unwrap(), cfg.probe_batch().unwrap());
    }
}
