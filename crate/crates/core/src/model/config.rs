use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pswa::{AllocationArm, ChannelPlan, PccaSchedule, PswaLayerConfig, ScheduleShape};

/// Architecture of the toy isotropic Swin-DiT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `(height, width)` of the input image in pixels.
    pub image_size: (usize, usize),
    pub in_channels: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    /// `(height, width)` of an attention window in tokens.
    pub window: (usize, usize),
    /// Bridge neighbourhood order `K`.
    pub order: usize,
    pub mlp_ratio: f64,
    /// Zero for an unconditional model.
    pub num_classes: usize,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
    /// Add a fixed 2-D sin-cos position embedding after patchify.
    pub pos_embed: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: (16, 16),
            in_channels: 1,
            patch_size: 2,
            d_model: 32,
            depth: 4,
            heads: 4,
            window: (4, 4),
            order: 2,
            mlp_ratio: 2.0,
            num_classes: 0,
            freq_dim: 32,
            pos_embed: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (ih, iw) = self.image_size;
        let p = self.patch_size;
        let positive = [
            ("image height", ih),
            ("image width", iw),
            ("in_channels", self.in_channels),
            ("patch_size", p),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("window height", self.window.0),
            ("window width", self.window.1),
            ("order", self.order),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if ih % p != 0 || iw % p != 0 {
            return Err(Error::Config(format!(
                "image {ih}x{iw} is not divisible into {p}x{p} patches"
            )));
        }
        let (gh, gw) = self.grid();
        if gh % self.window.0 != 0 || gw % self.window.1 != 0 {
            return Err(Error::Config(format!(
                "token grid {gh}x{gw} is not divisible by window {}x{}",
                self.window.0, self.window.1
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 || self.mlp_hidden() == 0 {
            return Err(Error::Config(format!(
                "mlp_ratio {} gives no hidden units",
                self.mlp_ratio
            )));
        }
        if self.freq_dim < 2 || !self.freq_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "freq_dim {} must be even and >= 2",
                self.freq_dim
            )));
        }
        if self.pos_embed && !self.d_model.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "2-D position embedding needs d_model divisible by 4, got {}",
                self.d_model
            )));
        }
        Ok(())
    }

    /// Token grid `(H, W)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch_size, self.image_size.1 / self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Pixels per patch times image channels.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.d_model as f64 * self.mlp_ratio).round() as usize
    }

    pub fn kernel_size(&self) -> usize {
        2 * self.order - 1
    }

    pub fn layer_config(&self, window_channels: usize) -> Result<PswaLayerConfig> {
        PswaLayerConfig::new(self.d_model, window_channels, self.head_dim(), self.order, self.window)
    }

    pub fn check_plan(&self, plan: &ChannelPlan) -> Result<()> {
        if plan.channels != self.d_model || plan.head_dim != self.head_dim() || plan.layers() != self.depth {
            return Err(Error::Config(format!(
                "channel plan ({} layers, {} channels, head_dim {}) does not fit the model ({} layers, {} channels, head_dim {})",
                plan.layers(),
                plan.channels,
                plan.head_dim,
                self.depth,
                self.d_model,
                self.head_dim()
            )));
        }
        for &h in &plan.window_channels {
            self.layer_config(h)?;
        }
        Ok(())
    }
}

/// How window-branch channels are allocated across depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PccaConfig {
    pub arm: AllocationArm,
    pub shape: ScheduleShape,
    pub f_start: f64,
    pub f_end: f64,
    /// Explicit per-layer window fractions; overrides the endpoints when
    /// set and must be nondecreasing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fractions: Option<Vec<f64>>,
}

impl Default for PccaConfig {
    fn default() -> Self {
        PccaConfig {
            arm: AllocationArm::Increasing,
            shape: ScheduleShape::Linear,
            f_start: 0.25,
            f_end: 0.75,
            fractions: None,
        }
    }
}

impl PccaConfig {
    pub fn plan(&self, model: &ModelConfig) -> Result<ChannelPlan> {
        model.validate()?;
        let plan = match &self.fractions {
            Some(f) => {
                if f.len() != model.depth {
                    return Err(Error::Config(format!(
                        "{} PCCA fractions given for depth {}",
                        f.len(),
                        model.depth
                    )));
                }
                ChannelPlan::from_schedule(&PccaSchedule::from_fractions(f, model.d_model, model.head_dim())?)
            }
            None => ChannelPlan::from_arm(
                self.arm,
                model.depth,
                self.f_start,
                self.f_end,
                model.d_model,
                model.head_dim(),
                self.shape,
            )?,
        };
        model.check_plan(&plan)?;
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let m = ModelConfig::default();
        m.validate().unwrap();
        assert_eq!(m.grid(), (8, 8));
        let plan = PccaConfig::default().plan(&m).unwrap();
        assert_eq!(plan.window_channels, vec![8, 16, 16, 24]);
    }

    #[test]
    fn divisibility_errors() {
        let m = ModelConfig {
            image_size: (10, 16),
            ..ModelConfig::default()
        };
        assert!(matches!(m.validate(), Err(Error::Config(_))));
        let m = ModelConfig {
            window: (3, 4),
            ..ModelConfig::default()
        };
        assert!(m.validate().is_err());
        let m = ModelConfig {
            heads: 5,
            ..ModelConfig::default()
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn explicit_fractions_must_match_depth() {
        let m = ModelConfig::default();
        let p = PccaConfig {
            fractions: Some(vec![0.5; 3]),
            ..PccaConfig::default()
        };
        assert!(p.plan(&m).is_err());
        let p = PccaConfig {
            fractions: Some(vec![0.0, 0.25, 0.5, 1.0]),
            ..PccaConfig::default()
        };
        assert_eq!(p.plan(&m).unwrap().window_channels, vec![0, 8, 16, 32]);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let m = ModelConfig::default();
        let text = toml::to_string(&m).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&text).unwrap(), m);
        assert!(toml::from_str::<ModelConfig>("d_modle = 3").is_err());
        let p: PccaConfig = toml::from_str("arm = \"bridge_only\"").unwrap();
        assert_eq!(p.arm, AllocationArm::BridgeOnly);
    }
}
