//! Per-layer channel allocation between the window and bridge branches.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interpolation profile of the window-branch fraction over depth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    #[default]
    Linear,
    /// `f_start` for the first half of the layers, `f_end` for the rest.
    Step,
    /// Half-cosine ramp from `f_start` to `f_end`.
    Cosine,
}

impl ScheduleShape {
    fn fraction(self, layer: usize, layers: usize, f_start: f64, f_end: f64) -> f64 {
        if layers == 1 {
            return f_end;
        }
        let t = layer as f64 / (layers - 1) as f64;
        let w = match self {
            ScheduleShape::Linear => t,
            ScheduleShape::Step => {
                if layer < layers / 2 {
                    0.0
                } else {
                    1.0
                }
            }
            ScheduleShape::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * t).cos()),
        };
        f_start + (f_end - f_start) * w
    }
}

/// Progressive coverage channel allocation: the window branch's share of
/// channels never shrinks with depth.
#[derive(Clone, Debug, PartialEq)]
pub struct PccaSchedule {
    channels: usize,
    head_dim: usize,
    target_fractions: Vec<f64>,
    window_channels: Vec<usize>,
}

impl PccaSchedule {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn layers(&self) -> usize {
        self.window_channels.len()
    }

    /// Interpolated fractions before rounding to whole heads.
    pub fn target_fractions(&self) -> &[f64] {
        &self.target_fractions
    }

    /// `h_l / C` per layer.
    pub fn fractions(&self) -> Vec<f64> {
        self.window_channels
            .iter()
            .map(|&h| h as f64 / self.channels as f64)
            .collect()
    }

    pub fn window_channels(&self) -> &[usize] {
        &self.window_channels
    }

    /// Explicit per-layer fraction list, as written to config files.
    pub fn from_fractions(fractions: &[f64], channels: usize, head_dim: usize) -> Result<Self> {
        if fractions.is_empty() {
            return Err(Error::Config("schedule needs at least one layer".into()));
        }
        check_granularity(channels, head_dim)?;
        let window_channels = round_to_heads(fractions, channels, head_dim)?;
        if window_channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "fractions {fractions:?} shrink the window branch with depth"
            )));
        }
        Ok(PccaSchedule {
            channels,
            head_dim,
            target_fractions: fractions.to_vec(),
            window_channels,
        })
    }
}

fn check_granularity(channels: usize, head_dim: usize) -> Result<()> {
    if channels == 0 || head_dim == 0 || !channels.is_multiple_of(head_dim) {
        return Err(Error::Config(format!(
            "{channels} channels are not a whole number of {head_dim}-wide heads"
        )));
    }
    Ok(())
}

fn round_to_heads(fractions: &[f64], channels: usize, head_dim: usize) -> Result<Vec<usize>> {
    let max_heads = channels / head_dim;
    fractions
        .iter()
        .map(|&f| {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("fraction {f} outside [0, 1]")));
            }
            let heads = (f * channels as f64 / head_dim as f64).round() as usize;
            Ok(heads.min(max_heads) * head_dim)
        })
        .collect()
}

/// Builds the PCCA schedule for `layers` layers.
///
/// Fractions are interpolated from `f_start` to `f_end` with `shape`,
/// rounded to the nearest whole head, then clamped so `h_l ≥ h_{l−1}`.
pub fn pcca_schedule(
    layers: usize,
    f_start: f64,
    f_end: f64,
    channels: usize,
    head_dim: usize,
    shape: ScheduleShape,
) -> Result<PccaSchedule> {
    if layers == 0 {
        return Err(Error::Config("schedule needs at least one layer".into()));
    }
    if !(0.0..=1.0).contains(&f_start) || !(0.0..=1.0).contains(&f_end) {
        return Err(Error::Config(format!(
            "fractions must lie in [0, 1], got {f_start} -> {f_end}"
        )));
    }
    if f_start > f_end {
        return Err(Error::Config(format!(
            "f_start {f_start} > f_end {f_end}: the schedule must grow the window branch"
        )));
    }
    check_granularity(channels, head_dim)?;
    let target: Vec<f64> = (0..layers).map(|l| shape.fraction(l, layers, f_start, f_end)).collect();
    let mut window_channels = round_to_heads(&target, channels, head_dim)?;
    for l in 1..layers {
        window_channels[l] = window_channels[l].max(window_channels[l - 1]);
    }
    Ok(PccaSchedule {
        channels,
        head_dim,
        target_fractions: target,
        window_channels,
    })
}

/// Channel-allocation strategies compared in the allocation ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationArm {
    /// `C_win = 0`: every layer is a pure convolution block.
    BridgeOnly,
    /// `C_bridge = 0`: every layer is pure window attention.
    WindowOnly,
    /// Window share shrinks with depth (mirror of `Increasing`).
    Decreasing,
    /// Fixed share `(f_start + f_end) / 2`.
    Constant,
    /// Progressive coverage: window share grows with depth.
    #[default]
    Increasing,
}

impl AllocationArm {
    pub const ALL: [AllocationArm; 5] = [
        AllocationArm::BridgeOnly,
        AllocationArm::WindowOnly,
        AllocationArm::Decreasing,
        AllocationArm::Constant,
        AllocationArm::Increasing,
    ];
}

/// Window-branch channel counts `h_l` for every layer of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub channels: usize,
    pub head_dim: usize,
    pub window_channels: Vec<usize>,
}

impl ChannelPlan {
    pub fn from_arm(
        arm: AllocationArm,
        layers: usize,
        f_start: f64,
        f_end: f64,
        channels: usize,
        head_dim: usize,
        shape: ScheduleShape,
    ) -> Result<Self> {
        if layers == 0 {
            check_granularity(channels, head_dim)?;
            return Ok(ChannelPlan {
                channels,
                head_dim,
                window_channels: Vec::new(),
            });
        }
        let window_channels = match arm {
            AllocationArm::BridgeOnly | AllocationArm::WindowOnly => {
                check_granularity(channels, head_dim)?;
                let h = if arm == AllocationArm::WindowOnly { channels } else { 0 };
                vec![h; layers]
            }
            AllocationArm::Increasing => {
                pcca_schedule(layers, f_start, f_end, channels, head_dim, shape)?.window_channels
            }
            AllocationArm::Decreasing => {
                let mut h = pcca_schedule(layers, f_start, f_end, channels, head_dim, shape)?.window_channels;
                h.reverse();
                h
            }
            AllocationArm::Constant => {
                let f = 0.5 * (f_start + f_end);
                pcca_schedule(layers, f, f, channels, head_dim, shape)?.window_channels
            }
        };
        Ok(ChannelPlan {
            channels,
            head_dim,
            window_channels,
        })
    }

    pub fn from_schedule(s: &PccaSchedule) -> Self {
        ChannelPlan {
            channels: s.channels,
            head_dim: s.head_dim,
            window_channels: s.window_channels.clone(),
        }
    }

    pub fn layers(&self) -> usize {
        self.window_channels.len()
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.window_channels.windows(2).all(|w| w[0] <= w[1])
    }

    /// Bridge channels at layer `l` that become window channels at `l + 1`:
    /// the slice `[h_l, h_{l+1})`. Empty for the last layer or when the
    /// window share does not grow.
    pub fn migrated_channels(&self, layer: usize) -> Range<usize> {
        let h = &self.window_channels;
        match (h.get(layer), h.get(layer + 1)) {
            (Some(&a), Some(&b)) if b > a => a..b,
            (Some(&a), _) => a..a,
            _ => 0..0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_layer_uses_f_end() {
        let s = pcca_schedule(1, 0.25, 0.75, 16, 4, ScheduleShape::Linear).unwrap();
        assert_eq!(s.target_fractions(), &[0.75]);
        assert_eq!(s.window_channels(), &[12]);
    }

    #[test]
    fn four_layer_linear_example() {
        let s = pcca_schedule(4, 0.25, 0.75, 16, 4, ScheduleShape::Linear).unwrap();
        let expect = [0.25, 0.25 + 0.5 / 3.0, 0.25 + 1.0 / 3.0, 0.75];
        for (a, b) in s.target_fractions().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((s.target_fractions()[1] - 0.4167).abs() < 1e-4);
        assert!((s.target_fractions()[2] - 0.5833).abs() < 1e-4);
        assert_eq!(s.window_channels(), &[4, 8, 8, 12]);
        assert_eq!(s.fractions(), vec![0.25, 0.5, 0.5, 0.75]);
    }

    #[test]
    fn constant_schedule_halves_channels() {
        let s = pcca_schedule(5, 0.5, 0.5, 16, 4, ScheduleShape::Linear).unwrap();
        assert_eq!(s.window_channels(), &[8; 5]);
    }

    #[test]
    fn shrinking_schedule_is_rejected() {
        assert!(matches!(
            pcca_schedule(3, 0.75, 0.25, 16, 4, ScheduleShape::Linear),
            Err(Error::Config(_))
        ));
        assert!(pcca_schedule(0, 0.1, 0.2, 16, 4, ScheduleShape::Linear).is_err());
        assert!(pcca_schedule(3, 0.1, 1.2, 16, 4, ScheduleShape::Linear).is_err());
        assert!(pcca_schedule(3, 0.1, 0.2, 15, 4, ScheduleShape::Linear).is_err());
    }

    #[test]
    fn shapes_differ_but_share_endpoints() {
        let lin = pcca_schedule(6, 0.0, 1.0, 24, 2, ScheduleShape::Linear).unwrap();
        let step = pcca_schedule(6, 0.0, 1.0, 24, 2, ScheduleShape::Step).unwrap();
        let cos = pcca_schedule(6, 0.0, 1.0, 24, 2, ScheduleShape::Cosine).unwrap();
        for s in [&lin, &step, &cos] {
            assert_eq!(s.window_channels()[0], 0);
            assert_eq!(s.window_channels()[5], 24);
        }
        assert_eq!(step.window_channels(), &[0, 0, 0, 24, 24, 24]);
        assert_ne!(lin, cos);
    }

    #[test]
    fn explicit_fraction_lists() {
        let s = PccaSchedule::from_fractions(&[0.25, 0.5, 0.75], 16, 4).unwrap();
        assert_eq!(s.window_channels(), &[4, 8, 12]);
        assert!(PccaSchedule::from_fractions(&[0.75, 0.25], 16, 4).is_err());
    }

    #[test]
    fn arms_are_distinct() {
        let plans: Vec<ChannelPlan> = AllocationArm::ALL
            .iter()
            .map(|&arm| ChannelPlan::from_arm(arm, 4, 0.25, 0.75, 16, 4, ScheduleShape::Linear).unwrap())
            .collect();
        for i in 0..plans.len() {
            for j in i + 1..plans.len() {
                assert_ne!(plans[i], plans[j]);
            }
        }
        assert_eq!(plans[0].window_channels, vec![0; 4]);
        assert_eq!(plans[1].window_channels, vec![16; 4]);
        assert_eq!(plans[2].window_channels, vec![12, 8, 8, 4]);
        assert!(!plans[2].is_nondecreasing());
        assert_eq!(plans[3].window_channels, vec![8; 4]);
        assert_eq!(plans[4].window_channels, vec![4, 8, 8, 12]);
    }

    #[test]
    fn migrated_slices() {
        let plan =
            ChannelPlan::from_arm(AllocationArm::Increasing, 4, 0.25, 0.75, 16, 4, ScheduleShape::Linear).unwrap();
        assert_eq!(plan.migrated_channels(0), 4..8);
        assert_eq!(plan.migrated_channels(1), 8..8);
        assert_eq!(plan.migrated_channels(2), 8..12);
        assert!(plan.migrated_channels(3).is_empty());
    }

    proptest! {
        #[test]
        fn pcca_is_monotone(
            layers in 1usize..16,
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
            heads in 1usize..9,
            head_dim in 1usize..6,
            shape in prop_oneof![Just(ScheduleShape::Linear), Just(ScheduleShape::Step), Just(ScheduleShape::Cosine)],
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let c = heads * head_dim;
            let s = pcca_schedule(layers, lo, hi, c, head_dim, shape).unwrap();
            prop_assert_eq!(s.layers(), layers);
            for w in s.window_channels().windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            for &h in s.window_channels() {
                prop_assert!(h <= c && h % head_dim == 0);
            }
        }
    }
}
