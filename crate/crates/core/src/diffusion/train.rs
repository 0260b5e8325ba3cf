use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SwinDiT};
use crate::numerics::io::DType;
use crate::numerics::{Graph, Rng, RngState, Tensor};
use crate::pswa::ChannelPlan;

use super::data::{Batch, ToyDataset};
use super::sample::draw_noised;
use super::schedule::NoiseSchedule;

pub const METRICS_HEADER: &str = "step,loss,lr,elapsed_ms";
const CHECKPOINT_FORMAT: &str = "pswa-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Save a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: usize,
    /// Record real elapsed time in the metrics. Off by default so that
    /// metrics files are reproducible byte for byte.
    pub log_wall_clock: bool,
    /// Storage precision of the parameters. With `F32` every parameter is
    /// rounded through `f32` after initialisation and after each step, and
    /// checkpoints are written as `f32`; arithmetic stays 64-bit.
    #[serde(skip)]
    pub param_dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 16,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            checkpoint_every: 0,
            log_wall_clock: false,
            param_dtype: DType::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if [self.lr, self.weight_decay].iter().any(|v| v.is_nan() || *v < 0.0) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("lr and weight_decay must be >= 0 and eps > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("AdamW betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &[Tensor]) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim("adamw", &[params.len(), grads.len()], &[self.m.len()]));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::dim("adamw", p.shape(), g.shape()));
            }
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((pv, &gv), (mv, vv)) in iter {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / c1) / ((*vv / c2).sqrt() + self.eps) + self.weight_decay * *pv;
                *pv -= self.lr * update;
            }
        }
        Ok(())
    }
}

/// Loss on a noised batch and its gradient with respect to every model
/// parameter, in [`crate::model::ParamSet`] order.
pub fn loss_and_grads(
    model: &SwinDiT,
    x_t: &Tensor,
    t: &[usize],
    noise: &Tensor,
    labels: Option<&[usize]>,
) -> Result<(f64, Vec<Tensor>)> {
    let labels = labels.filter(|_| model.config().num_classes > 0);
    let mut g = Graph::new();
    let params = model.bind_inputs(&mut g);
    let x = g.constant(x_t.clone());
    let target = g.constant(noise.clone());
    let trace = model.forward_graph(&mut g, &params, x, t, labels)?;
    let loss = g.mse(trace.eps, target)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    Ok((value, params.iter().map(|&p| grads.take(p)).collect()))
}

/// Per-step training losses.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over steps `range`, clipped to the run.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let end = range.end.min(self.losses.len());
        let start = range.start.min(end);
        let window = &self.losses[start..end];
        window.iter().sum::<f64>() / window.len().max(1) as f64
    }
}

/// Trains `model` with AdamW on fresh batches from `dataset`.
///
/// Each step draws a batch, per-sample steps and noise from `rng` in that
/// order. With `out_dir`, writes `metrics.csv`, periodic checkpoints under
/// `checkpoints/step-NNNNNN/` and a final one under `checkpoint/`. A
/// non-finite loss stops training, dumps the current state under
/// `nonfinite/` and returns [`Error::NonFinite`].
pub fn train(
    model: &mut SwinDiT,
    dataset: &ToyDataset,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if schedule.steps() != model.steps() {
        return Err(Error::Config(format!(
            "model embeds {} diffusion steps but the schedule has {}",
            model.steps(),
            schedule.steps()
        )));
    }
    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
            writeln!(w, "{METRICS_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let store = |model: &mut SwinDiT| {
        if cfg.param_dtype == DType::F32 {
            for p in model.params_mut().tensors_mut() {
                *p = p.round_to_f32();
            }
        }
    };
    store(model);
    let mut opt = AdamW::new(cfg, model.params().tensors());
    let start = Instant::now();
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Batch = dataset.sample_batch(cfg.batch_size, rng)?;
        let (t, noise, x_t) = draw_noised(schedule, &batch.images, rng)?;
        let (loss, grads) = loss_and_grads(model, &x_t, &t, &noise, Some(&batch.labels))?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            let msg = format!("loss {loss} at step {step}");
            if let Some(dir) = out_dir {
                let dump = dir.join("nonfinite");
                save_checkpoint(&dump, model, step, rng, cfg.param_dtype)?;
                crate::numerics::io::save(dump.join("x_t.pswt"), &x_t, DType::F64)?;
                std::fs::write(dump.join("reason.txt"), format!("{msg}\ntimesteps {t:?}\n"))?;
            }
            return Err(Error::NonFinite(msg));
        }
        opt.step(model.params_mut().tensors_mut(), &grads)?;
        store(model);
        losses.push(loss);

        if let Some(w) = metrics.as_mut() {
            let elapsed = if cfg.log_wall_clock {
                start.elapsed().as_millis()
            } else {
                0
            };
            writeln!(w, "{step},{loss},{},{elapsed}", cfg.lr)?;
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join("checkpoints").join(format!("step-{:06}", step + 1));
                save_checkpoint(&path, model, step + 1, rng, cfg.param_dtype)?;
            }
        }
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("checkpoint"), model, cfg.steps, rng, cfg.param_dtype)?;
    }
    Ok(TrainReport { losses })
}

/// Contents of `manifest.toml` in a checkpoint directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub step: usize,
    pub diffusion_steps: usize,
    pub rng: RngState,
    pub model: ModelConfig,
    pub plan: ChannelPlan,
    pub params: Vec<String>,
}

pub fn save_checkpoint(dir: &Path, model: &SwinDiT, step: usize, rng: &Rng, dtype: DType) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        step,
        diffusion_steps: model.steps(),
        rng: rng.state(),
        model: model.config().clone(),
        plan: model.plan().clone(),
        params: model.params().names().to_vec(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    model.params().save(dir, dtype)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, SwinDiT)> {
    let text = std::fs::read_to_string(dir.join("manifest.toml"))?;
    let manifest: CheckpointManifest = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {}", manifest.format)));
    }
    let mut model = SwinDiT::new(
        &manifest.model,
        &manifest.plan,
        manifest.diffusion_steps,
        &mut Rng::new(0),
    )?;
    if model.params().names() != manifest.params.as_slice() {
        return Err(Error::Format(
            "checkpoint parameter list does not match the model".into(),
        ));
    }
    model.params_mut().load(dir)?;
    Ok((manifest, model))
}
