//! Sequential training: batches of `M` videos with `N` ordered search
//! frames, the state carried from frame to frame, one AdamW update per
//! batch.

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, SampleConfig, TrainBatch, VideoSequence};
use crate::error::{Error, Result};
use crate::head::{total_loss, LossConfig};
use crate::model::Model;
use crate::params::{ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Videos per batch (`M`).
    pub videos_per_batch: usize,
    /// Search frames per video (`N`).
    pub frames_per_video: usize,
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of `steps` after which the learning rates are multiplied
    /// by `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; `0` saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            videos_per_batch: 4,
            frames_per_video: 8,
            lr_backbone: 5e-4,
            lr_other: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay_at: 0.8,
            decay_factor: 0.1,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// The step at which the learning-rate decay takes effect.
    pub fn decay_step(&self) -> usize {
        (self.decay_at * self.steps as f64).round() as usize
    }

    /// `(backbone, other)` learning rates used at `step`.
    pub fn learning_rates(&self, step: usize) -> (f64, f64) {
        let k = if step >= self.decay_step() {
            self.decay_factor
        } else {
            1.0
        };
        (self.lr_backbone * k, self.lr_other * k)
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update with per-group learning rates.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        lr: (f64, f64),
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.group)).collect();
        for (k, (id, group)) in ids.into_iter().enumerate() {
            let lr = match group {
                ParamGroup::Backbone => lr.0,
                ParamGroup::Other => lr.1,
            };
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let w = params.get_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g[i].to_f64().unwrap_or(f64::NAN);
                let mi = self.beta1 * m[i].to_f64().unwrap_or(0.0) + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i].to_f64().unwrap_or(0.0) + (1.0 - self.beta2) * gi * gi;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let wi = w[i].to_f64().unwrap_or(0.0);
                let step = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                w[i] = T::of(wi - lr * (step + self.weight_decay * wi));
            }
        }
        Ok(())
    }
}

/// Mean loss terms of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub grad_norm: f64,
}

/// Forward pass over a batch. Returns the mean total loss on the tape and
/// the mean of each term. Within each video the state produced at frame
/// `k` is the state consumed at frame `k + 1`.
pub fn batch_loss<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    p: &crate::params::Bound,
    batch: &TrainBatch,
    loss_cfg: &LossConfig,
) -> Result<(crate::tensor::Var, StepStats)> {
    let net = &model.net;
    let mut totals = Vec::with_capacity(batch.size());
    let mut stats = StepStats::default();
    for sample in &batch.videos {
        let mut ctx = net.begin_video(tape, p, &sample.template.pixels, sample.video as u64)?;
        for (k, frame) in sample.search.iter().enumerate() {
            if ctx.state.frame_index != k || ctx.state.video != sample.video as u64 {
                return Err(Error::InvalidArgument(format!(
                    "state of video {} tagged frame {} before search frame {k}",
                    ctx.state.video, ctx.state.frame_index
                )));
            }
            let out = net.step(
                tape,
                p,
                &mut ctx,
                &frame.crop.pixels,
                model.config().detach_state,
            )?;
            let terms = total_loss(tape, &out.head, &frame.target, loss_cfg)?;
            stats.cls += tape.value(terms.cls).item().to_f64().unwrap_or(f64::NAN);
            stats.l1 += tape.value(terms.l1).item().to_f64().unwrap_or(f64::NAN);
            stats.giou += tape.value(terms.giou).item().to_f64().unwrap_or(f64::NAN);
            totals.push(terms.total);
        }
    }
    let n = totals.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let sum = tape.add_all(&totals)?;
    let mean = tape.scale(sum, T::of(1.0 / n as f64))?;
    let inv = 1.0 / n as f64;
    stats.loss = tape.value(mean).item().to_f64().unwrap_or(f64::NAN);
    stats.cls *= inv;
    stats.l1 *= inv;
    stats.giou *= inv;
    Ok((mean, stats))
}

/// Loss of a batch without building gradients.
pub fn evaluate_batch<T: Real>(
    model: &Model<T>,
    batch: &TrainBatch,
    loss_cfg: &LossConfig,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let p = model.params.bind_with(&mut tape, false)?;
    batch_loss(model, &mut tape, &p, batch, loss_cfg).map(|(_, s)| s)
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * k;
            }
        }
    }
    norm
}

/// Forward, backward and one optimizer update. Aborts on a non-finite loss
/// or gradient without touching the parameters.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &TrainBatch,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    lr: (f64, f64),
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape)?;
    let (loss, mut stats) = batch_loss(model, &mut tape, &p, batch, loss_cfg)?;
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite {
            op: "train_step loss",
        });
    }
    tape.backward(loss)?;
    let mut grads = model.params.grads(&tape, &p);
    stats.grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    if !stats.grad_norm.is_finite() {
        return Err(Error::NonFinite {
            op: "train_step gradient",
        });
    }
    opt.update(&mut model.params, &grads, lr)?;
    Ok(stats)
}

/// One line of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub loss: f64,
}

/// Formats a trace as `step,loss` lines.
pub fn format_trace(trace: &[TraceEntry]) -> String {
    trace
        .iter()
        .map(|e| format!("{},{}\n", e.step, e.loss))
        .collect()
}

/// Runs `cfg.steps` updates on batches drawn from `dataset`. `on_step` sees
/// every step's statistics together with the current model and may request
/// a checkpoint; it is called after the update.
pub fn train_loop<T: Real>(
    model: &mut Model<T>,
    dataset: &[VideoSequence],
    cfg: &TrainConfig,
    sample_cfg: &SampleConfig,
    loss_cfg: &LossConfig,
    mut on_step: impl FnMut(usize, &StepStats, &Model<T>) -> Result<()>,
) -> Result<Vec<TraceEntry>> {
    let mut rng = Rng::new(cfg.seed).fork(0x5eed);
    let mut opt = AdamW::new(&model.params, cfg);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(
            dataset,
            cfg.videos_per_batch,
            cfg.frames_per_video,
            sample_cfg,
            &mut rng,
        )?;
        let stats = train_step(
            model,
            &mut opt,
            &batch,
            loss_cfg,
            cfg,
            cfg.learning_rates(step),
        )
        .map_err(|e| match e {
            Error::NonFinite { op } => {
                Error::InvalidArgument(format!("non-finite value in {op} at step {step}"))
            }
            other => other,
        })?;
        trace.push(TraceEntry {
            step,
            loss: stats.loss,
        });
        on_step(step, &stats, model)?;
    }
    Ok(trace)
}
