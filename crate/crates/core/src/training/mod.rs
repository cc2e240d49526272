//! Seeded AdamW training with warm-up and cosine decay, synthetic tasks and
//! a paired-run comparison harness.

mod paired;
mod report;
mod task;

pub use paired::{paired_compare, CompareReport, CompareRow, Variant};
pub use report::{write_history_csv, HISTORY_HEADER};
pub use task::{make_task, Batch, Target, Task, TaskSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LaxError, Result};
use crate::nets::Net;
use crate::numerics::{grad_check, Binder, GradCheckReport, Tape, Tensor};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

fn default_clip() -> Option<f64> {
    Some(0.5)
}

fn default_eval_interval() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default)]
    pub warmup: usize,
    pub lr: f64,
    #[serde(default)]
    pub schedule: Schedule,
    /// Decoupled decay, applied to matrices and higher-order tensors only.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; `null` disables it.
    #[serde(default = "default_clip")]
    pub clip: Option<f64>,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    /// Stops once eval accuracy reaches this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_at_accuracy: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(steps: usize, lr: f64, batch_size: usize, seed: u64) -> Self {
        Self {
            steps,
            warmup: 0,
            lr,
            schedule: Schedule::Cosine,
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            batch_size,
            clip: default_clip(),
            eval_interval: default_eval_interval(),
            stop_at_accuracy: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(LaxError::Config(m));
        if self.steps == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return cfg("steps, batch_size and eval_interval must be >= 1".into());
        }
        if self.warmup > self.steps {
            return cfg(format!("warmup {} exceeds steps {}", self.warmup, self.steps));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return cfg(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return cfg("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if self.weight_decay < 0.0 {
            return cfg("weight_decay must be >= 0".into());
        }
        if let Some(c) = self.clip {
            if c.is_nan() || c <= 0.0 {
                return cfg(format!("clip must be > 0 or null, got {c}"));
            }
        }
        Ok(())
    }

    /// Learning rate at 1-based `step`: `lr · min(step / warmup, decay)`,
    /// with the cosine reaching zero one step past the end.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.max(1);
        let warm = if self.warmup == 0 {
            1.0
        } else {
            (step as f64 / self.warmup as f64).min(1.0)
        };
        let decay = match self.schedule {
            Schedule::Constant => 1.0,
            Schedule::Cosine => {
                let p = ((step - 1) as f64 / self.steps as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        };
        self.lr * warm.min(decay)
    }
}

/// First and second moments, aligned with the trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    /// Global norm before clipping.
    pub grad_norm: f64,
}

/// One AdamW update at 1-based `step`. Gradients are clipped by global
/// norm first; any non-finite gradient aborts before touching `params`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepInfo> {
    if params.len() != grads.len() {
        return Err(LaxError::Dimension(format!(
            "{} params but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if step == 0 {
        return Err(LaxError::Config("adam steps are 1-based".into()));
    }
    let mut sq = 0.0;
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(LaxError::Dimension(format!(
                "param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(LaxError::Numeric(format!("non-finite gradient at step {step}")));
        }
        sq += g.norm_sq();
    }
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(LaxError::Numeric(format!("gradient norm overflow at step {step}")));
    }
    let scale = match cfg.clip {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        state.v = state.m.clone();
    }
    let lr = cfg.lr_at(step);
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = if p.ndim() >= 2 { cfg.weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj * scale;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
            *x -= lr * (update + decay * *x);
        }
    }
    Ok(StepInfo { lr, grad_norm })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub step: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    pub abort: Option<Abort>,
    pub stopped_early: bool,
}

impl History {
    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.evals.iter().filter_map(|e| e.accuracy).reduce(f64::max)
    }
}

fn diverged(loss: f64) -> bool {
    !loss.is_finite() || loss > DIVERGENCE_LOSS
}

/// Gradients in `tensors_mut` order, and which of them are set.
type StepGrads = (Vec<Tensor>, Vec<bool>);

/// Loss, then gradients of the trainable parameters together with a mask
/// over `tensors_mut` marking which tensors they belong to. No gradients
/// are taken once the loss has diverged.
fn train_step(net: &Net, task: &Task, batch: &Batch) -> Result<(f64, Option<StepGrads>)> {
    let mut tape = Tape::new();
    let mut b = Binder::new(&mut tape);
    let vars = net.bind(&mut b);
    let params = b.finish();
    let out = net.forward(&mut tape, &vars, &batch.input, None)?;
    let loss = task.loss(&mut tape, out, batch)?;
    let value = tape.value(loss).item();
    if diverged(value) {
        return Ok((value, None));
    }
    let grads = tape.backward(loss)?;
    let mask: Vec<bool> = params.iter().map(|p| p.trainable).collect();
    let g = params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| grads.get_or_zeros(&tape, p.var))
        .collect();
    Ok((value, Some((g, mask))))
}

/// Mean loss and accuracy over the task's eval set.
pub fn evaluate(net: &Net, task: &Task) -> Result<EvalRecord> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut count = 0usize;
    for batch in task.eval_batches(256) {
        let mut tape = Tape::new();
        let vars = net.bind(&mut Binder::new(&mut tape));
        let out = net.forward(&mut tape, &vars, &batch.input, None)?;
        let (l, c, n) = task.score(tape.value(out), &batch)?;
        loss += l;
        correct += c;
        count += n;
    }
    let count = count.max(1) as f64;
    Ok(EvalRecord {
        step: 0,
        loss: loss / count,
        accuracy: task.has_accuracy().then_some(correct as f64 / count),
    })
}

/// Trains `net` in place. Divergence, non-finite losses and non-finite
/// gradients end the run and are recorded in `History::abort`.
pub fn train(net: &mut Net, task: &Task, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    task.check_net(net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::default();
    let mut hist = History::default();
    for step in 1..=cfg.steps {
        let batch = task.sample(&mut rng, cfg.batch_size);
        let (loss, grads) = train_step(net, task, &batch)?;
        hist.losses.push(loss);
        hist.lrs.push(cfg.lr_at(step));
        let Some((grads, mask)) = grads else {
            hist.abort = Some(Abort {
                step,
                reason: format!("loss {loss} diverged"),
            });
            break;
        };
        let mut params: Vec<&mut Tensor> = net
            .tensors_mut()
            .into_iter()
            .zip(&mask)
            .filter_map(|(t, &m)| m.then_some(t))
            .collect();
        if let Err(e) = adam_step(&mut params, &grads, &mut state, cfg, step) {
            hist.abort = Some(Abort {
                step,
                reason: e.to_string(),
            });
            break;
        }
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let mut e = evaluate(net, task)?;
            e.step = step;
            let hit = matches!((cfg.stop_at_accuracy, e.accuracy), (Some(t), Some(a)) if a >= t);
            hist.evals.push(e);
            if hit && step < cfg.steps {
                hist.stopped_early = true;
                break;
            }
        }
    }
    Ok(hist)
}

/// Central-difference check of every trainable parameter of `net` under
/// the task loss on `batch`. Names align with `GradCheckReport::per_param`.
pub fn grad_check_net(
    net: &Net,
    task: &Task,
    batch: &Batch,
    step: f64,
    tolerance: f64,
) -> Result<(Vec<String>, GradCheckReport)> {
    let mut tape = Tape::new();
    let mut b = Binder::new(&mut tape);
    net.bind(&mut b);
    let params: Vec<_> = b.finish().into_iter().filter(|p| p.trainable).collect();
    let names = params.iter().map(|p| p.name.clone()).collect();
    let values: Vec<Tensor> = params.iter().map(|p| tape.value(p.var).clone()).collect();
    let report = grad_check(
        |tape, vars| {
            let bound = net.bind(&mut Binder::replay(tape, vars));
            let out = net.forward(tape, &bound, &batch.input, None)?;
            task.loss(tape, out, batch)
        },
        &values,
        step,
        tolerance,
    )?;
    Ok((names, report))
}

/// Median of a slice; `NaN` when empty.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
