use serde::{Deserialize, Serialize};

use super::{make_task, median, train, History, TaskSpec, TrainConfig};
use crate::error::{LaxError, Result};
use crate::nets::{build_net, LaxSpec, Net, NetSpec};

/// One arm of a paired run.
#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub net: Net,
    /// Overrides the shared learning rate.
    pub lr: Option<f64>,
}

impl Variant {
    pub fn new(name: impl Into<String>, net: Net) -> Self {
        Self {
            name: name.into(),
            net,
            lr: None,
        }
    }

    /// `base` rebuilt with other wiring. Base parameters are keyed by name,
    /// so every variant starts from the same base weights.
    pub fn with_lax(name: impl Into<String>, base: &NetSpec, lax: LaxSpec) -> Result<Self> {
        let mut spec = base.clone();
        match &mut spec {
            NetSpec::Transformer(m) => m.lax = lax,
            NetSpec::Chain(c) => c.lax = lax,
        }
        Ok(Self::new(name, build_net(&spec)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub name: String,
    pub trainable_params: usize,
    pub total_params: usize,
    pub lax_params: usize,
    /// Share of all parameters added by gates and pathway norms.
    pub overhead: f64,
    pub steps: usize,
    /// Median over the last tenth of the run.
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub abort: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub histories: Vec<History>,
}

impl CompareReport {
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = format!(
            "{:<20} {:>10} {:>10} {:>8} {:>9} {:>6} {:>10} {:>10} {:>8}\n",
            "variant", "trainable", "total", "lax", "overhead", "steps", "train", "eval", "acc"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<20} {:>10} {:>10} {:>8} {:>8.4}% {:>6} {:>10.4} {:>10} {:>8}{}\n",
                r.name,
                r.trainable_params,
                r.total_params,
                r.lax_params,
                100.0 * r.overhead,
                r.steps,
                r.train_loss,
                opt(r.eval_loss),
                opt(r.eval_accuracy),
                r.abort.as_ref().map_or(String::new(), |a| format!("  aborted: {a}")),
            ));
        }
        out
    }
}

/// Layer skeleton shared by all variants: ids, kinds and shapes.
fn skeleton(net: &Net) -> Vec<(String, &'static str, usize, usize, usize)> {
    net.slots()
        .iter()
        .map(|s| {
            (
                s.id.clone(),
                s.layer.kind(),
                s.layer.d_in(),
                s.layer.d_out(),
                s.layer.total_param_count(),
            )
        })
        .collect()
}

/// Trains every variant on the same task and batches and tabulates the
/// outcome. Variants must share their base layers.
pub fn paired_compare(task: &TaskSpec, cfg: &TrainConfig, variants: Vec<Variant>) -> Result<CompareReport> {
    let task = make_task(task)?;
    if let Some(first) = variants.first() {
        let want = skeleton(&first.net);
        for v in &variants[1..] {
            if skeleton(&v.net) != want || v.net.spec_without_lax() != first.net.spec_without_lax() {
                return Err(LaxError::Config(format!(
                    "variant {} does not share the base layers of {}",
                    v.name, first.name
                )));
            }
        }
    }
    let mut rows = Vec::with_capacity(variants.len());
    let mut histories = Vec::with_capacity(variants.len());
    for mut v in variants {
        let mut c = cfg.clone();
        if let Some(lr) = v.lr {
            c.lr = lr;
        }
        let hist = train(&mut v.net, &task, &c)?;
        let n = hist.losses.len();
        let tail = &hist.losses[n - (n / 10).max(1).min(n)..];
        let total = v.net.total_param_count();
        let lax = v.net.lax_param_count();
        let last = hist.final_eval();
        rows.push(CompareRow {
            name: v.name,
            trainable_params: v.net.param_count(),
            total_params: total,
            lax_params: lax,
            overhead: lax as f64 / total.max(1) as f64,
            steps: n,
            train_loss: median(tail),
            eval_loss: last.map(|e| e.loss),
            eval_accuracy: last.and_then(|e| e.accuracy),
            abort: hist.abort.as_ref().map(|a| format!("step {}: {}", a.step, a.reason)),
        });
        histories.push(hist);
    }
    Ok(CompareReport { rows, histories })
}
