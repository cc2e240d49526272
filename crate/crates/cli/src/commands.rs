use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use lax_core::accounting::model_overhead;
use lax_core::nets::{
    build_net, save_checkpoint, wrap_lora, ChainSpec, LayerKind, LayerSpec, ModelSpec, Net, NetSpec, TtShape,
};
use lax_core::training::{grad_check_net, make_task, train, write_history_csv, Abort, EvalRecord, TaskSpec};
use lax_core::LaxError;

use crate::config::{ConfigError, RunConfig};
use crate::suites::all_suites;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_ACCEPTANCE: i32 = 4;

/// Why a command failed, mapped onto the exit-code contract.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numeric(String),
    Acceptance(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Numeric(_) => EXIT_NUMERIC,
            Failure::Acceptance(_) => EXIT_ACCEPTANCE,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
            Failure::Acceptance(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<LaxError> for Failure {
    fn from(e: LaxError) -> Self {
        match e {
            LaxError::Numeric(_) => Failure::Numeric(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

pub type CmdResult = std::result::Result<(), Failure>;

/// The configured network, adapters included.
pub fn build(cfg: &RunConfig) -> lax_core::Result<Net> {
    let net = build_net(&cfg.net_spec())?;
    match (net, &cfg.lora) {
        (Net::Transformer(m), Some(l)) => Ok(Net::Transformer(wrap_lora(&m, l)?)),
        (net, _) => Ok(net),
    }
}

fn output_dir(cfg: &RunConfig) -> std::io::Result<PathBuf> {
    let dir = cfg.output_path();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[derive(Serialize)]
struct Summary<'a> {
    name: Option<&'a str>,
    steps: usize,
    final_train_loss: Option<f64>,
    final_eval: Option<&'a EvalRecord>,
    best_accuracy: Option<f64>,
    stopped_early: bool,
    abort: Option<&'a Abort>,
    trainable_params: usize,
    total_params: usize,
    lax_params: usize,
}

pub fn cmd_train(path: &Path) -> CmdResult {
    let cfg = RunConfig::load(path)?;
    let (task_spec, train_cfg) = cfg.experiment()?;
    let task = make_task(task_spec)?;
    let mut net = build(&cfg)?;
    task.check_net(&net)?;
    let dir = output_dir(&cfg)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    let hist = train(&mut net, &task, train_cfg)?;
    write_history_csv(&dir.join("history.csv"), &hist)?;
    let summary = Summary {
        name: cfg.name.as_deref(),
        steps: hist.losses.len(),
        final_train_loss: hist.losses.last().copied(),
        final_eval: hist.final_eval(),
        best_accuracy: hist.best_accuracy(),
        stopped_early: hist.stopped_early,
        abort: hist.abort.as_ref(),
        trainable_params: net.param_count(),
        total_params: net.total_param_count(),
        lax_params: net.lax_param_count(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Failure::Config(e.to_string()))?;
    fs::write(dir.join("summary.json"), json)?;
    if let Some(a) = &hist.abort {
        return Err(Failure::Numeric(format!(
            "run aborted at step {}: {}",
            a.step, a.reason
        )));
    }
    save_checkpoint(&net, &dir.join("final.ckpt"))?;
    println!("steps       {}", hist.losses.len());
    println!("final loss  {:.6}", hist.losses.last().copied().unwrap_or(f64::NAN));
    if let Some(e) = hist.final_eval() {
        match e.accuracy {
            Some(a) => println!("eval        loss {:.6}  accuracy {:.4}", e.loss, a),
            None => println!("eval        loss {:.6}", e.loss),
        }
    }
    println!("output      {}", dir.display());
    Ok(())
}

/// Most parameters a gradient check runs on.
pub const GRADCHECK_MAX_PARAMS: usize = 10_000;
const GRADCHECK_WIDTH: usize = 8;

/// `n` split into `k` factors, largest first, padding with 1.
fn factor(n: usize, k: usize) -> Vec<usize> {
    let mut primes = Vec::new();
    let (mut m, mut p) = (n, 2);
    while m > 1 {
        while m % p == 0 {
            primes.push(p);
            m /= p;
        }
        p += 1;
    }
    let mut out = vec![1; k];
    for q in primes.into_iter().rev() {
        let i = (0..k).min_by_key(|&i| out[i]).expect("k >= 1");
        out[i] *= q;
    }
    out.sort_unstable_by(|a, b| b.cmp(a));
    out
}

/// The same layer family at a `d_in -> d_out` position of the small model.
fn shrink_layer(l: &LayerSpec, d_in: usize, d_out: usize) -> LayerSpec {
    let mut l = l.clone();
    l.rank = l.rank.map(|r| r.min(4));
    if l.kind == LayerKind::Tt {
        if let Some(tt) = &l.tt {
            let k = tt.out_dims.len();
            let out_dims = factor(d_out, k);
            let in_dims = if d_in == d_out {
                out_dims.iter().rev().copied().collect()
            } else {
                factor(d_in, k)
            };
            let ranks = tt.ranks.iter().map(|&r| r.min(3)).collect();
            l.tt = Some(TtShape {
                out_dims,
                in_dims,
                ranks,
            });
        }
    }
    l
}

fn shrink_model(m: &ModelSpec) -> ModelSpec {
    let mut m = m.clone();
    let w = GRADCHECK_WIDTH;
    m.depth = m.depth.min(2);
    let b = &mut m.block;
    b.width = w;
    b.heads = (1..=b.heads.min(w)).rev().find(|h| w.is_multiple_of(*h)).unwrap_or(1);
    b.mlp_ratio = b.mlp_ratio.min(2);
    let qkv_out = match b.qkv_layout {
        lax_core::nets::QkvLayout::Fused => 3 * w,
        lax_core::nets::QkvLayout::Separate => w,
    };
    let hidden = b.hidden();
    b.qkv = shrink_layer(&b.qkv, w, qkv_out);
    b.proj = shrink_layer(&b.proj, w, w);
    b.mlp_up = shrink_layer(&b.mlp_up, w, hidden);
    b.mlp_down = shrink_layer(&b.mlp_down, hidden, w);
    m
}

fn shrink_task(t: &TaskSpec) -> TaskSpec {
    match t.clone() {
        TaskSpec::Copy {
            vocab, half_len, seed, ..
        } => TaskSpec::Copy {
            vocab: vocab.min(5),
            half_len: half_len.min(3),
            eval_size: 8,
            seed,
        },
        TaskSpec::ModAdd {
            modulus,
            eval_fraction,
            seed,
        } => TaskSpec::ModAdd {
            modulus: modulus.min(7),
            eval_fraction,
            seed,
        },
        TaskSpec::Teacher { rank, seed, .. } => TaskSpec::Teacher {
            width: GRADCHECK_WIDTH,
            rank: rank.min(2),
            eval_size: 8,
            seed,
        },
    }
}

/// The configured experiment at reduced width, depth and ranks.
pub fn reduce_for_gradcheck(cfg: &RunConfig) -> RunConfig {
    let mut small = cfg.clone();
    small.task = cfg.task.as_ref().map(shrink_task);
    let shape = small
        .task
        .as_ref()
        .and_then(|t| make_task(t).ok())
        .and_then(|t| t.net_shape());
    small.model = cfg.model.as_ref().map(|m| {
        let mut m = shrink_model(m);
        if let Some((input, head)) = shape.clone() {
            m.input = input;
            m.head = head;
        }
        m
    });
    small.chain = cfg.chain.as_ref().map(|c| ChainSpec {
        width: GRADCHECK_WIDTH,
        depth: c.depth.min(3),
        layer: shrink_layer(&c.layer, GRADCHECK_WIDTH, GRADCHECK_WIDTH),
        ..c.clone()
    });
    if let Some(l) = &mut small.lora {
        l.rank = l.rank.min(2);
    }
    small
}

/// Finite-difference step and pass threshold of `gradcheck`.
pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn cmd_gradcheck(path: &Path) -> CmdResult {
    let cfg = RunConfig::load(path)?;
    cfg.experiment()?;
    let cfg = reduce_for_gradcheck(&cfg);
    let (task_spec, train_cfg) = cfg.experiment()?;
    let task = make_task(task_spec)?;
    let net = build(&cfg)?;
    task.check_net(&net)?;
    let n = net.param_count();
    if n > GRADCHECK_MAX_PARAMS {
        return Err(Failure::Config(format!(
            "reduced model still has {n} parameters (limit {GRADCHECK_MAX_PARAMS})"
        )));
    }
    let batch = task.sample(&mut ChaCha8Rng::seed_from_u64(train_cfg.seed), 3);
    let (names, report) = grad_check_net(&net, &task, &batch, GRADCHECK_STEP, GRADCHECK_TOLERANCE)?;
    println!("{n} trainable parameters in {} tensors", names.len());
    for (name, err) in names.iter().zip(&report.per_param) {
        let mark = if *err < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        println!("{name:<40} {err:>10.3e}  {mark}");
    }
    println!("max relative error {:.3e}", report.max_rel_err);
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Acceptance(format!(
            "max relative error {:.3e} >= {GRADCHECK_TOLERANCE:e}",
            report.max_rel_err
        )))
    }
}

pub fn cmd_equivalence() -> CmdResult {
    let suites = all_suites()?;
    let mut failed = Vec::new();
    for s in &suites {
        let mark = if s.pass() { "ok" } else { "FAIL" };
        println!(
            "{:<18} cases {:>4}  max error {:>10.3e}  tolerance {:>8.1e}  {mark}",
            s.name, s.cases, s.max_err, s.tolerance
        );
        if !s.pass() {
            failed.push(s.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Acceptance(format!("suites failed: {}", failed.join(", "))))
    }
}

pub fn cmd_report(path: &Path, seq_len: Option<usize>) -> CmdResult {
    let cfg = RunConfig::load(path)?;
    let spec = cfg.net_spec();
    let n = seq_len.unwrap_or(match &spec {
        NetSpec::Transformer(m) => m.seq_len(),
        NetSpec::Chain(_) => 1,
    });
    if n == 0 {
        return Err(Failure::Config("--seq-len must be >= 1".into()));
    }
    let report = model_overhead(&spec, cfg.lora.as_ref(), n)?;
    let table = report.table();
    print!("{table}");
    let dir = output_dir(&cfg)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Config(e.to_string()))?;
    fs::write(dir.join("report.json"), json)?;
    fs::write(dir.join("report.txt"), table)?;
    Ok(())
}
