use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LaxError, Result};
use crate::nets::{HeadKind, Input, InputKind, Net, NetSpec, Readout};
use crate::numerics::ops::{cross_entropy, matmul};
use crate::numerics::{Init, Tape, Tensor, Var};

/// A train or eval example as a comparable key.
pub type Key = Vec<usize>;

fn default_eval_fraction() -> f64 {
    0.3
}

fn default_eval_size() -> usize {
    512
}

/// Synthetic task description. Train and eval examples never overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskSpec {
    /// `[s, s]` for a random half `s`; the second half is predicted.
    Copy {
        vocab: usize,
        half_len: usize,
        #[serde(default = "default_eval_size")]
        eval_size: usize,
        seed: u64,
    },
    /// `[a, b, =]` labelled `(a + b) mod m`.
    ModAdd {
        modulus: usize,
        #[serde(default = "default_eval_fraction")]
        eval_fraction: f64,
        seed: u64,
    },
    /// `y = W x` with `W` of rank `rank`, squared-error loss.
    Teacher {
        width: usize,
        rank: usize,
        #[serde(default = "default_eval_size")]
        eval_size: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// One class per sequence.
    Classes(Vec<usize>),
    /// Next-token targets for positions `start..start + len` of every row.
    Tokens {
        targets: Vec<usize>,
        seq: usize,
        start: usize,
        len: usize,
    },
    Values(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: Input,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq)]
enum Data {
    Copy {
        vocab: usize,
        half: usize,
        eval: Vec<Vec<usize>>,
    },
    ModAdd {
        m: usize,
        train: Vec<(usize, usize)>,
        eval: Vec<(usize, usize)>,
    },
    Teacher {
        w: Tensor,
        eval_x: Tensor,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    data: Data,
}

/// Deterministic split key for generated sequences.
fn held_out(seq: &[usize]) -> bool {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &s in seq {
        h ^= s as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h % 10 < 3
}

fn cfg<T>(m: impl Into<String>) -> Result<T> {
    Err(LaxError::Config(m.into()))
}

pub fn make_task(spec: &TaskSpec) -> Result<Task> {
    let data = match *spec {
        TaskSpec::Copy {
            vocab,
            half_len,
            eval_size,
            seed,
        } => {
            if vocab < 2 || half_len == 0 || eval_size == 0 {
                return cfg("copy needs vocab >= 2, half_len >= 1 and eval_size >= 1");
            }
            if (vocab as f64).powi(half_len as i32) < 4.0 * eval_size as f64 {
                return cfg("copy space too small for a disjoint eval set");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut eval = Vec::with_capacity(eval_size);
            while eval.len() < eval_size {
                let s: Vec<usize> = (0..half_len).map(|_| rng.random_range(0..vocab)).collect();
                if held_out(&s) {
                    eval.push(s);
                }
            }
            Data::Copy {
                vocab,
                half: half_len,
                eval,
            }
        }
        TaskSpec::ModAdd {
            modulus,
            eval_fraction,
            seed,
        } => {
            if modulus < 2 || !(eval_fraction > 0.0 && eval_fraction < 1.0) {
                return cfg("modadd needs modulus >= 2 and eval_fraction in (0, 1)");
            }
            let mut pairs: Vec<(usize, usize)> = (0..modulus).flat_map(|a| (0..modulus).map(move |b| (a, b))).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..pairs.len()).rev() {
                pairs.swap(i, rng.random_range(0..=i));
            }
            let n_eval = ((pairs.len() as f64) * eval_fraction).round() as usize;
            if n_eval == 0 || n_eval == pairs.len() {
                return cfg("eval split leaves an empty side");
            }
            let train = pairs.split_off(n_eval);
            Data::ModAdd {
                m: modulus,
                train,
                eval: pairs,
            }
        }
        TaskSpec::Teacher {
            width,
            rank,
            eval_size,
            seed,
        } => {
            if width == 0 || rank > width || eval_size == 0 {
                return cfg("teacher needs width >= 1, rank <= width and eval_size >= 1");
            }
            let init = Init::new(seed);
            let w = if rank == 0 {
                Tensor::zeros(&[width, width])
            } else {
                let u = init.normal("teacher.u", &[width, rank], 1.0 / rank as f64);
                let v = init.normal("teacher.v", &[rank, width], 1.0);
                matmul(&u, &v)?
            };
            Data::Teacher {
                w,
                eval_x: init.normal("teacher.eval", &[eval_size, width], 1.0),
            }
        }
    };
    Ok(Task {
        spec: spec.clone(),
        data,
    })
}

fn tokens_batch(seqs: &[Vec<usize>], half: usize) -> Batch {
    let mut ids = Vec::with_capacity(seqs.len() * 2 * half);
    let mut targets = Vec::with_capacity(seqs.len() * half);
    for s in seqs {
        ids.extend_from_slice(s);
        ids.extend_from_slice(s);
        targets.extend_from_slice(s);
    }
    // position half - 1 + j predicts token half + j = s[j]
    Batch {
        input: Input::Tokens { ids, batch: seqs.len() },
        target: Target::Tokens {
            targets,
            seq: 2 * half,
            start: half - 1,
            len: half,
        },
    }
}

fn modadd_batch(pairs: &[(usize, usize)], m: usize) -> Batch {
    Batch {
        input: Input::Tokens {
            ids: pairs.iter().flat_map(|&(a, b)| [a, b, m]).collect(),
            batch: pairs.len(),
        },
        target: Target::Classes(pairs.iter().map(|&(a, b)| (a + b) % m).collect()),
    }
}

fn teacher_batch(x: Tensor, w: &Tensor) -> Batch {
    let y = matmul(&x, &w.t().expect("matrix")).expect("shapes fixed at construction");
    Batch {
        input: Input::Features(x),
        target: Target::Values(y),
    }
}

/// Rows `start..start + len` of each `[seq, v]` block of `logits`.
fn token_rows(logits: &Tensor, seq: usize, start: usize, len: usize) -> Result<Tensor> {
    let v = logits.last_dim();
    let rows = logits.rows();
    if !rows.is_multiple_of(seq) {
        return Err(LaxError::Dimension(format!("{rows} logit rows for sequences of {seq}")));
    }
    let mut out = Vec::with_capacity(rows / seq * len * v);
    for b in 0..rows / seq {
        let from = (b * seq + start) * v;
        out.extend_from_slice(&logits.data()[from..from + len * v]);
    }
    Tensor::new(&[rows / seq * len, v], out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

impl Task {
    pub fn has_accuracy(&self) -> bool {
        !matches!(self.data, Data::Teacher { .. })
    }

    pub fn train_len(&self) -> Option<usize> {
        match &self.data {
            Data::ModAdd { train, .. } => Some(train.len()),
            _ => None,
        }
    }

    pub fn eval_len(&self) -> usize {
        match &self.data {
            Data::Copy { eval, .. } => eval.len(),
            Data::ModAdd { eval, .. } => eval.len(),
            Data::Teacher { eval_x, .. } => eval_x.rows(),
        }
    }

    /// Train and eval examples as comparable keys.
    pub fn split_keys(&self) -> Option<(Vec<Key>, Vec<Key>)> {
        match &self.data {
            Data::ModAdd { train, eval, .. } => Some((
                train.iter().map(|&(a, b)| vec![a, b]).collect(),
                eval.iter().map(|&(a, b)| vec![a, b]).collect(),
            )),
            _ => None,
        }
    }

    pub fn check_net(&self, net: &Net) -> Result<()> {
        let ok = match (&self.data, net.spec()) {
            (Data::Teacher { w, .. }, NetSpec::Chain(c)) => c.width == w.rows(),
            (_, NetSpec::Transformer(m)) => self.net_shape() == Some((m.input, m.head)),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            cfg(format!("model does not fit the {} task", self.name()))
        }
    }

    pub fn name(&self) -> &'static str {
        match self.spec {
            TaskSpec::Copy { .. } => "copy",
            TaskSpec::ModAdd { .. } => "modadd",
            TaskSpec::Teacher { .. } => "teacher",
        }
    }

    /// Input and head a transformer needs for this task.
    pub fn net_shape(&self) -> Option<(InputKind, HeadKind)> {
        match &self.data {
            Data::Copy { vocab, half, .. } => Some((
                InputKind::Tokens {
                    vocab: *vocab,
                    max_len: 2 * half,
                },
                HeadKind::Lm { vocab: *vocab },
            )),
            Data::ModAdd { m, .. } => Some((
                InputKind::Tokens {
                    vocab: m + 1,
                    max_len: 3,
                },
                HeadKind::Classify {
                    classes: *m,
                    readout: Readout::Last,
                },
            )),
            Data::Teacher { .. } => None,
        }
    }

    /// Training batch drawn from the train side of the split. Modular
    /// addition returns the whole train set once `batch` covers it.
    pub fn sample(&self, rng: &mut ChaCha8Rng, batch: usize) -> Batch {
        match &self.data {
            Data::Copy { vocab, half, .. } => {
                let mut seqs = Vec::with_capacity(batch);
                while seqs.len() < batch {
                    let s: Vec<usize> = (0..*half).map(|_| rng.random_range(0..*vocab)).collect();
                    if !held_out(&s) {
                        seqs.push(s);
                    }
                }
                tokens_batch(&seqs, *half)
            }
            Data::ModAdd { m, train, .. } if batch >= train.len() => modadd_batch(train, *m),
            Data::ModAdd { m, train, .. } => {
                let pairs: Vec<(usize, usize)> = (0..batch).map(|_| train[rng.random_range(0..train.len())]).collect();
                modadd_batch(&pairs, *m)
            }
            Data::Teacher { w, .. } => {
                let d = w.rows();
                let x = Tensor::from_fn(&[batch, d], |_| StandardNormal.sample(rng));
                teacher_batch(x, w)
            }
        }
    }

    /// The eval set in order, in chunks of at most `chunk` examples.
    pub fn eval_batches(&self, chunk: usize) -> Vec<Batch> {
        let chunk = chunk.max(1);
        match &self.data {
            Data::Copy { half, eval, .. } => eval.chunks(chunk).map(|c| tokens_batch(c, *half)).collect(),
            Data::ModAdd { m, eval, .. } => eval.chunks(chunk).map(|c| modadd_batch(c, *m)).collect(),
            Data::Teacher { w, eval_x } => {
                let d = w.rows();
                eval_x
                    .data()
                    .chunks(chunk * d)
                    .map(|c| teacher_batch(Tensor::new(&[c.len() / d, d], c.to_vec()).expect("rows"), w))
                    .collect()
            }
        }
    }

    /// Scalar training loss on the tape.
    pub fn loss(&self, tape: &mut Tape, out: Var, batch: &Batch) -> Result<Var> {
        match &batch.target {
            Target::Classes(c) => tape.cross_entropy(out, c),
            Target::Tokens {
                targets,
                seq,
                start,
                len,
            } => {
                let v = tape.shape(out)[tape.shape(out).len() - 1];
                let b = targets.len() / len;
                let x = tape.reshape(out, &[b, *seq, v])?;
                let x = tape.narrow(x, 1, *start, *len)?;
                let x = tape.reshape(x, &[b * len, v])?;
                tape.cross_entropy(x, targets)
            }
            Target::Values(y) => {
                let y = tape.constant(y.clone());
                tape.mse(out, y)
            }
        }
    }

    /// Summed loss, correct predictions and example count for one batch of
    /// outputs. Token tasks count every predicted position.
    pub fn score(&self, out: &Tensor, batch: &Batch) -> Result<(f64, usize, usize)> {
        let (logits, targets) = match &batch.target {
            Target::Classes(c) => (out.clone(), c.as_slice()),
            Target::Tokens {
                targets,
                seq,
                start,
                len,
            } => (token_rows(out, *seq, *start, *len)?, targets.as_slice()),
            Target::Values(y) => {
                let n = y.rows();
                let sq = out.zip_map(y, |a, b| (a - b) * (a - b))?.sum();
                return Ok((sq / y.last_dim() as f64, 0, n));
            }
        };
        let n = targets.len();
        let loss = cross_entropy(&logits, targets)?.item() * n as f64;
        let v = logits.last_dim();
        let correct = logits
            .data()
            .chunks(v)
            .zip(targets)
            .filter(|(row, &t)| argmax(row) == t)
            .count();
        Ok((loss, correct, n))
    }
}
