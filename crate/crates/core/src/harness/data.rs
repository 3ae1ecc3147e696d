//! Desk-scale datasets.
//!
//! * `spiral2`: two interleaved 2-D spirals, 500 points each.
//! * `charlm`: next-character prediction over a bundled Latin text, byte ids
//!   (vocabulary 128), windows of 64 characters.
//! * `copyseq`: `[a, SEP, a]` sequences over a 16-symbol vocabulary, trained
//!   as next-token prediction.
//!
//! Every dataset is a pure function of its seed and splits 90/10 into
//! train/eval.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{InputSpec, Inputs, NetworkSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CORPUS: &str = include_str!("../../data/de_finibus_liber_primus.txt");

pub const SPIRAL_POINTS: usize = 1000;
pub const CHARLM_SEQ_LEN: usize = 64;
pub const CHARLM_VOCAB: usize = 128;
pub const COPY_VOCAB: usize = 16;
/// Symbols copied per `copyseq` sample; the sequence is `2·COPY_LEN + 1` long.
pub const COPY_LEN: usize = 8;
pub const COPY_SAMPLES: usize = 2000;
pub const COPY_SEP: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Spiral2,
    Charlm,
    Copyseq,
}

impl TaskId {
    pub fn name(self) -> &'static str {
        match self {
            TaskId::Spiral2 => "spiral2",
            TaskId::Charlm => "charlm",
            TaskId::Copyseq => "copyseq",
        }
    }

    /// Name of the evaluation metric.
    pub fn metric(self) -> &'static str {
        match self {
            TaskId::Spiral2 => "accuracy",
            TaskId::Charlm => "perplexity",
            TaskId::Copyseq => "copy_accuracy",
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spiral2" => Ok(TaskId::Spiral2),
            "charlm" => Ok(TaskId::Charlm),
            "copyseq" => Ok(TaskId::Copyseq),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected spiral2, charlm or copyseq)"
            ))),
        }
    }
}

/// Samples of one split. Inputs and targets are stored sample-major.
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    /// `features` holds `len·dim` values; one target per sample.
    Features {
        features: Vec<f64>,
        dim: usize,
        targets: Vec<usize>,
    },
    /// `ids` and `targets` hold `len·seq_len` entries.
    Sequences {
        ids: Vec<usize>,
        targets: Vec<usize>,
        seq_len: usize,
    },
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::Features { targets, .. } => targets.len(),
            Samples::Sequences { ids, seq_len, .. } => ids.len() / seq_len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Batch<T> {
        match self {
            Samples::Features { features, dim, targets } => {
                let mut x = Vec::with_capacity(idx.len() * dim);
                for &i in idx {
                    x.extend(features[i * dim..(i + 1) * dim].iter().map(|&v| T::of(v)));
                }
                Batch {
                    inputs: BatchInputs::Features(Tensor::new(vec![idx.len(), *dim], x).expect("batch shape")),
                    targets: idx.iter().map(|&i| targets[i]).collect(),
                }
            }
            Samples::Sequences { ids, targets, seq_len } => {
                let mut x = Vec::with_capacity(idx.len() * seq_len);
                let mut y = Vec::with_capacity(idx.len() * seq_len);
                for &i in idx {
                    x.extend_from_slice(&ids[i * seq_len..(i + 1) * seq_len]);
                    y.extend_from_slice(&targets[i * seq_len..(i + 1) * seq_len]);
                }
                Batch {
                    inputs: BatchInputs::Tokens(x),
                    targets: y,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchInputs<T> {
    Features(Tensor<T>),
    Tokens(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: BatchInputs<T>,
    /// One class id per output row of the network.
    pub targets: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn as_inputs(&self) -> Inputs<'_, T> {
        match &self.inputs {
            BatchInputs::Features(t) => Inputs::Features(t),
            BatchInputs::Tokens(ids) => Inputs::Tokens(ids),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskId,
    pub seed: u64,
    pub train: Samples,
    pub eval: Samples,
}

impl Dataset {
    /// Checks that `spec` can consume this dataset.
    pub fn check_spec(&self, spec: &NetworkSpec) -> Result<()> {
        let fail = |what: String| Err(Error::Config(format!("model does not fit task {}: {what}", self.task)));
        match (&self.train, spec.input) {
            (Samples::Features { dim, .. }, InputSpec::Features { dim: d }) => {
                if *dim != d || spec.tokens != 1 {
                    return fail(format!("expects 1 token of {dim} features, model has {} of {d}", spec.tokens));
                }
                if spec.classes < 2 {
                    return fail(format!("needs 2 classes, model has {}", spec.classes));
                }
            }
            (Samples::Sequences { seq_len, .. }, InputSpec::Tokens { vocab }) => {
                let need = self.vocab();
                if *seq_len != spec.tokens {
                    return fail(format!("sequence length {seq_len}, model tokens {}", spec.tokens));
                }
                if vocab < need || spec.classes < need {
                    return fail(format!("vocabulary {need}, model vocab {vocab} / classes {}", spec.classes));
                }
                if spec.cls_token {
                    return fail("sequence tasks do not use a class token".into());
                }
            }
            _ => return fail("input kind mismatch".into()),
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        match self.task {
            TaskId::Spiral2 => 2,
            TaskId::Charlm => CHARLM_VOCAB,
            TaskId::Copyseq => COPY_VOCAB,
        }
    }
}

pub fn make_task(task: TaskId, seed: u64) -> Result<Dataset> {
    match task {
        TaskId::Spiral2 => Ok(spiral2(seed)),
        TaskId::Charlm => charlm(seed),
        TaskId::Copyseq => Ok(copyseq(seed)),
    }
}

fn split_order(n: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let cut = n * 9 / 10;
    let eval = order.split_off(cut);
    (order, eval)
}

/// Two spirals, one per class, with small Gaussian jitter.
pub fn spiral2(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_class = SPIRAL_POINTS / 2;
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let mut points = Vec::with_capacity(SPIRAL_POINTS * 2);
    let mut labels = Vec::with_capacity(SPIRAL_POINTS);
    for class in 0..2 {
        for i in 0..per_class {
            let t = i as f64 / per_class as f64;
            let r = 0.1 + 0.9 * t;
            let angle = 3.0 * std::f64::consts::PI * t + class as f64 * std::f64::consts::PI;
            points.push(r * angle.cos() + noise.sample(&mut rng));
            points.push(r * angle.sin() + noise.sample(&mut rng));
            labels.push(class);
        }
    }
    let (train, eval) = split_order(SPIRAL_POINTS, &mut rng);
    let pick = |idx: &[usize]| Samples::Features {
        features: idx.iter().flat_map(|&i| [points[2 * i], points[2 * i + 1]]).collect(),
        dim: 2,
        targets: idx.iter().map(|&i| labels[i]).collect(),
    };
    Dataset {
        task: TaskId::Spiral2,
        seed,
        train: pick(&train),
        eval: pick(&eval),
    }
}

pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.bytes()
        .map(|b| {
            if (b as usize) < CHARLM_VOCAB {
                Ok(b as usize)
            } else {
                Err(Error::Config(format!("byte {b:#x} is outside the {CHARLM_VOCAB}-symbol vocabulary")))
            }
        })
        .collect()
}

pub fn decode(ids: &[usize]) -> Result<String> {
    let bytes = ids
        .iter()
        .map(|&i| u8::try_from(i).ok().filter(|b| b.is_ascii()))
        .collect::<Option<Vec<u8>>>()
        .ok_or_else(|| Error::Config("id outside the character vocabulary".into()))?;
    Ok(String::from_utf8(bytes).expect("ASCII is UTF-8"))
}

fn windows(stream: &[usize], seq_len: usize, offset: usize) -> Samples {
    let mut ids = Vec::new();
    let mut targets = Vec::new();
    let mut start = offset;
    while start + seq_len < stream.len() {
        ids.extend_from_slice(&stream[start..start + seq_len]);
        targets.extend_from_slice(&stream[start + 1..start + seq_len + 1]);
        start += seq_len;
    }
    Samples::Sequences { ids, targets, seq_len }
}

/// The first 90% of the text trains, the rest evaluates. The seed shifts the
/// window grid of the training part.
pub fn charlm(seed: u64) -> Result<Dataset> {
    let stream = encode(CORPUS)?;
    let cut = stream.len() * 9 / 10;
    let offset = (seed % CHARLM_SEQ_LEN as u64) as usize;
    Ok(Dataset {
        task: TaskId::Charlm,
        seed,
        train: windows(&stream[..cut], CHARLM_SEQ_LEN, offset),
        eval: windows(&stream[cut..], CHARLM_SEQ_LEN, 0),
    })
}

/// Perplexity of add-one-smoothed unigram frequencies of the training
/// targets, measured on the evaluation targets.
pub fn unigram_perplexity(data: &Dataset) -> Result<f64> {
    let (Samples::Sequences { targets: train, .. }, Samples::Sequences { targets: eval, .. }) = (&data.train, &data.eval)
    else {
        return Err(Error::Config("unigram baseline needs a sequence task".into()));
    };
    let v = data.vocab();
    let mut counts = vec![1.0f64; v];
    for &t in train {
        counts[t] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let nll: f64 = eval.iter().map(|&t| -(counts[t] / total).ln()).sum::<f64>() / eval.len() as f64;
    Ok(nll.exp())
}

/// One `copyseq` sequence `[a, SEP, a]` for symbols `a` in `1..16`.
pub fn copy_sequence<R: Rng + ?Sized>(rng: &mut R) -> Vec<usize> {
    let a: Vec<usize> = (0..COPY_LEN).map(|_| rng.random_range(1..COPY_VOCAB)).collect();
    let mut s = a.clone();
    s.push(COPY_SEP);
    s.extend(a);
    s
}

/// Input is the sequence without its last symbol, target the sequence
/// without its first.
pub fn copyseq(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<Vec<usize>> = (0..COPY_SAMPLES).map(|_| copy_sequence(&mut rng)).collect();
    let (train, eval) = split_order(COPY_SAMPLES, &mut rng);
    let pick = |idx: &[usize]| Samples::Sequences {
        ids: idx.iter().flat_map(|&i| seqs[i][..2 * COPY_LEN].to_vec()).collect(),
        targets: idx.iter().flat_map(|&i| seqs[i][1..].to_vec()).collect(),
        seq_len: 2 * COPY_LEN,
    };
    Dataset {
        task: TaskId::Copyseq,
        seed,
        train: pick(&train),
        eval: pick(&eval),
    }
}

/// Positions within a `copyseq` target row that are determined by the input
/// (the copied half).
pub fn copy_positions() -> std::ops::Range<usize> {
    COPY_LEN..2 * COPY_LEN
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spiral_is_balanced_and_split() {
        let d = spiral2(3);
        let (Samples::Features { targets: tr, .. }, Samples::Features { targets: ev, .. }) = (&d.train, &d.eval) else {
            unreachable!()
        };
        assert_eq!(tr.len(), 900);
        assert_eq!(ev.len(), 100);
        let ones = tr.iter().chain(ev).filter(|&&t| t == 1).count();
        assert_eq!(ones, 500);
        assert_eq!(spiral2(3), d);
        assert_ne!(spiral2(4), d);
    }

    #[test]
    fn charlm_round_trip() {
        let ids = encode(CORPUS).unwrap();
        assert_eq!(decode(&ids).unwrap(), CORPUS);
        let d = charlm(0).unwrap();
        let Samples::Sequences { ids, targets, seq_len } = &d.train else { unreachable!() };
        assert_eq!(*seq_len, 64);
        assert_eq!(ids[1..64], targets[..63]);
        assert!(d.eval.len() * 8 < d.train.len() && d.eval.len() * 10 > d.train.len());
        assert!(encode("é").is_err());
    }

    #[test]
    fn unigram_beats_uniform() {
        let p = unigram_perplexity(&charlm(0).unwrap()).unwrap();
        assert!(p > 5.0 && p < CHARLM_VOCAB as f64, "{p}");
    }

    #[test]
    fn copyseq_targets_follow_definition() {
        let d = copyseq(9);
        let Samples::Sequences { ids, targets, seq_len } = &d.eval else { unreachable!() };
        assert_eq!(*seq_len, 16);
        assert_eq!(d.eval.len(), 200);
        // Rebuild every sequence from its input row and compare.
        for s in 0..100 {
            let x = &ids[s * 16..(s + 1) * 16];
            let y = &targets[s * 16..(s + 1) * 16];
            let a = &x[..COPY_LEN];
            assert!(a.iter().all(|&v| (1..16).contains(&v)));
            assert_eq!(x[COPY_LEN], COPY_SEP);
            let mut full = a.to_vec();
            full.push(COPY_SEP);
            full.extend_from_slice(a);
            assert_eq!(y, &full[1..]);
            assert_eq!(x, &full[..16]);
        }
    }

    #[test]
    fn unknown_task_is_config_error() {
        assert!("mnist".parse::<TaskId>().unwrap_err().is_config());
    }
}
