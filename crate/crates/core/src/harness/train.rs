//! Training loop, evaluation and run records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::data::{copy_positions, make_task, Batch, Dataset, Samples, TaskId};
use super::optim::{AdamW, CosineSchedule};
use crate::blocks::Init;
use crate::error::{Error, Result};
use crate::network::{ForwardOptions, Network, NetworkSpec};
use crate::params::Parameters;
use crate::scalar::{ElementWidth, Scalar};
use crate::tensor::{Tape, Tensor};

pub const RUN_CSV_HEADER: &str = "step,train_loss,eval_metric";
pub const RUN_CSV: &str = "run.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ssnc";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_JSON: &str = "run.json";

/// Rows per forward pass during evaluation.
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    /// Defaults to 5% of the run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    pub warmup_start_lr: f64,
    pub min_lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            lr: 3e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: None,
            warmup_start_lr: 0.0,
            min_lr: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub std: f64,
    pub zero_branch_output: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        let d = Init::default();
        Self {
            std: d.std,
            zero_branch_output: d.zero_branch_output,
        }
    }
}

impl InitConfig {
    pub fn to_init(&self) -> Init {
        Init {
            std: self.std,
            zero_branch_output: self.zero_branch_output,
            ..Init::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskId,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub element_width: ElementWidth,
    pub batch_size: usize,
    pub steps: usize,
    /// Evaluate every this many steps (and always after the last); 0 means
    /// only after the last.
    #[serde(default)]
    pub eval_every: usize,
    /// Reuse one fixed batch for every step.
    #[serde(default)]
    pub single_batch: bool,
    /// Permits `optimizer.lr = 0`.
    #[serde(default)]
    pub frozen: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub init: InitConfig,
    pub model: NetworkSpec,
}

impl TrainConfig {
    pub fn new(task: TaskId, model: NetworkSpec, steps: usize, batch_size: usize) -> Self {
        Self {
            task,
            seed: 0,
            element_width: ElementWidth::F32,
            batch_size,
            steps,
            eval_every: 0,
            single_batch: false,
            frozen: false,
            output_dir: None,
            optimizer: OptimizerConfig::default(),
            init: InitConfig::default(),
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr >= 0.0) || (o.lr == 0.0 && !self.frozen) {
            return Err(Error::Config(format!(
                "optimizer.lr must be positive (got {}); set frozen = true for a no-update run",
                o.lr
            )));
        }
        if o.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config(format!("optimizer.betas must lie in [0, 1), got {:?}", o.betas)));
        }
        if o.eps.is_nan() || o.eps <= 0.0 || o.weight_decay.is_nan() || o.weight_decay < 0.0 {
            return Err(Error::Config("optimizer.eps must be positive and optimizer.weight_decay nonnegative".into()));
        }
        if o.warmup_steps.is_some_and(|w| w > self.steps) {
            return Err(Error::Config("optimizer.warmup_steps exceeds steps".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.init.std.is_nan() || self.init.std <= 0.0 {
            return Err(Error::Config("init.std must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        let o = &self.optimizer;
        CosineSchedule {
            peak: o.lr,
            warmup_start: o.warmup_start_lr.min(o.lr),
            floor: o.min_lr.min(o.lr),
            warmup: o.warmup_steps.unwrap_or(self.steps / 20),
            total: self.steps,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSample {
    pub step: usize,
    pub train_loss: f64,
    pub eval_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: TaskId,
    pub metric: String,
    pub samples: Vec<RunSample>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{RUN_CSV_HEADER}\n");
        for s in &self.samples {
            match s.eval_metric {
                Some(m) => writeln!(out, "{},{},{}", s.step, s.train_loss, m),
                None => writeln!(out, "{},{},", s.step, s.train_loss),
            }
            .expect("writing to a String");
        }
        out
    }

    pub fn last_eval(&self) -> Option<f64> {
        self.samples.iter().rev().find_map(|s| s.eval_metric)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.samples.last().map(|s| s.train_loss)
    }

    /// Lowest training loss over the run.
    pub fn best_loss(&self) -> Option<f64> {
        self.samples.iter().map(|s| s.train_loss).reduce(f64::min)
    }
}

/// Per-row negative log-likelihoods and argmax predictions of logits.
fn score_rows<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> (Vec<f64>, Vec<bool>) {
    let v = logits.last_dim();
    let mut nll = Vec::with_capacity(targets.len());
    let mut hit = Vec::with_capacity(targets.len());
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        let z: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = z.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        nll.push(lse - z[t]);
        // Ties go to the lowest index.
        let best = z.iter().enumerate().fold(0, |b, (i, &x)| if x > z[b] { i } else { b });
        hit.push(best == t);
    }
    (nll, hit)
}

/// The task metric of `net` on `samples`: accuracy for `spiral2`,
/// perplexity for `charlm`, accuracy on the copied half for `copyseq`.
pub fn evaluate_network<T: Scalar>(net: &Network<T>, task: TaskId, samples: &Samples, opts: &ForwardOptions) -> Result<f64> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::Precondition("empty evaluation split".into()));
    }
    let mut nll = 0.0;
    let mut hits = 0usize;
    let mut counted = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch: Batch<T> = samples.batch(chunk);
        let logits = net.predict(batch.as_inputs(), opts)?;
        let (l, h) = score_rows(&logits, &batch.targets);
        match task {
            TaskId::Copyseq => {
                let per = net.spec.outputs_per_sample();
                for (i, ok) in h.iter().enumerate() {
                    if copy_positions().contains(&(i % per)) {
                        hits += usize::from(*ok);
                        counted += 1;
                    }
                }
            }
            _ => {
                hits += h.iter().filter(|&&b| b).count();
                counted += h.len();
            }
        }
        nll += l.iter().sum::<f64>();
    }
    Ok(match task {
        TaskId::Charlm => (nll / counted as f64).exp(),
        _ => hits as f64 / counted as f64,
    })
}

/// Streams training batches: shuffled epochs, or one fixed batch.
struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    size: usize,
    fixed: Option<Vec<usize>>,
}

impl Batcher {
    fn new(n: usize, size: usize, seed: u64, single: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let size = size.min(n);
        let fixed = single.then(|| order[..size].to_vec());
        Self {
            rng,
            order,
            pos: 0,
            size,
            fixed,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if let Some(f) = &self.fixed {
            return f.clone();
        }
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        out
    }
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Divergence { step, loss: f64::NAN },
        other => other,
    }
}

/// Trains a freshly initialized network and returns it with its record.
/// Writes no files.
pub fn train_network<T: Scalar>(cfg: &TrainConfig, data: &Dataset) -> Result<(Network<T>, RunRecord)> {
    cfg.validate()?;
    data.check_spec(&cfg.model)?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::<T>::new(cfg.model.clone(), &cfg.init.to_init(), &mut rng)?;
    let mut opt = AdamW::new(cfg.optimizer.betas[0], cfg.optimizer.betas[1], cfg.optimizer.eps, cfg.optimizer.weight_decay);
    let sched = cfg.schedule();
    let mut batcher = Batcher::new(data.train.len(), cfg.batch_size, cfg.seed, cfg.single_batch);
    let opts = ForwardOptions::default();
    let mut samples = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch: Batch<T> = data.train.batch(&batcher.next());
        let mut tape = Tape::new();
        let logits = net.forward(&mut tape, batch.as_inputs(), &opts).map_err(|e| diverged(step, e))?;
        let loss = tape.cross_entropy(logits, &batch.targets).map_err(|e| diverged(step, e))?;
        let loss_value = tape.value(loss).item()?.as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Divergence { step, loss: loss_value });
        }
        tape.backward(loss)?;
        net.zero_grad();
        net.collect_grads(&tape)?;
        drop(tape);
        opt.step(&mut net, sched.lr(step - 1));
        let eval_due = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let eval_metric = if eval_due {
            Some(evaluate_network(&net, cfg.task, &data.eval, &opts)?)
        } else {
            None
        };
        samples.push(RunSample {
            step,
            train_loss: loss_value,
            eval_metric,
        });
    }
    Ok((
        net,
        RunRecord {
            task: cfg.task,
            metric: cfg.task.metric().into(),
            samples,
            checkpoint: None,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `run.csv`, `checkpoint.ssnc`, `config.toml` and `run.json` into
/// `dir`, filling in the record's checkpoint path.
pub fn write_run<T: Scalar>(dir: &Path, cfg: &TrainConfig, net: &Network<T>, record: &mut RunRecord) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ck = dir.join(CHECKPOINT_FILE);
    checkpoint::save(net, &ck)?;
    record.checkpoint = Some(ck.clone());
    let csv = dir.join(RUN_CSV);
    write(&csv, record.to_csv())?;
    let conf = dir.join(CONFIG_FILE);
    write(&conf, cfg.to_toml()?)?;
    let json = dir.join(RUN_JSON);
    let text = serde_json::to_string_pretty(record).map_err(|e| Error::Config(e.to_string()))?;
    write(&json, text + "\n")?;
    Ok(vec![csv, ck, conf, json])
}

/// Trains at the configured element width and, when `output_dir` is set,
/// writes the run artifacts there.
pub fn train(cfg: &TrainConfig) -> Result<RunRecord> {
    let data = make_task(cfg.task, cfg.seed)?;
    match cfg.element_width {
        ElementWidth::F32 => train_and_write::<f32>(cfg, &data),
        ElementWidth::F64 => train_and_write::<f64>(cfg, &data),
    }
}

fn train_and_write<T: Scalar>(cfg: &TrainConfig, data: &Dataset) -> Result<RunRecord> {
    let (net, mut record) = train_network::<T>(cfg, data)?;
    if let Some(dir) = &cfg.output_dir {
        write_run(dir, cfg, &net, &mut record)?;
    }
    Ok(record)
}

/// Rebuilds the network described by `cfg`, loads `checkpoint` into it.
pub fn load_network<T: Scalar>(cfg: &TrainConfig, checkpoint_path: &Path) -> Result<Network<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::<T>::new(cfg.model.clone(), &cfg.init.to_init(), &mut rng)?;
    checkpoint::load_into(&mut net, checkpoint_path)?;
    Ok(net)
}

/// The task metric of a saved checkpoint on the evaluation split of
/// `cfg.task`.
pub fn evaluate(checkpoint_path: &Path, cfg: &TrainConfig) -> Result<f64> {
    let data = make_task(cfg.task, cfg.seed)?;
    data.check_spec(&cfg.model).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let ck = checkpoint::read(checkpoint_path)?;
    let opts = ForwardOptions::default();
    match ck.width {
        ElementWidth::F32 => {
            let mut net = Network::<f32>::new(cfg.model.clone(), &cfg.init.to_init(), &mut ChaCha8Rng::seed_from_u64(0))?;
            ck.load_into(&mut net)?;
            evaluate_network(&net, cfg.task, &data.eval, &opts)
        }
        ElementWidth::F64 => {
            let mut net = Network::<f64>::new(cfg.model.clone(), &cfg.init.to_init(), &mut ChaCha8Rng::seed_from_u64(0))?;
            ck.load_into(&mut net)?;
            evaluate_network(&net, cfg.task, &data.eval, &opts)
        }
    }
}
