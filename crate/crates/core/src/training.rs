//! Cross-entropy training with Adam and a warmup schedule, periodic
//! evaluation, and binary checkpoints.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ModelConfig;
use crate::data::{generate_corpus, make_batch, TaskSpec, EVAL_STREAM};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsRecord};
use crate::model::Model;
use crate::params::Parameters;
use crate::tensor::{Graph, Mask, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub train_steps: u64,
    pub eval_every: u64,
    /// Held-out examples scored at every evaluation.
    pub eval_examples: usize,
    pub lr_scale: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub label_smoothing: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub max_grad_norm: Option<f64>,
    /// Stop after an evaluation whose accuracy reaches this value (and
    /// whose BLEU reaches `target_bleu`, when set).
    pub target_accuracy: Option<f64>,
    pub target_bleu: Option<f64>,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            train_steps: 10_000,
            eval_every: 2000,
            eval_examples: 200,
            lr_scale: 1.0,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            label_smoothing: 0.0,
            max_grad_norm: None,
            target_accuracy: None,
            target_bleu: None,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.eval_examples == 0 {
            return bad("eval_examples must be at least 1");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("adam betas must lie in [0, 1) and epsilon must be positive");
        }
        if self.max_grad_norm.is_some_and(|n| n <= 0.0) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }

    fn targets_met(&self, record: &MetricsRecord) -> bool {
        if self.target_accuracy.is_none() && self.target_bleu.is_none() {
            return false;
        }
        self.target_accuracy.is_none_or(|a| record.accuracy >= a)
            && self.target_bleu.is_none_or(|b| record.approx_bleu_score >= b)
    }
}

/// Mean cross-entropy over unpadded positions of `logits[.., V]`.
pub fn cross_entropy_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &Mask, smoothing: f64) -> Result<Var> {
    g.cross_entropy(logits, targets, mask, smoothing)
}

/// Negative unsmoothed mean cross-entropy: 0 for perfect prediction, `−ln V`
/// for uniform logits.
pub fn neg_log_perplexity(logits: &Tensor, targets: &[usize], mask: &Mask) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, targets, mask, 0.0)?;
    Ok(-g.value(loss).data()[0])
}

/// `scale · d^−½ · min(step^−½, step · warmup^−3/2)` for `step ≥ 1`.
pub fn lr_at(step: u64, depth: usize, warmup: u64, scale: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    scale * (depth as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Parameters,
    pub v: Parameters,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update at 1-based `step`.
pub fn adam_step(
    params: &mut Parameters,
    grads: &Parameters,
    state: &mut AdamState,
    step: u64,
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    params.check_same_inventory(grads)?;
    params.check_same_inventory(&state.m)?;
    params.check_same_inventory(&state.v)?;
    let t = step.max(1) as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Parameters, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

// ---- checkpoints ------------------------------------------------------------

const MAGIC: &[u8; 4] = b"PNET";
const FORMAT_VERSION: u32 = 1;
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Number of completed training steps.
    pub step: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub params: Parameters,
    pub optimizer: AdamState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: u64,
    seed: u64,
    model: ModelConfig,
    train: TrainConfig,
    task: TaskSpec,
    tensor_count: u64,
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = Header {
        step: ckpt.step,
        seed: ckpt.train.seed,
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        task: ckpt.task.clone(),
        tensor_count: (3 * ckpt.params.len()) as u64,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = io::BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (name, t) in ckpt.params.iter() {
        write_tensor(&mut w, name, t)?;
    }
    for (prefix, set) in [(MOMENT_M, &ckpt.optimizer.m), (MOMENT_V, &ckpt.optimizer.v)] {
        for (name, t) in set.iter() {
            write_tensor(&mut w, &format!("{prefix}{name}"), t)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if buf.len() != n {
            return Err(Error::CorruptCheckpoint(format!("truncated while reading {what}")));
        }
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str, limit: u64) -> Result<usize> {
        let n = self.u64(what)?;
        if n > limit {
            return Err(Error::CorruptCheckpoint(format!("{what} of {n} exceeds the file size")));
        }
        Ok(n as usize)
    }

    fn tensor(&mut self, limit: u64) -> Result<(String, Tensor)> {
        let name_len = self.u32("tensor name length")? as u64;
        if name_len > limit {
            return Err(Error::CorruptCheckpoint(
                "tensor name length exceeds the file size".into(),
            ));
        }
        let name = String::from_utf8(self.bytes(name_len as usize, "tensor name")?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(Error::CorruptCheckpoint(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len("tensor extent", limit)?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| (n as u64).saturating_mul(8) <= limit)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor `{name}` is larger than the file")))?;
        let raw = self.bytes(numel * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = fs::File::open(path)?;
    let limit = file.metadata()?.len();
    let mut r = Reader {
        inner: io::BufReader::new(file),
    };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let header_len = r.len("header length", limit)?;
    let header: Header = serde_json::from_slice(&r.bytes(header_len, "header")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))?;

    let mut params = Parameters::new();
    let mut m = Parameters::new();
    let mut v = Parameters::new();
    for _ in 0..header.tensor_count {
        let (name, t) = r.tensor(limit)?;
        let (set, key) = if let Some(k) = name.strip_prefix(MOMENT_M) {
            (&mut m, k.to_string())
        } else if let Some(k) = name.strip_prefix(MOMENT_V) {
            (&mut v, k.to_string())
        } else {
            (&mut params, name)
        };
        set.insert(key, t)
            .map_err(|_| Error::CorruptCheckpoint("duplicate tensor name".into()))?;
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(Error::CorruptCheckpoint("trailing bytes after the last tensor".into()));
    }
    params
        .check_same_inventory(&m)
        .and_then(|_| params.check_same_inventory(&v))
        .map_err(|e| Error::CorruptCheckpoint(format!("optimizer state does not match parameters: {e}")))?;
    let model = Model::new(header.model.clone())?;
    let expected = model.init_parameters(0)?.zeros_like();
    expected
        .check_same_inventory(&params)
        .map_err(|e| Error::CorruptCheckpoint(format!("parameters do not match the stored config: {e}")))?;
    Ok(Checkpoint {
        step: header.step,
        model: header.model,
        train: header.train,
        task: header.task,
        params,
        optimizer: AdamState { m, v },
    })
}

/// Dotted path of the first differing field between two JSON documents,
/// walking object keys in document order.
fn first_difference(expected: &Value, found: &Value, path: &str) -> Option<String> {
    let join = |k: &str| {
        if path.is_empty() {
            k.to_string()
        } else {
            format!("{path}.{k}")
        }
    };
    match (expected, found) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, va) in a {
                match b.get(k) {
                    Some(vb) => {
                        if let Some(p) = first_difference(va, vb, &join(k)) {
                            return Some(p);
                        }
                    }
                    None => return Some(join(k)),
                }
            }
            b.keys().find(|k| !a.contains_key(*k)).map(|k| join(k))
        }
        (Value::Array(a), Value::Array(b)) if a.len() == b.len() => a
            .iter()
            .zip(b)
            .enumerate()
            .find_map(|(i, (x, y))| first_difference(x, y, &join(&i.to_string()))),
        _ => (expected != found).then(|| path.to_string()),
    }
}

/// Errors with the first mismatched field when `found` differs from `expected`.
pub fn check_model_config(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    let a = serde_json::to_value(expected)?;
    let b = serde_json::to_value(found)?;
    match first_difference(&a, &b, "") {
        Some(field) => Err(Error::ConfigMismatch { field }),
        None => Ok(()),
    }
}

/// Loads a checkpoint and requires its model config to equal `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    check_model_config(expected, &ckpt.model)?;
    Ok(ckpt)
}

// ---- training loop ------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    /// Training loss of every step run in this call, in order.
    pub losses: Vec<f64>,
    pub records: Vec<MetricsRecord>,
    pub reached_targets: bool,
}

pub struct Trainer {
    model: Model,
    train: TrainConfig,
    task: TaskSpec,
    params: Parameters,
    optimizer: AdamState,
    step: u64,
    held_out: Vec<(Vec<usize>, Vec<usize>)>,
}

impl Trainer {
    /// Fresh run with parameters drawn from the model config's seed.
    pub fn new(model_cfg: ModelConfig, train: TrainConfig, task: TaskSpec) -> Result<Self> {
        let model = Model::new(model_cfg)?;
        let params = model.init_parameters(model.config().seed)?;
        Self::assemble(model, train, task, params, None, 0)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = Model::new(ckpt.model)?;
        Self::assemble(
            model,
            ckpt.train,
            ckpt.task,
            ckpt.params,
            Some(ckpt.optimizer),
            ckpt.step,
        )
    }

    fn assemble(
        model: Model,
        train: TrainConfig,
        task: TaskSpec,
        params: Parameters,
        optimizer: Option<AdamState>,
        step: u64,
    ) -> Result<Self> {
        train.validate()?;
        task.validate(model.config().vocab_size, model.config().max_length)?;
        let optimizer = optimizer.unwrap_or_else(|| AdamState::new(&params));
        let held_out = generate_corpus(&task, train.eval_examples, EVAL_STREAM);
        Ok(Self {
            model,
            train,
            task,
            params,
            optimizer,
            step,
            held_out,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    /// Overrides the final step count, e.g. to extend a resumed run.
    pub fn set_train_steps(&mut self, steps: u64) {
        self.train.train_steps = steps;
    }

    pub fn held_out(&self) -> &[(Vec<usize>, Vec<usize>)] {
        &self.held_out
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            model: self.model.config().clone(),
            train: self.train.clone(),
            task: self.task.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Runs one optimizer step and returns its training loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.step + 1;
        let pairs = generate_corpus(&self.task, self.train.batch_size, step);
        let batch = make_batch(&pairs, self.model.config().max_length)?;

        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, true);
        let vars = self.model.bind(&bound)?;
        let logits = self.model.forward_batch(&mut g, &vars, &batch)?;
        let loss = cross_entropy_loss(&mut g, logits, &batch.tgt, &batch.tgt_mask, self.train.label_smoothing)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: value });
        }
        g.backward(loss)?;
        let mut grads = self.params.gradients(&g, &bound);
        drop(g);
        if let Some(max) = self.train.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        let lr = lr_at(
            step,
            self.model.config().depth,
            self.train.warmup_steps,
            self.train.lr_scale,
        );
        adam_step(
            &mut self.params,
            &grads,
            &mut self.optimizer,
            step,
            lr,
            (&self.train).into(),
        )?;
        self.step = step;
        Ok(value)
    }

    pub fn evaluate(&self) -> Result<MetricsRecord> {
        evaluate(
            &self.model,
            &self.params,
            &self.held_out,
            self.step,
            self.train.label_smoothing,
        )
    }

    /// Trains up to `train_steps`, evaluating (and checkpointing, when a
    /// directory is set) every `eval_every` steps. Each evaluation appends
    /// one metrics line to `log`.
    pub fn run(&mut self, log: &mut dyn Write) -> Result<TrainOutcome> {
        let mut outcome = TrainOutcome::default();
        if let Some(dir) = &self.train.checkpoint_dir {
            fs::create_dir_all(dir)?;
        }
        while self.step < self.train.train_steps {
            outcome.losses.push(self.train_step()?);
            if self.step.is_multiple_of(self.train.eval_every) {
                let record = self.evaluate()?;
                writeln!(log, "{record}")?;
                log.flush()?;
                if let Some(dir) = &self.train.checkpoint_dir {
                    save_checkpoint(&dir.join(checkpoint_file_name(self.step)), &self.checkpoint())?;
                }
                outcome.records.push(record);
                if self.train.targets_met(&record) {
                    outcome.reached_targets = true;
                    break;
                }
            }
        }
        Ok(outcome)
    }
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("checkpoint-{step:08}.pnet")
}
