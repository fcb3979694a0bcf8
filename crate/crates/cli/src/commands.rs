use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use posenet_core::data::{format_ids, format_pair, generate_corpus, overlap_rate, parse_ids, strip, EVAL_STREAM};
use posenet_core::gradsuite::run_gradient_suite;
use posenet_core::metrics::MetricsRecord;
use posenet_core::training::{check_model_config, load_checkpoint, save_checkpoint, Checkpoint, Trainer};
use posenet_core::Model;
use serde_json::{Map, Value};

use crate::run_config::{ConfigError, RunConfig, Toggles};

/// Raised when any gradient check exceeds its tolerance.
#[derive(Debug)]
pub struct GradCheckFailed {
    pub failing_cases: usize,
}

impl std::fmt::Display for GradCheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient check case(s) failed", self.failing_cases)
    }
}

impl std::error::Error for GradCheckFailed {}

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const METRICS_LOG: &str = "metrics.log";
pub const FINAL_CHECKPOINT: &str = "final.pnet";
pub const ABLATION_TABLE: &str = "ablation.csv";

fn prepare_out_dir(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_json())?;
    Ok(())
}

/// Writes each line to every sink.
struct Tee<'a> {
    sinks: Vec<&'a mut dyn Write>,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        for s in &mut self.sinks {
            s.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.sinks.iter_mut().try_for_each(|s| s.flush())
    }
}

/// Dumps the first training examples (in the order training draws them)
/// and the held-out set.
pub fn gen_data(cfg: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<()> {
    prepare_out_dir(out, cfg)?;
    let batch = cfg.train.batch_size;
    let mut train = Vec::with_capacity(cfg.corpus_examples);
    let mut step = 1;
    while train.len() < cfg.corpus_examples {
        let need = (cfg.corpus_examples - train.len()).min(batch);
        train.extend(generate_corpus(&cfg.task, batch, step).into_iter().take(need));
        step += 1;
    }
    let held_out = generate_corpus(&cfg.task, cfg.train.eval_examples, EVAL_STREAM);
    for (name, pairs) in [("train.tsv", &train), ("eval.tsv", &held_out)] {
        let mut text = String::new();
        for (src, tgt) in pairs.iter() {
            text.push_str(&format_pair(src, tgt));
            text.push('\n');
        }
        fs::write(out.join(name), text)?;
    }
    writeln!(
        stdout,
        "wrote {} training and {} held-out examples; held-out overlap rate {:.4}",
        train.len(),
        held_out.len(),
        overlap_rate(&train, &held_out)
    )?;
    Ok(())
}

/// Trains from scratch, or from `resume` when given, writing the metrics
/// log, periodic checkpoints and a final checkpoint under `out`.
pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>, stdout: &mut dyn Write) -> Result<Checkpoint> {
    prepare_out_dir(out, cfg)?;
    let mut train_cfg = cfg.train.clone();
    if train_cfg.checkpoint_dir.is_none() {
        train_cfg.checkpoint_dir = Some(out.join("checkpoints"));
    }
    let mut trainer = match resume {
        Some(path) => {
            let mut ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            check_model_config(&cfg.model, &ckpt.model)?;
            ckpt.train = train_cfg;
            ckpt.task = cfg.task.clone();
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::new(cfg.model.clone(), train_cfg, cfg.task.clone())?,
    };
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join(METRICS_LOG))?;
    let outcome = trainer.run(&mut Tee {
        sinks: vec![&mut log, stdout],
    })?;
    let ckpt = trainer.checkpoint();
    save_checkpoint(&out.join(FINAL_CHECKPOINT), &ckpt)?;
    writeln!(
        stdout,
        "finished at step {}{}",
        ckpt.step,
        if outcome.reached_targets {
            " (targets reached)"
        } else {
            ""
        }
    )?;
    Ok(ckpt)
}

/// Loads a checkpoint; with a config, its model section must match.
fn checkpoint_for(cfg: Option<&RunConfig>, path: &Path) -> Result<Checkpoint> {
    let mut ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(cfg) = cfg {
        check_model_config(&cfg.model, &ckpt.model)?;
        ckpt.train = cfg.train.clone();
        ckpt.task = cfg.task.clone();
    }
    Ok(ckpt)
}

pub fn eval(cfg: Option<&RunConfig>, ckpt_path: &Path, stdout: &mut dyn Write) -> Result<MetricsRecord> {
    let ckpt = checkpoint_for(cfg, ckpt_path)?;
    let trainer = Trainer::from_checkpoint(ckpt)?;
    let record = trainer.evaluate()?;
    writeln!(stdout, "{record}")?;
    Ok(record)
}

/// Greedy-decodes one id sequence per input line; outputs omit EOS.
pub fn translate(
    cfg: Option<&RunConfig>,
    ckpt_path: &Path,
    input: &mut dyn BufRead,
    stdout: &mut dyn Write,
) -> Result<()> {
    let ckpt = checkpoint_for(cfg, ckpt_path)?;
    let model = Model::new(ckpt.model.clone())?;
    let vocab = ckpt.model.vocab_size;
    let max_len = ckpt.model.max_length;
    let mut sources = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let ids = parse_ids(&line?).with_context(|| format!("input line {}", n + 1))?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            bail!("input line {}: id {bad} is outside the vocabulary of {vocab}", n + 1);
        }
        sources.push(ids);
    }
    let outputs = model.greedy_generate(&ckpt.params, &sources, max_len)?;
    for out in outputs {
        writeln!(stdout, "{}", format_ids(&strip(&out)))?;
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let opts = cfg.gradcheck.options();
    let results = run_gradient_suite(cfg.gradcheck.seed, opts)?;
    let mut failing = 0;
    for (name, report) in &results {
        let verdict = if report.passed() { "ok" } else { "FAILED" };
        writeln!(
            stdout,
            "{name:<40} checked={:<5} skipped={:<3} max_rel_error={:.3e} {verdict}",
            report.checked, report.skipped, report.max_rel_error
        )?;
        failing += usize::from(!report.passed());
    }
    writeln!(stdout, "{} case(s), tolerance {:.0e}", results.len(), opts.tolerance)?;
    if failing > 0 {
        return Err(GradCheckFailed { failing_cases: failing }.into());
    }
    Ok(())
}

/// One finished ablation run.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub toggles: Vec<(String, Value)>,
    pub record: MetricsRecord,
}

fn grid_points(cfg: &RunConfig) -> Vec<Vec<(String, Value)>> {
    let mut points: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for (name, values) in &cfg.ablation.grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut p = p.clone();
                    p.push((name.clone(), v.clone()));
                    p
                })
            })
            .collect();
    }
    points
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Trains and evaluates every grid point in its own directory and writes
/// a `step, toggles…, accuracy, approx_bleu_score` table.
pub fn ablate(cfg: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<Vec<AblationRow>> {
    prepare_out_dir(out, cfg)?;
    let base = serde_json::to_value(&cfg.toggles)?;
    let mut rows = Vec::new();
    for (i, point) in grid_points(cfg).into_iter().enumerate() {
        let mut toggles: Map<String, Value> = base.as_object().cloned().unwrap_or_default();
        for (name, value) in &point {
            toggles.insert(name.clone(), value.clone());
        }
        let toggles: Toggles =
            serde_json::from_value(Value::Object(toggles)).map_err(|e| ConfigError(format!("ablation grid: {e}")))?;
        let mut run = cfg.clone();
        run.toggles = toggles;
        if let Some(steps) = cfg.ablation.train_steps {
            run.train.train_steps = steps;
        }
        let run = run.resolve(None)?;
        let dir: PathBuf = out.join(format!("run-{i}"));
        let mut sink = Vec::new();
        let ckpt = train(&run, &dir, None, &mut sink)?;
        // Every run ends with an evaluation at its final step.
        let log_path = dir.join(METRICS_LOG);
        let last = fs::read_to_string(&log_path)?
            .lines()
            .filter_map(|l| MetricsRecord::parse(l).ok())
            .next_back();
        let record = match last {
            Some(r) if r.step == ckpt.step => r,
            _ => {
                let record = Trainer::from_checkpoint(ckpt)?.evaluate()?;
                let mut log = fs::OpenOptions::new().append(true).create(true).open(&log_path)?;
                writeln!(log, "{record}")?;
                record
            }
        };
        let desc: Vec<String> = point.iter().map(|(k, v)| format!("{k}={}", value_text(v))).collect();
        writeln!(stdout, "run-{i} {} {record}", desc.join(" "))?;
        rows.push(AblationRow { toggles: point, record });
    }

    let mut table = String::from("step");
    for name in cfg.ablation.grid.keys() {
        table.push(',');
        table.push_str(name);
    }
    table.push_str(",accuracy,approx_bleu_score\n");
    for row in &rows {
        table.push_str(&row.record.step.to_string());
        for (_, v) in &row.toggles {
            table.push(',');
            table.push_str(&value_text(v));
        }
        table.push_str(&format!(
            ",{:.6},{:.6}\n",
            row.record.accuracy, row.record.approx_bleu_score
        ));
    }
    fs::write(out.join(ABLATION_TABLE), &table)?;
    write!(stdout, "{table}")?;
    Ok(rows)
}

/// Process exit status for an error: 2 for bad configs, 3 for checkpoint
/// config mismatches, 1 otherwise (including gradient check failures).
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<posenet_core::Error>() {
            match e {
                posenet_core::Error::InvalidConfig(_) => return 2,
                posenet_core::Error::ConfigMismatch { .. } => return 3,
                _ => {}
            }
        }
    }
    1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_four_points() {
        let points = grid_points(&RunConfig::default());
        assert_eq!(points.len(), 4);
        assert_eq!(points[1][0].0, "encoder_pe_per_layer");
        assert_eq!(points[1][1], ("encoder_dilation".to_string(), Value::Bool(false)));
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let cfg: anyhow::Error = ConfigError("x".into()).into();
        assert_eq!(exit_code(&cfg), 2);
        let mismatch: anyhow::Error = posenet_core::Error::ConfigMismatch { field: "depth".into() }.into();
        assert_eq!(exit_code(&mismatch.context("loading")), 3);
        let grad: anyhow::Error = GradCheckFailed { failing_cases: 1 }.into();
        assert_eq!(exit_code(&grad), 1);
    }
}
