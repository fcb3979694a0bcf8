//! Token accuracy, approximate BLEU and held-out evaluation.

use std::collections::HashMap;
use std::fmt;

use crate::data::{make_batch, strip};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Parameters;
use crate::tensor::{Graph, Mask, Tensor};

/// Rows per teacher-forced evaluation batch.
const EVAL_CHUNK: usize = 32;

/// One evaluation result; `Display` renders the training log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub accuracy_top5: f64,
    pub neg_log_perplexity: f64,
    pub approx_bleu_score: f64,
}

impl MetricsRecord {
    pub const FIELDS: [&'static str; 6] = [
        "step",
        "loss",
        "accuracy",
        "accuracy_top5",
        "neg_log_perplexity",
        "approx_bleu_score",
    ];

    /// Parses a line produced by `Display`.
    pub fn parse(line: &str) -> Result<Self> {
        let mut values = HashMap::new();
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("malformed metrics field `{field}`")))?;
            values.insert(k, v);
        }
        let get = |k: &str| -> Result<&str> {
            values
                .get(k)
                .copied()
                .ok_or_else(|| Error::InvalidConfig(format!("metrics line lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("metrics field `{k}` is not a number")))
        };
        Ok(Self {
            step: get("step")?
                .parse()
                .map_err(|_| Error::InvalidConfig("metrics step is not an integer".into()))?,
            loss: num("loss")?,
            accuracy: num("accuracy")?,
            accuracy_top5: num("accuracy_top5")?,
            neg_log_perplexity: num("neg_log_perplexity")?,
            approx_bleu_score: num("approx_bleu_score")?,
        })
    }
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} loss={:.6} accuracy={:.6} accuracy_top5={:.6} neg_log_perplexity={:.6} approx_bleu_score={:.6}",
            self.step, self.loss, self.accuracy, self.accuracy_top5, self.neg_log_perplexity, self.approx_bleu_score
        )
    }
}

/// Whether `target` ranks among the `k` largest entries of `row`, with ties
/// ranked toward the lower id.
pub fn in_top_k(row: &[f64], target: usize, k: usize) -> bool {
    let t = row[target];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < target))
        .count();
    ahead < k
}

/// Fraction of unpadded positions whose target is among the top `k` logits.
pub fn token_accuracy(logits: &Tensor, targets: &[usize], mask: &Mask, k: usize) -> Result<f64> {
    let (hits, total) = top_k_hits(logits, targets, mask, k)?;
    if total == 0 {
        return Err(Error::Empty("token_accuracy: every position is padding"));
    }
    Ok(hits as f64 / total as f64)
}

fn top_k_hits(logits: &Tensor, targets: &[usize], mask: &Mask, k: usize) -> Result<(usize, usize)> {
    if k == 0 {
        return Err(Error::InvalidConfig("top-k accuracy needs k >= 1".into()));
    }
    let v = logits.last_dim();
    let rows = logits.numel().checked_div(v).unwrap_or(0);
    if targets.len() != rows || mask.data().len() != rows {
        return Err(Error::ShapeMismatch {
            op: "token_accuracy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let mut hits = 0;
    let mut total = 0;
    for (r, (&t, &keep)) in targets.iter().zip(mask.data()).enumerate() {
        if !keep {
            continue;
        }
        if t >= v {
            return Err(Error::IndexOutOfRange { index: t, bound: v });
        }
        total += 1;
        hits += usize::from(in_top_k(&logits.data()[r * v..(r + 1) * v], t, k));
    }
    Ok((hits, total))
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU over token ids with clipped n-gram counts for orders
/// `1..=max_order`. Orders without any match use `(0 + 1) / (total + 1)`.
pub fn approx_bleu(candidates: &[Vec<usize>], references: &[Vec<usize>], max_order: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::ShapeMismatch {
            op: "approx_bleu",
            lhs: vec![candidates.len()],
            rhs: vec![references.len()],
        });
    }
    if max_order == 0 {
        return Err(Error::InvalidConfig("BLEU needs max_order >= 1".into()));
    }
    let mut matches = vec![0usize; max_order];
    let mut totals = vec![0usize; max_order];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=max_order {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(cand, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let log_mean = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| {
            let p = if m > 0 {
                m as f64 / t as f64
            } else {
                1.0 / (t as f64 + 1.0)
            };
            p.ln()
        })
        .sum::<f64>()
        / max_order as f64;
    let bp = (1.0 - ref_len as f64 / cand_len as f64).exp().min(1.0);
    Ok(bp * log_mean.exp())
}

/// Teacher-forced loss, accuracies and perplexity plus greedy-decoding BLEU
/// over a held-out set of symbol pairs.
pub fn evaluate(
    model: &Model,
    params: &Parameters,
    pairs: &[(Vec<usize>, Vec<usize>)],
    step: u64,
    label_smoothing: f64,
) -> Result<MetricsRecord> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let max_length = model.config().max_length;
    let (mut loss_sum, mut nll_sum) = (0.0, 0.0);
    let (mut top1, mut top5, mut positions) = (0usize, 0usize, 0usize);
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let batch = make_batch(chunk, max_length)?;
        let mut g = Graph::new();
        let vars = model.bind(&params.bind(&mut g, false))?;
        let logits = model.forward_batch(&mut g, &vars, &batch)?;
        let count = batch.tgt_mask.count();
        let loss = g.cross_entropy(logits, &batch.tgt, &batch.tgt_mask, label_smoothing)?;
        loss_sum += g.value(loss).data()[0] * count as f64;
        let nll = g.cross_entropy(logits, &batch.tgt, &batch.tgt_mask, 0.0)?;
        nll_sum += g.value(nll).data()[0] * count as f64;
        let values = g.value(logits);
        top1 += top_k_hits(values, &batch.tgt, &batch.tgt_mask, 1)?.0;
        top5 += top_k_hits(values, &batch.tgt, &batch.tgt_mask, 5)?.0;
        positions += count;
    }

    let sources: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
    let references: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
    let longest = sources.iter().map(Vec::len).max().unwrap_or(0);
    let outputs = model.greedy_generate(params, &sources, 2 * longest + 2)?;
    let candidates: Vec<Vec<usize>> = outputs.iter().map(|o| strip(o)).collect();

    let n = positions as f64;
    Ok(MetricsRecord {
        step,
        loss: loss_sum / n,
        accuracy: top1 as f64 / n,
        accuracy_top5: top5 as f64 / n,
        neg_log_perplexity: -nll_sum / n,
        approx_bleu_score: approx_bleu(&candidates, &references, 4)?,
    })
}
