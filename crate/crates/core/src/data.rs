//! Synthetic transduction tasks, batching and the plain-text corpus format.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mask;

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const BOS: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved ids; symbols start here.
pub const RESERVED_IDS: usize = 4;

/// Stream reserved for held-out examples; training streams count up from 0.
pub const EVAL_STREAM: u64 = 1 << 63;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size <= RESERVED_IDS {
            return Err(Error::InvalidConfig(format!(
                "vocabulary of {size} leaves no symbols after {RESERVED_IDS} reserved ids"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(self) -> usize {
        self.size
    }

    pub fn symbols(self) -> usize {
        self.size - RESERVED_IDS
    }

    pub fn is_symbol(self, id: usize) -> bool {
        (RESERVED_IDS..self.size).contains(&id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Shift every symbol by a fixed offset modulo the symbol count.
    Rotate(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of distinct symbols; ids `4..4 + symbols`.
    pub symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            symbols: 16,
            min_len: 4,
            max_len: 16,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// Checks the task against a model's vocabulary size and length limit.
    pub fn validate(&self, vocab_size: usize, max_length: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.symbols == 0 || RESERVED_IDS + self.symbols > vocab_size {
            return bad(format!(
                "{} symbols do not fit a vocabulary of {vocab_size}",
                self.symbols
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("invalid length range {}..{}", self.min_len, self.max_len));
        }
        if self.max_len + 1 > max_length {
            return bad(format!(
                "max_len {} plus end marker exceeds model max_length {max_length}",
                self.max_len
            ));
        }
        Ok(())
    }

    /// Generator for one example stream; distinct streams never share draws.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Applies the task mapping to a symbol sequence.
pub fn transduce(kind: TaskKind, symbols: usize, src: &[usize]) -> Vec<usize> {
    match kind {
        TaskKind::Copy => src.to_vec(),
        TaskKind::Reverse => src.iter().rev().copied().collect(),
        TaskKind::Rotate(r) => src
            .iter()
            .map(|&s| (s - RESERVED_IDS + r) % symbols + RESERVED_IDS)
            .collect(),
    }
}

/// One source/target pair with length uniform in `[min_len, max_len]`.
pub fn generate_pair<R: Rng>(spec: &TaskSpec, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let src: Vec<usize> = (0..len)
        .map(|_| RESERVED_IDS + rng.gen_range(0..spec.symbols))
        .collect();
    let tgt = transduce(spec.kind, spec.symbols, &src);
    (src, tgt)
}

pub fn generate_corpus(spec: &TaskSpec, count: usize, stream: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut rng = spec.rng(stream);
    (0..count).map(|_| generate_pair(spec, &mut rng)).collect()
}

/// Padded id matrices with EOS appended; pads appear only as suffixes.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// Row-major `[size, src_len]`.
    pub src: Vec<usize>,
    /// Row-major `[size, tgt_len]`.
    pub tgt: Vec<usize>,
    pub src_mask: Mask,
    pub tgt_mask: Mask,
}

impl Batch {
    pub fn src_row(&self, i: usize) -> &[usize] {
        &self.src[i * self.src_len..(i + 1) * self.src_len]
    }

    pub fn tgt_row(&self, i: usize) -> &[usize] {
        &self.tgt[i * self.tgt_len..(i + 1) * self.tgt_len]
    }
}

fn pad_rows(rows: &[&[usize]], max_length: usize) -> Result<(usize, Vec<usize>, Mask)> {
    let width = rows.iter().map(|r| r.len() + 1).max().unwrap_or(1);
    if width > max_length {
        return Err(Error::SequenceTooLong {
            len: width,
            max: max_length,
        });
    }
    let mut ids = Vec::with_capacity(rows.len() * width);
    let mut mask = Vec::with_capacity(rows.len() * width);
    for row in rows {
        ids.extend_from_slice(row);
        ids.push(EOS);
        ids.resize(ids.len() + width - row.len() - 1, PAD);
        mask.extend((0..width).map(|j| j <= row.len()));
    }
    Ok((width, ids, Mask::new(vec![rows.len(), width], mask)?))
}

/// Appends EOS and pads sources and targets to the batch maxima.
pub fn make_batch(pairs: &[(Vec<usize>, Vec<usize>)], max_length: usize) -> Result<Batch> {
    if pairs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let srcs: Vec<&[usize]> = pairs.iter().map(|p| p.0.as_slice()).collect();
    let tgts: Vec<&[usize]> = pairs.iter().map(|p| p.1.as_slice()).collect();
    let (src_len, src, src_mask) = pad_rows(&srcs, max_length)?;
    let (tgt_len, tgt, tgt_mask) = pad_rows(&tgts, max_length)?;
    Ok(Batch {
        size: pairs.len(),
        src_len,
        tgt_len,
        src,
        tgt,
        src_mask,
        tgt_mask,
    })
}

/// Drops everything from the first EOS or PAD on.
pub fn strip(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().take_while(|&id| id != EOS && id != PAD).collect()
}

/// Fraction of held-out sources that also occur in the training corpus.
pub fn overlap_rate(train: &[(Vec<usize>, Vec<usize>)], held_out: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    if held_out.is_empty() {
        return 0.0;
    }
    let seen: HashSet<&[usize]> = train.iter().map(|p| p.0.as_slice()).collect();
    let hits = held_out.iter().filter(|p| seen.contains(p.0.as_slice())).count();
    hits as f64 / held_out.len() as f64
}

pub fn format_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn parse_ids(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse()
                .map_err(|_| Error::InvalidConfig(format!("`{tok}` is not a token id")))
        })
        .collect()
}

/// `src-ids TAB tgt-ids`.
pub fn format_pair(src: &[usize], tgt: &[usize]) -> String {
    format!("{}\t{}", format_ids(src), format_ids(tgt))
}

pub fn parse_pair(line: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let (src, tgt) = line
        .split_once('\t')
        .ok_or_else(|| Error::InvalidConfig(format!("corpus line without a tab: `{line}`")))?;
    Ok((parse_ids(src)?, parse_ids(tgt)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_examples() {
        assert_eq!(transduce(TaskKind::Copy, 16, &[5, 6, 7]), [5, 6, 7]);
        assert_eq!(transduce(TaskKind::Reverse, 16, &[5, 6, 7]), [7, 6, 5]);
        assert_eq!(transduce(TaskKind::Rotate(1), 4, &[4, 7]), [5, 4]);
    }

    #[test]
    fn single_pair_batch_has_no_padding() {
        let b = make_batch(&[(vec![5, 6], vec![6, 5])], 8).unwrap();
        assert_eq!(b.src, [5, 6, EOS]);
        assert_eq!(b.tgt, [6, 5, EOS]);
        assert_eq!(b.src_mask.count(), 3);
        assert_eq!(b.tgt_mask.count(), 3);
    }

    #[test]
    fn shorter_row_gets_trailing_pads() {
        let b = make_batch(&[(vec![4, 5], vec![4, 5]), (vec![4, 5, 6, 7], vec![4, 5, 6, 7])], 8).unwrap();
        assert_eq!(b.src_len, 5);
        assert_eq!(b.src_row(0), [4, 5, EOS, PAD, PAD]);
        assert_eq!(b.src_mask.data()[..5], [true, true, true, false, false]);
        assert_eq!(strip(b.src_row(0)), [4, 5]);
        assert_eq!(strip(b.tgt_row(1)), [4, 5, 6, 7]);
    }

    #[test]
    fn too_long_is_rejected() {
        let err = make_batch(&[(vec![4; 8], vec![4; 8])], 8).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { len: 9, max: 8 }));
    }

    #[test]
    fn generation_is_seeded_and_streams_differ() {
        let spec = TaskSpec::default();
        let a = generate_corpus(&spec, 20, 0);
        assert_eq!(a, generate_corpus(&spec, 20, 0));
        assert_ne!(a, generate_corpus(&spec, 20, EVAL_STREAM));
        for (src, tgt) in &a {
            assert!((spec.min_len..=spec.max_len).contains(&src.len()));
            assert_eq!(src, tgt);
        }
    }

    #[test]
    fn corpus_lines_round_trip() {
        let line = format_pair(&[4, 5, 6], &[6, 5, 4]);
        assert_eq!(line, "4 5 6\t6 5 4");
        assert_eq!(parse_pair(&line).unwrap(), (vec![4, 5, 6], vec![6, 5, 4]));
        assert!(parse_pair("4 5").is_err());
    }

    #[test]
    fn overlap_is_reported() {
        let train = vec![(vec![4, 5], vec![4, 5])];
        let held = vec![(vec![4, 5], vec![4, 5]), (vec![5, 4], vec![5, 4])];
        assert_eq!(overlap_rate(&train, &held), 0.5);
    }
}
