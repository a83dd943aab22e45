//! Deterministic synthetic classification tasks and JSONL dataset files.
//!
//! Three generators cover the behaviors a small transformer can plausibly learn
//! at desk scale. Parity is the headline task: the label depends on every
//! position, so it needs multi-layer composition and gives the layers genuinely
//! different importance profiles. Majority and copy-first-token are shallower
//! controls.
//!
//! Generation draws target labels cyclically and rejection-samples sequences
//! until each matches its target, so class counts are exactly balanced (up to
//! remainder when `n` is not a multiple of the class count). A seeded shuffle
//! then removes the ordering artifact before the positional 80/10/10
//! train/valid/probe split.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::named_stream;
use crate::tape::Batch;

/// Token id whose count parity defines the parity label, and the first of the
/// two marker tokens the majority task compares.
pub const MARKER_A: u32 = 1;
/// Second majority marker.
pub const MARKER_B: u32 = 2;
/// Bucket count for the copy-first-token task (clamped to the vocabulary size).
pub const COPY_BUCKETS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Parity,
    Majority,
    CopyFirstToken,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Parity => "parity",
            TaskKind::Majority => "majority",
            TaskKind::CopyFirstToken => "copy_first_token",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<TaskKind> {
        match s {
            "parity" => Ok(TaskKind::Parity),
            "majority" => Ok(TaskKind::Majority),
            "copy_first_token" => Ok(TaskKind::CopyFirstToken),
            other => Err(Error::Config(format!(
                "unknown task kind `{other}` (expected parity, majority, or copy_first_token)"
            ))),
        }
    }
}

impl TaskKind {
    pub fn n_classes(&self, vocab_size: usize) -> usize {
        match self {
            TaskKind::Parity | TaskKind::Majority => 2,
            TaskKind::CopyFirstToken => COPY_BUCKETS.min(vocab_size),
        }
    }
}

/// One labeled token sequence, exactly the JSONL line shape.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: u32,
}

/// Number of marker tokens mod 2.
pub fn parity_label(tokens: &[u32]) -> u32 {
    (tokens.iter().filter(|&&t| t == MARKER_A).count() % 2) as u32
}

/// 0 if marker A strictly outnumbers marker B, 1 for the reverse, None on ties
/// (the generator resamples those).
pub fn majority_label(tokens: &[u32]) -> Option<u32> {
    let a = tokens.iter().filter(|&&t| t == MARKER_A).count();
    let b = tokens.iter().filter(|&&t| t == MARKER_B).count();
    match a.cmp(&b) {
        std::cmp::Ordering::Greater => Some(0),
        std::cmp::Ordering::Less => Some(1),
        std::cmp::Ordering::Equal => None,
    }
}

/// Equal-width bucket of the first token id.
pub fn copy_first_label(tokens: &[u32], vocab_size: usize) -> u32 {
    let buckets = COPY_BUCKETS.min(vocab_size);
    (tokens[0] as usize * buckets / vocab_size) as u32
}

/// An immutable labeled corpus with positional train/valid/probe splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub n_classes: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl Dataset {
    fn new(examples: Vec<Example>, n_classes: usize, vocab_size: usize) -> Result<Dataset> {
        let seq_len = examples.first().map(|e| e.tokens.len()).unwrap_or(0);
        let ds = Dataset { examples, n_classes, vocab_size, seq_len };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        for (i, e) in self.examples.iter().enumerate() {
            let line = i + 1;
            if e.tokens.len() != self.seq_len {
                return Err(Error::Data {
                    line,
                    detail: format!(
                        "sequence length {} differs from the first line's {}",
                        e.tokens.len(),
                        self.seq_len
                    ),
                });
            }
            if let Some(&t) = e.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::Data {
                    line,
                    detail: format!("token id {t} outside vocabulary of size {}", self.vocab_size),
                });
            }
            if e.label as usize >= self.n_classes {
                return Err(Error::Data {
                    line,
                    detail: format!("label {} outside {} classes", e.label, self.n_classes),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// First 80% of examples.
    pub fn train_range(&self) -> Range<usize> {
        0..self.len() * 8 / 10
    }

    /// Next 10%.
    pub fn valid_range(&self) -> Range<usize> {
        self.len() * 8 / 10..self.len() * 9 / 10
    }

    /// Final 10%, held out for representation probes so importance scoring
    /// never sees a training sequence.
    pub fn probe_range(&self) -> Range<usize> {
        self.len() * 9 / 10..self.len()
    }

    pub fn train(&self) -> &[Example] {
        &self.examples[self.train_range()]
    }

    pub fn valid(&self) -> &[Example] {
        &self.examples[self.valid_range()]
    }

    pub fn probe(&self) -> &[Example] {
        &self.examples[self.probe_range()]
    }

    /// Pack a slice of examples into forward-pass batches in order. With
    /// `drop_last`, a trailing partial batch is discarded so every step in an
    /// epoch has identical shape (and therefore identical modeled cost).
    pub fn batches(examples: &[Example], batch_size: usize, drop_last: bool) -> Vec<Batch> {
        assert!(batch_size > 0, "batch_size must be positive");
        let mut out = Vec::new();
        for chunk in examples.chunks(batch_size) {
            if drop_last && chunk.len() < batch_size {
                break;
            }
            let seq_len = chunk[0].tokens.len();
            let mut tokens = Vec::with_capacity(chunk.len() * seq_len);
            let mut labels = Vec::with_capacity(chunk.len());
            for e in chunk {
                tokens.extend_from_slice(&e.tokens);
                labels.push(e.label);
            }
            out.push(Batch { tokens, labels, n_seqs: chunk.len(), seq_len });
        }
        out
    }
}

/// Generate `n` balanced examples of the given task, deterministic in `seed`.
pub fn gen_task(
    kind: TaskKind,
    n: usize,
    seq_len: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::Config(format!("dataset size {n} below the minimum of 10")));
    }
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be positive".into()));
    }
    if vocab_size <= MARKER_B as usize {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} too small; marker tokens need at least {}",
            MARKER_B + 1
        )));
    }
    let n_classes = kind.n_classes(vocab_size);
    let mut rng = named_stream(seed, &format!("data.{kind}"));
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let target = (i % n_classes) as u32;
        loop {
            let tokens: Vec<u32> =
                (0..seq_len).map(|_| rng.gen_range(0..vocab_size as u32)).collect();
            let label = match kind {
                TaskKind::Parity => Some(parity_label(&tokens)),
                TaskKind::Majority => majority_label(&tokens),
                TaskKind::CopyFirstToken => Some(copy_first_label(&tokens, vocab_size)),
            };
            if label == Some(target) {
                examples.push(Example { tokens, label: target });
                break;
            }
        }
    }
    let mut shuffler = named_stream(seed, "data.shuffle");
    examples.shuffle(&mut shuffler);
    Dataset::new(examples, n_classes, vocab_size)
}

/// Write one JSON object per line: `{"tokens":[...],"label":n}`.
pub fn save_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for e in &ds.examples {
        let line = serde_json::to_string(e).expect("example serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load and validate a JSONL dataset against the consumer's vocabulary and
/// class count. Structural problems and range violations both report the
/// offending 1-based line number.
pub fn load_jsonl(path: &Path, vocab_size: usize, n_classes: usize) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line)
            .map_err(|e| Error::Data { line: i + 1, detail: format!("malformed JSON: {e}") })?;
        if ex.tokens.is_empty() {
            return Err(Error::Data { line: i + 1, detail: "empty token sequence".into() });
        }
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(Error::Data { line: 0, detail: "empty dataset".into() });
    }
    Dataset::new(examples, n_classes, vocab_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_of_a_markerless_sequence_is_zero() {
        assert_eq!(parity_label(&[0, 5, 7, 63]), 0);
        assert_eq!(parity_label(&[1, 5, 1, 1]), 1);
        assert_eq!(majority_label(&[1, 1, 2, 0]), Some(0));
        assert_eq!(majority_label(&[1, 2, 0, 0]), None);
        assert_eq!(copy_first_label(&[63, 0], 64), 3);
        assert_eq!(copy_first_label(&[0, 9], 64), 0);
    }

    #[test]
    fn same_seed_gives_identical_dataset_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        save_jsonl(&gen_task(TaskKind::Parity, 50, 6, 16, 9).unwrap(), &a).unwrap();
        save_jsonl(&gen_task(TaskKind::Parity, 50, 6, 16, 9).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let other = gen_task(TaskKind::Parity, 50, 6, 16, 10).unwrap();
        assert_ne!(load_jsonl(&a, 16, 2).unwrap(), other);
    }

    #[test]
    fn labels_are_balanced_for_ten_thousand_examples() {
        for kind in [TaskKind::Parity, TaskKind::Majority, TaskKind::CopyFirstToken] {
            let ds = gen_task(kind, 10_000, 6, 16, 3).unwrap();
            let k = ds.n_classes;
            let mut counts = vec![0usize; k];
            for e in &ds.examples {
                counts[e.label as usize] += 1;
            }
            let uniform = 10_000.0 / k as f64;
            for c in counts {
                assert!(
                    (c as f64 - uniform).abs() / uniform < 0.05,
                    "{kind}: count {c} strays from uniform {uniform}"
                );
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover_the_corpus() {
        let ds = gen_task(TaskKind::Majority, 100, 5, 8, 1).unwrap();
        assert_eq!(ds.train().len(), 80);
        assert_eq!(ds.valid().len(), 10);
        assert_eq!(ds.probe().len(), 10);
        assert_eq!(ds.train_range().end, ds.valid_range().start);
        assert_eq!(ds.valid_range().end, ds.probe_range().start);
        assert_eq!(ds.probe_range().end, ds.len());
    }

    #[test]
    fn round_trip_preserves_the_dataset_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let ds = gen_task(TaskKind::CopyFirstToken, 40, 4, 12, 77).unwrap();
        save_jsonl(&ds, &path).unwrap();
        let back = load_jsonl(&path, 12, ds.n_classes).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn bad_lines_are_rejected_with_their_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"tokens\":[1,2],\"label\":0}\n{\"tokens\":[1,2],\"label\":\n",
        )
        .unwrap();
        match load_jsonl(&path, 8, 2) {
            Err(Error::Data { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a line-2 data error, got {other:?}"),
        }

        std::fs::write(&path, "").unwrap();
        match load_jsonl(&path, 8, 2) {
            Err(Error::Data { detail, .. }) => assert!(detail.contains("empty dataset")),
            other => panic!("expected empty-dataset rejection, got {other:?}"),
        }

        std::fs::write(&path, "{\"tokens\":[1,9],\"label\":0}\n").unwrap();
        match load_jsonl(&path, 8, 2) {
            Err(Error::Data { line, detail }) => {
                assert_eq!(line, 1);
                assert!(detail.contains("token id 9"));
            }
            other => panic!("expected out-of-range rejection, got {other:?}"),
        }
    }

    #[test]
    fn batching_drops_a_ragged_tail_when_asked() {
        let ds = gen_task(TaskKind::Parity, 25, 3, 8, 5).unwrap();
        let full = Dataset::batches(&ds.examples, 10, false);
        assert_eq!(full.iter().map(|b| b.n_seqs).collect::<Vec<_>>(), vec![10, 10, 5]);
        let dropped = Dataset::batches(&ds.examples, 10, true);
        assert_eq!(dropped.iter().map(|b| b.n_seqs).collect::<Vec<_>>(), vec![10, 10]);
        assert_eq!(dropped[0].tokens.len(), 30);
        assert_eq!(dropped[0].labels, ds.examples[..10].iter().map(|e| e.label).collect::<Vec<_>>());
    }

    #[test]
    fn undersized_requests_are_rejected() {
        assert!(gen_task(TaskKind::Parity, 9, 4, 8, 0).is_err());
        assert!(gen_task(TaskKind::Parity, 10, 0, 8, 0).is_err());
        assert!(gen_task(TaskKind::Parity, 10, 4, 2, 0).is_err());
    }
}
