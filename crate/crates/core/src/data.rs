//! Tasks, tokenization and batching.
//!
//! Reserved ids: [`PAD`], [`CLS`], [`SEP`], [`UNK`]; content tokens start
//! at [`FIRST_CONTENT`]. Every example starts with `CLS` and is stored
//! unpadded; padding happens per batch.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenBatch;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
pub const FIRST_CONTENT: usize = 4;

const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GeneratorKind {
    Majority,
    Parity,
    Tsv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsvSpec {
    pub train_path: PathBuf,
    pub valid_path: PathBuf,
    /// One column, or two for sentence pairs.
    pub text_columns: Vec<String>,
    pub label_column: String,
    /// Label strings in class order. When empty, the sorted distinct labels
    /// of the training file are used.
    #[serde(default)]
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub name: String,
    pub kind: GeneratorKind,
    pub vocab_size: usize,
    /// Maximum sequence length including `CLS`.
    pub seq_len: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub seed: u64,
    /// PARITY only: marker counts are drawn from `0..=max_markers`.
    pub max_markers: usize,
    /// PARITY only: content length is drawn from `min_len..=seq_len - 1`.
    /// Zero means every example has full length.
    pub min_len: usize,
    pub tsv: Option<TsvSpec>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            name: "majority".into(),
            kind: GeneratorKind::Majority,
            vocab_size: 16,
            seq_len: 32,
            num_classes: 2,
            train_size: 2000,
            valid_size: 500,
            seed: 0,
            max_markers: 8,
            min_len: 0,
            tsv: None,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::config(format!("task seq_len must be >= 2, got {}", self.seq_len)));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!("task needs >= 2 classes, got {}", self.num_classes)));
        }
        match self.kind {
            GeneratorKind::Majority => {
                let content = self.vocab_size.saturating_sub(FIRST_CONTENT);
                if content < self.num_classes {
                    return Err(Error::config(format!(
                        "vocab_size {} leaves {content} content tokens for {} classes",
                        self.vocab_size, self.num_classes
                    )));
                }
            }
            GeneratorKind::Parity => {
                if self.num_classes != 2 {
                    return Err(Error::config("PARITY needs num_classes = 2"));
                }
                if self.vocab_size < FIRST_CONTENT + 2 {
                    return Err(Error::config("PARITY needs at least two content tokens"));
                }
                let min = if self.min_len == 0 { self.seq_len - 1 } else { self.min_len };
                if self.max_markers == 0 || min > self.seq_len - 1 || self.max_markers > min {
                    return Err(Error::config(format!(
                        "PARITY needs 1 <= max_markers <= min_len <= seq_len - 1 (got {}, {}, {})",
                        self.max_markers,
                        self.min_len,
                        self.seq_len - 1
                    )));
                }
            }
            GeneratorKind::Tsv => {
                let tsv = self
                    .tsv
                    .as_ref()
                    .ok_or_else(|| Error::config("TSV task needs a [task.tsv] section"))?;
                if !(1..=2).contains(&tsv.text_columns.len()) {
                    return Err(Error::config("TSV task takes one or two text columns"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub token_ids: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.token_ids.len()).max().unwrap_or(0)
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub valid: Dataset,
    /// Number of token ids in use; at most the encoder's `vocab_size`.
    pub vocab_size: usize,
    pub vocab: Option<Vocab>,
}

/// Builds both splits for `spec`. A pure function of the spec.
pub fn build_task(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    match spec.kind {
        GeneratorKind::Majority | GeneratorKind::Parity => {
            let (train, valid) = if spec.kind == GeneratorKind::Majority {
                gen_majority(spec)?
            } else {
                gen_parity(spec)?
            };
            Ok(TaskData {
                train,
                valid,
                vocab_size: spec.vocab_size,
                vocab: None,
            })
        }
        GeneratorKind::Tsv => {
            let tsv = spec.tsv.as_ref().expect("validated");
            let (train, valid, vocab) = load_tsv(tsv, spec.seq_len)?;
            Ok(TaskData {
                train,
                valid,
                vocab_size: vocab.len(),
                vocab: Some(vocab),
            })
        }
    }
}

/// Class of a content token under MAJORITY.
pub fn majority_class(token: usize, num_classes: usize) -> usize {
    (token - FIRST_CONTENT) % num_classes
}

/// Class bucket of the most frequent content token, ties going to the
/// lowest token id.
pub fn majority_label(content: &[usize], vocab_size: usize, num_classes: usize) -> usize {
    let mut counts = vec![0usize; vocab_size];
    for &t in content {
        counts[t] += 1;
    }
    let mut best = FIRST_CONTENT;
    for t in FIRST_CONTENT..vocab_size {
        if counts[t] > counts[best] {
            best = t;
        }
    }
    majority_class(best, num_classes)
}

/// Draws `train_size + valid_size` distinct examples, each from `sample`
/// given a uniformly drawn target label.
fn generate<F>(spec: &TaskSpec, salt: u64, mut sample: F) -> Result<(Dataset, Dataset)>
where
    F: FnMut(&mut ChaCha8Rng, usize) -> Option<Vec<usize>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ salt);
    let mut seen = HashSet::new();
    let mut draw = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 1000 * n + 10_000 {
                return Err(Error::config(format!(
                    "task {} cannot produce {n} distinct examples",
                    spec.name
                )));
            }
            let label = rng.random_range(0..spec.num_classes);
            let content = loop {
                if let Some(c) = sample(rng, label) {
                    break c;
                }
                attempts += 1;
                if attempts > 1000 * n + 10_000 {
                    return Err(Error::config(format!(
                        "task {} rarely produces label {label}",
                        spec.name
                    )));
                }
            };
            let mut token_ids = Vec::with_capacity(content.len() + 1);
            token_ids.push(CLS);
            token_ids.extend(content);
            if seen.insert(token_ids.clone()) {
                out.push(Example { token_ids, label });
            }
        }
        Ok(out)
    };
    let train = draw(spec.train_size, &mut rng)?;
    let valid = draw(spec.valid_size, &mut rng)?;
    Ok((
        Dataset {
            examples: train,
            num_classes: spec.num_classes,
        },
        Dataset {
            examples: valid,
            num_classes: spec.num_classes,
        },
    ))
}

/// MAJORITY: the label is the class bucket of the most frequent content
/// token. A token of the target class is planted in a third of the
/// positions (the rest uniform), and draws whose majority lands elsewhere
/// are rejected.
pub fn gen_majority(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let len = spec.seq_len - 1;
    let (v, c) = (spec.vocab_size, spec.num_classes);
    let planted = len / 3;
    generate(spec, 0x6d61_6a6f, |rng, label| {
        let mut content: Vec<usize> = (0..len).map(|_| rng.random_range(FIRST_CONTENT..v)).collect();
        let of_class: Vec<usize> = (FIRST_CONTENT..v).filter(|&t| majority_class(t, c) == label).collect();
        let target = of_class[rng.random_range(0..of_class.len())];
        let mut positions: Vec<usize> = (0..len).collect();
        positions.shuffle(rng);
        for &p in &positions[..planted] {
            content[p] = target;
        }
        (majority_label(&content, v, c) == label).then_some(content)
    })
}

/// PARITY: the label is the parity of the number of [`FIRST_CONTENT`]
/// marker tokens. The marker count is drawn uniformly among the counts in
/// `0..=max_markers` with the target parity; remaining positions hold other
/// content tokens.
pub fn gen_parity(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let max_len = spec.seq_len - 1;
    let min_len = if spec.min_len == 0 { max_len } else { spec.min_len };
    let v = spec.vocab_size;
    let max_markers = spec.max_markers;
    generate(spec, 0x7061_7269, |rng, label| {
        let len = rng.random_range(min_len..=max_len);
        let counts: Vec<usize> = (0..=max_markers).filter(|k| k % 2 == label).collect();
        let k = counts[rng.random_range(0..counts.len())];
        let mut content: Vec<usize> = (0..len).map(|_| rng.random_range(FIRST_CONTENT + 1..v)).collect();
        let mut positions: Vec<usize> = (0..len).collect();
        positions.shuffle(rng);
        for &p in &positions[..k] {
            content[p] = FIRST_CONTENT;
        }
        Some(content)
    })
}

/// Token table built from a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

struct RawRow {
    line: u64,
    texts: Vec<String>,
    label: String,
}

fn read_tsv(path: &Path, tsv: &TsvSpec) -> Result<Vec<RawRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::input(format!("{}: no column named {name:?} in header", path.display()))
        })
    };
    let text_idx = tsv
        .text_columns
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;
    let label_idx = column(&tsv.label_column)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("").to_string();
        rows.push(RawRow {
            line,
            texts: text_idx.iter().map(|&i| field(i)).collect(),
            label: field(label_idx).trim().to_string(),
        });
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::io(path, source),
            _ => unreachable!(),
        }
    } else {
        let line = e.position().map_or(0, |p| p.line());
        Error::input(format!("{}:{line}: {e}", path.display()))
    }
}

fn encode_row(row: &RawRow, vocab: &Vocab, seq_len: usize) -> Vec<usize> {
    let mut ids = vec![CLS];
    for (i, text) in row.texts.iter().enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        ids.extend(tokenize(text).map(|t| vocab.id(&t)));
    }
    ids.truncate(seq_len);
    ids
}

/// Reads train and validation TSV files. The vocabulary comes from the
/// training file only; unseen validation tokens map to [`UNK`].
pub fn load_tsv(tsv: &TsvSpec, seq_len: usize) -> Result<(Dataset, Dataset, Vocab)> {
    let train_rows = read_tsv(&tsv.train_path, tsv)?;
    let valid_rows = read_tsv(&tsv.valid_path, tsv)?;
    let labels: Vec<String> = if tsv.labels.is_empty() {
        let mut l: Vec<String> = train_rows.iter().map(|r| r.label.clone()).collect();
        l.sort();
        l.dedup();
        l
    } else {
        tsv.labels.clone()
    };
    if labels.len() < 2 {
        return Err(Error::input(format!(
            "{}: need at least two label values, found {labels:?}",
            tsv.train_path.display()
        )));
    }
    let mut vocab = Vocab::new();
    for row in &train_rows {
        for text in &row.texts {
            for t in tokenize(text) {
                vocab.insert(&t);
            }
        }
    }
    let convert = |rows: &[RawRow], path: &Path| -> Result<Dataset> {
        let examples = rows
            .iter()
            .map(|row| {
                let label = labels.iter().position(|l| *l == row.label).ok_or_else(|| {
                    Error::input(format!(
                        "{}:{}: unknown label {:?} (expected one of {labels:?})",
                        path.display(),
                        row.line,
                        row.label
                    ))
                })?;
                Ok(Example {
                    token_ids: encode_row(row, &vocab, seq_len),
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            examples,
            num_classes: labels.len(),
        })
    };
    let train = convert(&train_rows, &tsv.train_path)?;
    let valid = convert(&valid_rows, &tsv.valid_path)?;
    Ok((train, valid, vocab))
}

/// One padded batch. `indices` are positions in the source dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn tokens(&self) -> TokenBatch<'_> {
        TokenBatch {
            ids: &self.ids,
            mask: &self.mask,
            batch: self.size(),
            seq_len: self.seq_len,
        }
    }

    /// Pads `dataset.examples[indices]` to the longest among them.
    pub fn gather(dataset: &Dataset, indices: &[usize]) -> Self {
        let seq_len = indices
            .iter()
            .map(|&i| dataset.examples[i].token_ids.len())
            .max()
            .unwrap_or(0);
        let mut ids = Vec::with_capacity(indices.len() * seq_len);
        let mut mask = Vec::with_capacity(indices.len() * seq_len);
        for &i in indices {
            let t = &dataset.examples[i].token_ids;
            ids.extend_from_slice(t);
            ids.extend(std::iter::repeat_n(PAD, seq_len - t.len()));
            mask.extend(std::iter::repeat_n(true, t.len()));
            mask.extend(std::iter::repeat_n(false, seq_len - t.len()));
        }
        Self {
            ids,
            mask,
            labels: indices.iter().map(|&i| dataset.examples[i].label).collect(),
            indices: indices.to_vec(),
            seq_len,
        }
    }
}

/// Iterator over consecutive batches of a dataset.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = Batch::gather(self.dataset, &self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

/// Batches in dataset order, or shuffled by `shuffle_seed`. The last batch
/// may be smaller.
pub fn batches(dataset: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}

/// Shuffle seed for one epoch of a run.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64).wrapping_add(1)
}
