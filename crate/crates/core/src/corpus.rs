//! Corpus loading, tokenization, encoding, balancing, and splitting.
//!
//! Labeled files carry one `label<TAB>text` example per line, unlabeled
//! files bare text. Word vectors use the classic text format: a header line
//! `<count> <dim>` followed by `<word> <floats...>` rows. Every encoded
//! corpus carries an origin tag so training entry points can refuse
//! target-domain data outright.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// One text with an optional binary label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawExample {
    pub text: String,
    pub label: Option<u8>,
}

/// Where a corpus came from; training entry points reject `TargetTest`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    SourceLabeled,
    SourceUnlabeled,
    TargetTest,
}

/// Token ids plus frozen pretrained vectors. PAD (id 0) is all zeros, UNK
/// (id 1) is sampled uniform in [-0.05, 0.05] from the seed kept here, so a
/// checkpoint can rebuild the identical table.
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
    embeddings: Tensor,
    seed: u64,
}

impl Vocabulary {
    /// Build a vocabulary from (token, vector) rows. Rows share one
    /// dimension; PAD and UNK are prepended.
    pub fn from_rows(rows: Vec<(String, Vec<f64>)>, dim: usize, seed: u64) -> Result<Vocabulary> {
        let mut ids = HashMap::new();
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut data = vec![0.0; dim];
        let mut unk_rng = rng::stream(seed, "unk-embedding");
        data.extend((0..dim).map(|_| unk_rng.random_range(-0.05..0.05)));
        for (token, vector) in rows {
            if vector.len() != dim {
                return Err(Error::Corpus(format!(
                    "vector for '{token}' has {} dims, expected {dim}",
                    vector.len()
                )));
            }
            if ids.contains_key(&token) {
                eprintln!("warning: duplicate word '{token}' ignored (first occurrence wins)");
                continue;
            }
            ids.insert(token.clone(), tokens.len());
            tokens.push(token);
            data.extend(vector);
        }
        let embeddings = Tensor::new(tokens.len(), dim, data)?;
        Ok(Vocabulary { ids, tokens, embeddings, seed })
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Read a labeled corpus: `label<TAB>text`, label 0 or 1.
pub fn load_labeled(path: impl AsRef<Path>) -> Result<Vec<RawExample>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut examples = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let (label, text) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `label<TAB>text`".into()))?;
        let label = match label {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(format!("invalid label '{other}' (expected 0 or 1)"))),
        };
        examples.push(RawExample { text: text.to_string(), label: Some(label) });
    }
    if examples.is_empty() {
        return Err(Error::Corpus(format!("{}: no examples", path.display())));
    }
    Ok(examples)
}

/// Read an unlabeled corpus: bare text per line.
pub fn load_unlabeled(path: impl AsRef<Path>) -> Result<Vec<RawExample>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let examples: Vec<_> = content
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| RawExample { text: l.to_string(), label: None })
        .collect();
    if examples.is_empty() {
        return Err(Error::Corpus(format!("{}: no examples", path.display())));
    }
    Ok(examples)
}

/// Read pretrained word vectors in the classic text format.
pub fn load_embeddings(path: impl AsRef<Path>, seed: u64) -> Result<Vocabulary> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = content.lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line: line + 1,
        msg,
    };
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(0, "empty file, expected `<count> <dim>` header".into()))?;
    let mut parts = header.split_whitespace();
    let header_err = || parse_err(0, format!("bad header '{header}', expected `<count> <dim>`"));
    let count: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(header_err)?;
    let dim: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(header_err)?;
    if dim == 0 {
        return Err(parse_err(0, "dimension must be positive".into()));
    }
    let mut rows = Vec::with_capacity(count);
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts
            .next()
            .ok_or_else(|| parse_err(i, "missing word".into()))?
            .to_string();
        let vector: Vec<f64> = parts
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| parse_err(i, format!("bad float '{s}' for '{word}'")))
            })
            .collect::<Result<_>>()?;
        if vector.len() != dim {
            return Err(parse_err(i, format!("'{word}' has {} floats, expected {dim}", vector.len())));
        }
        rows.push((word, vector));
    }
    if rows.len() != count {
        eprintln!("warning: header declared {count} vectors, file has {}", rows.len());
    }
    Vocabulary::from_rows(rows, dim, seed)
}

/// Lowercase the text and split it into word and punctuation tokens.
/// Alphanumeric runs become words; every other non-space character stands
/// alone, so "Great book!" tokenizes as ["great", "book", "!"].
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Fixed-width encoded examples with an origin tag.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCorpus {
    ids: Vec<usize>,
    max_len: usize,
    labels: Option<Vec<u8>>,
    origin: Origin,
}

impl EncodedCorpus {
    pub fn from_rows(ids: Vec<usize>, max_len: usize, labels: Option<Vec<u8>>, origin: Origin) -> Result<EncodedCorpus> {
        if max_len == 0 || ids.len() % max_len != 0 {
            return Err(Error::Corpus(format!(
                "id buffer of {} does not tile rows of {max_len}",
                ids.len()
            )));
        }
        let n = ids.len() / max_len;
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Corpus(format!("{} labels for {n} examples", labels.len())));
            }
            if labels.iter().any(|&l| l > 1) {
                return Err(Error::Corpus("labels must be 0 or 1".into()));
            }
        }
        Ok(EncodedCorpus { ids, max_len, labels, origin })
    }

    pub fn len(&self) -> usize {
        self.ids.len() / self.max_len
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.max_len..(i + 1) * self.max_len]
    }

    /// Flat ids of `count` consecutive rows starting at `start`.
    pub fn id_rows(&self, start: usize, count: usize) -> &[usize] {
        &self.ids[start * self.max_len..(start + count) * self.max_len]
    }

    /// Flat ids of the given rows, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(indices.len() * self.max_len);
        for &i in indices {
            out.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn label(&self, i: usize) -> Option<u8> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Guard used by every training entry point.
    pub fn reject_target(&self) -> Result<()> {
        if self.origin == Origin::TargetTest {
            return Err(Error::TargetDataRejected);
        }
        Ok(())
    }

    /// New corpus with the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> EncodedCorpus {
        let mut ids = Vec::with_capacity(indices.len() * self.max_len);
        for &i in indices {
            ids.extend_from_slice(self.row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        EncodedCorpus { ids, max_len: self.max_len, labels, origin: self.origin }
    }

    /// Append `other`. Widths and labeledness must match; a target-test
    /// operand taints the result so the training guard still fires.
    pub fn concat(&self, other: &EncodedCorpus) -> Result<EncodedCorpus> {
        if self.max_len != other.max_len {
            return Err(Error::Corpus(format!(
                "cannot concat widths {} and {}",
                self.max_len, other.max_len
            )));
        }
        if self.is_labeled() != other.is_labeled() {
            return Err(Error::Corpus("cannot concat labeled with unlabeled".into()));
        }
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        let labels = self.labels.as_ref().map(|l| {
            let mut l = l.clone();
            l.extend_from_slice(other.labels.as_ref().unwrap());
            l
        });
        let origin = if self.origin == Origin::TargetTest || other.origin == Origin::TargetTest {
            Origin::TargetTest
        } else {
            self.origin
        };
        Ok(EncodedCorpus { ids, max_len: self.max_len, labels, origin })
    }

    /// Replace labels, e.g. to attach pseudo-labels to unlabeled rows.
    pub fn with_labels(&self, labels: Vec<u8>) -> Result<EncodedCorpus> {
        EncodedCorpus::from_rows(self.ids.clone(), self.max_len, Some(labels), self.origin)
    }

    /// Count of (negative, positive) examples.
    pub fn class_counts(&self) -> Result<(usize, usize)> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Corpus("class counts need labels".into()))?;
        let pos = labels.iter().filter(|&&l| l == 1).count();
        Ok((labels.len() - pos, pos))
    }

    fn describe(&self) -> String {
        let mut s = format!("{} examples x {} ids", self.len(), self.max_len);
        if let Ok((neg, pos)) = self.class_counts() {
            let _ = write!(s, " ({pos} pos / {neg} neg)");
        }
        s
    }
}

impl std::fmt::Display for EncodedCorpus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.describe())
    }
}

/// Encode examples to fixed-width id rows: tokenize, truncate to `max_len`,
/// right-pad with PAD.
pub fn encode(examples: &[RawExample], vocab: &Vocabulary, max_len: usize, origin: Origin) -> Result<EncodedCorpus> {
    if max_len == 0 {
        return Err(Error::Corpus("max_len must be positive".into()));
    }
    let mut ids = Vec::with_capacity(examples.len() * max_len);
    let mut labels = Vec::new();
    let mut labeled = 0;
    for (i, ex) in examples.iter().enumerate() {
        let tokens = tokenize(&ex.text);
        if tokens.is_empty() {
            eprintln!("warning: example {} is empty, encoding as all padding", i + 1);
        }
        ids.extend(tokens.iter().take(max_len).map(|t| vocab.id(t)));
        ids.resize((i + 1) * max_len, PAD_ID);
        if let Some(l) = ex.label {
            labels.push(l);
            labeled += 1;
        }
    }
    let labels = match labeled {
        0 => None,
        n if n == examples.len() => Some(labels),
        _ => return Err(Error::Corpus("mixed labeled and unlabeled examples".into())),
    };
    EncodedCorpus::from_rows(ids, max_len, labels, origin)
}

/// Down-sample the majority class to the minority count, seeded.
pub fn balance(corpus: &EncodedCorpus, seed: u64) -> Result<EncodedCorpus> {
    let (neg, pos) = corpus.class_counts()?;
    if neg == 0 || pos == 0 {
        return Err(Error::Corpus("balance needs both classes present".into()));
    }
    if neg == pos {
        return Ok(corpus.clone());
    }
    let labels = corpus.labels().unwrap();
    let (majority, keep) = if pos > neg { (1, neg) } else { (0, pos) };
    let mut majority_rows: Vec<usize> = (0..corpus.len()).filter(|&i| labels[i] == majority).collect();
    let mut rng = rng::stream(seed, "balance");
    majority_rows.shuffle(&mut rng);
    majority_rows.truncate(keep);
    let mut kept: Vec<usize> = (0..corpus.len())
        .filter(|&i| labels[i] != majority)
        .chain(majority_rows)
        .collect();
    kept.sort_unstable();
    Ok(corpus.subset(&kept))
}

/// Seeded shuffle, then split off the last `ceil(fraction * N)` rows as
/// validation.
pub fn train_val_split(corpus: &EncodedCorpus, fraction: f64, seed: u64) -> Result<(EncodedCorpus, EncodedCorpus)> {
    let n = corpus.len();
    if n < 2 {
        return Err(Error::Corpus(format!("cannot split {n} examples")));
    }
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::Corpus(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, "train-val-split");
    order.shuffle(&mut rng);
    let n_val = ((fraction * n as f64).ceil() as usize).max(1).min(n - 1);
    let val = corpus.subset(&order[n - n_val..]);
    let train = corpus.subset(&order[..n - n_val]);
    Ok((train, val))
}
