//! Vocabulary, sequence and dataset primitives shared by every other module.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;

use crate::error::{CoreError, Result};
use crate::rng::Rng;

/// Index into a [`Vocabulary`].
pub type TokenId = usize;

/// An ordered set of distinct symbols with designated BOS and EOS markers.
///
/// BOS is a decoding state only — it is never stored in a [`Sequence`].
/// EOS terminates every sequence and is stored as its last index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    bos: TokenId,
    eos: TokenId,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>, bos: TokenId, eos: TokenId) -> Result<Self> {
        let v = symbols.len();
        if v < 3 {
            return Err(CoreError::Config(format!(
                "vocabulary needs BOS, EOS and at least one content token, got {v} symbols"
            )));
        }
        if bos >= v || eos >= v || bos == eos {
            return Err(CoreError::Config(format!(
                "bos ({bos}) and eos ({eos}) must be distinct indices below {v}"
            )));
        }
        let mut index = HashMap::with_capacity(v);
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(CoreError::Config(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Vocabulary { symbols, bos, eos, index })
    }

    /// Vocabulary with `n` single-letter content tokens plus BOS/EOS.
    pub fn synthetic(n_content: usize) -> Result<Self> {
        if n_content == 0 || n_content > 26 {
            return Err(CoreError::Config(format!(
                "synthetic vocabulary supports 1..=26 content tokens, got {n_content}"
            )));
        }
        let mut symbols: Vec<String> = (0..n_content)
            .map(|i| ((b'a' + i as u8) as char).to_string())
            .collect();
        symbols.push("<bos>".to_string());
        symbols.push("<eos>".to_string());
        let bos = n_content;
        let eos = n_content + 1;
        Vocabulary::new(symbols, bos, eos)
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        &self.symbols[id]
    }

    pub fn lookup(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    /// Token ids excluding BOS and EOS, in index order.
    pub fn content_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.size()).filter(move |&t| t != self.bos && t != self.eos)
    }

    pub fn num_content_tokens(&self) -> usize {
        self.size() - 2
    }
}

/// A variable-length token-index list terminated by EOS.
///
/// Invariants enforced at construction: non-empty, ends with EOS, EOS appears
/// nowhere else, BOS appears nowhere, every index is below the vocabulary
/// size, and the total length (EOS included) does not exceed `max_len`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sequence {
    indices: Vec<TokenId>,
}

impl Sequence {
    pub fn new(indices: Vec<TokenId>, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(CoreError::InvalidSequence("empty index list".into()));
        }
        if indices.len() > max_len {
            return Err(CoreError::InvalidSequence(format!(
                "length {} exceeds max_len {max_len}",
                indices.len()
            )));
        }
        let last = *indices.last().unwrap();
        if last != vocab.eos() {
            return Err(CoreError::InvalidSequence(format!(
                "last index {last} is not EOS ({})",
                vocab.eos()
            )));
        }
        for (i, &t) in indices.iter().enumerate() {
            if t >= vocab.size() {
                return Err(CoreError::InvalidSequence(format!(
                    "index {t} at position {i} out of range (V = {})",
                    vocab.size()
                )));
            }
            if t == vocab.bos() {
                return Err(CoreError::InvalidSequence(format!(
                    "BOS stored at position {i}"
                )));
            }
            if t == vocab.eos() && i + 1 != indices.len() {
                return Err(CoreError::InvalidSequence(format!(
                    "EOS at interior position {i}"
                )));
            }
        }
        Ok(Sequence { indices })
    }

    /// Construction from indices the caller already validated (sampler-internal).
    pub(crate) fn from_validated(indices: Vec<TokenId>) -> Self {
        Sequence { indices }
    }

    pub fn indices(&self) -> &[TokenId] {
        &self.indices
    }

    /// Total length, EOS included.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        false // EOS is always present
    }

    /// Tokens before the terminal EOS.
    pub fn content(&self) -> &[TokenId] {
        &self.indices[..self.indices.len() - 1]
    }

    pub fn render(&self, vocab: &Vocabulary) -> String {
        self.content()
            .iter()
            .map(|&t| vocab.symbol(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.indices.iter().map(|t| t.to_string()).collect();
        write!(f, "[{}]", s.join(","))
    }
}

/// A sequence paired with its M objective components.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub sequence: Sequence,
    pub scores: Vec<f64>,
}

impl LabeledExample {
    pub fn new(sequence: Sequence, scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(CoreError::Config("example has no scores (M >= 1)".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(CoreError::Config("non-finite score in example".into()));
        }
        Ok(LabeledExample { sequence, scores })
    }
}

/// Splits `data` into disjoint (train, eval) parts.
///
/// |train| = round-half-up(fraction * |data|); order within each split is a
/// deterministic function of the seed.
pub fn split_dataset(
    data: &[LabeledExample],
    fraction: f64,
    rng: &mut Rng,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    if data.is_empty() {
        return Err(CoreError::EmptyInput("split_dataset"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CoreError::Config(format!(
            "split fraction must lie in (0,1), got {fraction}"
        )));
    }
    let n = data.len();
    let n_train = ((fraction * n as f64) + 0.5).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates, driven by the caller's stream.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let train = order[..n_train].iter().map(|&i| data[i].clone()).collect();
    let eval = order[n_train..].iter().map(|&i| data[i].clone()).collect();
    Ok((train, eval))
}

/// All contiguous length-k windows over the content tokens (EOS excluded).
/// Windows longer than the content yield the empty set.
pub fn kmer_set(x: &Sequence, k: usize) -> BTreeSet<Vec<TokenId>> {
    assert!(k >= 1, "kmer_set requires k >= 1");
    let content = x.content();
    if k > content.len() {
        return BTreeSet::new();
    }
    content.windows(k).map(|w| w.to_vec()).collect()
}

/// Reads a dataset file: one example per line,
/// `<space-separated content symbols>\t<comma-separated scores>`, UTF-8,
/// blank lines ignored. The terminal EOS is implicit in the file and appended
/// on load.
pub fn load_dataset(
    path: &Path,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<LabeledExample>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut num_scores: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (toks, scores) = line.split_once('\t').ok_or_else(|| CoreError::Parse {
            line: lineno,
            msg: "expected `<tokens>\\t<scores>`".into(),
        })?;
        let mut indices = Vec::new();
        for sym in toks.split_whitespace() {
            let id = vocab.lookup(sym).ok_or_else(|| CoreError::Parse {
                line: lineno,
                msg: format!("unknown token symbol {sym:?}"),
            })?;
            indices.push(id);
        }
        indices.push(vocab.eos());
        let sequence = Sequence::new(indices, vocab, max_len).map_err(|e| CoreError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let scores: Vec<f64> = scores
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| CoreError::Parse {
                    line: lineno,
                    msg: format!("bad score {s:?}"),
                })
            })
            .collect::<Result<_>>()?;
        match num_scores {
            None => num_scores = Some(scores.len()),
            Some(m) if m != scores.len() => {
                return Err(CoreError::Parse {
                    line: lineno,
                    msg: format!("expected {m} scores, got {}", scores.len()),
                });
            }
            _ => {}
        }
        out.push(LabeledExample::new(sequence, scores).map_err(|e| CoreError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, vocab: &Vocabulary, data: &[LabeledExample]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for ex in data {
        let scores: Vec<String> = ex.scores.iter().map(|s| format!("{s:.12e}")).collect();
        writeln!(file, "{}\t{}", ex.sequence.render(vocab), scores.join(","))?;
    }
    Ok(())
}
