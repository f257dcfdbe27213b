//! Model views: the common interface every sampler consumes, plus the
//! temperature wrapper and exhaustive enumeration used by the test oracles.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{CoreError, Result};
use crate::logspace::log_softmax_in_place;
use crate::seq::{Sequence, TokenId, Vocabulary};

/// A distribution over EOS-terminated sequences exposed through next-token
/// conditionals.
///
/// The probability space is truncated at `max_len`: when a prefix has
/// `max_len - 1` tokens the row places all mass on EOS, so every view is a
/// proper distribution over the finite space of sequences of length at most
/// `max_len`. Implementations must return rows that exponentiate and sum to 1
/// (within 1e-9) unless their entire mass has been removed.
pub trait SeqDist {
    fn vocab(&self) -> &Vocabulary;

    /// Maximum sequence length, terminal EOS included.
    fn max_len(&self) -> usize;

    /// log P(next token | prefix), a length-V vector.
    fn next_logprobs(&self, prefix: &[TokenId]) -> Vec<f64>;
}

/// Row with all mass on EOS, used by models at the length cap.
pub fn eos_only_row(vocab: &Vocabulary) -> Vec<f64> {
    let mut row = vec![f64::NEG_INFINITY; vocab.size()];
    row[vocab.eos()] = 0.0;
    row
}

/// True when the next token is forced to EOS by the length cap.
pub fn at_length_cap(prefix_len: usize, max_len: usize) -> bool {
    prefix_len + 1 >= max_len
}

/// log P(x) under a view: the sum of next-token conditionals along `x`,
/// EOS step included. Removed or impossible steps contribute -inf.
pub fn sequence_logprob<D: SeqDist + ?Sized>(view: &D, x: &Sequence) -> f64 {
    let mut total = 0.0;
    let indices = x.indices();
    for t in 0..indices.len() {
        let row = view.next_logprobs(&indices[..t]);
        total += row[indices[t]];
        if total == f64::NEG_INFINITY {
            break;
        }
    }
    total
}

/// Applies temperature to a view's logits: softmax(logprobs / tau).
///
/// tau = 1 returns the base rows bit-identically.
pub struct TemperedView<'a, D: SeqDist + ?Sized> {
    base: &'a D,
    tau: f64,
}

impl<'a, D: SeqDist + ?Sized> TemperedView<'a, D> {
    pub fn new(base: &'a D, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(CoreError::Config(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        Ok(TemperedView { base, tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

impl<D: SeqDist + ?Sized> SeqDist for TemperedView<'_, D> {
    fn vocab(&self) -> &Vocabulary {
        self.base.vocab()
    }

    fn max_len(&self) -> usize {
        self.base.max_len()
    }

    fn next_logprobs(&self, prefix: &[TokenId]) -> Vec<f64> {
        let mut row = self.base.next_logprobs(prefix);
        if self.tau == 1.0 {
            return row;
        }
        for x in row.iter_mut() {
            *x /= self.tau;
        }
        log_softmax_in_place(&mut row);
        row
    }
}

/// Counts model evaluations; used by the sampling cost contracts.
pub struct CountingView<'a, D: SeqDist + ?Sized> {
    inner: &'a D,
    evals: AtomicU64,
}

impl<'a, D: SeqDist + ?Sized> CountingView<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        CountingView { inner, evals: AtomicU64::new(0) }
    }

    pub fn evals(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }
}

impl<D: SeqDist + ?Sized> SeqDist for CountingView<'_, D> {
    fn vocab(&self) -> &Vocabulary {
        self.inner.vocab()
    }

    fn max_len(&self) -> usize {
        self.inner.max_len()
    }

    fn next_logprobs(&self, prefix: &[TokenId]) -> Vec<f64> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.inner.next_logprobs(prefix)
    }
}

/// Exhaustively enumerates the support of a view, returning each sequence with
/// its log-probability in lexicographic order. Zero-probability branches are
/// pruned. Errors once more than `limit` sequences have been produced.
pub fn enumerate_support<D: SeqDist + ?Sized>(
    view: &D,
    limit: usize,
) -> Result<Vec<(Sequence, f64)>> {
    enumerate_completions(view, &[], limit)
}

/// Enumerates every completion of `prefix`, with log-probabilities
/// conditional on the prefix.
pub fn enumerate_completions<D: SeqDist + ?Sized>(
    view: &D,
    prefix: &[TokenId],
    limit: usize,
) -> Result<Vec<(Sequence, f64)>> {
    let mut out = Vec::new();
    let mut prefix = prefix.to_vec();
    dfs(view, &mut prefix, 0.0, limit, &mut out)?;
    Ok(out)
}

fn dfs<D: SeqDist + ?Sized>(
    view: &D,
    prefix: &mut Vec<TokenId>,
    logp: f64,
    limit: usize,
    out: &mut Vec<(Sequence, f64)>,
) -> Result<()> {
    let row = view.next_logprobs(prefix);
    let eos = view.vocab().eos();
    for (tok, &lp) in row.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        if tok == eos {
            if out.len() >= limit {
                return Err(CoreError::EnumerationTooLarge { limit });
            }
            let mut indices = prefix.clone();
            indices.push(eos);
            out.push((Sequence::from_validated(indices), logp + lp));
        } else {
            prefix.push(tok);
            dfs(view, prefix, logp + lp, limit, out)?;
            prefix.pop();
        }
    }
    Ok(())
}
