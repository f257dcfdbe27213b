//! Exact tabular backend: explicit conditional tables, used as the ground
//! truth in every enumeration-based check.

use std::collections::{HashMap, HashSet, VecDeque};

use rand::Rng as _;

use crate::error::{CoreError, Result};
use crate::models::JointModel;
use crate::rng::Rng;
use crate::seq::{Sequence, TokenId, Vocabulary};
use crate::view::{at_length_cap, eos_only_row, SeqDist};

const ROW_SUM_TOL: f64 = 1e-12;

/// Joint model backed by explicit probability tables.
///
/// Conditionals are keyed by the last `order` tokens of the prefix; scores by
/// the full sequence, falling back to `default_score` for sequences not in
/// the table.
#[derive(Clone, Debug)]
pub struct TabularJointModel {
    vocab: Vocabulary,
    max_len: usize,
    order: usize,
    rows: HashMap<Vec<TokenId>, Vec<f64>>,
    scores: HashMap<Vec<TokenId>, Vec<f64>>,
    default_score: Vec<f64>,
    num_objectives: usize,
}

impl TabularJointModel {
    pub fn new(
        vocab: Vocabulary,
        max_len: usize,
        order: usize,
        rows: HashMap<Vec<TokenId>, Vec<f64>>,
    ) -> Result<Self> {
        if max_len < 1 {
            return Err(CoreError::Config("max_len must be at least 1".into()));
        }
        let v = vocab.size();
        for (ctx, row) in &rows {
            if row.len() != v {
                return Err(CoreError::Config(format!(
                    "row for context {ctx:?} has length {}, expected {v}",
                    row.len()
                )));
            }
            if row.iter().any(|&p| !(0.0..=1.0 + ROW_SUM_TOL).contains(&p)) {
                return Err(CoreError::Config(format!(
                    "row for context {ctx:?} has entries outside [0,1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(CoreError::Config(format!(
                    "row for context {ctx:?} sums to {sum}, expected 1"
                )));
            }
        }
        let model = TabularJointModel {
            vocab,
            max_len,
            order,
            rows,
            scores: HashMap::new(),
            default_score: vec![0.0],
            num_objectives: 1,
        };
        model.check_reachable_rows()?;
        Ok(model)
    }

    /// Every context reachable with positive probability must have a row.
    fn check_reachable_rows(&self) -> Result<()> {
        let eos = self.vocab.eos();
        let mut seen: HashSet<Vec<TokenId>> = HashSet::new();
        let mut queue: VecDeque<(Vec<TokenId>, usize)> = VecDeque::new();
        queue.push_back((Vec::new(), 0));
        seen.insert(Vec::new());
        while let Some((ctx, depth)) = queue.pop_front() {
            if at_length_cap(depth, self.max_len) {
                continue; // EOS is forced here; no row needed
            }
            let row = self.rows.get(&ctx).ok_or_else(|| {
                CoreError::Config(format!("reachable context {ctx:?} has no row"))
            })?;
            for (tok, &p) in row.iter().enumerate() {
                if p <= 0.0 || tok == eos {
                    continue;
                }
                let mut child = ctx.clone();
                child.push(tok);
                if child.len() > self.order {
                    child.remove(0);
                }
                if seen.insert(child.clone()) {
                    queue.push_back((child, depth + 1));
                }
            }
        }
        Ok(())
    }

    /// Single shared row, uniform over all V tokens (BOS included).
    pub fn uniform_over_all(vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let v = vocab.size();
        let mut rows = HashMap::new();
        rows.insert(Vec::new(), vec![1.0 / v as f64; v]);
        TabularJointModel::new(vocab.clone(), max_len, 0, rows)
    }

    /// Random model of the given context order: every reachable context gets a
    /// random row over content tokens and EOS (BOS mass is zero), with at
    /// least `eos_floor` probability on EOS so short sequences stay likely.
    pub fn random(vocab: &Vocabulary, max_len: usize, order: usize, rng: &mut Rng) -> Result<Self> {
        Self::random_with_eos_floor(vocab, max_len, order, 0.15, rng)
    }

    pub fn random_with_eos_floor(
        vocab: &Vocabulary,
        max_len: usize,
        order: usize,
        eos_floor: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let v = vocab.size();
        let mut rows = HashMap::new();
        let mut contexts: Vec<Vec<TokenId>> = vec![Vec::new()];
        let content: Vec<TokenId> = vocab.content_tokens().collect();
        let mut depth = 0;
        while depth < order && depth + 1 < max_len {
            let mut next = Vec::new();
            for ctx in contexts.iter().filter(|c| c.len() == depth) {
                for &t in &content {
                    let mut child = ctx.clone();
                    child.push(t);
                    next.push(child);
                }
            }
            contexts.extend(next);
            depth += 1;
        }
        // Contexts of full order stand for every longer prefix; shorter ones
        // only occur near the start of a sequence.
        for ctx in contexts {
            let mut row = vec![0.0; v];
            let mut total = 0.0;
            for &t in &content {
                let w: f64 = rng.gen_range(0.05..1.0);
                row[t] = w;
                total += w;
            }
            for &t in &content {
                row[t] = row[t] / total * (1.0 - eos_floor);
            }
            row[vocab.eos()] = eos_floor;
            rows.insert(ctx, row);
        }
        TabularJointModel::new(vocab.clone(), max_len, order, rows)
    }

    pub fn set_score(&mut self, x: &Sequence, score: Vec<f64>) -> Result<()> {
        if score.len() != self.num_objectives {
            if self.scores.is_empty() {
                self.num_objectives = score.len();
                self.default_score = vec![0.0; score.len()];
            } else {
                return Err(CoreError::Config(format!(
                    "score has {} components, table holds {}",
                    score.len(),
                    self.num_objectives
                )));
            }
        }
        self.scores.insert(x.indices().to_vec(), score);
        Ok(())
    }

    /// Assigns a score to every sequence in the support via `f`.
    pub fn score_support_with(&mut self, f: impl Fn(&Sequence) -> f64, limit: usize) -> Result<()> {
        let support = crate::view::enumerate_support(self, limit)?;
        for (seq, _) in support {
            let s = f(&seq);
            self.set_score(&seq, vec![s])?;
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub(crate) fn rows(&self) -> &HashMap<Vec<TokenId>, Vec<f64>> {
        &self.rows
    }

    pub(crate) fn score_table(&self) -> &HashMap<Vec<TokenId>, Vec<f64>> {
        &self.scores
    }

    fn context<'p>(&self, prefix: &'p [TokenId]) -> &'p [TokenId] {
        let start = prefix.len().saturating_sub(self.order);
        &prefix[start..]
    }
}

impl SeqDist for TabularJointModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn next_logprobs(&self, prefix: &[TokenId]) -> Vec<f64> {
        if at_length_cap(prefix.len(), self.max_len) {
            return eos_only_row(&self.vocab);
        }
        let ctx = self.context(prefix);
        let row = self
            .rows
            .get(ctx)
            .unwrap_or_else(|| panic!("no row for reachable context {ctx:?}"));
        row.iter()
            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect()
    }
}

impl JointModel for TabularJointModel {
    fn predict(&self, x: &Sequence) -> Vec<f64> {
        self.scores
            .get(x.indices())
            .unwrap_or(&self.default_score)
            .clone()
    }

    fn num_objectives(&self) -> usize {
        self.num_objectives
    }
}
