//! The augmented trie behind the perturbed sampling distribution: it removes
//! the probability mass of already-sampled sequences and adds advantage tilt
//! to the logits of their prefixes.
//!
//! Bookkeeping is kept in the (tempered) base model's measure: every node
//! stores the base conditional of its token and the log of the removed tail
//! mass under that same base. Rows are then assembled from one consistent
//! unit system regardless of which round removed what, which is what makes
//! the sigma = 0 view equal the exactly renormalized conditional
//! p(x | x not yet sampled) after any number of rounds.

use std::fmt::Write as _;

use crate::error::{CoreError, Result};
use crate::logspace::{log_softmax_in_place, logaddexp, logdiffexp};
use crate::seq::{Sequence, TokenId, Vocabulary};
use crate::view::{sequence_logprob, SeqDist};

/// Relative remaining mass below which a node counts as exhausted.
const EXHAUSTION_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct TrieNode {
    token: TokenId,
    /// log p_base(token | parent prefix), frozen when the node is created.
    base_cond_logprob: f64,
    /// log of the total removed tail mass through this node, base measure.
    removed_logmass: f64,
    /// Sum of global advantages of every sampled sequence through this node.
    advantage_sum: f64,
    exhausted: bool,
    children: Vec<TrieNode>, // token-sorted
}

impl TrieNode {
    fn new(token: TokenId, base_cond_logprob: f64) -> Self {
        TrieNode {
            token,
            base_cond_logprob,
            removed_logmass: f64::NEG_INFINITY,
            advantage_sum: 0.0,
            exhausted: false,
            children: Vec::new(),
        }
    }

    pub fn token(&self) -> TokenId {
        self.token
    }

    pub fn base_cond_logprob(&self) -> f64 {
        self.base_cond_logprob
    }

    pub fn removed_logmass(&self) -> f64 {
        self.removed_logmass
    }

    pub fn advantage_sum(&self) -> f64 {
        self.advantage_sum
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted
    }

    fn absorb(&mut self, tail_logprob: f64, advantage: f64) {
        self.removed_logmass = logaddexp(self.removed_logmass, tail_logprob);
        self.advantage_sum += advantage;
        // Removed tails are disjoint completions, so their mass never truly
        // exceeds the node conditional; anything past it is rounding.
        let remaining = 1.0 - (self.removed_logmass - self.base_cond_logprob).exp();
        self.exhausted = remaining <= EXHAUSTION_TOL;
    }
}

/// Prefix tree over every sequence sampled so far.
#[derive(Clone, Debug, Default)]
pub struct TiltTrie {
    children: Vec<TrieNode>,
    num_sequences: usize,
}

impl TiltTrie {
    pub fn new() -> Self {
        TiltTrie::default()
    }

    pub fn num_sequences(&self) -> usize {
        self.num_sequences
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    /// Children of the node reached by `prefix`; None when the prefix leaves
    /// the trie.
    pub(crate) fn children_at(&self, prefix: &[TokenId]) -> Option<&[TrieNode]> {
        let mut children = &self.children;
        for &tok in prefix {
            let i = children.binary_search_by_key(&tok, |n| n.token).ok()?;
            children = &children[i].children;
        }
        Some(children)
    }

    /// True when the exact sequence was inserted before.
    pub fn contains(&self, x: &Sequence) -> bool {
        let idx = x.indices();
        let (last, prefix) = idx.split_last().expect("sequences are never empty");
        match self.children_at(prefix) {
            Some(children) => children.binary_search_by_key(last, |n| n.token).is_ok(),
            None => false,
        }
    }

    /// Folds one round of sampled sequences into the trie.
    ///
    /// For each sequence and each step t, the node for its length-t prefix
    /// accumulates the sequence's tail probability from step t onward
    /// (measured under `base`) into the removed mass, and the sequence's
    /// global advantage into the advantage sum. Advantages must already be
    /// mean-centered by the caller.
    pub fn insert_round<D: SeqDist + ?Sized>(
        &mut self,
        base: &D,
        samples: &[(Sequence, f64)],
    ) -> Result<()> {
        for (x, _) in samples {
            if self.contains(x) {
                return Err(CoreError::DuplicateSample(x.to_string()));
            }
        }
        // Inserting a sequence twice within a round is the same violation.
        for (i, (x, _)) in samples.iter().enumerate() {
            if samples[..i].iter().any(|(other, _)| other == x) {
                return Err(CoreError::DuplicateSample(x.to_string()));
            }
        }
        for (x, advantage) in samples {
            let idx = x.indices();
            let conds: Vec<f64> = (0..idx.len())
                .map(|t| base.next_logprobs(&idx[..t])[idx[t]])
                .collect();
            debug_assert!(
                conds.iter().all(|&c| c > f64::NEG_INFINITY),
                "sampled sequence {x} passes through a zero-probability step"
            );
            // tails[t] = log prod_{s >= t} cond[s]
            let mut tails = vec![0.0; idx.len()];
            let mut acc = 0.0;
            for t in (0..idx.len()).rev() {
                acc += conds[t];
                tails[t] = acc;
            }
            let mut children = &mut self.children;
            for t in 0..idx.len() {
                let pos = match children.binary_search_by_key(&idx[t], |n| n.token) {
                    Ok(i) => i,
                    Err(i) => {
                        children.insert(i, TrieNode::new(idx[t], conds[t]));
                        i
                    }
                };
                let node = &mut children[pos];
                node.absorb(tails[t], *advantage);
                children = &mut node.children;
            }
            self.num_sequences += 1;
        }
        Ok(())
    }

    /// Text dump: one line per node in depth-first, token-sorted order with
    /// fields depth, token symbol, base conditional log-prob, removed
    /// log-mass, advantage sum, exhausted flag.
    pub fn dump(&self, vocab: &Vocabulary) -> String {
        fn walk(nodes: &[TrieNode], depth: usize, vocab: &Vocabulary, out: &mut String) {
            for n in nodes {
                let _ = writeln!(
                    out,
                    "{depth}\t{}\t{:.12e}\t{:.12e}\t{:.12e}\t{}",
                    vocab.symbol(n.token),
                    n.base_cond_logprob,
                    n.removed_logmass,
                    n.advantage_sum,
                    n.exhausted
                );
                walk(&n.children, depth + 1, vocab, out);
            }
        }
        let mut out = String::new();
        walk(&self.children, 1, vocab, &mut out);
        out
    }
}

/// The perturbed model: base rows with sampled mass removed and advantage
/// tilt added, renormalized per row.
///
/// `base` must be the same (tempered) view the removed masses were recorded
/// against.
pub struct TiltedView<'a, D: SeqDist + ?Sized> {
    base: &'a D,
    trie: &'a TiltTrie,
    sigma: f64,
}

impl<'a, D: SeqDist + ?Sized> TiltedView<'a, D> {
    pub fn new(base: &'a D, trie: &'a TiltTrie, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(CoreError::Config(format!(
                "step size sigma must be non-negative, got {sigma}"
            )));
        }
        Ok(TiltedView { base, trie, sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

impl<D: SeqDist + ?Sized> SeqDist for TiltedView<'_, D> {
    fn vocab(&self) -> &Vocabulary {
        self.base.vocab()
    }

    fn max_len(&self) -> usize {
        self.base.max_len()
    }

    fn next_logprobs(&self, prefix: &[TokenId]) -> Vec<f64> {
        let row = self.base.next_logprobs(prefix);
        let children = match self.trie.children_at(prefix) {
            Some(c) if !c.is_empty() => c,
            // Untouched prefixes return base rows bit-identically.
            _ => return row,
        };
        let mut logits = row;
        for child in children {
            debug_assert!(
                (child.base_cond_logprob - logits[child.token]).abs() < 1e-9,
                "trie base conditional drifted from the base view"
            );
            logits[child.token] = if child.exhausted {
                f64::NEG_INFINITY
            } else {
                logdiffexp(child.base_cond_logprob, child.removed_logmass)
                    + self.sigma * child.advantage_sum
            };
        }
        log_softmax_in_place(&mut logits);
        logits
    }
}

/// Probability of `x` under a view; the product of its row conditionals.
pub fn sequence_prob_under_view<D: SeqDist + ?Sized>(view: &D, x: &Sequence) -> f64 {
    sequence_logprob(view, x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logspace::logsumexp;
    use crate::models::TabularJointModel;
    use crate::rng::Rng;
    use crate::view::enumerate_support;
    use std::collections::HashMap;

    fn random_model(seed: u64, n_content: usize, max_len: usize) -> TabularJointModel {
        let vocab = Vocabulary::synthetic(n_content).unwrap();
        let mut rng = Rng::seed_from_u64(seed);
        TabularJointModel::random(&vocab, max_len, 1, &mut rng).unwrap()
    }

    /// Independent realization of the perturbed row at one prefix, computed
    /// from raw tail products rather than the trie.
    fn oracle_row<D: SeqDist + ?Sized>(
        base: &D,
        sampled: &[(Sequence, f64)],
        prefix: &[TokenId],
        sigma: f64,
    ) -> Vec<f64> {
        let row = base.next_logprobs(prefix);
        let v = base.vocab().size();
        let mut masses = vec![0.0f64; v];
        let mut tilts = vec![0.0f64; v];
        for (tok, &lp) in row.iter().enumerate() {
            masses[tok] = lp.exp();
        }
        for (seq, adv) in sampled {
            let idx = seq.indices();
            if idx.len() <= prefix.len() || &idx[..prefix.len()] != prefix {
                continue;
            }
            let tok = idx[prefix.len()];
            // tail probability of seq after `prefix`, straight product
            let mut tail = 1.0;
            for t in prefix.len()..idx.len() {
                tail *= base.next_logprobs(&idx[..t])[idx[t]].exp();
            }
            masses[tok] -= tail;
            tilts[tok] += adv;
        }
        let mut logits: Vec<f64> = (0..v)
            .map(|tok| {
                if masses[tok] <= 1e-15 {
                    f64::NEG_INFINITY
                } else {
                    masses[tok].ln() + sigma * tilts[tok]
                }
            })
            .collect();
        log_softmax_in_place(&mut logits);
        logits
    }

    fn all_prefixes(support: &[(Sequence, f64)]) -> Vec<Vec<TokenId>> {
        let mut set = std::collections::BTreeSet::new();
        for (seq, _) in support {
            let idx = seq.indices();
            for t in 0..idx.len() {
                set.insert(idx[..t].to_vec());
            }
        }
        set.into_iter().collect()
    }

    #[test]
    fn empty_trie_is_bit_identical_to_base() {
        let model = random_model(1, 3, 5);
        let trie = TiltTrie::new();
        let view = TiltedView::new(&model, &trie, 1.0).unwrap();
        for prefix in [vec![], vec![0], vec![2, 1]] {
            assert_eq!(view.next_logprobs(&prefix), model.next_logprobs(&prefix));
        }
    }

    #[test]
    fn single_sequence_node_bookkeeping() {
        // Node R must equal the tail conditional mass, A the advantage.
        let model = random_model(2, 2, 5);
        let seq = {
            let support = enumerate_support(&model, 10_000).unwrap();
            support
                .into_iter()
                .find(|(s, _)| s.len() == 3)
                .map(|(s, _)| s)
                .unwrap()
        };
        let mut trie = TiltTrie::new();
        trie.insert_round(&model, &[(seq.clone(), 0.7)]).unwrap();
        let idx = seq.indices();
        for t in 0..idx.len() {
            let children = trie.children_at(&idx[..t]).unwrap();
            let node = children
                .iter()
                .find(|n| n.token() == idx[t])
                .expect("node on sampled path");
            let mut tail = 0.0;
            for s in t..idx.len() {
                tail += model.next_logprobs(&idx[..s])[idx[s]];
            }
            assert!((node.removed_logmass() - tail).abs() < 1e-12);
            assert!((node.advantage_sum() - 0.7).abs() < 1e-15);
            let base = model.next_logprobs(&idx[..t])[idx[t]];
            assert!(node.removed_logmass() <= base + 1e-12);
        }
        // The leaf (full sequence) is exhausted, so its probability is zero.
        let view = TiltedView::new(&model, &trie, 1.0).unwrap();
        assert_eq!(sequence_prob_under_view(&view, &seq), 0.0);
        assert!(trie.contains(&seq));
    }

    #[test]
    fn shared_prefix_accumulates_both_tails_and_advantages() {
        let vocab = Vocabulary::synthetic(3).unwrap();
        let mut rng = Rng::seed_from_u64(5);
        let model = TabularJointModel::random(&vocab, 5, 1, &mut rng).unwrap();
        let (a, b) = (0usize, 1usize);
        let eos = vocab.eos();
        let x1 = Sequence::new(vec![a, eos], &vocab, 5).unwrap();
        let x2 = Sequence::new(vec![a, b, eos], &vocab, 5).unwrap();
        let mut trie = TiltTrie::new();
        trie.insert_round(&model, &[(x1.clone(), 0.3), (x2.clone(), -0.3)])
            .unwrap();
        let node_a = trie
            .children_at(&[])
            .unwrap()
            .iter()
            .find(|n| n.token() == a)
            .unwrap();
        let q1 = sequence_prob_under_view(&model, &x1);
        let q2 = sequence_prob_under_view(&model, &x2);
        assert!((node_a.removed_logmass().exp() - (q1 + q2)).abs() < 1e-12);
        assert!(node_a.advantage_sum().abs() < 1e-15); // 0.3 - 0.3
    }

    #[test]
    fn duplicate_insert_is_rejected() {
        let model = random_model(3, 2, 4);
        let vocab = model.vocab().clone();
        let seq = Sequence::new(vec![0, vocab.eos()], &vocab, 4).unwrap();
        let mut trie = TiltTrie::new();
        trie.insert_round(&model, &[(seq.clone(), 0.0)]).unwrap();
        match trie.insert_round(&model, &[(seq.clone(), 0.0)]) {
            Err(CoreError::DuplicateSample(_)) => {}
            other => panic!("expected duplicate error, got {other:?}"),
        }
        // within one round as well
        let mut trie = TiltTrie::new();
        let dup = vec![(seq.clone(), 0.0), (seq, 0.0)];
        assert!(matches!(
            trie.insert_round(&model, &dup),
            Err(CoreError::DuplicateSample(_))
        ));
    }

    #[test]
    fn sigma_zero_view_is_the_exact_renormalized_conditional() {
        // Multi-round removal on a tiny space, checked sequence by sequence
        // against base(x) / (1 - sum of removed base mass).
        let model = random_model(4, 2, 5); // |V|=4, T_max=5
        let support = enumerate_support(&model, 10_000).unwrap();
        let probs: HashMap<Sequence, f64> =
            support.iter().map(|(s, lp)| (s.clone(), lp.exp())).collect();
        let mut rng = Rng::seed_from_u64(17);
        use rand::Rng as _;

        let mut trie = TiltTrie::new();
        let mut removed: Vec<Sequence> = Vec::new();
        let mut order: Vec<usize> = (0..support.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        // three rounds of different sizes
        let mut cursor = 0;
        for round_size in [3usize, 5, 7] {
            let batch: Vec<(Sequence, f64)> = order[cursor..cursor + round_size]
                .iter()
                .map(|&i| (support[i].0.clone(), 0.0))
                .collect();
            cursor += round_size;
            trie.insert_round(&model, &batch).unwrap();
            removed.extend(batch.into_iter().map(|(s, _)| s));

            let view = TiltedView::new(&model, &trie, 0.0).unwrap();
            let removed_mass: f64 = removed.iter().map(|s| probs[s]).sum();
            for (seq, lp) in &support {
                let got = sequence_prob_under_view(&view, seq);
                let want = if removed.contains(seq) {
                    0.0
                } else {
                    lp.exp() / (1.0 - removed_mass)
                };
                assert!(
                    (got - want).abs() < 1e-9,
                    "{seq}: got {got}, want {want} after {} removals",
                    removed.len()
                );
            }
        }
    }

    #[test]
    fn tilted_view_matches_independent_enumeration() {
        // sigma > 0, advantages attached, every prefix row compared against
        // the direct per-prefix reconstruction.
        for seed in 0..5 {
            let model = random_model(100 + seed, 2, 5);
            let support = enumerate_support(&model, 10_000).unwrap();
            let mut rng = Rng::seed_from_u64(seed);
            use rand::Rng as _;
            let mut sampled: Vec<(Sequence, f64)> = Vec::new();
            let mut taken = std::collections::HashSet::new();
            while sampled.len() < 4 {
                let i = rng.gen_range(0..support.len());
                if taken.insert(i) {
                    sampled.push((support[i].0.clone(), rng.gen_range(-1.0..1.0)));
                }
            }
            // center advantages like a real round
            let mu: f64 = sampled.iter().map(|(_, a)| *a).sum::<f64>() / sampled.len() as f64;
            for (_, a) in sampled.iter_mut() {
                *a -= mu;
            }
            let mut trie = TiltTrie::new();
            trie.insert_round(&model, &sampled).unwrap();
            let sigma = 1.0;
            let view = TiltedView::new(&model, &trie, sigma).unwrap();
            for prefix in all_prefixes(&support) {
                let got = view.next_logprobs(&prefix);
                let want = oracle_row(&model, &sampled, &prefix, sigma);
                for (g, w) in got.iter().zip(&want) {
                    if *w == f64::NEG_INFINITY {
                        assert!(g.exp() < 1e-9, "seed {seed} prefix {prefix:?}");
                    } else {
                        assert!(
                            (g - w).abs() < 1e-9,
                            "seed {seed} prefix {prefix:?}: {got:?} vs {want:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn view_probabilities_always_sum_to_one() {
        let model = random_model(8, 2, 5);
        let support = enumerate_support(&model, 10_000).unwrap();
        let mut trie = TiltTrie::new();
        let sampled: Vec<(Sequence, f64)> = support
            .iter()
            .step_by(3)
            .take(6)
            .enumerate()
            .map(|(i, (s, _))| (s.clone(), (i as f64) - 2.5))
            .collect();
        let centered: Vec<(Sequence, f64)> = {
            let mu: f64 = sampled.iter().map(|(_, a)| *a).sum::<f64>() / sampled.len() as f64;
            sampled.into_iter().map(|(s, a)| (s, a - mu)).collect()
        };
        trie.insert_round(&model, &centered).unwrap();
        for sigma in [0.0, 0.5, 1.5] {
            let view = TiltedView::new(&model, &trie, sigma).unwrap();
            let lps: Vec<f64> = enumerate_support(&view, 10_000)
                .unwrap()
                .into_iter()
                .map(|(_, lp)| lp)
                .collect();
            assert!(
                logsumexp(&lps).abs() < 1e-9,
                "sigma {sigma}: total mass {}",
                logsumexp(&lps).exp()
            );
        }
    }

    #[test]
    fn monotone_tilt_favors_positive_advantage() {
        // Two children under the root, one with positive advantage; raising
        // sigma must strictly raise its post-softmax probability relative to
        // an untouched sibling.
        let vocab = Vocabulary::synthetic(3).unwrap();
        let mut rng = Rng::seed_from_u64(2);
        let model = TabularJointModel::random(&vocab, 4, 1, &mut rng).unwrap();
        let eos = vocab.eos();
        let plus = Sequence::new(vec![0, 0, eos], &vocab, 4).unwrap();
        let minus = Sequence::new(vec![1, 1, eos], &vocab, 4).unwrap();
        let mut trie = TiltTrie::new();
        trie.insert_round(&model, &[(plus, 0.8), (minus, -0.8)]).unwrap();
        let ratio = |sigma: f64| {
            let view = TiltedView::new(&model, &trie, sigma).unwrap();
            let row = view.next_logprobs(&[]);
            row[0] - row[2] // token a (tilted +) vs token c (untouched)
        };
        let mut last = ratio(0.0);
        for sigma in [0.5, 1.0, 2.0] {
            let next = ratio(sigma);
            assert!(next > last, "tilt not monotone at sigma {sigma}");
            last = next;
        }
    }

    #[test]
    fn zero_advantages_reduce_to_pure_mass_removal() {
        let model = random_model(6, 2, 5);
        let support = enumerate_support(&model, 10_000).unwrap();
        let sampled: Vec<(Sequence, f64)> = support
            .iter()
            .take(4)
            .map(|(s, _)| (s.clone(), 0.0))
            .collect();
        let mut trie = TiltTrie::new();
        trie.insert_round(&model, &sampled).unwrap();
        let plain = TiltedView::new(&model, &trie, 0.0).unwrap();
        for sigma in [0.25, 1.0, 1.75] {
            let view = TiltedView::new(&model, &trie, sigma).unwrap();
            for prefix in all_prefixes(&support) {
                let a = view.next_logprobs(&prefix);
                let b = plain.next_logprobs(&prefix);
                for (x, y) in a.iter().zip(&b) {
                    assert!(
                        (x - y).abs() < 1e-12
                            || (*x == f64::NEG_INFINITY && *y == f64::NEG_INFINITY)
                    );
                }
            }
        }
    }

    #[test]
    fn no_nan_anywhere_after_heavy_removal() {
        // Remove the entire support, then probe every row.
        let model = random_model(9, 2, 4);
        let support = enumerate_support(&model, 10_000).unwrap();
        let sampled: Vec<(Sequence, f64)> = support
            .iter()
            .map(|(s, _)| (s.clone(), 0.1))
            .collect();
        let mut trie = TiltTrie::new();
        trie.insert_round(&model, &sampled).unwrap();
        let view = TiltedView::new(&model, &trie, 1.0).unwrap();
        for prefix in all_prefixes(&support) {
            for x in view.next_logprobs(&prefix) {
                assert!(!x.is_nan());
            }
        }
        // every sampled sequence now has probability exactly zero
        for (seq, _) in &sampled {
            assert_eq!(sequence_prob_under_view(&view, seq), 0.0);
        }
    }

    #[test]
    fn dump_lists_every_node_once() {
        let model = random_model(10, 2, 4);
        let vocab = model.vocab().clone();
        let support = enumerate_support(&model, 10_000).unwrap();
        let sampled: Vec<(Sequence, f64)> = support
            .iter()
            .take(3)
            .map(|(s, _)| (s.clone(), 0.0))
            .collect();
        let mut trie = TiltTrie::new();
        trie.insert_round(&model, &sampled).unwrap();
        let dump = trie.dump(&vocab);
        let total_nodes: usize = dump.lines().count();
        let mut unique_prefixes = std::collections::HashSet::new();
        for (seq, _) in &sampled {
            let idx = seq.indices();
            for t in 1..=idx.len() {
                unique_prefixes.insert(idx[..t].to_vec());
            }
        }
        assert_eq!(total_nodes, unique_prefixes.len());
        for line in dump.lines() {
            assert_eq!(line.split('\t').count(), 6);
        }
    }
}
