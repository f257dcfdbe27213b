//! Stochastic beam search: K distinct sequences drawn without replacement
//! from any model view via the Gumbel-Top-k trick, propagating conditioned
//! Gumbel keys top-down through the prefix tree.

use rand::Rng as _;

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::seq::{Sequence, TokenId};
use crate::view::{SeqDist, TemperedView};

/// One live or completed hypothesis on the beam.
#[derive(Clone, Debug)]
pub struct BeamItem {
    pub prefix: Vec<TokenId>,
    /// Cumulative log-probability under the sampled-from view (<= 0).
    pub logprob: f64,
    /// Conditioned Gumbel key; the beam keeps the K largest.
    pub key: f64,
    pub completed: bool,
}

/// Distinct completed sequences with their view log-probabilities and keys,
/// sorted by key descending.
#[derive(Clone, Debug)]
pub struct SbsResult {
    pub sequences: Vec<Sequence>,
    pub logprobs: Vec<f64>,
    pub keys: Vec<f64>,
    /// Set when the view's support held fewer than K sequences.
    pub truncated: bool,
    /// Number of next_logprobs calls spent (the linear-cost contract).
    pub model_evals: usize,
}

/// Standard Gumbel(0) variate. u == 0 is nudged to the smallest positive
/// double; the resulting far-negative key simply never wins.
fn sample_gumbel(rng: &mut Rng) -> f64 {
    let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

/// Shifts child Gumbels so their maximum equals the parent key.
///
/// Given independent G'_j with observed maximum Z and a target maximum T,
/// returns G_j = -log(exp(-T) - exp(-Z) + exp(-G'_j)), evaluated stably as
///   v   = T - G'_j + log1p(-exp(G'_j - Z))
///   G_j = T - max(v, 0) - log1p(exp(-|v|))
/// The argmax child (G'_j = Z) maps to exactly T.
fn shift_to_max(g: f64, z: f64, target: f64) -> f64 {
    if g == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if g >= z {
        return target;
    }
    let v = target - g + (-((g - z).exp())).ln_1p();
    target - v.max(0.0) - (-v.abs()).exp().ln_1p()
}

/// Draws K distinct completed sequences without replacement from the
/// tau-tempered view.
///
/// Cost: one view evaluation per live beam item per depth, so at most
/// K * max_len evaluations in total. If the support holds fewer than K
/// sequences, all of them are returned and `truncated` is set.
pub fn sbs_sample<D: SeqDist + ?Sized>(
    view: &D,
    k: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<SbsResult> {
    if k == 0 {
        return Err(CoreError::Config("beam width K must be at least 1".into()));
    }
    if temperature == 1.0 {
        sbs_core(view, k, rng)
    } else {
        let tempered = TemperedView::new(view, temperature)?;
        sbs_core(&tempered, k, rng)
    }
}

fn sbs_core<D: SeqDist + ?Sized>(view: &D, k: usize, rng: &mut Rng) -> Result<SbsResult> {
    let vocab = view.vocab();
    let eos = vocab.eos();
    let mut evals = 0usize;
    let mut frontier: Vec<BeamItem> = vec![BeamItem {
        prefix: Vec::new(),
        logprob: 0.0,
        key: sample_gumbel(rng),
        completed: false,
    }];

    while frontier.iter().any(|item| !item.completed) {
        let mut candidates: Vec<BeamItem> = Vec::with_capacity(frontier.len() * vocab.size());
        // Completed items keep competing on their frozen keys.
        for item in &frontier {
            if item.completed {
                candidates.push(item.clone());
            }
        }
        // Expansion order is fixed (the frontier stays sorted), so the Gumbel
        // stream is reproducible.
        for item in frontier.iter().filter(|i| !i.completed) {
            let row = view.next_logprobs(&item.prefix);
            evals += 1;
            // Independent Gumbels for every child, then conditioned so their
            // maximum equals the parent key.
            let perturbed: Vec<f64> = row
                .iter()
                .map(|&lp| {
                    let g = sample_gumbel(rng);
                    if lp == f64::NEG_INFINITY {
                        f64::NEG_INFINITY
                    } else {
                        item.logprob + lp + g
                    }
                })
                .collect();
            let z = perturbed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if z == f64::NEG_INFINITY {
                continue; // fully removed row: dead branch
            }
            for (tok, &g) in perturbed.iter().enumerate() {
                if g == f64::NEG_INFINITY {
                    continue;
                }
                let mut prefix = item.prefix.clone();
                prefix.push(tok);
                candidates.push(BeamItem {
                    logprob: item.logprob + row[tok],
                    key: shift_to_max(g, z, item.key),
                    completed: tok == eos,
                    prefix,
                });
            }
        }
        // Keep the global top-K keys; ties break lexicographically.
        candidates.sort_by(|a, b| {
            b.key
                .partial_cmp(&a.key)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.prefix.cmp(&b.prefix))
        });
        candidates.truncate(k);
        frontier = candidates;
        if frontier.is_empty() {
            break;
        }
    }

    let truncated = frontier.len() < k;
    let mut sequences = Vec::with_capacity(frontier.len());
    let mut logprobs = Vec::with_capacity(frontier.len());
    let mut keys = Vec::with_capacity(frontier.len());
    for item in frontier {
        sequences.push(Sequence::from_validated(item.prefix));
        logprobs.push(item.logprob);
        keys.push(item.key);
    }
    Ok(SbsResult { sequences, logprobs, keys, truncated, model_evals: evals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::TabularJointModel;
    use crate::seq::Vocabulary;
    use crate::view::{enumerate_support, CountingView};
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    use std::collections::HashMap;

    fn random_model(seed: u64, n_content: usize, max_len: usize) -> TabularJointModel {
        let vocab = Vocabulary::synthetic(n_content).unwrap();
        let mut rng = Rng::seed_from_u64(seed);
        TabularJointModel::random(&vocab, max_len, 1, &mut rng).unwrap()
    }

    fn chi_square_p(counts: &HashMap<Sequence, usize>, support: &[(Sequence, f64)], trials: usize) -> f64 {
        let mut chi2 = 0.0;
        for (seq, lp) in support {
            let expected = lp.exp() * trials as f64;
            let observed = *counts.get(seq).unwrap_or(&0) as f64;
            chi2 += (observed - expected) * (observed - expected) / expected;
        }
        let dof = (support.len() - 1) as f64;
        1.0 - ChiSquared::new(dof).unwrap().cdf(chi2)
    }

    #[test]
    fn outputs_are_distinct_across_many_random_views() {
        for trial in 0..300 {
            let model = random_model(trial, 2, 4);
            let mut rng = Rng::seed_from_u64(trial ^ 0x5eed);
            let k = 1 + (trial as usize % 6);
            let res = sbs_sample(&model, k, 1.0, &mut rng).unwrap();
            let mut seen = std::collections::HashSet::new();
            for s in &res.sequences {
                assert!(seen.insert(s.clone()), "duplicate in trial {trial}");
            }
        }
    }

    #[test]
    fn exhausts_support_exactly_when_k_equals_support() {
        let model = random_model(7, 2, 4);
        let support = enumerate_support(&model, 10_000).unwrap();
        let k = support.len();
        let mut rng = Rng::seed_from_u64(1);
        let res = sbs_sample(&model, k, 1.0, &mut rng).unwrap();
        assert!(!res.truncated);
        assert_eq!(res.sequences.len(), k);
        let mut got: Vec<_> = res.sequences.clone();
        got.sort();
        let mut want: Vec<_> = support.into_iter().map(|(s, _)| s).collect();
        want.sort();
        assert_eq!(got, want);

        // Asking for more than the support yields everything plus the flag.
        let mut rng = Rng::seed_from_u64(2);
        let res = sbs_sample(&model, k + 3, 1.0, &mut rng).unwrap();
        assert!(res.truncated);
        assert_eq!(res.sequences.len(), k);
    }

    #[test]
    fn deterministic_view_always_returns_its_sequence() {
        let vocab = Vocabulary::synthetic(2).unwrap();
        let mut rows = HashMap::new();
        let mut row = vec![0.0; 4];
        row[0] = 1.0;
        rows.insert(Vec::new(), row);
        let mut row_a = vec![0.0; 4];
        row_a[vocab.eos()] = 1.0;
        rows.insert(vec![0], row_a);
        let model = TabularJointModel::new(vocab.clone(), 6, 1, rows).unwrap();
        for seed in 0..20 {
            let mut rng = Rng::seed_from_u64(seed);
            let res = sbs_sample(&model, 1, 1.0, &mut rng).unwrap();
            assert_eq!(res.sequences[0].indices(), &[0, vocab.eos()]);
            assert!((res.logprobs[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn reported_logprob_matches_view_and_keys_decrease() {
        let model = random_model(11, 3, 5);
        let mut rng = Rng::seed_from_u64(3);
        let res = sbs_sample(&model, 5, 1.0, &mut rng).unwrap();
        for (seq, lp) in res.sequences.iter().zip(&res.logprobs) {
            let direct = crate::view::sequence_logprob(&model, seq);
            assert!((direct - lp).abs() < 1e-12);
            assert!(*lp <= 0.0);
        }
        for w in res.keys.windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn k1_marginal_matches_enumeration_chi_square() {
        let model = random_model(5, 2, 4); // |V|=4, T_max=4
        let support = enumerate_support(&model, 10_000).unwrap();
        let mut counts: HashMap<Sequence, usize> = HashMap::new();
        let trials = 10_000;
        let mut rng = Rng::seed_from_u64(0xbeef);
        for _ in 0..trials {
            let res = sbs_sample(&model, 1, 1.0, &mut rng).unwrap();
            *counts.entry(res.sequences[0].clone()).or_default() += 1;
        }
        let p = chi_square_p(&counts, &support, trials);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn highest_key_output_is_an_exact_sample() {
        // The max-key output of a K=3 draw must still follow the view.
        let model = random_model(6, 2, 3);
        let support = enumerate_support(&model, 10_000).unwrap();
        let mut counts: HashMap<Sequence, usize> = HashMap::new();
        let trials = 10_000;
        let mut rng = Rng::seed_from_u64(0xfeed);
        for _ in 0..trials {
            let res = sbs_sample(&model, 3, 1.0, &mut rng).unwrap();
            *counts.entry(res.sequences[0].clone()).or_default() += 1;
        }
        let p = chi_square_p(&counts, &support, trials);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn zero_temperature_limit_returns_top_probability_sequences() {
        // Temperature applies per row, so the tau -> 0 limit concentrates on
        // the top sequences of the tempered measure; enumerate that measure
        // as the oracle.
        let model = random_model(9, 3, 5);
        let tau = 1e-6;
        let tempered = crate::view::TemperedView::new(&model, tau).unwrap();
        let mut support = enumerate_support(&tempered, 10_000).unwrap();
        support.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut want: Vec<&Sequence> = support.iter().take(2).map(|(s, _)| s).collect();
        want.sort();
        for seed in 0..10 {
            let mut rng = Rng::seed_from_u64(seed);
            let res = sbs_sample(&model, 2, tau, &mut rng).unwrap();
            let mut got: Vec<&Sequence> = res.sequences.iter().collect();
            got.sort();
            assert_eq!(got, want, "seed {seed}");
        }
    }

    #[test]
    fn evaluation_cost_is_linear() {
        let model = random_model(13, 4, 8);
        for k in [1usize, 4, 16] {
            let counting = CountingView::new(&model);
            let mut rng = Rng::seed_from_u64(99);
            let res = sbs_sample(&counting, k, 1.0, &mut rng).unwrap();
            assert_eq!(res.model_evals as u64, counting.evals());
            assert!(
                res.model_evals <= k * 8,
                "K={k}: {} evals exceeds K*T_max",
                res.model_evals
            );
        }
    }

    #[test]
    fn rejects_zero_beam_width() {
        let model = random_model(1, 2, 3);
        let mut rng = Rng::seed_from_u64(0);
        assert!(sbs_sample(&model, 0, 1.0, &mut rng).is_err());
    }
}
