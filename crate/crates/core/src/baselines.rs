//! Comparison baselines: Best-of-N rejection sampling and a minimal
//! REINVENT-style policy-gradient fine-tuner, with an exact check of the
//! identity tying its squared-loss gradient to the KL-regularized policy
//! gradient.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::jsi::ScoreFn;
use crate::logspace::log_softmax_in_place;
use crate::models::NeuralJointModel;
use crate::rng::Rng;
use crate::seq::{Sequence, TokenId, Vocabulary};
use crate::view::{at_length_cap, eos_only_row, sequence_logprob, SeqDist, TemperedView};

/// One i.i.d. ancestral draw (with replacement) from the tau-tempered view.
pub fn ancestral_sample<D: SeqDist + ?Sized>(
    view: &D,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Sequence> {
    let tempered = TemperedView::new(view, temperature)?;
    let eos = view.vocab().eos();
    let mut prefix: Vec<TokenId> = Vec::new();
    loop {
        let row = tempered.next_logprobs(&prefix);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = None;
        for (tok, &lp) in row.iter().enumerate() {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            acc += lp.exp();
            if u <= acc {
                chosen = Some(tok);
                break;
            }
        }
        // Rounding can leave a sliver above acc; fall back to the last
        // positive-probability token.
        let tok = match chosen {
            Some(t) => t,
            None => row
                .iter()
                .enumerate()
                .rev()
                .find(|(_, &lp)| lp != f64::NEG_INFINITY)
                .map(|(t, _)| t)
                .ok_or_else(|| CoreError::Config("view row has no support".into()))?,
        };
        prefix.push(tok);
        if tok == eos {
            return Ok(Sequence::from_validated(prefix));
        }
    }
}

#[derive(Clone, Debug)]
pub struct BestOfN {
    pub best: Sequence,
    pub best_score: f64,
    pub scores: Vec<f64>,
}

/// Draws N i.i.d. samples, scores every one (exactly N score calls) and
/// returns the argmax.
pub fn best_of_n<D: SeqDist + ?Sized, S: ScoreFn + ?Sized>(
    view: &D,
    score_fn: &S,
    n: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<BestOfN> {
    if n == 0 {
        return Err(CoreError::Config("best_of_n requires N >= 1".into()));
    }
    let mut best: Option<(Sequence, f64)> = None;
    let mut scores = Vec::with_capacity(n);
    for _ in 0..n {
        let x = ancestral_sample(view, temperature, rng)?;
        let s = score_fn.score(&x)?;
        scores.push(s);
        let better = match &best {
            None => true,
            Some((bx, bs)) => s > *bs || (s == *bs && x < *bx),
        };
        if better {
            best = Some((x, s));
        }
    }
    let (best, best_score) = best.expect("n >= 1");
    Ok(BestOfN { best, best_score, scores })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ReinventConfig {
    /// Reward scale in the augmented likelihood target.
    pub sigma_r: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_temperature() -> f64 {
    1.0
}

impl ReinventConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_r > 0.0) {
            return Err(CoreError::Config(format!(
                "sigma_r must be positive, got {}",
                self.sigma_r
            )));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(CoreError::Config("learning_rate must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Squared error between the reward-augmented prior likelihood and the
/// agent likelihood: (log p_prior(x) + sigma_r * f(x) - log p_agent(x))^2.
pub fn reinvent_loss<A: SeqDist + ?Sized, P: SeqDist + ?Sized>(
    agent: &A,
    prior: &P,
    x: &Sequence,
    f_val: f64,
    sigma_r: f64,
) -> f64 {
    let r = sequence_logprob(prior, x) + sigma_r * f_val - sequence_logprob(agent, x);
    r * r
}

#[derive(Clone, Debug, Default)]
pub struct ReinventTrace {
    /// Mean oracle reward per step.
    pub mean_rewards: Vec<f64>,
    /// Pre-clip gradient norms per step (the variance diagnostic).
    pub grad_norms: Vec<f64>,
    /// Every oracle-scored sample in draw order.
    pub samples: Vec<(Sequence, f64)>,
    pub budget_exhausted: bool,
}

const GRAD_CLIP_NORM: f64 = 1.0;

/// Policy-gradient fine-tuning: sample a batch from the agent, score it with
/// the (budget-metered) oracle score, descend the squared REINVENT loss.
/// Budget exhaustion mid-loop returns cleanly with the partial trace.
pub fn reinvent_finetune<S: ScoreFn + ?Sized>(
    agent: &mut NeuralJointModel,
    prior: &NeuralJointModel,
    score_fn: &S,
    cfg: &ReinventConfig,
    rng: &mut Rng,
) -> Result<ReinventTrace> {
    cfg.validate()?;
    let mut trace = ReinventTrace::default();
    'steps: for _ in 0..cfg.steps {
        let mut batch: Vec<(Sequence, f64)> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let x = ancestral_sample(agent, cfg.temperature, rng)?;
            match score_fn.score(&x) {
                Ok(f) => batch.push((x, f)),
                Err(CoreError::BudgetExhausted { .. }) => {
                    trace.budget_exhausted = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        trace.samples.extend(batch.iter().cloned());
        if batch.is_empty() {
            break 'steps;
        }
        let mean_reward = batch.iter().map(|(_, f)| f).sum::<f64>() / batch.len() as f64;
        trace.mean_rewards.push(mean_reward);

        // d/dtheta mean((log pp + sigma f - log pa)^2)
        //   = mean(2 * residual * grad(-log pa))
        let items: Vec<(&Sequence, f64)> = batch
            .iter()
            .map(|(x, f)| {
                let residual = sequence_logprob(prior, x) + cfg.sigma_r * f
                    - sequence_logprob(agent, x);
                (x, 2.0 * residual / batch.len() as f64)
            })
            .collect();
        let (_, mut grad) = agent.weighted_nll_grad(&items);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        trace.grad_norms.push(norm);
        if norm > GRAD_CLIP_NORM {
            let scale = GRAD_CLIP_NORM / norm;
            for g in grad.iter_mut() {
                *g *= scale;
            }
        }
        let params = agent.params_mut();
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= cfg.learning_rate * g;
        }
        if trace.budget_exhausted {
            break;
        }
    }
    Ok(trace)
}

/// Tabular model parameterized by raw per-context logit rows; the
/// differentiable test bed for the gradient identity.
#[derive(Clone, Debug)]
pub struct LogitTabularModel {
    vocab: Vocabulary,
    max_len: usize,
    order: usize,
    index: HashMap<Vec<TokenId>, usize>,
    logits: Vec<f64>, // one row of V logits per context
}

impl LogitTabularModel {
    pub fn random(vocab: &Vocabulary, max_len: usize, order: usize, rng: &mut Rng) -> Self {
        let content: Vec<TokenId> = vocab.content_tokens().collect();
        let mut contexts: Vec<Vec<TokenId>> = vec![Vec::new()];
        let mut frontier = vec![Vec::new()];
        for _ in 0..order.min(max_len.saturating_sub(1)) {
            let mut next = Vec::new();
            for ctx in &frontier {
                for &t in &content {
                    let mut child: Vec<TokenId> = ctx.clone();
                    child.push(t);
                    next.push(child);
                }
            }
            contexts.extend(next.iter().cloned());
            frontier = next;
        }
        let index: HashMap<Vec<TokenId>, usize> =
            contexts.into_iter().enumerate().map(|(i, c)| (c, i)).collect();
        let v = vocab.size();
        let logits: Vec<f64> =
            (0..index.len() * v).map(|_| rng.gen_range(-1.0..1.0)).collect();
        LogitTabularModel { vocab: vocab.clone(), max_len, order, index, logits }
    }

    pub fn param_count(&self) -> usize {
        self.logits.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.logits
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn context_id(&self, prefix: &[TokenId]) -> usize {
        let start = prefix.len().saturating_sub(self.order);
        self.index[&prefix[start..]]
    }

    fn row_logprobs(&self, ctx_id: usize) -> Vec<f64> {
        let v = self.vocab.size();
        let mut row = self.logits[ctx_id * v..(ctx_id + 1) * v].to_vec();
        row[self.vocab.bos()] = f64::NEG_INFINITY;
        log_softmax_in_place(&mut row);
        row
    }

    /// d log p(x) / d logits, dense over all rows.
    pub fn grad_log_prob(&self, x: &Sequence) -> Vec<f64> {
        let v = self.vocab.size();
        let mut grad = vec![0.0; self.logits.len()];
        let idx = x.indices();
        for t in 0..idx.len() {
            if at_length_cap(t, self.max_len) {
                continue;
            }
            let ctx_id = self.context_id(&idx[..t]);
            let row = self.row_logprobs(ctx_id);
            for tok in 0..v {
                if row[tok] == f64::NEG_INFINITY {
                    continue;
                }
                let p = row[tok].exp();
                grad[ctx_id * v + tok] += if tok == idx[t] { 1.0 - p } else { -p };
            }
        }
        grad
    }
}

impl SeqDist for LogitTabularModel {
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
        self.row_logprobs(self.context_id(prefix))
    }
}

#[derive(Clone, Debug)]
pub struct IdentityCheckReport {
    pub max_rel_error: f64,
}

/// Verifies, coordinate by coordinate, that the direct derivative of the
/// squared loss equals the factored form
///   -2 sigma_r (f - (1/sigma_r) log(p_agent / p_prior)) * grad log p_agent.
pub fn reinvent_gradient_identity_check(
    agent: &LogitTabularModel,
    prior: &LogitTabularModel,
    x: &Sequence,
    f_val: f64,
    sigma_r: f64,
) -> IdentityCheckReport {
    let log_pa = sequence_logprob(agent, x);
    let log_pp = sequence_logprob(prior, x);
    let dlogpa = agent.grad_log_prob(x);

    // direct: d/dtheta (log pp + sigma f - log pa)^2
    let residual = log_pp + sigma_r * f_val - log_pa;
    let direct: Vec<f64> = dlogpa.iter().map(|d| 2.0 * residual * (-d)).collect();

    // factored: -2 sigma (f - (1/sigma) log(pa/pp)) dlogpa
    let bracket = f_val - (log_pa - log_pp) / sigma_r;
    let factored: Vec<f64> = dlogpa.iter().map(|d| -2.0 * sigma_r * bracket * d).collect();

    let mut max_rel = 0.0f64;
    for (a, b) in direct.iter().zip(&factored) {
        let denom = (a.abs() + b.abs()).max(1e-12);
        max_rel = max_rel.max((a - b).abs() / denom);
    }
    IdentityCheckReport { max_rel_error: max_rel }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jsi::{FnScore, ScoreFlavor};
    use crate::models::{NeuralConfig, TabularJointModel};
    use crate::objectives::{BudgetLedger, CountedOracle, Oracle, SyntheticLandscape};
    use crate::view::enumerate_support;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn random_model(seed: u64, n_content: usize, max_len: usize) -> TabularJointModel {
        let vocab = Vocabulary::synthetic(n_content).unwrap();
        let mut rng = Rng::seed_from_u64(seed);
        TabularJointModel::random(&vocab, max_len, 1, &mut rng).unwrap()
    }

    #[test]
    fn ancestral_samples_follow_the_model() {
        let model = random_model(3, 2, 4);
        let support = enumerate_support(&model, 10_000).unwrap();
        let mut counts: std::collections::HashMap<Sequence, usize> = Default::default();
        let trials = 20_000;
        let mut rng = Rng::seed_from_u64(7);
        for _ in 0..trials {
            let s = ancestral_sample(&model, 1.0, &mut rng).unwrap();
            *counts.entry(s).or_default() += 1;
        }
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut chi2 = 0.0;
        for (seq, lp) in &support {
            let expected = lp.exp() * trials as f64;
            let observed = *counts.get(seq).unwrap_or(&0) as f64;
            chi2 += (observed - expected) * (observed - expected) / expected;
        }
        let p = 1.0 - ChiSquared::new((support.len() - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn best_of_n_uses_exactly_n_calls_and_returns_the_max() {
        struct Counting<F: Fn(&Sequence) -> f64>(F, AtomicUsize);
        impl<F: Fn(&Sequence) -> f64> ScoreFn for Counting<F> {
            fn flavor(&self) -> ScoreFlavor {
                ScoreFlavor::Oracle
            }
            fn score(&self, x: &Sequence) -> crate::error::Result<f64> {
                self.1.fetch_add(1, Ordering::SeqCst);
                Ok(self.0(x))
            }
        }
        let model = random_model(5, 3, 6);
        let score = Counting(|s: &Sequence| s.content().len() as f64, AtomicUsize::new(0));
        let mut rng = Rng::seed_from_u64(11);
        let res = best_of_n(&model, &score, 64, 1.0, &mut rng).unwrap();
        assert_eq!(score.1.load(Ordering::SeqCst), 64);
        assert_eq!(res.scores.len(), 64);
        let max = res.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(res.best_score, max);
        assert_eq!(res.best.content().len() as f64, max);
    }

    #[test]
    fn best_of_one_is_a_plain_sample() {
        let model = random_model(8, 2, 4);
        let score = FnScore::predictor(|_: &Sequence| 0.0);
        let a = {
            let mut rng = Rng::seed_from_u64(21);
            best_of_n(&model, &score, 1, 1.0, &mut rng).unwrap().best
        };
        let b = {
            let mut rng = Rng::seed_from_u64(21);
            ancestral_sample(&model, 1.0, &mut rng).unwrap()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn best_of_n_on_deterministic_model_ignores_n() {
        let vocab = Vocabulary::synthetic(2).unwrap();
        let mut rows = std::collections::HashMap::new();
        let mut root = vec![0.0; 4];
        root[1] = 1.0;
        rows.insert(Vec::new(), root);
        let mut after = vec![0.0; 4];
        after[vocab.eos()] = 1.0;
        rows.insert(vec![1], after);
        let model = TabularJointModel::new(vocab.clone(), 5, 1, rows).unwrap();
        let score = FnScore::predictor(|_: &Sequence| 1.0);
        for n in [1, 16, 256] {
            let mut rng = Rng::seed_from_u64(n as u64);
            let res = best_of_n(&model, &score, n, 1.0, &mut rng).unwrap();
            assert_eq!(res.best.indices(), &[1, vocab.eos()]);
        }
    }

    #[test]
    fn reinvent_loss_reference_values() {
        let agent = random_model(1, 2, 4);
        let prior = random_model(1, 2, 4); // identical seeds -> identical models
        let support = enumerate_support(&agent, 10_000).unwrap();
        let x = &support[0].0;
        // agent == prior and f == 0 -> loss 0
        assert_eq!(reinvent_loss(&agent, &prior, x, 0.0, 1.0), 0.0);
        // algebraic identity on random instances:
        // loss == sigma^2 (f - (1/sigma) log(pa/pp))^2
        let prior2 = random_model(2, 2, 4);
        let mut rng = Rng::seed_from_u64(5);
        for _ in 0..30 {
            let i = rng.gen_range(0..support.len());
            let x = &support[i].0;
            let f: f64 = rng.gen_range(-2.0..2.0);
            let sigma: f64 = rng.gen_range(0.1..4.0);
            let got = reinvent_loss(&agent, &prior2, x, f, sigma);
            let ratio = sequence_logprob(&agent, x) - sequence_logprob(&prior2, x);
            let want = sigma * sigma * (f - ratio / sigma) * (f - ratio / sigma);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn reinvent_loss_hand_arithmetic() {
        // log pp = -10, f = 2, sigma = 1, log pa = -9 -> (-10 + 2 + 9)^2 = 1
        struct Fixed(f64, Vocabulary);
        impl SeqDist for Fixed {
            fn vocab(&self) -> &Vocabulary {
                &self.1
            }
            fn max_len(&self) -> usize {
                4
            }
            fn next_logprobs(&self, prefix: &[TokenId]) -> Vec<f64> {
                // all mass on EOS with the configured total logprob at step 1
                let mut row = vec![f64::NEG_INFINITY; self.1.size()];
                if prefix.is_empty() {
                    row[0] = self.0;
                    row[self.1.eos()] = (1.0 - self.0.exp()).ln();
                } else {
                    row[self.1.eos()] = 0.0;
                }
                row
            }
        }
        let vocab = Vocabulary::synthetic(2).unwrap();
        let agent = Fixed(-9.0, vocab.clone());
        let prior = Fixed(-10.0, vocab.clone());
        let x = Sequence::new(vec![0, vocab.eos()], &vocab, 4).unwrap();
        let loss = reinvent_loss(&agent, &prior, &x, 2.0, 1.0);
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_identity_holds_on_random_instances() {
        let vocab = Vocabulary::synthetic(3).unwrap();
        for seed in 0..25 {
            let mut rng = Rng::seed_from_u64(seed);
            let agent = LogitTabularModel::random(&vocab, 5, 1, &mut rng);
            let prior = LogitTabularModel::random(&vocab, 5, 1, &mut rng);
            let support = enumerate_support(&agent, 100_000).unwrap();
            let i = rng.gen_range(0..support.len());
            let x = &support[i].0;
            let f: f64 = rng.gen_range(-3.0..3.0);
            let sigma: f64 = rng.gen_range(0.2..3.0);
            let report = reinvent_gradient_identity_check(&agent, &prior, x, f, sigma);
            assert!(
                report.max_rel_error < 1e-6,
                "seed {seed}: {}",
                report.max_rel_error
            );
            // scaling f up and sigma down jointly keeps sigma * f, and with
            // it the augmented residual, unchanged
            let log_ratio = sequence_logprob(&agent, x) - sequence_logprob(&prior, x);
            let r1 = sigma * f - log_ratio;
            let scale = 2.5;
            let r2 = (sigma / scale) * (f * scale) - log_ratio;
            assert!((r1 - r2).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_zero_case_is_exactly_zero() {
        let vocab = Vocabulary::synthetic(2).unwrap();
        let mut rng = Rng::seed_from_u64(4);
        let agent = LogitTabularModel::random(&vocab, 4, 1, &mut rng);
        let prior = agent.clone();
        let support = enumerate_support(&agent, 10_000).unwrap();
        let x = &support[1].0;
        let log_pa = sequence_logprob(&agent, x);
        let log_pp = sequence_logprob(&prior, x);
        assert_eq!(log_pa, log_pp);
        let dlogpa = agent.grad_log_prob(x);
        let residual = log_pp + 0.0 - log_pa;
        assert_eq!(residual, 0.0);
        // both sides are exactly the zero vector
        for d in dlogpa {
            assert_eq!(2.0 * residual * (-d), 0.0);
        }
    }

    #[test]
    fn logit_model_gradient_matches_finite_differences() {
        let vocab = Vocabulary::synthetic(2).unwrap();
        let mut rng = Rng::seed_from_u64(17);
        let mut agent = LogitTabularModel::random(&vocab, 4, 1, &mut rng);
        let support = enumerate_support(&agent, 10_000).unwrap();
        let x = &support[2].0;
        let analytic = agent.grad_log_prob(x);
        let eps = 1e-6;
        for i in 0..agent.param_count() {
            let orig = agent.params()[i];
            agent.params_mut()[i] = orig + eps;
            let up = sequence_logprob(&agent, x);
            agent.params_mut()[i] = orig - eps;
            let down = sequence_logprob(&agent, x);
            agent.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let diff = (numeric - analytic[i]).abs();
            assert!(
                diff < 1e-7 || diff / (numeric.abs() + analytic[i].abs()) < 1e-6,
                "coord {i}: {numeric} vs {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn zero_learning_rate_leaves_agent_unchanged() {
        let vocab = Vocabulary::synthetic(3).unwrap();
        let mut rng = Rng::seed_from_u64(3);
        let cfg_model = NeuralConfig { embed_dim: 4, hidden_dim: 6, context: 3, num_objectives: 1 };
        let mut agent = NeuralJointModel::init(&vocab, 6, cfg_model, &mut rng).unwrap();
        let prior = agent.clone();
        let before = agent.params().to_vec();
        let score = FnScore::predictor(|s: &Sequence| s.content().len() as f64);
        let cfg = ReinventConfig {
            sigma_r: 1.0,
            learning_rate: 0.0,
            batch_size: 4,
            steps: 3,
            temperature: 1.0,
        };
        let mut rng = Rng::seed_from_u64(9);
        let trace = reinvent_finetune(&mut agent, &prior, &score, &cfg, &mut rng).unwrap();
        assert_eq!(agent.params(), &before[..]);
        assert_eq!(trace.mean_rewards.len(), 3);
    }

    #[test]
    fn budget_is_honored_exactly() {
        let vocab = Vocabulary::synthetic(3).unwrap();
        let mut rng = Rng::seed_from_u64(4);
        let cfg_model = NeuralConfig { embed_dim: 4, hidden_dim: 6, context: 3, num_objectives: 1 };
        let mut agent = NeuralJointModel::init(&vocab, 8, cfg_model, &mut rng).unwrap();
        let prior = agent.clone();
        struct LedgeredScore(Arc<BudgetLedger>);
        impl ScoreFn for LedgeredScore {
            fn flavor(&self) -> ScoreFlavor {
                ScoreFlavor::Oracle
            }
            fn score(&self, x: &Sequence) -> crate::error::Result<f64> {
                self.0.try_charge()?;
                Ok(x.content().len() as f64)
            }
        }
        let ledger = Arc::new(BudgetLedger::new(30));
        let score = LedgeredScore(ledger.clone());
        let cfg = ReinventConfig {
            sigma_r: 1.0,
            learning_rate: 1e-3,
            batch_size: 8,
            steps: 100, // far more than the budget allows
            temperature: 1.0,
        };
        let mut rng = Rng::seed_from_u64(5);
        let trace = reinvent_finetune(&mut agent, &prior, &score, &cfg, &mut rng).unwrap();
        assert!(trace.budget_exhausted);
        assert_eq!(ledger.used(), 30);
        assert_eq!(trace.samples.len(), 30);
    }

    #[test]
    fn oracle_landscape_smoke_with_counted_budget() {
        // end-to-end: landscape oracle + ledger + best_of_n
        let landscape = SyntheticLandscape::default_landscape();
        let ledger = Arc::new(BudgetLedger::new(64));
        let oracle = CountedOracle::new(landscape.clone(), ledger.clone());
        struct PrimaryScore<'a>(&'a CountedOracle);
        impl ScoreFn for PrimaryScore<'_> {
            fn flavor(&self) -> ScoreFlavor {
                ScoreFlavor::Oracle
            }
            fn score(&self, x: &Sequence) -> crate::error::Result<f64> {
                Ok(-self.0.evaluate(x)?[0]) // lower primary is better
            }
        }
        let vocab = landscape.vocab().clone();
        let mut rng = Rng::seed_from_u64(0);
        let model = TabularJointModel::random(&vocab, 10, 0, &mut rng).unwrap();
        let score = PrimaryScore(&oracle);
        let res = best_of_n(&model, &score, 64, 1.0, &mut rng).unwrap();
        assert_eq!(ledger.used(), 64);
        assert_eq!(res.scores.len(), 64);
    }
}
