//! Round-based self-improving sampling: draw a beam without replacement,
//! score it, center the scores into advantages, tilt the sampling
//! distribution through the trie, repeat. Also hosts the exact
//! enumeration-based reference for per-token advantages.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::logspace::log_softmax_in_place;
use crate::models::{JointModel, TabularJointModel};
use crate::rng::Rng;
use crate::sbs::sbs_sample;
use crate::seq::{Sequence, TokenId, Vocabulary};
use crate::tilt::{TiltTrie, TiltedView};
use crate::view::{enumerate_completions, SeqDist, TemperedView};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuEstimator {
    /// Mean of the current round's K scores; consistent for i.i.d. draws and
    /// exactly zero-sum after centering.
    #[default]
    EmpiricalMean,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct JsiConfig {
    /// Beam width K.
    pub beam_width: usize,
    /// Number of sampling rounds.
    pub rounds: usize,
    /// Advantage tilt scale sigma.
    pub step_size: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub mu_estimator: MuEstimator,
}

fn default_temperature() -> f64 {
    0.9
}

impl JsiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(CoreError::Config("beam_width must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(CoreError::Config("rounds must be at least 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(CoreError::Config(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(CoreError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreFlavor {
    /// Free to call: backed by the model's own predictor.
    Predictor,
    /// Each call spends one unit of the oracle budget.
    Oracle,
}

/// A scalar score over sequences. Oracle-flavored implementations charge a
/// budget ledger and fail with `BudgetExhausted` once it runs out.
pub trait ScoreFn {
    fn flavor(&self) -> ScoreFlavor;
    fn score(&self, x: &Sequence) -> Result<f64>;
}

/// Closure-backed score function.
pub struct FnScore<F: Fn(&Sequence) -> f64> {
    f: F,
    flavor: ScoreFlavor,
}

impl<F: Fn(&Sequence) -> f64> FnScore<F> {
    pub fn predictor(f: F) -> Self {
        FnScore { f, flavor: ScoreFlavor::Predictor }
    }
}

impl<F: Fn(&Sequence) -> f64> ScoreFn for FnScore<F> {
    fn flavor(&self) -> ScoreFlavor {
        self.flavor
    }
    fn score(&self, x: &Sequence) -> Result<f64> {
        Ok((self.f)(x))
    }
}

/// Estimate of the expected prediction score from one round of samples.
pub fn mu_estimate(scores: &[f64], kind: MuEstimator) -> f64 {
    assert!(!scores.is_empty(), "mu_estimate requires at least one score");
    match kind {
        MuEstimator::EmpiricalMean => scores.iter().sum::<f64>() / scores.len() as f64,
    }
}

/// Global advantage of one completed sequence.
pub fn global_advantage(score: f64, mu: f64) -> f64 {
    score - mu
}

/// One round of the sampling loop, as recorded in the trace.
#[derive(Clone, Debug)]
pub struct RoundTrace {
    pub round: usize,
    pub samples: Vec<Sequence>,
    pub scores: Vec<f64>,
    pub mu: f64,
    pub advantages: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct JsiTrace {
    pub rounds: Vec<RoundTrace>,
    /// Every scored sample across rounds, in sampling order; all distinct.
    pub sampled: Vec<(Sequence, f64)>,
    /// The view's support ran out before rounds * beam_width samples.
    pub support_exhausted: bool,
    /// An oracle-flavored score function ran out of budget mid-run.
    pub budget_exhausted: bool,
}

impl JsiTrace {
    /// Tab-separated export: round, sequence, score, advantage, mu.
    pub fn export_tsv(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for round in &self.rounds {
            for i in 0..round.samples.len() {
                out.push_str(&format!(
                    "{}\t{}\t{:.12e}\t{:.12e}\t{:.12e}\n",
                    round.round,
                    round.samples[i].render(vocab),
                    round.scores[i],
                    round.advantages[i],
                    round.mu
                ));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct JsiRun {
    pub best: Sequence,
    pub best_score: f64,
    pub trace: JsiTrace,
}

/// Runs the full sampling loop against `model`'s generative part, scoring
/// with `score_fn`, and returns the best scored sequence plus the trace.
///
/// Mass removal makes every sample across all rounds distinct by
/// construction. Oracle budget exhaustion mid-round keeps what was already
/// scored and stops cleanly.
pub fn jsi_sample<M: SeqDist + ?Sized, S: ScoreFn + ?Sized>(
    model: &M,
    score_fn: &S,
    cfg: &JsiConfig,
    rng: &mut Rng,
) -> Result<JsiRun> {
    cfg.validate()?;
    let tempered = TemperedView::new(model, cfg.temperature)?;
    let mut trie = TiltTrie::new();
    let mut trace = JsiTrace::default();

    for round in 1..=cfg.rounds {
        let tilted = TiltedView::new(&tempered, &trie, cfg.step_size)?;
        let res = sbs_sample(&tilted, cfg.beam_width, 1.0, rng)?;
        if res.sequences.is_empty() {
            trace.support_exhausted = true;
            break;
        }
        let mut scores = Vec::with_capacity(res.sequences.len());
        for seq in &res.sequences {
            match score_fn.score(seq) {
                Ok(s) => scores.push(s),
                Err(CoreError::BudgetExhausted { .. }) => {
                    trace.budget_exhausted = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let scored = &res.sequences[..scores.len()];
        if !scored.is_empty() {
            let mu = mu_estimate(&scores, cfg.mu_estimator);
            let advantages: Vec<f64> =
                scores.iter().map(|&s| global_advantage(s, mu)).collect();
            let batch: Vec<(Sequence, f64)> = scored
                .iter()
                .cloned()
                .zip(advantages.iter().copied())
                .collect();
            trie.insert_round(&tempered, &batch)?;
            trace
                .sampled
                .extend(scored.iter().cloned().zip(scores.iter().copied()));
            trace.rounds.push(RoundTrace {
                round,
                samples: scored.to_vec(),
                scores: scores.clone(),
                mu,
                advantages,
            });
        }
        if trace.budget_exhausted {
            break;
        }
        if res.truncated {
            trace.support_exhausted = true;
            break;
        }
    }

    let (best, best_score) = trace
        .sampled
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .map(|(s, v)| (s.clone(), *v))
        .ok_or(CoreError::BudgetExhausted { used: 0, budget: 0 })?;
    Ok(JsiRun { best, best_score, trace })
}

const ENUMERATION_LIMIT: usize = 200_000;

/// Exact per-token advantage by exhaustive enumeration:
/// E[score | prefix, token] - E[score | prefix], expectations over the
/// model's completions, score taken from the model's own predictor.
pub fn individual_advantage_exact(
    model: &TabularJointModel,
    prefix: &[TokenId],
    token: TokenId,
) -> Result<f64> {
    let with_token = expected_score_after(model, prefix, Some(token))?;
    let without = expected_score_after(model, prefix, None)?;
    Ok(with_token - without)
}

fn expected_score_after(
    model: &TabularJointModel,
    prefix: &[TokenId],
    token: Option<TokenId>,
) -> Result<f64> {
    let mut start: Vec<TokenId> = prefix.to_vec();
    if let Some(t) = token {
        let row = model.next_logprobs(prefix);
        if row[t] == f64::NEG_INFINITY {
            return Err(CoreError::Config(format!(
                "cannot condition on zero-probability token {t} after {prefix:?}"
            )));
        }
        if t == model.vocab().eos() {
            // sole completion: the sequence ends right here
            let seq = Sequence::new(start_plus_eos(prefix, model), model.vocab(), model.max_len())
                .expect("prefix plus EOS is valid");
            return Ok(model.predict(&seq)[0]);
        }
        start.push(t);
    }
    let completions = enumerate_completions(model, &start, ENUMERATION_LIMIT)?;
    let mut expectation = 0.0;
    for (seq, cond_lp) in &completions {
        expectation += cond_lp.exp() * model.predict(seq)[0];
    }
    Ok(expectation)
}

fn start_plus_eos(prefix: &[TokenId], model: &TabularJointModel) -> Vec<TokenId> {
    let mut v = prefix.to_vec();
    v.push(model.vocab().eos());
    v
}

/// Next-token logits locally tilted by the exact per-token advantage,
/// log-softmax normalized.
pub fn perturbed_logits_individual(
    model: &TabularJointModel,
    prefix: &[TokenId],
    sigma: f64,
) -> Result<Vec<f64>> {
    let row = model.next_logprobs(prefix);
    let mut logits = vec![f64::NEG_INFINITY; row.len()];
    for (tok, &lp) in row.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        let adv = individual_advantage_exact(model, prefix, tok)?;
        logits[tok] = lp + sigma * adv;
    }
    log_softmax_in_place(&mut logits);
    Ok(logits)
}
