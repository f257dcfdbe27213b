//! Ground-truth objectives: synthetic multi-component landscapes, the hard
//! oracle budget, z-score aggregation of components, the hit criterion, and
//! the exponentially tilted reference distribution used as an exact target.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng as _;

use crate::error::{CoreError, Result};
use crate::jsi::{ScoreFlavor, ScoreFn};
use crate::rng::Rng;
use crate::seq::{Sequence, TokenId, Vocabulary};
use crate::view::SeqDist;

/// Hard cap on oracle evaluations. Charging past the budget fails, and the
/// failing call is not counted.
#[derive(Debug)]
pub struct BudgetLedger {
    used: AtomicUsize,
    budget: usize,
}

impl BudgetLedger {
    pub fn new(budget: usize) -> Self {
        BudgetLedger { used: AtomicUsize::new(0), budget }
    }

    pub fn try_charge(&self) -> Result<()> {
        let prev = self.used.fetch_add(1, Ordering::SeqCst);
        if prev >= self.budget {
            self.used.fetch_sub(1, Ordering::SeqCst);
            return Err(CoreError::BudgetExhausted { used: prev, budget: self.budget });
        }
        Ok(())
    }

    pub fn used(&self) -> usize {
        self.used.load(Ordering::SeqCst)
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.used()
    }
}

/// A ground-truth objective with M components; every evaluation is charged
/// against the ledger.
pub trait Oracle {
    fn num_components(&self) -> usize;
    fn ledger(&self) -> &BudgetLedger;
    fn evaluate(&self, x: &Sequence) -> Result<Vec<f64>>;
}

/// Synthetic stand-in for a docking-style objective over token sequences.
///
/// Components, in order:
///   0. primary   — length penalty minus weighted pattern matches
///                  (lower is better, like a docking score)
///   1. aux1      — smooth statistic in (0, 1), feasibility wants > 0.5
///   2. aux2      — statistic in [1, 10], feasibility wants < 5
#[derive(Clone, Debug)]
pub struct SyntheticLandscape {
    vocab: Vocabulary,
    max_len: usize,
    patterns: Vec<(Vec<TokenId>, f64)>,
    length_penalty: f64,
    /// sigmoid(c0 + c1 * distinct_fraction + c2 * length_fraction)
    aux1_coeffs: [f64; 3],
    /// 1 + 9 * clamp(b0 + b1 * repeated_bigram_fraction, 0, 1)
    aux2_coeffs: [f64; 2],
    /// Quantile of the reference primary distribution used as hit threshold.
    hit_quantile: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SyntheticLandscape {
    pub fn new(
        vocab: Vocabulary,
        max_len: usize,
        patterns: Vec<(Vec<TokenId>, f64)>,
        length_penalty: f64,
        aux1_coeffs: [f64; 3],
        aux2_coeffs: [f64; 2],
        hit_quantile: f64,
    ) -> Result<Self> {
        for (p, w) in &patterns {
            if p.is_empty() {
                return Err(CoreError::Config("empty pattern".into()));
            }
            if !w.is_finite() {
                return Err(CoreError::Config("non-finite pattern weight".into()));
            }
            for &t in p {
                if t >= vocab.size() || t == vocab.bos() || t == vocab.eos() {
                    return Err(CoreError::Config(format!(
                        "pattern token {t} is not a content token"
                    )));
                }
            }
        }
        if !(hit_quantile > 0.0 && hit_quantile < 1.0) {
            return Err(CoreError::Config(format!(
                "hit_quantile must lie in (0,1), got {hit_quantile}"
            )));
        }
        Ok(SyntheticLandscape {
            vocab,
            max_len,
            patterns,
            length_penalty,
            aux1_coeffs,
            aux2_coeffs,
            hit_quantile,
        })
    }

    /// Default desk-scale landscape: 12 content tokens, length cap 24, six
    /// weighted patterns of length 3 to 5.
    pub fn default_landscape() -> Self {
        let vocab = Vocabulary::synthetic(12).unwrap();
        let tok = |c: char| vocab.lookup(&c.to_string()).unwrap();
        let pat = |s: &str| -> Vec<TokenId> { s.chars().map(tok).collect() };
        let patterns = vec![
            (pat("abc"), 2.0),
            (pat("cab"), 1.5),
            (pat("dead"), 2.5),
            (pat("fade"), 2.0),
            (pat("begad"), 3.0),
            (pat("jkl"), 1.0),
        ];
        SyntheticLandscape::new(
            vocab,
            24,
            patterns,
            0.12,
            [-1.2, 2.4, 1.8],
            [0.05, 1.1],
            0.05,
        )
        .expect("default landscape is valid")
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn num_components(&self) -> usize {
        3
    }

    pub fn patterns(&self) -> &[(Vec<TokenId>, f64)] {
        &self.patterns
    }

    /// Signs aligning each component to higher-is-better.
    pub fn signs(&self) -> Vec<f64> {
        vec![-1.0, 1.0, -1.0]
    }

    /// Raw components, free of any budget accounting.
    pub fn components(&self, x: &Sequence) -> Vec<f64> {
        let content = x.content();
        let c = content.len() as f64;
        let mut matched = 0.0;
        for (pat, w) in &self.patterns {
            if pat.len() <= content.len() {
                let hits = content.windows(pat.len()).filter(|w| *w == &pat[..]).count();
                matched += w * hits as f64;
            }
        }
        let primary = self.length_penalty * c - matched;

        let distinct = content.iter().collect::<BTreeSet<_>>().len() as f64;
        let distinct_frac = if content.is_empty() {
            0.0
        } else {
            distinct / self.vocab.num_content_tokens() as f64
        };
        let len_frac = c / self.max_len as f64;
        let [a0, a1, a2] = self.aux1_coeffs;
        let aux1 = sigmoid(a0 + a1 * distinct_frac + a2 * len_frac);

        let repeat_frac = if content.len() < 2 {
            0.0
        } else {
            let total = content.len() - 1;
            let distinct_bigrams = content.windows(2).collect::<BTreeSet<_>>().len();
            1.0 - distinct_bigrams as f64 / total as f64
        };
        let [b0, b1] = self.aux2_coeffs;
        let aux2 = 1.0 + 9.0 * (b0 + b1 * repeat_frac).clamp(0.0, 1.0);

        vec![primary, aux1, aux2]
    }

    /// Deterministic reference sample: i.i.d. uniform tokens with a uniform
    /// chance of EOS each step, capped at max_len. Plays the role of the
    /// known reference compounds that define the hit threshold and the
    /// component normalization.
    pub fn reference_sample(&self, n: usize, seed: u64) -> Vec<Sequence> {
        let mut rng = Rng::seed_from_u64(seed);
        let content: Vec<TokenId> = self.vocab.content_tokens().collect();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut idx: Vec<TokenId> = Vec::new();
            loop {
                if idx.len() + 1 >= self.max_len {
                    idx.push(self.vocab.eos());
                    break;
                }
                let choice = rng.gen_range(0..=content.len());
                if choice == content.len() {
                    idx.push(self.vocab.eos());
                    break;
                }
                idx.push(content[choice]);
            }
            out.push(Sequence::new(idx, &self.vocab, self.max_len).expect("reference sequence"));
        }
        out
    }

    const REFERENCE_SEED: u64 = 0xd0c5;
    const REFERENCE_SIZE: usize = 4096;

    /// Hit specification anchored to the reference sample: the primary
    /// threshold sits at the configured quantile (best tail) of reference
    /// primaries.
    pub fn default_hit_spec(&self) -> HitSpec {
        let refs = self.reference_sample(Self::REFERENCE_SIZE, Self::REFERENCE_SEED);
        let mut primaries: Vec<f64> =
            refs.iter().map(|s| self.components(s)[0]).collect();
        primaries.sort_by(f64::total_cmp);
        let idx = ((primaries.len() as f64) * self.hit_quantile) as usize;
        HitSpec {
            primary_threshold: primaries[idx.min(primaries.len() - 1)],
            aux1_min: Some(0.5),
            aux2_max: Some(5.0),
        }
    }

    /// Component normalization statistics from the same reference sample.
    pub fn reference_stats(&self) -> ZScoreStats {
        let refs = self.reference_sample(Self::REFERENCE_SIZE, Self::REFERENCE_SEED);
        let rows: Vec<Vec<f64>> = refs.iter().map(|s| self.components(s)).collect();
        ZScoreStats::from_rows(&rows).expect("reference components are non-degenerate")
    }

    /// Writes the landscape file: `@` directives then one pattern per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "@length_penalty {}", self.length_penalty)?;
        writeln!(
            f,
            "@aux1 {} {} {}",
            self.aux1_coeffs[0], self.aux1_coeffs[1], self.aux1_coeffs[2]
        )?;
        writeln!(f, "@aux2 {} {}", self.aux2_coeffs[0], self.aux2_coeffs[1])?;
        writeln!(f, "@hit_quantile {}", self.hit_quantile)?;
        writeln!(f, "@content_tokens {}", self.vocab.num_content_tokens())?;
        writeln!(f, "@max_len {}", self.max_len)?;
        for (pat, w) in &self.patterns {
            let syms: Vec<&str> = pat.iter().map(|&t| self.vocab.symbol(t)).collect();
            writeln!(f, "{}\t{w}", syms.join(" "))?;
        }
        Ok(())
    }

    /// Parses the landscape file format written by [`save`](Self::save).
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut length_penalty = 0.1;
        let mut aux1 = [-1.2, 2.4, 1.8];
        let mut aux2 = [0.05, 1.1];
        let mut hit_quantile = 0.05;
        let mut n_content = 12usize;
        let mut max_len = 24usize;
        let mut raw_patterns: Vec<(usize, String, f64)> = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = lineno + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('@') {
                let mut parts = rest.split_whitespace();
                let key = parts.next().unwrap_or("");
                let vals: Vec<f64> = parts
                    .map(|p| {
                        p.parse::<f64>().map_err(|_| CoreError::Parse {
                            line: lineno,
                            msg: format!("bad number {p:?}"),
                        })
                    })
                    .collect::<Result<_>>()?;
                match (key, vals.as_slice()) {
                    ("length_penalty", [v]) => length_penalty = *v,
                    ("aux1", [a, b, c]) => aux1 = [*a, *b, *c],
                    ("aux2", [a, b]) => aux2 = [*a, *b],
                    ("hit_quantile", [v]) => hit_quantile = *v,
                    ("content_tokens", [v]) => n_content = *v as usize,
                    ("max_len", [v]) => max_len = *v as usize,
                    _ => {
                        return Err(CoreError::Parse {
                            line: lineno,
                            msg: format!("unknown or malformed directive @{key}"),
                        })
                    }
                }
            } else {
                let (pat, w) = line.split_once('\t').ok_or_else(|| CoreError::Parse {
                    line: lineno,
                    msg: "expected `<pattern tokens>\\t<weight>`".into(),
                })?;
                let weight: f64 = w.trim().parse().map_err(|_| CoreError::Parse {
                    line: lineno,
                    msg: format!("bad weight {w:?}"),
                })?;
                raw_patterns.push((lineno, pat.to_string(), weight));
            }
        }
        let vocab = Vocabulary::synthetic(n_content)?;
        let mut patterns = Vec::with_capacity(raw_patterns.len());
        for (lineno, pat, weight) in raw_patterns {
            let toks: Vec<TokenId> = pat
                .split_whitespace()
                .map(|s| {
                    vocab.lookup(s).ok_or_else(|| CoreError::Parse {
                        line: lineno,
                        msg: format!("unknown pattern token {s:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            patterns.push((toks, weight));
        }
        SyntheticLandscape::new(vocab, max_len, patterns, length_penalty, aux1, aux2, hit_quantile)
    }
}

/// A landscape whose evaluations are charged to a shared ledger.
pub struct CountedOracle {
    landscape: SyntheticLandscape,
    ledger: Arc<BudgetLedger>,
}

impl CountedOracle {
    pub fn new(landscape: SyntheticLandscape, ledger: Arc<BudgetLedger>) -> Self {
        CountedOracle { landscape, ledger }
    }

    pub fn landscape(&self) -> &SyntheticLandscape {
        &self.landscape
    }
}

impl Oracle for CountedOracle {
    fn num_components(&self) -> usize {
        self.landscape.num_components()
    }

    fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    fn evaluate(&self, x: &Sequence) -> Result<Vec<f64>> {
        self.ledger.try_charge()?;
        Ok(self.landscape.components(x))
    }
}

/// Per-component mean and standard deviation for z-scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct ZScoreStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl ZScoreStats {
    /// Population statistics over component rows. Errors when any component
    /// is constant (zero standard deviation).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(CoreError::EmptyInput("ZScoreStats::from_rows"));
        }
        let m = rows[0].len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(CoreError::Config("ragged component rows".into()));
        }
        let n = rows.len() as f64;
        let mut means = vec![0.0; m];
        for row in rows {
            for (j, &v) in row.iter().enumerate() {
                means[j] += v;
            }
        }
        for mu in means.iter_mut() {
            *mu /= n;
        }
        let mut stds = vec![0.0; m];
        for row in rows {
            for (j, &v) in row.iter().enumerate() {
                stds[j] += (v - means[j]) * (v - means[j]);
            }
        }
        for (j, s) in stds.iter_mut().enumerate() {
            *s = (*s / n).sqrt();
            if *s <= 0.0 {
                return Err(CoreError::Config(format!(
                    "component {j} has zero standard deviation"
                )));
            }
        }
        Ok(ZScoreStats { means, stds })
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Mean of sign-aligned z-scores: (1/M) sum_i signs_i * (c_i - mean_i) / std_i.
pub fn aggregate_score(components: &[f64], stats: &ZScoreStats, signs: &[f64]) -> Result<f64> {
    if components.len() != stats.len() || signs.len() != stats.len() {
        return Err(CoreError::Config(format!(
            "component/stats/sign length mismatch: {}/{}/{}",
            components.len(),
            stats.len(),
            signs.len()
        )));
    }
    let m = components.len() as f64;
    let mut acc = 0.0;
    for j in 0..components.len() {
        acc += signs[j] * (components[j] - stats.means[j]) / stats.stds[j];
    }
    Ok(acc / m)
}

/// Three-clause feasibility test. The primary comparison is strict, in the
/// lower-is-better direction; absent bounds are not checked.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HitSpec {
    pub primary_threshold: f64,
    pub aux1_min: Option<f64>,
    pub aux2_max: Option<f64>,
}

pub fn hit_criterion(components: &[f64], spec: &HitSpec) -> bool {
    if components.is_empty() {
        return false;
    }
    if !(components[0] < spec.primary_threshold) {
        return false;
    }
    if let Some(min) = spec.aux1_min {
        if components.len() < 2 || !(components[1] > min) {
            return false;
        }
    }
    if let Some(max) = spec.aux2_max {
        if components.len() < 3 || !(components[2] < max) {
            return false;
        }
    }
    true
}

/// Exact exponentially tilted distribution over a view's full support:
/// p*(x) proportional to p(x) * exp(f(x) / beta). The tilt exponent is
/// max-shifted before exponentiation so large scores cannot overflow.
pub fn gibbs_tilt_exact<D: SeqDist + ?Sized>(
    view: &D,
    f: &dyn Fn(&Sequence) -> f64,
    beta: f64,
    limit: usize,
) -> Result<Vec<(Sequence, f64)>> {
    if !(beta > 0.0) {
        return Err(CoreError::Config(format!("beta must be positive, got {beta}")));
    }
    let support = crate::view::enumerate_support(view, limit)?;
    if support.is_empty() {
        return Err(CoreError::EmptyInput("gibbs_tilt_exact"));
    }
    let tilts: Vec<f64> = support.iter().map(|(s, _)| f(s) / beta).collect();
    let shift = tilts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = support
        .iter()
        .zip(&tilts)
        .map(|((_, lp), t)| lp.exp() * (t - shift).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    Ok(support
        .into_iter()
        .zip(weights)
        .map(|((seq, _), w)| (seq, w / z))
        .collect())
}

/// Oracle-backed scalar score: z-scored, sign-aligned component mean. Every
/// call spends budget; the raw components are logged so callers can compute
/// hit statistics without re-evaluating.
pub struct AggregatedOracleScore<'a> {
    oracle: &'a dyn Oracle,
    stats: ZScoreStats,
    signs: Vec<f64>,
    log: std::sync::Mutex<Vec<(Sequence, Vec<f64>, f64)>>,
}

impl<'a> AggregatedOracleScore<'a> {
    pub fn new(oracle: &'a dyn Oracle, stats: ZScoreStats, signs: Vec<f64>) -> Self {
        AggregatedOracleScore { oracle, stats, signs, log: std::sync::Mutex::new(Vec::new()) }
    }

    /// Every evaluation so far: (sequence, raw components, scalar score).
    pub fn take_log(&self) -> Vec<(Sequence, Vec<f64>, f64)> {
        std::mem::take(&mut self.log.lock().unwrap())
    }
}

impl ScoreFn for AggregatedOracleScore<'_> {
    fn flavor(&self) -> ScoreFlavor {
        ScoreFlavor::Oracle
    }

    fn score(&self, x: &Sequence) -> Result<f64> {
        let components = self.oracle.evaluate(x)?;
        let scalar = aggregate_score(&components, &self.stats, &self.signs)?;
        self.log.lock().unwrap().push((x.clone(), components, scalar));
        Ok(scalar)
    }
}
