//! Experiment runners for the offline and online optimization protocols,
//! their ablation variants, the run metrics, and the serialized run record.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::baselines::{ancestral_sample, reinvent_finetune, ReinventConfig};
use crate::error::{CoreError, Result};
use crate::jsi::{jsi_sample, FnScore, JsiConfig, ScoreFn};
use crate::models::{train_joint, JointModel, NeuralConfig, NeuralJointModel, TrainConfig};
use crate::objectives::{
    aggregate_score, hit_criterion, AggregatedOracleScore, BudgetLedger, CountedOracle, HitSpec,
    Oracle, SyntheticLandscape, ZScoreStats,
};
use crate::rng::Rng;
use crate::seq::{kmer_set, load_dataset, LabeledExample, Sequence};

/// Percentage of rows whose hit flag is set.
pub fn hit_ratio(hits: &[bool]) -> Result<f64> {
    if hits.is_empty() {
        return Err(CoreError::EmptyInput("hit_ratio"));
    }
    Ok(100.0 * hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Internal diversity: 1 - mean pairwise Jaccard similarity of k-mer sets.
/// Two sequences with identical k-mer sets (including both empty) count as
/// similarity 1.
pub fn intdiv1(samples: &[Sequence], k: usize) -> Result<f64> {
    if samples.len() < 2 {
        return Err(CoreError::Config(
            "intdiv1 needs at least two samples".into(),
        ));
    }
    let sets: Vec<_> = samples.iter().map(|s| kmer_set(s, k)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let inter = sets[i].intersection(&sets[j]).count();
            let union = sets[i].union(&sets[j]).count();
            let jaccard = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            total += jaccard;
            pairs += 1;
        }
    }
    Ok(1.0 - total / pairs as f64)
}

/// Wall-clock sampling seconds per returned candidate.
pub fn time_per_sample(total: Duration, count: usize) -> Result<f64> {
    if count == 0 {
        return Err(CoreError::Config("time_per_sample with zero samples".into()));
    }
    Ok(total.as_secs_f64() / count as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SampleRow {
    /// Content tokens rendered as space-separated symbols.
    pub sequence: String,
    pub components: Vec<f64>,
    pub hit: bool,
    /// Scalar score that guided the selection of this sample.
    pub score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunMetrics {
    pub hit_ratio: f64,
    pub intdiv1: f64,
    pub seconds_per_sample: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HitSpecRecord {
    pub primary_threshold: f64,
    pub aux1_min: Option<f64>,
    pub aux2_max: Option<f64>,
}

impl From<HitSpec> for HitSpecRecord {
    fn from(h: HitSpec) -> Self {
        HitSpecRecord {
            primary_threshold: h.primary_threshold,
            aux1_min: h.aux1_min,
            aux2_max: h.aux2_max,
        }
    }
}

/// Everything one run produced. `write` emits a JSON document plus a
/// per-sample JSONL file, named by seed and config hash.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunRecord {
    pub mode: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub hit_spec: HitSpecRecord,
    pub metrics: RunMetrics,
    pub oracle_used: usize,
    pub oracle_budget: usize,
    pub samples: Vec<SampleRow>,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    /// JSON with the wall-clock field zeroed; the replay-equality contract
    /// covers everything except physical time.
    pub fn deterministic_json(&self) -> String {
        let mut clone = self.clone();
        clone.metrics.seconds_per_sample = 0.0;
        serde_json::to_string_pretty(&clone).expect("record serializes")
    }

    pub fn samples_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.samples {
            out.push_str(&serde_json::to_string(row).expect("row serializes"));
            out.push('\n');
        }
        out
    }

    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(&self.config).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::new();
        for b in digest.iter().take(6) {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    /// Writes `<mode>-<hash>-seed<seed>.json` and `.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let stem = format!("{}-{}-seed{}", self.mode, self.config_hash(), self.seed);
        let json_path = dir.join(format!("{stem}.json"));
        let jsonl_path = dir.join(format!("{stem}.jsonl"));
        std::fs::write(&json_path, self.to_json())?;
        std::fs::write(&jsonl_path, self.samples_jsonl())?;
        Ok((json_path, jsonl_path))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OfflineRunConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_split_fraction")]
    pub split_fraction: f64,
    pub train: TrainConfig,
    pub jsi: JsiConfig,
    #[serde(default = "default_evaluation_count")]
    pub evaluation_count: usize,
    #[serde(default = "default_offline_budget")]
    pub oracle_budget: usize,
    pub seed: u64,
}

fn default_split_fraction() -> f64 {
    0.5
}
fn default_evaluation_count() -> usize {
    64
}
fn default_offline_budget() -> usize {
    64
}

impl OfflineRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.jsi.validate()?;
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(CoreError::Config("split_fraction must lie in (0,1)".into()));
        }
        if self.evaluation_count == 0 {
            return Err(CoreError::Config("evaluation_count must be at least 1".into()));
        }
        if self.evaluation_count > self.oracle_budget {
            return Err(CoreError::Config(format!(
                "evaluation_count {} exceeds oracle budget {}",
                self.evaluation_count, self.oracle_budget
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OnlineRunConfig {
    #[serde(default = "default_online_budget")]
    pub oracle_budget: usize,
    pub jsi: JsiConfig,
    /// Fraction of cumulative oracle-scored samples kept for retraining.
    #[serde(default = "default_top_fraction")]
    pub retrain_top_fraction: f64,
    /// Generative retraining schedule; lambda is forced to 0.
    pub retrain: TrainConfig,
    pub seed: u64,
}

fn default_online_budget() -> usize {
    3000
}
fn default_top_fraction() -> f64 {
    0.25
}

impl OnlineRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.jsi.validate()?;
        self.retrain.validate()?;
        if self.oracle_budget == 0 {
            return Err(CoreError::Config("oracle_budget must be at least 1".into()));
        }
        if !(self.retrain_top_fraction > 0.0 && self.retrain_top_fraction <= 1.0) {
            return Err(CoreError::Config(
                "retrain_top_fraction must lie in (0,1]".into(),
            ));
        }
        Ok(())
    }
}

/// Which sampler the online loop uses; the rejection and policy-gradient
/// variants serve as budget-matched baselines.
#[derive(Clone, Debug, PartialEq)]
pub enum OnlineSampler {
    Jsi,
    BestOfN { n: usize },
    Reinvent(ReinventConfig),
}

impl OnlineSampler {
    fn name(&self) -> &'static str {
        match self {
            OnlineSampler::Jsi => "online-jsi",
            OnlineSampler::BestOfN { .. } => "online-best-of-n",
            OnlineSampler::Reinvent(_) => "online-reinvent",
        }
    }
}

/// Offline protocol: train the joint model on the precomputed dataset, let
/// its predictor guide the sampler, oracle-evaluate only the final selection.
pub fn run_offline(
    landscape: &SyntheticLandscape,
    model_cfg: &NeuralConfig,
    cfg: &OfflineRunConfig,
    hit_override: Option<HitSpec>,
) -> Result<RunRecord> {
    cfg.validate()?;
    run_offline_variant(landscape, model_cfg, cfg, hit_override, &AblateVariant::Full)
}

/// Offline ablation variants.
#[derive(Clone, Debug, PartialEq)]
pub enum AblateVariant {
    /// Joint training; the model's own predictor guides its own sampler.
    Full,
    /// Decoupled: a predictor-only copy guides a generatively trained sampler.
    NoJoint,
    /// Joint training, but rejection sampling instead of the tilted sampler.
    NoSelfImprove { n: usize },
}

impl AblateVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AblateVariant::Full => "offline-full",
            AblateVariant::NoJoint => "offline-no-joint",
            AblateVariant::NoSelfImprove { .. } => "offline-no-self-improve",
        }
    }
}

pub fn run_offline_variant(
    landscape: &SyntheticLandscape,
    model_cfg: &NeuralConfig,
    cfg: &OfflineRunConfig,
    hit_override: Option<HitSpec>,
    variant: &AblateVariant,
) -> Result<RunRecord> {
    cfg.validate()?;
    let vocab = landscape.vocab();
    let max_len = landscape.max_len();
    let data = load_dataset(&cfg.dataset, vocab, max_len)?;
    if data.is_empty() {
        return Err(CoreError::Config("offline dataset is empty".into()));
    }
    let m = data[0].scores.len();
    if m != landscape.num_components() {
        return Err(CoreError::Config(format!(
            "dataset has {m} components, landscape expects {}",
            landscape.num_components()
        )));
    }
    let mut model_cfg = model_cfg.clone();
    model_cfg.num_objectives = m;

    let mut rng = Rng::seed_from_u64(cfg.seed);
    let (train_split, _eval_split) =
        crate::seq::split_dataset(&data, cfg.split_fraction, &mut rng)?;
    if train_split.is_empty() {
        return Err(CoreError::Config("train split is empty".into()));
    }

    // Component normalization and the hit threshold both come from the
    // training split, the stand-in for the known reference set.
    let rows: Vec<Vec<f64>> = train_split.iter().map(|ex| ex.scores.clone()).collect();
    let stats = ZScoreStats::from_rows(&rows)?;
    let signs = landscape.signs();
    let hit_spec = match hit_override {
        Some(spec) => spec,
        None => {
            let mut primaries: Vec<f64> = rows.iter().map(|r| r[0]).collect();
            primaries.sort_by(f64::total_cmp);
            HitSpec {
                primary_threshold: primaries[primaries.len() / 2],
                aux1_min: if m >= 2 { Some(0.5) } else { None },
                aux2_max: if m >= 3 { Some(5.0) } else { None },
            }
        }
    };

    // Train the models the variant calls for.
    let mut train_rng = rng.split();
    let (sampler_model, predictor_model) = match variant {
        AblateVariant::Full | AblateVariant::NoSelfImprove { .. } => {
            let mut joint =
                NeuralJointModel::init(vocab, max_len, model_cfg.clone(), &mut train_rng)?;
            train_joint(&mut joint, &train_split, &cfg.train, &mut train_rng)?;
            (joint.clone(), joint)
        }
        AblateVariant::NoJoint => {
            let mut generator =
                NeuralJointModel::init(vocab, max_len, model_cfg.clone(), &mut train_rng)?;
            let mut gen_cfg = cfg.train.clone();
            gen_cfg.lambda = 0.0;
            train_joint(&mut generator, &train_split, &gen_cfg, &mut train_rng)?;
            let mut predictor =
                NeuralJointModel::init(vocab, max_len, model_cfg.clone(), &mut train_rng)?;
            let mut pred_cfg = cfg.train.clone();
            pred_cfg.generative_weight = 0.0;
            if pred_cfg.lambda == 0.0 {
                pred_cfg.lambda = 1.0;
            }
            train_joint(&mut predictor, &train_split, &pred_cfg, &mut train_rng)?;
            (generator, predictor)
        }
    };

    let predict_scalar = {
        let stats = stats.clone();
        let signs = signs.clone();
        move |m: &NeuralJointModel, x: &Sequence| -> f64 {
            aggregate_score(&m.predict(x), &stats, &signs).expect("dimensions checked above")
        }
    };

    // Optimization phase: zero oracle calls by construction (the score
    // function never touches the ledger).
    let mut sample_rng = rng.split();
    let started = Instant::now();
    let mut candidates: Vec<(Sequence, f64)> = match variant {
        AblateVariant::Full | AblateVariant::NoJoint => {
            let score = FnScore::predictor(|x: &Sequence| predict_scalar(&predictor_model, x));
            let run = jsi_sample(&sampler_model, &score, &cfg.jsi, &mut sample_rng)?;
            run.trace.sampled
        }
        AblateVariant::NoSelfImprove { n } => {
            let score = FnScore::predictor(|x: &Sequence| predict_scalar(&predictor_model, x));
            let mut picked: Vec<(Sequence, f64)> = Vec::with_capacity(cfg.evaluation_count);
            for _ in 0..cfg.evaluation_count {
                let res = crate::baselines::best_of_n(
                    &sampler_model,
                    &score,
                    *n,
                    cfg.jsi.temperature,
                    &mut sample_rng,
                )?;
                picked.push((res.best, res.best_score));
            }
            picked
        }
    };
    let sampling_elapsed = started.elapsed();

    // Rank by predictor score and oracle-evaluate only the top selection.
    // The rejection variant may pick the same sequence twice; each submitted
    // candidate is evaluated, duplicates included.
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    candidates.truncate(cfg.evaluation_count);

    let ledger = Arc::new(BudgetLedger::new(cfg.oracle_budget));
    let oracle = CountedOracle::new(landscape.clone(), ledger.clone());
    let mut rows_out = Vec::with_capacity(candidates.len());
    for (seq, pred_score) in &candidates {
        let components = oracle.evaluate(seq)?;
        let hit = hit_criterion(&components, &hit_spec);
        rows_out.push(SampleRow {
            sequence: seq.render(vocab),
            components,
            hit,
            score: *pred_score,
        });
    }

    let hits: Vec<bool> = rows_out.iter().map(|r| r.hit).collect();
    let seqs: Vec<Sequence> = candidates.iter().map(|(s, _)| s.clone()).collect();
    let metrics = RunMetrics {
        hit_ratio: hit_ratio(&hits)?,
        intdiv1: if seqs.len() >= 2 { intdiv1(&seqs, 3)? } else { 0.0 },
        seconds_per_sample: time_per_sample(sampling_elapsed, seqs.len())?,
    };
    Ok(RunRecord {
        mode: variant.name().to_string(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg).expect("config serializes"),
        hit_spec: hit_spec.into(),
        metrics,
        oracle_used: ledger.used(),
        oracle_budget: cfg.oracle_budget,
        samples: rows_out,
    })
}

/// Online protocol: the oracle itself scores every sample, the model is
/// periodically retrained on the top fraction of everything scored so far,
/// and the loop stops when the ledger runs dry.
pub fn run_online(
    landscape: &SyntheticLandscape,
    model_cfg: &NeuralConfig,
    cfg: &OnlineRunConfig,
    sampler: &OnlineSampler,
    initial: Option<NeuralJointModel>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let vocab = landscape.vocab();
    let max_len = landscape.max_len();
    let mut model_cfg = model_cfg.clone();
    model_cfg.num_objectives = landscape.num_components();

    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut model = match initial {
        Some(m) => m,
        None => NeuralJointModel::init(vocab, max_len, model_cfg.clone(), &mut rng)?,
    };
    let stats = landscape.reference_stats();
    let signs = landscape.signs();
    let hit_spec = landscape.default_hit_spec();
    let ledger = Arc::new(BudgetLedger::new(cfg.oracle_budget));
    let oracle = CountedOracle::new(landscape.clone(), ledger.clone());

    let mut retrain = cfg.retrain.clone();
    retrain.lambda = 0.0; // generative retraining only

    let mut all_rows: Vec<(Sequence, Vec<f64>, f64)> = Vec::new();
    let mut sampling_time = Duration::ZERO;

    if let OnlineSampler::Reinvent(rcfg) = sampler {
        let prior = model.clone();
        let score = AggregatedOracleScore::new(&oracle, stats.clone(), signs.clone());
        let mut run_cfg = rcfg.clone();
        // enough steps to drain the budget
        run_cfg.steps = cfg.oracle_budget / run_cfg.batch_size.max(1) + 2;
        let started = Instant::now();
        let mut sample_rng = rng.split();
        reinvent_finetune(&mut model, &prior, &score, &run_cfg, &mut sample_rng)?;
        sampling_time += started.elapsed();
        all_rows.extend(score.take_log());
    } else {
        loop {
            if ledger.remaining() == 0 {
                break;
            }
            let score = AggregatedOracleScore::new(&oracle, stats.clone(), signs.clone());
            let mut sample_rng = rng.split();
            let started = Instant::now();
            let outcome = match sampler {
                OnlineSampler::Jsi => {
                    jsi_sample(&model, &score, &cfg.jsi, &mut sample_rng).map(|_| ())
                }
                OnlineSampler::BestOfN { n } => {
                    let mut res = Ok(());
                    for _ in 0..*n {
                        let x = ancestral_sample(&model, cfg.jsi.temperature, &mut sample_rng)?;
                        match score.score(&x) {
                            Ok(_) => {}
                            Err(CoreError::BudgetExhausted { .. }) => {
                                res = Err(CoreError::BudgetExhausted {
                                    used: ledger.used(),
                                    budget: ledger.budget(),
                                });
                                break;
                            }
                            Err(e) => return Err(e),
                        }
                    }
                    res
                }
                OnlineSampler::Reinvent(_) => unreachable!(),
            };
            sampling_time += started.elapsed();
            let batch = score.take_log();
            let drained = matches!(outcome, Err(CoreError::BudgetExhausted { .. }));
            match outcome {
                Ok(()) | Err(CoreError::BudgetExhausted { .. }) => {}
                Err(e) => return Err(e),
            }
            if batch.is_empty() && drained {
                break;
            }
            all_rows.extend(batch);
            if drained || ledger.remaining() == 0 {
                break;
            }

            // Keep the top fraction of everything scored and retrain.
            if retrain.epochs > 0 {
                let mut ranked: Vec<&(Sequence, Vec<f64>, f64)> = all_rows.iter().collect();
                ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
                let keep =
                    ((ranked.len() as f64 * cfg.retrain_top_fraction).ceil() as usize).max(1);
                let kept: Vec<LabeledExample> = ranked[..keep]
                    .iter()
                    .map(|(s, c, _)| LabeledExample::new(s.clone(), c.clone()))
                    .collect::<Result<_>>()?;
                let mut train_rng = rng.split();
                train_joint(&mut model, &kept, &retrain, &mut train_rng)?;
            }
        }
    }

    if all_rows.is_empty() {
        return Err(CoreError::Config(
            "online run scored no samples; budget too small".into(),
        ));
    }
    let rows_out: Vec<SampleRow> = all_rows
        .iter()
        .map(|(seq, components, score)| SampleRow {
            sequence: seq.render(vocab),
            components: components.clone(),
            hit: hit_criterion(components, &hit_spec),
            score: *score,
        })
        .collect();
    let hits: Vec<bool> = rows_out.iter().map(|r| r.hit).collect();
    let seqs: Vec<Sequence> = all_rows.iter().map(|(s, _, _)| s.clone()).collect();
    let metrics = RunMetrics {
        hit_ratio: hit_ratio(&hits)?,
        intdiv1: if seqs.len() >= 2 { intdiv1(&seqs, 3)? } else { 0.0 },
        seconds_per_sample: time_per_sample(sampling_time, seqs.len())?,
    };
    Ok(RunRecord {
        mode: sampler.name().to_string(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg).expect("config serializes"),
        hit_spec: hit_spec.into(),
        metrics,
        oracle_used: ledger.used(),
        oracle_budget: cfg.oracle_budget,
        samples: rows_out,
    })
}

/// Synthetic offline dataset: a biased mixture of uniform draws and
/// pattern-implanted sequences (the "known actives" analog), labeled with
/// uncounted landscape components.
pub fn generate_offline_dataset(
    landscape: &SyntheticLandscape,
    n: usize,
    actives_bias: f64,
    seed: u64,
) -> Vec<LabeledExample> {
    use rand::Rng as _;
    let vocab = landscape.vocab();
    let mut rng = Rng::seed_from_u64(seed);
    let base = landscape.reference_sample(n, seed ^ 0x5eed);
    let patterns = landscape.patterns();
    let mut out = Vec::with_capacity(n);
    for seq in base {
        let implant = rng.gen::<f64>() < actives_bias && !patterns.is_empty();
        let seq = if implant {
            let (pat, _) = &patterns[rng.gen_range(0..patterns.len())];
            let mut content = seq.content().to_vec();
            if content.len() < pat.len() {
                content = pat.clone();
            } else {
                let pos = rng.gen_range(0..=content.len() - pat.len());
                content[pos..pos + pat.len()].copy_from_slice(pat);
            }
            let mut idx = content;
            idx.truncate(landscape.max_len() - 1);
            idx.push(vocab.eos());
            Sequence::new(idx, vocab, landscape.max_len()).expect("implanted sequence valid")
        } else {
            seq
        };
        let components = landscape.components(&seq);
        out.push(LabeledExample::new(seq, components).expect("finite components"));
    }
    out
}
