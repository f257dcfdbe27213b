//! Small trainable joint model: a fixed-width context window, a shared
//! two-layer trunk, a next-token head and a pooled score head. Gradients are
//! hand-derived and verified against central finite differences.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::logspace::logsumexp;
use crate::models::JointModel;
use crate::rng::Rng;
use crate::seq::{LabeledExample, Sequence, TokenId, Vocabulary};
use crate::view::{at_length_cap, eos_only_row, SeqDist};

const INIT_SCALE: f64 = 0.05;
const GRAD_CLIP_NORM: f64 = 1.0;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NeuralConfig {
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    /// Context window width h; prefixes shorter than h are left-padded with BOS.
    #[serde(default = "default_context")]
    pub context: usize,
    #[serde(default = "default_num_objectives")]
    pub num_objectives: usize,
}

fn default_embed_dim() -> usize {
    16
}
fn default_hidden_dim() -> usize {
    32
}
fn default_context() -> usize {
    8
}
fn default_num_objectives() -> usize {
    1
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig {
            embed_dim: default_embed_dim(),
            hidden_dim: default_hidden_dim(),
            context: default_context(),
            num_objectives: default_num_objectives(),
        }
    }
}

impl NeuralConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.context == 0 {
            return Err(CoreError::Config(
                "embed_dim, hidden_dim and context must be positive".into(),
            ));
        }
        if self.num_objectives == 0 {
            return Err(CoreError::Config("num_objectives must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the predictive term in the joint loss; 0 trains generation only.
    pub lambda: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without epoch-mean improvement before stopping early; 0 disables.
    #[serde(default)]
    pub patience: usize,
    /// Weight of the generative term; lowered to 0 to fit a predictor alone.
    #[serde(default = "default_generative_weight")]
    pub generative_weight: f64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    16
}
fn default_generative_weight() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(CoreError::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be at least 1".into()));
        }
        if self.generative_weight < 0.0 {
            return Err(CoreError::Config("generative_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-step mean losses plus the smoothed-descent diagnostic.
#[derive(Clone, Debug, Default)]
pub struct TrainTrace {
    pub step_losses: Vec<f64>,
    pub epoch_means: Vec<f64>,
    /// Soft check: 10-step moving average never increased (small slack).
    pub smooth_descent: bool,
}

#[derive(Clone, Debug)]
struct Block {
    name: &'static str,
    offset: usize,
    len: usize,
}

/// Joint model with shared trunk parameters.
#[derive(Clone, Debug)]
pub struct NeuralJointModel {
    vocab: Vocabulary,
    max_len: usize,
    cfg: NeuralConfig,
    params: Vec<f64>,
    blocks: Vec<Block>,
}

struct PositionCache {
    window: Vec<TokenId>,
    input: Vec<f64>,  // concatenated embeddings, h*d
    hidden: Vec<f64>, // tanh(W1 u + b1), H
    feat: Vec<f64>,   // tanh(W2 a + b2), d
}

impl NeuralJointModel {
    pub fn init(vocab: &Vocabulary, max_len: usize, cfg: NeuralConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if max_len < 1 {
            return Err(CoreError::Config("max_len must be at least 1".into()));
        }
        let v = vocab.size();
        let (d, hd, h) = (cfg.embed_dim, cfg.hidden_dim, cfg.context);
        let m = cfg.num_objectives;
        let spec: &[(&'static str, usize, bool)] = &[
            ("embed", v * d, true),
            ("w1", hd * h * d, true),
            ("b1", hd, false),
            ("w2", d * hd, true),
            ("b2", d, false),
            ("w_tok", v * d, true),
            ("b_tok", v, false),
            ("w_score", m * d, true),
            ("b_score", m, false),
        ];
        let total: usize = spec.iter().map(|(_, n, _)| n).sum();
        let mut params = Vec::with_capacity(total);
        let mut blocks = Vec::with_capacity(spec.len());
        for &(name, len, is_weight) in spec {
            blocks.push(Block { name, offset: params.len(), len });
            for _ in 0..len {
                params.push(if is_weight {
                    rng.gen_range(-INIT_SCALE..INIT_SCALE)
                } else {
                    0.0
                });
            }
        }
        Ok(NeuralJointModel { vocab: vocab.clone(), max_len, cfg, params, blocks })
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Vec<f64> {
        &mut self.params
    }

    pub fn block_names(&self) -> Vec<&'static str> {
        self.blocks.iter().map(|b| b.name).collect()
    }

    pub fn block(&self, name: &str) -> &[f64] {
        let b = self
            .blocks
            .iter()
            .find(|b| b.name == name)
            .unwrap_or_else(|| panic!("unknown parameter block {name:?}"));
        &self.params[b.offset..b.offset + b.len]
    }

    /// Index range of a block inside the flat parameter vector.
    pub fn block_range(&self, name: &str) -> std::ops::Range<usize> {
        let b = self
            .blocks
            .iter()
            .find(|b| b.name == name)
            .unwrap_or_else(|| panic!("unknown parameter block {name:?}"));
        b.offset..b.offset + b.len
    }

    fn dims(&self) -> (usize, usize, usize, usize, usize) {
        (
            self.vocab.size(),
            self.cfg.embed_dim,
            self.cfg.hidden_dim,
            self.cfg.context,
            self.cfg.num_objectives,
        )
    }

    /// Window of the last h conceptual tokens (BOS, x_1, .., x_s), left-padded
    /// with BOS.
    fn window(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let h = self.cfg.context;
        let stream_len = prefix.len() + 1; // BOS + prefix
        (0..h)
            .map(|j| {
                let pos = (stream_len + j).checked_sub(h);
                match pos {
                    Some(0) | None => self.vocab.bos(),
                    Some(p) => prefix[p - 1],
                }
            })
            .collect()
    }

    fn forward_window(&self, window: &[TokenId]) -> PositionCache {
        let (_, d, hd, h, _) = self.dims();
        let embed = self.block("embed");
        let mut input = Vec::with_capacity(h * d);
        for &tok in window {
            input.extend_from_slice(&embed[tok * d..(tok + 1) * d]);
        }
        let w1 = self.block("w1");
        let b1 = self.block("b1");
        let mut hidden = vec![0.0; hd];
        matvec_add(w1, hd, h * d, &input, b1, &mut hidden);
        for x in hidden.iter_mut() {
            *x = x.tanh();
        }
        let w2 = self.block("w2");
        let b2 = self.block("b2");
        let mut feat = vec![0.0; d];
        matvec_add(w2, d, hd, &hidden, b2, &mut feat);
        for x in feat.iter_mut() {
            *x = x.tanh();
        }
        PositionCache { window: window.to_vec(), input, hidden, feat }
    }

    fn token_logits(&self, feat: &[f64]) -> Vec<f64> {
        let (v, d, ..) = self.dims();
        let w_tok = self.block("w_tok");
        let b_tok = self.block("b_tok");
        let mut logits = vec![0.0; v];
        matvec_add(w_tok, v, d, feat, b_tok, &mut logits);
        // BOS is a decoding state, never an output.
        logits[self.vocab.bos()] = f64::NEG_INFINITY;
        logits
    }

    /// Positions pooled by the score head: windows ending at each content
    /// token, or the BOS-only window for a bare-EOS sequence.
    fn pool_positions(seq_len: usize) -> std::ops::Range<usize> {
        if seq_len >= 2 {
            1..seq_len
        } else {
            0..1
        }
    }

    /// Loss (and gradient accumulation) for one example.
    ///
    /// `gen_scale` multiplies the generative NLL, `pred_scale` the squared
    /// error term; both already include any lambda or batch normalization.
    fn example_loss(
        &self,
        x: &Sequence,
        y: Option<&[f64]>,
        gen_scale: f64,
        pred_scale: f64,
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        let (v, d, hd, h, m) = self.dims();
        let idx = x.indices();
        let t_len = idx.len();
        let caches: Vec<PositionCache> = (0..t_len)
            .map(|s| self.forward_window(&self.window(&idx[..s])))
            .collect();
        let mut dfeat = vec![vec![0.0; d]; t_len];
        let mut loss = 0.0;

        if gen_scale != 0.0 {
            let w_tok = self.block("w_tok");
            for t in 1..=t_len {
                if at_length_cap(t - 1, self.max_len) {
                    continue; // EOS forced by the cap: no parametric step
                }
                let s = t - 1;
                let logits = self.token_logits(&caches[s].feat);
                let lse = logsumexp(&logits);
                let target = idx[t - 1];
                loss += gen_scale * (lse - logits[target]);
                if let Some(g) = grad.as_deref_mut() {
                    let (gt, gtb) = (self.block_range("w_tok"), self.block_range("b_tok"));
                    for tok in 0..v {
                        if logits[tok] == f64::NEG_INFINITY {
                            continue;
                        }
                        let p = (logits[tok] - lse).exp();
                        let dl = gen_scale * (p - if tok == target { 1.0 } else { 0.0 });
                        if dl == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            g[gt.start + tok * d + c] += dl * caches[s].feat[c];
                            dfeat[s][c] += dl * w_tok[tok * d + c];
                        }
                        g[gtb.start + tok] += dl;
                    }
                }
            }
        }

        if pred_scale != 0.0 {
            if let Some(y) = y {
                let pool_range = Self::pool_positions(t_len);
                let count = pool_range.len() as f64;
                let mut pool = vec![0.0; d];
                for s in pool_range.clone() {
                    for c in 0..d {
                        pool[c] += caches[s].feat[c];
                    }
                }
                for p in pool.iter_mut() {
                    *p /= count;
                }
                let w_score = self.block("w_score");
                let b_score = self.block("b_score");
                let mut yhat = vec![0.0; m];
                matvec_add(w_score, m, d, &pool, b_score, &mut yhat);
                for j in 0..m {
                    let e = yhat[j] - y[j];
                    loss += pred_scale * 0.5 * e * e;
                }
                if let Some(g) = grad.as_deref_mut() {
                    let (gs, gsb) = (self.block_range("w_score"), self.block_range("b_score"));
                    let mut dpool = vec![0.0; d];
                    for j in 0..m {
                        let dy = pred_scale * (yhat[j] - y[j]);
                        for c in 0..d {
                            g[gs.start + j * d + c] += dy * pool[c];
                            dpool[c] += dy * w_score[j * d + c];
                        }
                        g[gsb.start + j] += dy;
                    }
                    for s in pool_range {
                        for c in 0..d {
                            dfeat[s][c] += dpool[c] / count;
                        }
                    }
                }
            }
        }

        if let Some(g) = grad {
            let w1 = self.block("w1");
            let w2 = self.block("w2");
            let r_emb = self.block_range("embed");
            let (r_w1, r_b1) = (self.block_range("w1"), self.block_range("b1"));
            let (r_w2, r_b2) = (self.block_range("w2"), self.block_range("b2"));
            for (s, cache) in caches.iter().enumerate() {
                if dfeat[s].iter().all(|&x| x == 0.0) {
                    continue;
                }
                let mut dpre2 = vec![0.0; d];
                for c in 0..d {
                    dpre2[c] = dfeat[s][c] * (1.0 - cache.feat[c] * cache.feat[c]);
                }
                let mut dhidden = vec![0.0; hd];
                for r in 0..d {
                    if dpre2[r] == 0.0 {
                        continue;
                    }
                    for c in 0..hd {
                        g[r_w2.start + r * hd + c] += dpre2[r] * cache.hidden[c];
                        dhidden[c] += dpre2[r] * w2[r * hd + c];
                    }
                    g[r_b2.start + r] += dpre2[r];
                }
                let mut dpre1 = vec![0.0; hd];
                for c in 0..hd {
                    dpre1[c] = dhidden[c] * (1.0 - cache.hidden[c] * cache.hidden[c]);
                }
                for r in 0..hd {
                    if dpre1[r] == 0.0 {
                        continue;
                    }
                    for c in 0..h * d {
                        g[r_w1.start + r * (h * d) + c] += dpre1[r] * cache.input[c];
                    }
                    g[r_b1.start + r] += dpre1[r];
                }
                // du = W1^T dpre1, scattered into the window's embedding rows
                for (j, &tok) in cache.window.iter().enumerate() {
                    for c in 0..d {
                        let col = j * d + c;
                        let mut du = 0.0;
                        for r in 0..hd {
                            du += w1[r * (h * d) + col] * dpre1[r];
                        }
                        g[r_emb.start + tok * d + c] += du;
                    }
                }
            }
        }
        loss
    }

    /// Mean joint loss over a batch, with its gradient when requested.
    pub(crate) fn batch_loss(
        &self,
        batch: &[LabeledExample],
        lambda: f64,
        gen_weight: f64,
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        assert!(!batch.is_empty());
        let norm = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for ex in batch {
            loss += self.example_loss(
                &ex.sequence,
                Some(&ex.scores),
                gen_weight * norm,
                lambda * norm,
                grad.as_deref_mut(),
            );
        }
        loss
    }

    /// Sum of weighted sequence NLL gradients: grad of sum_i w_i * (-log p(x_i)).
    /// Returns (value, gradient). Used by the policy-gradient baseline.
    pub fn weighted_nll_grad(&self, items: &[(&Sequence, f64)]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut value = 0.0;
        for &(x, w) in items {
            value += self.example_loss(x, None, w, 0.0, Some(&mut grad));
        }
        (value, grad)
    }
}

impl SeqDist for NeuralJointModel {
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
        let cache = self.forward_window(&self.window(prefix));
        let mut logits = self.token_logits(&cache.feat);
        let lse = logsumexp(&logits);
        for l in logits.iter_mut() {
            if *l != f64::NEG_INFINITY {
                *l -= lse;
            }
        }
        logits
    }
}

impl JointModel for NeuralJointModel {
    fn predict(&self, x: &Sequence) -> Vec<f64> {
        let (_, d, _, _, m) = self.dims();
        let idx = x.indices();
        let pool_range = Self::pool_positions(idx.len());
        let count = pool_range.len() as f64;
        let mut pool = vec![0.0; d];
        for s in pool_range {
            let cache = self.forward_window(&self.window(&idx[..s]));
            for c in 0..d {
                pool[c] += cache.feat[c];
            }
        }
        for p in pool.iter_mut() {
            *p /= count;
        }
        let mut yhat = vec![0.0; m];
        matvec_add(self.block("w_score"), m, d, &pool, self.block("b_score"), &mut yhat);
        yhat
    }

    fn num_objectives(&self) -> usize {
        self.cfg.num_objectives
    }
}

/// Minibatch gradient descent on the joint loss with global-norm clipping.
pub fn train_joint(
    model: &mut NeuralJointModel,
    data: &[LabeledExample],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainTrace> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::EmptyInput("train_joint"));
    }
    for ex in data {
        if ex.scores.len() != model.num_objectives() {
            return Err(CoreError::Config(format!(
                "example has {} scores but the model predicts {}",
                ex.scores.len(),
                model.num_objectives()
            )));
        }
    }
    let mut trace = TrainTrace { smooth_descent: true, ..Default::default() };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; model.param_count()];
    let mut best_epoch_mean = f64::INFINITY;
    let mut stale_epochs = 0usize;
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<LabeledExample> = chunk.iter().map(|&i| data[i].clone()).collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = model.batch_loss(&batch, cfg.lambda, cfg.generative_weight, Some(&mut grad));
            if !loss.is_finite() {
                return Err(CoreError::TrainDiverged { step, learning_rate: cfg.learning_rate });
            }
            clip_grad_norm(&mut grad, GRAD_CLIP_NORM);
            let params = model.params_mut();
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            trace.step_losses.push(loss);
            epoch_loss += loss;
            epoch_batches += 1;
            step += 1;
        }
        let mean = epoch_loss / epoch_batches.max(1) as f64;
        trace.epoch_means.push(mean);
        if cfg.patience > 0 {
            if mean < best_epoch_mean - 1e-12 {
                best_epoch_mean = mean;
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= cfg.patience {
                    log::info!("early stop after {} stale epochs", stale_epochs);
                    break;
                }
            }
        }
    }
    trace.smooth_descent = smooth_descent_ok(&trace.step_losses);
    if !trace.smooth_descent {
        log::warn!("training loss moving average increased; data may be ill-conditioned");
    }
    Ok(trace)
}

fn smooth_descent_ok(losses: &[f64]) -> bool {
    const WINDOW: usize = 10;
    if losses.len() < 2 * WINDOW {
        return true;
    }
    let ma: Vec<f64> = losses
        .windows(WINDOW)
        .map(|w| w.iter().sum::<f64>() / WINDOW as f64)
        .collect();
    ma.windows(2).all(|w| w[1] <= w[0] + 1e-3 * w[0].abs().max(1e-9))
}

fn clip_grad_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
}

/// Worst coordinate disagreement between the analytic batch gradient and a
/// central finite difference.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

pub fn grad_check(
    model: &NeuralJointModel,
    batch: &[LabeledExample],
    lambda: f64,
    eps: f64,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(CoreError::EmptyInput("grad_check"));
    }
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(CoreError::Config(format!(
            "grad_check eps must lie in [1e-6, 1e-3], got {eps}"
        )));
    }
    let n = model.param_count();
    let mut analytic = vec![0.0; n];
    model.batch_loss(batch, lambda, 1.0, Some(&mut analytic));

    // All coordinates for small models, otherwise a seeded subsample (>= 200).
    let coords: Vec<usize> = if n <= 600 {
        (0..n).collect()
    } else {
        let mut rng = Rng::seed_from_u64(0x9e3779b97f4a7c15);
        let mut set = std::collections::BTreeSet::new();
        while set.len() < 400 {
            set.insert(rng.gen_range(0..n));
        }
        set.into_iter().collect()
    };

    // Central differences on an O(1) loss resolve a derivative to roughly
    // 1e-15 / eps in double precision; below that, subtraction noise
    // dominates and a relative comparison is meaningless.
    let abs_resolution = 5e-12 / eps;

    let mut probe = model.clone();
    let mut max_rel = 0.0f64;
    for &i in &coords {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + eps;
        let up = probe.batch_loss(batch, lambda, 1.0, None);
        probe.params_mut()[i] = orig - eps;
        let down = probe.batch_loss(batch, lambda, 1.0, None);
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let diff = (numeric - analytic[i]).abs();
        if diff < abs_resolution {
            continue;
        }
        let rel = diff / (numeric.abs() + analytic[i].abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport { max_rel_error: max_rel, coords_checked: coords.len() })
}

/// out = W x + b for a row-major (rows x cols) matrix.
fn matvec_add(w: &[f64], rows: usize, cols: usize, x: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] = acc;
    }
}
