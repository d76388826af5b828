//! Retrieval head: a concat scorer over query/passage embeddings, hard
//! Top-K selection, and a differentiable Gumbel-TopK relaxation used to
//! train the scorer against gold passage masks.
//!
//! The relaxation perturbs scores with Gumbel noise and then spreads `K`
//! units of mass over the passages with capped softmax rounds: each round
//! distributes the mass still unallocated over the unsaturated passages
//! with a temperature-`tau` softmax, and passages that reach 1 are frozen.
//! With `K = 1` this is exactly a Gumbel-softmax sample; as `tau -> 0` it
//! tends to the hard Top-K mask of the perturbed scores.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};

/// Dense affine map `y = W x + b`, `W` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Affine {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    fn axpy(&mut self, alpha: f64, other: &Affine) {
        axpy(&mut self.weight, alpha, &other.weight);
        axpy(&mut self.bias, alpha, &other.bias);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Query encoder, passage encoder and the scoring layer over the
/// concatenated encodings `[enc_q(h_q); enc_c(h_c)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub enc_q: Affine,
    pub enc_c: Affine,
    /// Length `2 * hidden`: query half first, passage half second.
    pub score_weight: Vec<f64>,
    pub score_bias: f64,
}

impl ScorerParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        ScorerParams {
            enc_q: Affine::zeros(hidden, input_dim),
            enc_c: Affine::zeros(hidden, input_dim),
            score_weight: vec![0.0; 2 * hidden],
            score_bias: 0.0,
        }
    }

    /// Uniform initialization in `±1/sqrt(fan_in)`.
    pub fn init(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &["init"]);
        let mut fill = |v: &mut [f64], fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for x in v {
                *x = rng.random_range(-a..a);
            }
        };
        let mut p = ScorerParams::zeros(input_dim, hidden);
        fill(&mut p.enc_q.weight, input_dim);
        fill(&mut p.enc_c.weight, input_dim);
        fill(&mut p.score_weight, 2 * hidden);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.enc_q.cols
    }

    pub fn hidden(&self) -> usize {
        self.enc_q.rows
    }

    fn check_shapes(&self) -> Result<()> {
        let h = self.hidden();
        let ok = self.enc_c.rows == h
            && self.enc_c.cols == self.enc_q.cols
            && self.enc_q.weight.len() == h * self.enc_q.cols
            && self.enc_c.weight.len() == h * self.enc_c.cols
            && self.enc_q.bias.len() == h
            && self.enc_c.bias.len() == h
            && self.score_weight.len() == 2 * h;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("inconsistent scorer parameter shapes".into()))
        }
    }

    fn axpy(&mut self, alpha: f64, other: &ScorerParams) {
        self.enc_q.axpy(alpha, &other.enc_q);
        self.enc_c.axpy(alpha, &other.enc_c);
        axpy(&mut self.score_weight, alpha, &other.score_weight);
        self.score_bias += alpha * other.score_bias;
    }

    fn squared_norm(&self) -> f64 {
        [&self.enc_q.weight, &self.enc_q.bias, &self.enc_c.weight, &self.enc_c.bias, &self.score_weight]
            .iter()
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            + self.score_bias * self.score_bias
    }
}

/// One query's embeddings: `h_q` (length d), `h_c` (n rows of length d),
/// and optionally the gold passage mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBatch {
    pub h_q: Vec<f64>,
    pub h_c: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<u8>>,
}

impl EmbeddingBatch {
    pub fn validate(&self) -> Result<()> {
        let d = self.h_q.len();
        if self.h_c.is_empty() {
            return Err(Error::Shape("batch has no passages".into()));
        }
        if let Some(row) = self.h_c.iter().find(|r| r.len() != d) {
            return Err(Error::Shape(format!("passage embedding has dimension {}, query has {d}", row.len())));
        }
        if self.h_q.iter().chain(self.h_c.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite embedding value".into()));
        }
        if let Some(gold) = &self.gold {
            if gold.len() != self.h_c.len() || gold.iter().any(|&g| g > 1) {
                return Err(Error::Shape("gold mask must be a 0/1 array with one entry per passage".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.h_c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h_c.is_empty()
    }

    pub fn gold_mask(&self) -> Result<Vec<f64>> {
        self.gold
            .as_ref()
            .map(|g| g.iter().map(|&b| f64::from(b)).collect())
            .ok_or_else(|| Error::Config("batch has no gold labels".into()))
    }
}

pub fn score_passages(params: &ScorerParams, batch: &EmbeddingBatch) -> Result<Vec<f64>> {
    params.check_shapes()?;
    batch.validate()?;
    if batch.h_q.len() != params.input_dim() {
        return Err(Error::Shape(format!(
            "embeddings have dimension {}, scorer expects {}",
            batch.h_q.len(),
            params.input_dim()
        )));
    }
    let h = params.hidden();
    let (w_q, w_c) = params.score_weight.split_at(h);
    let query_term = dot(w_q, &params.enc_q.apply(&batch.h_q)) + params.score_bias;
    Ok(batch
        .h_c
        .iter()
        .map(|c| query_term + dot(w_c, &params.enc_c.apply(c)))
        .collect())
}

/// Gradient of `sum_i upstream_i * s_i` with respect to the scorer parameters.
pub fn score_passages_backward(params: &ScorerParams, batch: &EmbeddingBatch, upstream: &[f64]) -> ScorerParams {
    let h = params.hidden();
    let (w_q, w_c) = params.score_weight.split_at(h);
    let total: f64 = upstream.iter().sum();
    let e_q = params.enc_q.apply(&batch.h_q);

    let mut grad = ScorerParams::zeros(params.input_dim(), h);
    grad.score_bias = total;
    let (gw_q, gw_c) = grad.score_weight.split_at_mut(h);
    axpy(gw_q, total, &e_q);

    let mut weighted_c = vec![0.0; params.input_dim()];
    for (c, &g) in batch.h_c.iter().zip(upstream) {
        axpy(gw_c, g, &params.enc_c.apply(c));
        axpy(&mut weighted_c, g, c);
    }
    for r in 0..h {
        let row_q = &mut grad.enc_q.weight[r * params.input_dim()..(r + 1) * params.input_dim()];
        axpy(row_q, total * w_q[r], &batch.h_q);
        grad.enc_q.bias[r] = total * w_q[r];
        let row_c = &mut grad.enc_c.weight[r * params.input_dim()..(r + 1) * params.input_dim()];
        axpy(row_c, w_c[r], &weighted_c);
        grad.enc_c.bias[r] = total * w_c[r];
    }
    grad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Scores the selection was made on (perturbed, for samples).
    pub scores: Vec<f64>,
    /// Selected indices, best first.
    pub indices: Vec<usize>,
    /// Hard `{0,1}` or relaxed `[0,1]` mask.
    pub mask: Vec<f64>,
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("K must lie in [1, {n}], got {k}")));
    }
    Ok(())
}

/// Indices of the `k` largest scores, best first; ties by index.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn topk_mask(scores: &[f64], k: usize) -> Result<SelectionResult> {
    check_k(k, scores.len())?;
    let indices = topk_indices(scores, k);
    let mut mask = vec![0.0; scores.len()];
    for &i in &indices {
        mask[i] = 1.0;
    }
    Ok(SelectionResult {
        scores: scores.to_vec(),
        indices,
        mask,
    })
}

/// Standard Gumbel(0, 1) draws for `n` items, a pure function of `seed`.
pub fn gumbel_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, &["gumbel"]);
    (0..n)
        .map(|_| {
            let mut u: f64 = rng.random();
            while u <= 0.0 {
                u = rng.random();
            }
            -(-u.ln()).ln()
        })
        .collect()
}

/// Relaxed Top-K mask over already perturbed scores, with the bookkeeping
/// needed for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedMask {
    pub mask: Vec<f64>,
    pub saturated: Vec<bool>,
    pub tau: f64,
    /// Mass spread by softmax over the unsaturated entries (`K - #saturated`).
    pub free_mass: f64,
}

pub fn relaxed_topk(perturbed: &[f64], k: usize, tau: f64) -> Result<RelaxedMask> {
    check_k(k, perturbed.len())?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let n = perturbed.len();
    let mut saturated = vec![false; n];
    let mut mask = vec![0.0; n];
    loop {
        let n_sat = saturated.iter().filter(|&&s| s).count();
        let free_mass = (k - n_sat) as f64;
        let peak = (0..n)
            .filter(|&i| !saturated[i])
            .map(|i| perturbed[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for i in 0..n {
            mask[i] = if saturated[i] {
                1.0
            } else {
                let e = ((perturbed[i] - peak) / tau).exp();
                total += e;
                e
            };
        }
        let mut grew = false;
        for i in 0..n {
            if saturated[i] {
                continue;
            }
            mask[i] *= free_mass / total;
            if mask[i] >= 1.0 {
                saturated[i] = true;
                grew = true;
            }
        }
        if !grew {
            return Ok(RelaxedMask {
                mask,
                saturated,
                tau,
                free_mass,
            });
        }
    }
}

/// Vector-Jacobian product of [`relaxed_topk`]: `d(upstream · mask)/d(perturbed)`.
pub fn relaxed_topk_vjp(relaxed: &RelaxedMask, upstream: &[f64]) -> Vec<f64> {
    let free: Vec<usize> = (0..relaxed.mask.len()).filter(|&i| !relaxed.saturated[i]).collect();
    if relaxed.free_mass == 0.0 {
        return vec![0.0; relaxed.mask.len()];
    }
    let weighted: f64 = free.iter().map(|&i| upstream[i] * relaxed.mask[i]).sum::<f64>() / relaxed.free_mass;
    let mut grad = vec![0.0; relaxed.mask.len()];
    for &j in &free {
        grad[j] = relaxed.mask[j] * (upstream[j] - weighted) / relaxed.tau;
    }
    grad
}

/// Perturb with seeded Gumbel noise and relax. `scores` of the result are
/// the perturbed scores and `indices` their hard Top-K.
pub fn gumbel_topk_sample(scores: &[f64], k: usize, tau: f64, seed: u64) -> Result<SelectionResult> {
    let perturbed: Vec<f64> = scores.iter().zip(gumbel_noise(scores.len(), seed)).map(|(s, g)| s + g).collect();
    let relaxed = relaxed_topk(&perturbed, k, tau)?;
    Ok(SelectionResult {
        indices: topk_indices(&perturbed, k),
        scores: perturbed,
        mask: relaxed.mask,
    })
}

/// Gradient of `upstream · mask` with respect to the unperturbed scores,
/// holding the seed's noise fixed.
pub fn gumbel_topk_grad(scores: &[f64], k: usize, tau: f64, seed: u64, upstream: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != scores.len() {
        return Err(Error::Shape(format!(
            "upstream gradient has {} entries for {} scores",
            upstream.len(),
            scores.len()
        )));
    }
    let perturbed: Vec<f64> = scores.iter().zip(gumbel_noise(scores.len(), seed)).map(|(s, g)| s + g).collect();
    let relaxed = relaxed_topk(&perturbed, k, tau)?;
    Ok(relaxed_topk_vjp(&relaxed, upstream))
}

const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy between a relaxed mask and a gold mask.
pub fn retrieval_loss(mask: &[f64], gold: &[f64]) -> f64 {
    let n = mask.len() as f64;
    mask.iter()
        .zip(gold)
        .map(|(&m, &y)| {
            let m = m.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * m.ln() + (1.0 - y) * (1.0 - m).ln())
        })
        .sum::<f64>()
        / n
}

pub fn retrieval_loss_grad(mask: &[f64], gold: &[f64]) -> Vec<f64> {
    let n = mask.len() as f64;
    mask.iter()
        .zip(gold)
        .map(|(&m, &y)| {
            let m = m.clamp(BCE_EPS, 1.0 - BCE_EPS);
            (m - y) / (m * (1.0 - m)) / n
        })
        .collect()
}

/// Mask-space signal for straight-through training. BCE is unbounded at a
/// hard 0/1 mask, so the residual `(m - y) / n` is passed back instead.
fn straight_through_residual(mask: &[f64], gold: &[f64]) -> Vec<f64> {
    let n = mask.len() as f64;
    mask.iter().zip(gold).map(|(m, y)| (m - y) / n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    /// Relaxed mask in both passes.
    #[default]
    Relaxed,
    /// Hard mask forward, relaxed gradient backward.
    StraightThrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub tau: f64,
    pub steps: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub relaxation: Relaxation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 2,
            tau: 0.5,
            steps: 2000,
            step_size: 0.1,
            batch_size: 8,
            seed: 0,
            relaxation: Relaxation::Relaxed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: ScorerParams,
    /// Mean minibatch loss per step.
    pub losses: Vec<f64>,
}

/// Plain minibatch gradient descent on the retrieval loss, back-propagated
/// through the Gumbel-TopK relaxation into the scorer.
pub fn train_scorer(init: ScorerParams, data: &[EmbeddingBatch], config: &TrainConfig) -> Result<TrainOutcome> {
    if !(config.tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {}", config.tau)));
    }
    if config.steps > 0 && data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let golds = data.iter().map(EmbeddingBatch::gold_mask).collect::<Result<Vec<_>>>()?;
    let mut params = init;
    let mut losses = Vec::with_capacity(config.steps);
    let mut pick = rng_for(config.seed, &["train", "order"]);
    for step in 0..config.steps {
        let mut grad = ScorerParams::zeros(params.input_dim(), params.hidden());
        let mut loss = 0.0;
        for slot in 0..config.batch_size {
            let idx = pick.random_range(0..data.len());
            let batch = &data[idx];
            let scores = score_passages(&params, batch)?;
            let noise_seed = derive_seed(config.seed, &["train", "noise", &step.to_string(), &slot.to_string()]);
            let perturbed: Vec<f64> = scores
                .iter()
                .zip(gumbel_noise(scores.len(), noise_seed))
                .map(|(s, g)| s + g)
                .collect();
            let relaxed = relaxed_topk(&perturbed, config.k, config.tau)?;
            let forward = match config.relaxation {
                Relaxation::Relaxed => relaxed.mask.clone(),
                Relaxation::StraightThrough => topk_mask(&perturbed, config.k)?.mask,
            };
            loss += retrieval_loss(&forward, &golds[idx]);
            let d_mask = match config.relaxation {
                Relaxation::Relaxed => retrieval_loss_grad(&forward, &golds[idx]),
                Relaxation::StraightThrough => straight_through_residual(&forward, &golds[idx]),
            };
            let d_scores = relaxed_topk_vjp(&relaxed, &d_mask);
            grad.axpy(1.0, &score_passages_backward(&params, batch, &d_scores));
        }
        loss /= config.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        params.axpy(-config.step_size / config.batch_size as f64, &grad);
        if !params.squared_norm().is_finite() {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        losses.push(loss);
    }
    Ok(TrainOutcome { params, losses })
}

/// Mean fraction of gold passages recovered by the hard Top-K of the
/// (noise-free) scores.
pub fn selection_accuracy(params: &ScorerParams, data: &[EmbeddingBatch], k: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut total = 0.0;
    for batch in data {
        let gold = batch.gold_mask()?;
        let n_gold = gold.iter().filter(|&&g| g > 0.5).count();
        if n_gold == 0 {
            return Err(Error::Integrity("evaluation batch has no gold passages".into()));
        }
        let picked = topk_mask(&score_passages(params, batch)?, k)?;
        let hits = picked.indices.iter().filter(|&&i| gold[i] > 0.5).count();
        total += hits as f64 / n_gold as f64;
    }
    Ok(total / data.len() as f64)
}

/// Synthetic linearly separable queries: uniform noise embeddings whose
/// component along a unit direction is confined to `[-0.5, 0.5]`, with gold
/// passages shifted by a constant `2.0` along that direction. The direction
/// depends only on `d`, so sets drawn with different seeds share it.
pub fn separable_dataset(num_queries: usize, n: usize, d: usize, n_gold: usize, seed: u64) -> Result<Vec<EmbeddingBatch>> {
    if d == 0 || n == 0 || n_gold == 0 || n_gold > n {
        return Err(Error::Config(format!("invalid shape n={n} d={d} gold={n_gold}")));
    }
    const OFFSET: f64 = 2.0;
    let mut fixed = rng_for(d as u64, &["separable", "direction"]);
    let mut direction: Vec<f64> = (0..d).map(|_| fixed.random_range(-1.0..1.0)).collect();
    let mut rng = rng_for(seed, &["separable"]);
    let norm = dot(&direction, &direction).sqrt();
    direction.iter_mut().for_each(|x| *x /= norm);

    let mut out = Vec::with_capacity(num_queries);
    for _ in 0..num_queries {
        let h_q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut positions: Vec<usize> = (0..n).collect();
        for i in 0..n_gold {
            let j = rng.random_range(i..n);
            positions.swap(i, j);
        }
        let mut gold = vec![0u8; n];
        for &p in &positions[..n_gold] {
            gold[p] = 1;
        }
        let h_c = gold
            .iter()
            .map(|&g| {
                let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let along = dot(&v, &direction);
                let target = rng.random_range(-0.5..0.5) + if g == 1 { OFFSET } else { 0.0 };
                axpy(&mut v, target - along, &direction);
                v
            })
            .collect();
        out.push(EmbeddingBatch {
            h_q,
            h_c,
            gold: Some(gold),
        });
    }
    Ok(out)
}

/// Copy of `data` with each gold mask randomly permuted within its query.
pub fn shuffle_labels(data: &[EmbeddingBatch], seed: u64) -> Vec<EmbeddingBatch> {
    use rand::seq::SliceRandom;
    let mut rng = rng_for(seed, &["shuffle-labels"]);
    data.iter()
        .map(|b| {
            let mut b = b.clone();
            if let Some(g) = b.gold.as_mut() {
                g.shuffle(&mut rng);
            }
            b
        })
        .collect()
}

/// Norm-wise relative error `max|a - f| / max(max|a|, max|f|, 1e-8)`.
pub fn relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let diff = analytic.iter().zip(reference).map(|(a, f)| (a - f).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(reference).map(|x| x.abs()).fold(1e-8, f64::max);
    diff / scale
}

/// Central finite-difference gradient of `upstream · mask` w.r.t. the scores,
/// with the seed's noise held fixed.
///
/// Entries of the mask near 1 only carry ~1e-16 absolute precision, which
/// swamps differences of 1e-14 at small temperatures. Since the mask sums to
/// `K`, shifting `upstream` by a constant leaves the gradient unchanged; the
/// shift is taken at the largest unsaturated entry so its rounding drops
/// out, and mask differences are accumulated per entry so that saturated
/// entries contribute exactly zero.
pub fn finite_difference_grad(scores: &[f64], k: usize, tau: f64, seed: u64, upstream: &[f64], eps: f64) -> Result<Vec<f64>> {
    let base = gumbel_topk_sample(scores, k, tau, seed)?.mask;
    let shift = (0..base.len())
        .filter(|&i| base[i] < 1.0)
        .max_by(|&a, &b| base[a].total_cmp(&base[b]))
        .map_or(0.0, |i| upstream[i]);
    let mut grad = Vec::with_capacity(scores.len());
    let mut probe = scores.to_vec();
    for i in 0..scores.len() {
        probe[i] = scores[i] + eps;
        let plus = gumbel_topk_sample(&probe, k, tau, seed)?.mask;
        probe[i] = scores[i] - eps;
        let minus = gumbel_topk_sample(&probe, k, tau, seed)?.mask;
        probe[i] = scores[i];
        let delta: f64 = plus
            .iter()
            .zip(&minus)
            .zip(upstream)
            .map(|((p, m), u)| (u - shift) * (p - m))
            .sum();
        grad.push(delta / (2.0 * eps));
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub scores: Vec<f64>,
    pub upstream: Vec<f64>,
    pub noise_seed: u64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub n: usize,
    pub k: usize,
    pub tau: f64,
    pub eps: f64,
    pub trials: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradcheckCase>,
}

/// Compare [`gumbel_topk_grad`] against central differences on `trials`
/// random (scores, upstream, noise seed) triples.
pub fn gradcheck(n: usize, k: usize, tau: f64, trials: usize, eps: f64, seed: u64) -> Result<GradcheckReport> {
    check_k(k, n)?;
    let mut rng = rng_for(seed, &["gradcheck"]);
    let mut report = GradcheckReport {
        n,
        k,
        tau,
        eps,
        trials,
        max_rel_error: 0.0,
        worst: None,
    };
    for _ in 0..trials {
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let upstream: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noise_seed: u64 = rng.random();
        let analytic = gumbel_topk_grad(&scores, k, tau, noise_seed, &upstream)?;
        let numeric = finite_difference_grad(&scores, k, tau, noise_seed, &upstream, eps)?;
        let rel_error = relative_error(&analytic, &numeric);
        if report.worst.is_none() || rel_error > report.max_rel_error {
            report.max_rel_error = rel_error;
            report.worst = Some(GradcheckCase {
                scores,
                upstream,
                noise_seed,
                rel_error,
            });
        }
    }
    Ok(report)
}
