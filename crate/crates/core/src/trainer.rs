//! Group-relative policy optimization: group-normalized advantages, the
//! clipped token-level surrogate with KL penalty, analytic gradients through
//! the exact categorical policy, and the multi-stage curriculum scheduler.
//!
//! Training is on-policy with a single update per rollout batch, so ratios
//! equal one at gradient time and the clip gate only engages when a loss is
//! evaluated against stale `old_logprobs` (which the gradient tests do
//! deliberately). The reference policy is re-snapshotted at stage boundaries
//! by default.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{verification_reward, Dataset, Question};
use crate::error::{Error, Result};
use crate::labeling::majority_vote;
use crate::policy::{
    greedy_decode, prefix_distributions, question_features, sample_group, PolicyParams,
};

/// Where the reward label for a question comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    GroundTruth,
    OfflinePseudo,
    OnlineVote,
}

/// Hyperparameters for one training stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub batch_questions: usize,
    pub steps: usize,
    pub label_mode: LabelMode,
    pub rng_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::InvalidConfig("group size must be >= 2".into()));
        }
        if self.clip_eps <= 0.0 || !self.clip_eps.is_finite() {
            return Err(Error::InvalidConfig("clip_eps must be > 0".into()));
        }
        if self.kl_beta < 0.0 {
            return Err(Error::InvalidConfig("kl_beta must be >= 0".into()));
        }
        if self.batch_questions == 0 || self.steps == 0 {
            return Err(Error::InvalidConfig(
                "batch_questions and steps must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 1e-3,
            learning_rate: 0.5,
            batch_questions: 32,
            steps: 300,
            label_mode: LabelMode::GroundTruth,
            rng_seed: 0,
        }
    }
}

/// Group-normalized advantages for one rollout group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub group_mean: f64,
    pub group_std: f64,
}

/// Normalize rewards against group statistics: `(r_i − μ)/σ` with population
/// standard deviation. A unanimous group (σ = 0) yields all-zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Result<AdvantageVector> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::InvalidConfig(
            "advantage normalization needs a group of at least 2".into(),
        ));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite {
            context: "group rewards".into(),
            step: 0,
        });
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    let values = if std > 0.0 {
        rewards.iter().map(|r| (r - mean) / std).collect()
    } else {
        vec![0.0; g]
    };
    Ok(AdvantageVector {
        values,
        group_mean: mean,
        group_std: std,
    })
}

/// Per-token clipped surrogate value: `min(c·Â, clip(c, 1−ε, 1+ε)·Â)`.
pub fn clipped_term(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Gradient with respect to the policy parameters.
#[derive(Debug, Clone)]
pub struct PolicyGrad {
    pub weights: Array2<f64>,
    pub transitions: Array2<f64>,
}

impl PolicyGrad {
    pub fn zeros(params: &PolicyParams) -> Self {
        PolicyGrad {
            weights: Array2::zeros(params.weights.raw_dim()),
            transitions: Array2::zeros(params.transitions.raw_dim()),
        }
    }

    pub fn add_scaled(&mut self, other: &PolicyGrad, scale: f64) {
        self.weights.scaled_add(scale, &other.weights);
        self.transitions.scaled_add(scale, &other.transitions);
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.transitions.iter()).all(|x| x.is_finite())
    }
}

/// Aggregates returned alongside the loss for telemetry.
#[derive(Debug, Clone, Default)]
pub struct GroupLossStats {
    pub tokens: usize,
    pub clip_active_tokens: usize,
    pub kl_sum: f64,
}

/// Token-level clipped surrogate loss with KL penalty for one rollout group,
/// plus its exact gradient.
///
/// `loss = −(1/G) Σ_i (1/|y_i|) Σ_t ( min[c·Â_i, clip(c, 1−ε, 1+ε)·Â_i] − β·KL_t )`
///
/// The ratio path's gradient is gated exactly as the min/clip composition
/// dictates: a token contributes a surrogate gradient only when the unclipped
/// branch is the active minimum.
#[allow(clippy::too_many_arguments)]
pub fn clipped_surrogate_loss(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    question: &Question,
    responses: &[Vec<usize>],
    old_logprobs: &[Vec<f64>],
    advantages: &AdvantageVector,
    clip_eps: f64,
    kl_beta: f64,
) -> Result<(f64, PolicyGrad, GroupLossStats)> {
    let g = responses.len();
    if g == 0 || old_logprobs.len() != g || advantages.values.len() != g {
        return Err(Error::InvalidConfig(
            "responses, old_logprobs and advantages must agree on group size".into(),
        ));
    }
    let tau = params.temperature;
    let features = question_features(question.feature_seed, params.dim());
    let mut loss = 0.0;
    let mut grad = PolicyGrad::zeros(params);
    let mut stats = GroupLossStats::default();
    for i in 0..g {
        let y = &responses[i];
        if y.is_empty() || old_logprobs[i].len() != y.len() {
            return Err(Error::InvalidConfig(
                "old_logprobs rows must match response lengths".into(),
            ));
        }
        let adv = advantages.values[i];
        let inv = 1.0 / (g as f64 * y.len() as f64);
        let p_dists = prefix_distributions(params, question, y)?;
        let q_dists = prefix_distributions(ref_params, question, y)?;
        for t in 0..y.len() {
            let tok = y[t];
            let p = &p_dists[t];
            let logp = p[tok].ln();
            let ratio = (logp - old_logprobs[i][t]).exp();
            let clipped_ratio = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
            let unclipped = ratio * adv;
            let clipped = clipped_ratio * adv;
            let surrogate = unclipped.min(clipped);
            let q = &q_dists[t];
            let kl: f64 = p
                .iter()
                .zip(q.iter())
                .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
                .sum();
            loss -= inv * (surrogate - kl_beta * kl);
            stats.tokens += 1;
            stats.kl_sum += kl;
            if clipped < unclipped {
                stats.clip_active_tokens += 1;
            }

            // Gradient on the unscaled logits ℓ, then mapped to W and B.
            // Surrogate path is live only on the unclipped branch (ties keep
            // it live, matching min's first-argument choice).
            let surrogate_live = unclipped <= clipped;
            let surr_coef = if surrogate_live { -inv * adv * ratio } else { 0.0 };
            let mut dl_dlogits: Array1<f64> = Array1::zeros(p.len());
            for v in 0..p.len() {
                let indicator = if v == tok { 1.0 } else { 0.0 };
                let mut d = surr_coef * (indicator - p[v]) / tau;
                if kl_beta > 0.0 {
                    d += inv * kl_beta * p[v] * ((p[v].ln() - q[v].ln()) - kl) / tau;
                }
                dl_dlogits[v] = d;
            }
            for v in 0..p.len() {
                let dv = dl_dlogits[v];
                if dv != 0.0 {
                    for j in 0..features.len() {
                        grad.weights[[v, j]] += dv * features[j];
                    }
                }
            }
            if t > 0 {
                let prev = y[t - 1];
                for v in 0..p.len() {
                    grad.transitions[[prev, v]] += dl_dlogits[v];
                }
            }
        }
    }
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite {
            context: format!("surrogate loss for question `{}`", question.id),
            step: 0,
        });
    }
    Ok((loss, grad, stats))
}

/// Per-step telemetry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub stage: usize,
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    /// Share of questions whose G extracted answers are all identical.
    pub agreement_fraction: f64,
    pub accuracy_holdout: f64,
    pub accuracy_rare: f64,
    pub accuracy_general: f64,
}

/// Accuracy of greedy decoding on a labeled evaluation set, split by rarity,
/// with optional repeated sampled-decoding runs (mean and standard deviation
/// across run seeds).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: f64,
    pub rare: f64,
    pub general: f64,
    pub n_total: usize,
    pub n_rare: usize,
    pub n_general: usize,
    pub sampled_mean: Option<f64>,
    pub sampled_std: Option<f64>,
}

pub fn evaluate(
    params: &PolicyParams,
    eval_dataset: &Dataset,
    n_sample_runs: usize,
    sample_seed: u64,
) -> Result<EvalReport> {
    let mut correct = 0usize;
    let mut rare_correct = 0usize;
    let mut rare_total = 0usize;
    let mut general_correct = 0usize;
    let mut general_total = 0usize;
    for q in &eval_dataset.entries {
        let label = q.label.ok_or_else(|| Error::MissingLabel { id: q.id.clone() })?;
        crate::policy::check_vocab_covers(params, q)?;
        let tokens = greedy_decode(params, q);
        let extracted = crate::policy::extract_from_tokens(params, q, &tokens);
        let hit = verification_reward(label, extracted) > 0.5;
        match q.rarity {
            crate::dataset::Rarity::Rare => {
                rare_total += 1;
                if hit {
                    rare_correct += 1;
                }
            }
            crate::dataset::Rarity::General => {
                general_total += 1;
                if hit {
                    general_correct += 1;
                }
            }
        }
        if hit {
            correct += 1;
        }
    }
    let frac = |c: usize, n: usize| if n == 0 { f64::NAN } else { c as f64 / n as f64 };
    let mut sampled_mean = None;
    let mut sampled_std = None;
    if n_sample_runs > 0 {
        let mut accs = Vec::with_capacity(n_sample_runs);
        for run in 0..n_sample_runs {
            let mut run_correct = 0usize;
            for (idx, q) in eval_dataset.entries.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed.wrapping_add(run as u64));
                rng.set_stream(idx as u64);
                let group = sample_group(params, q, 2, &mut rng)?;
                let label = q.label.expect("checked above");
                if verification_reward(label, group.extracted[0]) > 0.5 {
                    run_correct += 1;
                }
            }
            accs.push(frac(run_correct, eval_dataset.len()));
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
        sampled_mean = Some(mean);
        sampled_std = Some(var.sqrt());
    }
    Ok(EvalReport {
        overall: frac(correct, eval_dataset.len()),
        rare: frac(rare_correct, rare_total),
        general: frac(general_correct, general_total),
        n_total: eval_dataset.len(),
        n_rare: rare_total,
        n_general: general_total,
        sampled_mean,
        sampled_std,
    })
}

/// A batch entry: a question plus the label source that prices its rewards.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub question: &'a Question,
    pub source: LabelMode,
}

/// Mutable training state for one stage.
pub struct Trainer {
    pub params: PolicyParams,
    pub ref_params: PolicyParams,
    pub config: TrainConfig,
    pub global_step: usize,
    pub stage: usize,
}

impl Trainer {
    pub fn new(params: PolicyParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let ref_params = params.snapshot();
        Ok(Trainer {
            params,
            ref_params,
            config,
            global_step: 0,
            stage: 0,
        })
    }

    /// One on-policy update: sample G rollouts per batch question, price
    /// rewards by each question's label source, normalize within groups, and
    /// apply a single plain-gradient-descent step on the clipped objective.
    pub fn train_step(&mut self, batch: &[BatchItem<'_>], rng: &mut ChaCha8Rng) -> Result<MetricsRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty training batch".into()));
        }
        let g = self.config.group_size;
        let mut total_grad = PolicyGrad::zeros(&self.params);
        let mut reward_sum = 0.0;
        let mut abs_adv_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut tokens = 0usize;
        let mut clip_active = 0usize;
        let mut unanimous = 0usize;
        let batch_scale = 1.0 / batch.len() as f64;
        for item in batch {
            let q = item.question;
            let group = sample_group(&self.params, q, g, rng)?;
            let rewards: Vec<f64> = match item.source {
                LabelMode::GroundTruth | LabelMode::OfflinePseudo => {
                    let label = q.label.ok_or_else(|| Error::MissingLabel { id: q.id.clone() })?;
                    group
                        .extracted
                        .iter()
                        .map(|e| verification_reward(label, *e))
                        .collect()
                }
                LabelMode::OnlineVote => match majority_vote(&group.extracted, &q.symbols()) {
                    Ok(tally) => group
                        .extracted
                        .iter()
                        .map(|e| verification_reward(tally.winner, *e))
                        .collect(),
                    // Nothing parseable this step: every rollout scores zero.
                    Err(Error::AllVotesNone { .. }) => vec![0.0; g],
                    Err(e) => return Err(e),
                },
            };
            let advantages = group_advantages(&rewards)?;
            let (_, grad, stats) = clipped_surrogate_loss(
                &self.params,
                &self.ref_params,
                q,
                &group.responses,
                &group.logprobs_old,
                &advantages,
                self.config.clip_eps,
                self.config.kl_beta,
            )
            .map_err(|e| match e {
                Error::NonFinite { context, .. } => Error::NonFinite {
                    context,
                    step: self.global_step,
                },
                other => other,
            })?;
            total_grad.add_scaled(&grad, batch_scale);
            reward_sum += rewards.iter().sum::<f64>() / g as f64;
            abs_adv_sum += advantages.values.iter().map(|a| a.abs()).sum::<f64>() / g as f64;
            kl_sum += stats.kl_sum;
            tokens += stats.tokens;
            clip_active += stats.clip_active_tokens;
            if group.unanimous() {
                unanimous += 1;
            }
        }
        let lr = self.config.learning_rate;
        self.params.weights.scaled_add(-lr, &total_grad.weights);
        self.params
            .transitions
            .scaled_add(-lr, &total_grad.transitions);
        if self
            .params
            .weights
            .iter()
            .chain(self.params.transitions.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite {
                context: "policy parameters after update".into(),
                step: self.global_step,
            });
        }
        self.global_step += 1;
        Ok(MetricsRecord {
            step: self.global_step,
            stage: self.stage,
            mean_reward: reward_sum * batch_scale,
            mean_abs_advantage: abs_adv_sum * batch_scale,
            clip_fraction: clip_active as f64 / tokens as f64,
            mean_kl: kl_sum / tokens as f64,
            agreement_fraction: unanimous as f64 / batch.len() as f64,
            accuracy_holdout: f64::NAN,
            accuracy_rare: f64::NAN,
            accuracy_general: f64::NAN,
        })
    }
}

/// Curriculum shape tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    TwoStage,
    Reverse,
    OneStageMixed,
}

/// Reference-policy reset behavior across stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefReset {
    PerStage,
    Global,
}

/// One dataset consumed by a stage, with its label source and (for offline
/// pseudo-labels) the pinned content digest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetBinding {
    pub key: String,
    pub digest: Option<String>,
    pub label_mode: LabelMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub bindings: Vec<DatasetBinding>,
    pub config: TrainConfig,
}

/// Ordered training phases binding datasets, label sources, and optimizer
/// settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePlan {
    pub mode: StageMode,
    pub ref_reset: RefReset,
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        for stage in &self.stages {
            stage.config.validate()?;
            if stage.bindings.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "stage `{}` binds no dataset",
                    stage.name
                )));
            }
            for b in &stage.bindings {
                if b.label_mode == LabelMode::OfflinePseudo && b.digest.is_none() {
                    return Err(Error::InvalidConfig(format!(
                        "offline-pseudo binding `{}` must pin a digest",
                        b.key
                    )));
                }
            }
        }
        let shape: Vec<Vec<LabelMode>> = self
            .stages
            .iter()
            .map(|s| s.bindings.iter().map(|b| b.label_mode).collect())
            .collect();
        let all = |modes: &[LabelMode], m: LabelMode| modes.iter().all(|x| *x == m);
        match self.mode {
            StageMode::TwoStage => {
                if shape.len() != 2
                    || !all(&shape[0], LabelMode::OfflinePseudo)
                    || !all(&shape[1], LabelMode::GroundTruth)
                {
                    return Err(Error::InvalidConfig(
                        "two_stage expects [offline_pseudo, ground_truth] stages".into(),
                    ));
                }
            }
            StageMode::Reverse => {
                if shape.len() != 2
                    || !all(&shape[0], LabelMode::GroundTruth)
                    || !all(&shape[1], LabelMode::OfflinePseudo)
                {
                    return Err(Error::InvalidConfig(
                        "reverse expects [ground_truth, offline_pseudo] stages".into(),
                    ));
                }
            }
            StageMode::OneStageMixed => {
                if shape.len() != 1 {
                    return Err(Error::InvalidConfig(
                        "one_stage_mixed expects exactly one stage".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Result of executing a stage plan.
pub struct RunOutcome {
    pub final_params: PolicyParams,
    pub metrics: Vec<MetricsRecord>,
    pub stage_evals: Vec<EvalReport>,
}

fn check_binding(binding: &DatasetBinding, dataset: &Dataset) -> Result<()> {
    dataset.verify_digest().map_err(|_| Error::DigestMismatch {
        name: binding.key.clone(),
        expected: dataset.content_digest.clone(),
        actual: "<recomputed differs>".into(),
    })?;
    if let Some(pinned) = &binding.digest {
        if *pinned != dataset.content_digest {
            return Err(Error::DigestMismatch {
                name: binding.key.clone(),
                expected: pinned.clone(),
                actual: dataset.content_digest.clone(),
            });
        }
    }
    if binding.label_mode != LabelMode::OnlineVote && !dataset.fully_labeled() {
        return Err(Error::InvalidConfig(format!(
            "dataset `{}` has unlabeled questions but label mode requires labels",
            binding.key
        )));
    }
    Ok(())
}

/// Execute the stages of a plan in order, snapshotting the reference policy
/// per `ref_reset`, shuffling each stage's question pool every epoch, and
/// re-checking pinned dataset digests at every epoch boundary.
///
/// When a holdout dataset is supplied, every metrics record carries greedy
/// holdout accuracy (overall and per rarity split), and a per-stage
/// evaluation is emitted at each stage end.
pub fn run_stage_plan(
    plan: &StagePlan,
    datasets: &BTreeMap<String, Dataset>,
    base_params: &PolicyParams,
    holdout: Option<&Dataset>,
) -> Result<RunOutcome> {
    plan.validate()?;
    let mut params = base_params.snapshot();
    let global_ref = base_params.snapshot();
    let mut metrics = Vec::new();
    let mut stage_evals = Vec::new();
    let mut global_step = 0usize;
    for (stage_idx, stage) in plan.stages.iter().enumerate() {
        // Resolve and check bindings up front.
        let mut pool: Vec<(usize, LabelMode)> = Vec::new();
        let mut bound: Vec<(&DatasetBinding, &Dataset)> = Vec::new();
        let mut flat_questions: Vec<(&Question, LabelMode)> = Vec::new();
        for binding in &stage.bindings {
            let ds = datasets.get(&binding.key).ok_or_else(|| {
                Error::InvalidConfig(format!("plan references unknown dataset `{}`", binding.key))
            })?;
            check_binding(binding, ds)?;
            for q in &ds.entries {
                pool.push((flat_questions.len(), binding.label_mode));
                flat_questions.push((q, binding.label_mode));
            }
            bound.push((binding, ds));
        }
        if flat_questions.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "stage `{}` has no questions",
                stage.name
            )));
        }
        let mut trainer = Trainer::new(params, stage.config.clone())?;
        trainer.stage = stage_idx;
        trainer.global_step = global_step;
        trainer.ref_params = match plan.ref_reset {
            RefReset::PerStage => trainer.params.snapshot(),
            RefReset::Global => global_ref.snapshot(),
        };
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stage.config.rng_seed);
        shuffle_rng.set_stream(2 * stage_idx as u64);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(stage.config.rng_seed);
        sample_rng.set_stream(2 * stage_idx as u64 + 1);
        let mut order: Vec<usize> = (0..flat_questions.len()).collect();
        let mut cursor = order.len(); // force shuffle + digest check at step 0
        for _ in 0..stage.config.steps {
            if cursor >= order.len() {
                for (binding, ds) in &bound {
                    check_binding(binding, ds)?;
                }
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let take = stage.config.batch_questions.min(order.len());
            let mut batch: Vec<BatchItem<'_>> = Vec::with_capacity(take);
            for _ in 0..take {
                if cursor >= order.len() {
                    // Short tail: wrap within the epoch's order without
                    // reshuffling so batch size stays constant.
                    cursor = 0;
                }
                let (q, source) = flat_questions[order[cursor]];
                batch.push(BatchItem {
                    question: q,
                    source,
                });
                cursor += 1;
            }
            let mut record = trainer.train_step(&batch, &mut sample_rng)?;
            if let Some(h) = holdout {
                let eval = evaluate(&trainer.params, h, 0, 0)?;
                record.accuracy_holdout = eval.overall;
                record.accuracy_rare = eval.rare;
                record.accuracy_general = eval.general;
            }
            metrics.push(record);
        }
        global_step = trainer.global_step;
        params = trainer.params;
        if let Some(h) = holdout {
            stage_evals.push(evaluate(&params, h, 0, 0)?);
        }
    }
    Ok(RunOutcome {
        final_params: params,
        metrics,
        stage_evals,
    })
}

fn fmt_metric(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

/// Metrics CSV: one row per step.
pub fn write_metrics_csv(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(
        "step,stage,mean_reward,accuracy_holdout,accuracy_rare,accuracy_general,agreement_fraction,mean_kl,clip_fraction\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.stage,
            fmt_metric(r.mean_reward),
            fmt_metric(r.accuracy_holdout),
            fmt_metric(r.accuracy_rare),
            fmt_metric(r.accuracy_general),
            fmt_metric(r.agreement_fraction),
            fmt_metric(r.mean_kl),
            fmt_metric(r.clip_fraction),
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    file.write_all(out.as_bytes()).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Load a stage plan from JSON.
pub fn load_plan(path: impl AsRef<Path>) -> Result<StagePlanFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let plan: StagePlanFile = serde_json::from_slice(&bytes)?;
    plan.plan.validate()?;
    Ok(plan)
}

/// On-disk plan: the stage plan plus an optional holdout dataset path. The
/// binding `key` fields are dataset file paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePlanFile {
    pub plan: StagePlan,
    pub holdout: Option<String>,
}
