//! Desk-scale experiment harness: labeling-dynamics comparison (online vs
//! offline vs ground truth), stage-ordering ablation, alpha sweep, and the
//! long offline run — with CSV tables and SVG curves per scenario.
//!
//! The toy task family is linear by construction: a teacher matrix maps a
//! question's feature vector to its correct option, so the policy class can
//! represent every answer function exactly and training dynamics are the only
//! thing under study. For the stage ablation the feature space is split into
//! an intrinsic block (the base policy starts with signal there) and an
//! extrinsic block (initialized near zero); synthetic answer functions use
//! only the intrinsic block while real answer functions need both.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::chart::{line_chart_svg, write_svg, Series};
use crate::dataset::{
    make_options, AnswerSymbol, Dataset, DatasetKind, Provenance, Question, Rarity,
};
use crate::error::{Error, Result};
use crate::labeling::label_offline;
use crate::policy::{question_features, standard_vocab, PolicyParams};
use crate::retrieval::{hash_embedder, CorpusDoc, RareEntity};
use crate::synthesis::{synthesize, Generator, GeneratorKind, SynthesisConfig};
use crate::trainer::{
    evaluate, run_stage_plan, write_metrics_csv, DatasetBinding, LabelMode, MetricsRecord,
    RefReset, StageMode, StagePlan, StageSpec, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    LabelingDynamics,
    StageAblation,
    AlphaSweep,
    LongRun,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub n_syn: usize,
    pub n_real: usize,
    /// Steps per stage (the mixed mode gets the sum so totals match).
    pub steps: usize,
    pub out_dir: PathBuf,
    /// Injection rates swept by the alpha-sweep scenario.
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
}

fn default_alphas() -> Vec<f64> {
    vec![0.0, 0.13, 0.25, 0.33, 0.5]
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_syn == 0 || self.n_real == 0 || self.steps == 0 {
            return Err(Error::InvalidConfig("experiment sizes must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed required".into()));
        }
        let comparative = matches!(
            self.scenario,
            Scenario::LabelingDynamics | Scenario::StageAblation | Scenario::AlphaSweep
        );
        if comparative && self.seeds.len() < 2 {
            return Err(Error::InvalidConfig(
                "comparative scenarios need at least 2 seeds".into(),
            ));
        }
        if self.scenario == Scenario::AlphaSweep && self.alphas.is_empty() {
            return Err(Error::InvalidConfig("alpha sweep needs alphas".into()));
        }
        Ok(())
    }

    pub fn default_for(scenario: Scenario, name: &str, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentSpec {
            name: name.to_string(),
            scenario,
            seeds: vec![1, 2, 3, 4],
            n_syn: 2000,
            n_real: 2000,
            steps: 300,
            out_dir: out_dir.into(),
            alphas: default_alphas(),
        }
    }
}

// ---------------------------------------------------------------------------
// Toy task family
// ---------------------------------------------------------------------------

pub const TASK_OPTIONS: usize = 4;
pub const TASK_VOCAB: usize = 6; // A..D plus two filler tokens
pub const TASK_DIM: usize = 16;
pub const TASK_SPLIT: usize = 8; // intrinsic dims 0..8, extrinsic 8..16
pub const TASK_T: usize = 4;
const HOLDOUT_N: usize = 600;

fn sub_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = rng.sample(StandardNormal);
        x * scale
    })
}

/// Linear answer function over question features.
#[derive(Debug, Clone)]
pub struct Teacher {
    matrix: Array2<f64>, // TASK_OPTIONS × TASK_DIM
}

impl Teacher {
    /// Block-scale a full matrix: intrinsic dims by `int_scale`, extrinsic by
    /// `ext_scale`.
    fn masked(full: &Array2<f64>, int_scale: f64, ext_scale: f64) -> Teacher {
        let mut m = full.clone();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                m[[r, c]] *= if c < TASK_SPLIT { int_scale } else { ext_scale };
            }
        }
        Teacher { matrix: m }
    }

    /// Best and runner-up option indices for a question.
    pub fn ranked(&self, feature_seed: u64) -> (usize, usize) {
        let phi = question_features(feature_seed, TASK_DIM);
        let scores = self.matrix.dot(&phi);
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        let mut second = usize::MAX;
        for i in 0..scores.len() {
            if i != best && (second == usize::MAX || scores[i] > scores[second]) {
                second = i;
            }
        }
        (best, second)
    }

    pub fn label_index(&self, feature_seed: u64) -> usize {
        self.ranked(feature_seed).0
    }

    pub fn label(&self, q: &Question) -> AnswerSymbol {
        q.options[self.label_index(q.feature_seed)].symbol
    }
}

fn task_question(
    id: String,
    rarity: Rarity,
    provenance: Provenance,
    label: Option<AnswerSymbol>,
) -> Question {
    Question::new(
        id.clone(),
        format!("toy scenario {id}"),
        make_options(&["option A", "option B", "option C", "option D"]),
        label,
        rarity,
        provenance,
    )
    .expect("valid toy question")
}

/// A batch of toy questions; every `rare_period`-th one is tagged rare
/// (0 disables rare tagging).
fn make_family(
    prefix: &str,
    n: usize,
    rare_period: usize,
    provenance: Provenance,
    teacher: Option<&Teacher>,
    kind: DatasetKind,
) -> Dataset {
    make_family_corrupt(prefix, n, rare_period, provenance, teacher, kind, 0)
}

/// Like [`make_family`], but `corrupt_permille` of questions (selected by
/// feature-seed hash) get the teacher's runner-up option as their label
/// instead of the best one. This models irreducible holdout difficulty: no
/// policy in the class can resolve those questions, which caps every
/// trainer's holdout accuracy identically.
fn make_family_corrupt(
    prefix: &str,
    n: usize,
    rare_period: usize,
    provenance: Provenance,
    teacher: Option<&Teacher>,
    kind: DatasetKind,
    corrupt_permille: u64,
) -> Dataset {
    let entries: Vec<Question> = (0..n)
        .map(|i| {
            let rare = rare_period > 0 && i % rare_period == 0;
            let rarity = if rare { Rarity::Rare } else { Rarity::General };
            let mut q = task_question(format!("{prefix}-{i:05}"), rarity, provenance, None);
            if let Some(t) = teacher {
                let (best, second) = t.ranked(q.feature_seed);
                let corrupted = q.feature_seed % 1000 < corrupt_permille;
                let idx = if corrupted { second } else { best };
                q.label = Some(q.options[idx].symbol);
            }
            q
        })
        .collect();
    Dataset::new(entries, kind).expect("valid toy dataset")
}

/// Base policy: option rows start with `signal` times the synthetic teacher
/// plus feature noise (extrinsic noise separately controlled), filler rows
/// are faint noise, transitions start at zero.
#[allow(clippy::too_many_arguments)]
fn base_policy(
    teacher_syn: &Teacher,
    signal: f64,
    noise_int: f64,
    noise_ext: f64,
    filler_noise: f64,
    seed: u64,
) -> PolicyParams {
    let mut rng = sub_rng(seed, 0xba5e);
    let mut weights = Array2::zeros((TASK_VOCAB, TASK_DIM));
    for v in 0..TASK_OPTIONS {
        for c in 0..TASK_DIM {
            let n: f64 = rng.sample(StandardNormal);
            let scale = if c < TASK_SPLIT { noise_int } else { noise_ext };
            weights[[v, c]] = signal * teacher_syn.matrix[[v, c]] + scale * n;
        }
    }
    for v in TASK_OPTIONS..TASK_VOCAB {
        for c in 0..TASK_DIM {
            let n: f64 = rng.sample(StandardNormal);
            weights[[v, c]] = filler_noise * n;
        }
    }
    let transitions = Array2::zeros((TASK_VOCAB, TASK_VOCAB));
    PolicyParams::new(weights, transitions, TASK_T, standard_vocab(TASK_VOCAB), 1.0)
        .expect("valid base policy")
}

fn single_stage_plan(
    key: &str,
    digest: Option<String>,
    label_mode: LabelMode,
    config: TrainConfig,
) -> StagePlan {
    StagePlan {
        mode: StageMode::OneStageMixed,
        ref_reset: RefReset::PerStage,
        stages: vec![StageSpec {
            name: key.to_string(),
            bindings: vec![DatasetBinding {
                key: key.to_string(),
                digest,
                label_mode,
            }],
            config,
        }],
    }
}

fn dynamics_config(steps: usize, rng_seed: u64) -> TrainConfig {
    TrainConfig {
        group_size: 8,
        clip_eps: 0.2,
        kl_beta: 0.0,
        learning_rate: 12.0,
        batch_questions: 24,
        steps,
        label_mode: LabelMode::GroundTruth,
        rng_seed,
    }
}

/// Task constants for the labeling-dynamics and long-run scenarios.
///
/// The base policy is a lightly noised copy of the teacher, so its voted
/// pseudo-labels on the synthetic pool agree with ground truth on the large
/// majority of questions (the premise that makes offline self-labeling
/// useful). Mid-range starting holdout accuracy comes from two capability
/// gaps instead: a slice of holdout questions whose labels no policy in the
/// class can predict (runner-up corruption), and filler logit noise that
/// derails greedy decoding until training suppresses the filler tokens.
const DYN_SIGNAL: f64 = 1.0;
const DYN_NOISE: f64 = 0.10;
const DYN_FILLER_NOISE: f64 = 0.65;
const DYN_CORRUPT_PERMILLE: u64 = 360;

// ---------------------------------------------------------------------------
// Collapse detector
// ---------------------------------------------------------------------------

/// Reward-hacking collapse: some step shows near-total rollout agreement
/// while holdout accuracy sits below its starting value.
pub fn collapse_flag(records: &[MetricsRecord], starting_accuracy: f64) -> bool {
    records
        .iter()
        .any(|r| r.agreement_fraction >= 0.99 && r.accuracy_holdout < starting_accuracy)
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

const CURVE_METRICS: [(&str, fn(&MetricsRecord) -> f64); 3] = [
    ("reward", |r| r.mean_reward),
    ("holdout_accuracy", |r| r.accuracy_holdout),
    ("agreement", |r| r.agreement_fraction),
];

/// Write one metrics CSV per run plus one SVG line chart per curve metric
/// (step on the x axis, one series per run). Output bytes are a pure
/// function of the inputs.
pub fn emit_report(
    dir: &Path,
    runs: &BTreeMap<String, Vec<MetricsRecord>>,
    title_suffix: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    for (name, records) in runs {
        write_metrics_csv(records, dir.join(format!("{name}.csv")))?;
    }
    for (metric_name, extract) in CURVE_METRICS {
        let series: Vec<Series> = runs
            .iter()
            .map(|(name, records)| Series {
                name: name.clone(),
                points: records.iter().map(|r| (r.step as f64, extract(r))).collect(),
            })
            .collect();
        let svg = line_chart_svg(
            &format!("{metric_name} per step {title_suffix}"),
            "step",
            metric_name,
            &series,
        );
        write_svg(dir.join(format!("{metric_name}.svg")), &svg)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Labeling dynamics (online vs offline vs ground truth)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedVerdict {
    pub seed: u64,
    pub base_accuracy: f64,
    pub precondition_ok: bool,
    pub online_reward_saturates: bool,
    pub online_final_accuracy: f64,
    pub offline_final_accuracy: f64,
    pub ground_truth_final_accuracy: f64,
    pub online_gap_at_least_10: bool,
    pub offline_within_5_of_ground_truth: bool,
    pub offline_never_dips_3_below_start: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicsVerdict {
    pub per_seed: Vec<SeedVerdict>,
    pub passes: usize,
    pub required: usize,
    pub pass: bool,
}

pub struct SeedCurves {
    pub seed: u64,
    pub ground_truth: Vec<MetricsRecord>,
    pub offline: Vec<MetricsRecord>,
    pub online: Vec<MetricsRecord>,
}

pub struct DynamicsOutcome {
    pub verdict: DynamicsVerdict,
    pub curves: Vec<SeedCurves>,
}

const MODES: [(&str, LabelMode); 3] = [
    ("ground_truth", LabelMode::GroundTruth),
    ("offline_pseudo", LabelMode::OfflinePseudo),
    ("online_vote", LabelMode::OnlineVote),
];

/// Run the three trainers (ground truth, offline pseudo-labels, online vote)
/// from the same base policy and seed, emit curves, and judge the
/// reward-hacking conditions. Verdict failures are reported in the output,
/// never raised.
pub fn run_labeling_dynamics(spec: &ExperimentSpec) -> Result<DynamicsOutcome> {
    spec.validate()?;
    let dir = spec.out_dir.join(&spec.name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut per_seed = Vec::new();
    let mut curves = Vec::new();
    for &seed in &spec.seeds {
        let mut teacher_rng = sub_rng(seed, 0x7ea0);
        let full = gaussian_matrix(TASK_OPTIONS, TASK_DIM, 1.0, &mut teacher_rng);
        let teacher = Teacher::masked(&full, 1.0, 1.0);
        let base = base_policy(
            &teacher,
            DYN_SIGNAL,
            DYN_NOISE,
            DYN_NOISE,
            DYN_FILLER_NOISE,
            seed,
        );

        let syn_unlabeled = make_family(
            &format!("ld{seed}-syn"),
            spec.n_syn,
            4,
            Provenance::SyntheticPlain,
            None,
            DatasetKind::Synthetic,
        );
        let syn_truth = make_family(
            &format!("ld{seed}-syn"),
            spec.n_syn,
            4,
            Provenance::SyntheticPlain,
            Some(&teacher),
            DatasetKind::Synthetic,
        );
        let holdout = make_family_corrupt(
            &format!("ld{seed}-hold"),
            HOLDOUT_N,
            4,
            Provenance::RealSeed,
            Some(&teacher),
            DatasetKind::Real,
            DYN_CORRUPT_PERMILLE,
        );
        let base_accuracy = evaluate(&base, &holdout, 0, 0)?.overall;
        let (syn_pseudo, _report) = label_offline(&syn_unlabeled, &base, 8, seed ^ 0x0ff1)?;

        let mut mode_metrics: BTreeMap<String, Vec<MetricsRecord>> = BTreeMap::new();
        for (mode_name, label_mode) in MODES {
            let (dataset, digest) = match label_mode {
                LabelMode::GroundTruth => (syn_truth.clone(), None),
                LabelMode::OfflinePseudo => {
                    (syn_pseudo.clone(), Some(syn_pseudo.content_digest.clone()))
                }
                LabelMode::OnlineVote => (syn_unlabeled.clone(), None),
            };
            let plan = single_stage_plan(
                mode_name,
                digest,
                label_mode,
                dynamics_config(spec.steps, seed),
            );
            let mut datasets = BTreeMap::new();
            datasets.insert(mode_name.to_string(), dataset);
            let outcome = run_stage_plan(&plan, &datasets, &base, Some(&holdout))?;
            mode_metrics.insert(mode_name.to_string(), outcome.metrics);
        }
        emit_report(
            &dir.join(format!("seed{seed}")),
            &mode_metrics,
            &format!("(seed {seed})"),
        )?;

        let gt = &mode_metrics["ground_truth"];
        let off = &mode_metrics["offline_pseudo"];
        let online = &mode_metrics["online_vote"];
        let final_acc = |m: &Vec<MetricsRecord>| m.last().map(|r| r.accuracy_holdout).unwrap_or(f64::NAN);
        let gt_final = final_acc(gt);
        let off_final = final_acc(off);
        let online_final = final_acc(online);
        let online_reward_saturates = online
            .iter()
            .any(|r| r.mean_reward >= 0.98 && r.agreement_fraction >= 0.99);
        let online_gap_at_least_10 = gt_final - online_final >= 0.10;
        let offline_within_5_of_ground_truth = (gt_final - off_final).abs() <= 0.05;
        let offline_never_dips_3_below_start = off
            .iter()
            .all(|r| r.accuracy_holdout >= base_accuracy - 0.03 - 1e-9);
        let precondition_ok = base_accuracy > 0.3 && base_accuracy < 0.7;
        let pass = precondition_ok
            && online_reward_saturates
            && online_gap_at_least_10
            && offline_within_5_of_ground_truth
            && offline_never_dips_3_below_start;
        per_seed.push(SeedVerdict {
            seed,
            base_accuracy,
            precondition_ok,
            online_reward_saturates,
            online_final_accuracy: online_final,
            offline_final_accuracy: off_final,
            ground_truth_final_accuracy: gt_final,
            online_gap_at_least_10,
            offline_within_5_of_ground_truth,
            offline_never_dips_3_below_start,
            pass,
        });
        let mut take = |name: &str| mode_metrics.remove(name).expect("mode ran");
        curves.push(SeedCurves {
            seed,
            ground_truth: take("ground_truth"),
            offline: take("offline_pseudo"),
            online: take("online_vote"),
        });
    }
    let passes = per_seed.iter().filter(|v| v.pass).count();
    // Three of four seeds at the default count; same proportion otherwise.
    let required = (3 * spec.seeds.len()).div_ceil(4);
    let verdict = DynamicsVerdict {
        passes,
        required,
        pass: passes >= required,
        per_seed,
    };
    write_json(dir.join("verdict.json"), &verdict)?;
    Ok(DynamicsOutcome { verdict, curves })
}

// ---------------------------------------------------------------------------
// Stage-ordering ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub per_seed_accuracy: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    /// two_stage mean ≥ reverse mean and ≥ one_stage_mixed mean.
    pub ordering_holds: bool,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Train two_stage / reverse / one_stage_mixed on the intrinsic-vs-extrinsic
/// task with matched total steps and report final real-holdout accuracy per
/// mode. The table is emitted even when the expected ordering fails; the
/// verdict just flags it.
pub fn run_stage_ablation(spec: &ExperimentSpec) -> Result<AblationOutcome> {
    spec.validate()?;
    let dir = spec.out_dir.join(&spec.name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mode_names = ["two_stage", "reverse", "one_stage_mixed"];
    let mut per_mode: BTreeMap<&str, Vec<f64>> = mode_names.iter().map(|m| (*m, vec![])).collect();
    for &seed in &spec.seeds {
        let mut teacher_rng = sub_rng(seed, 0x7ea1);
        let full = gaussian_matrix(TASK_OPTIONS, TASK_DIM, 1.0, &mut teacher_rng);
        // Synthetic answers live on the intrinsic block the base already
        // weights; real answers also need the extrinsic block, which the base
        // starts near zero.
        let teacher_syn = Teacher::masked(&full, 1.0, 0.0);
        let teacher_real = Teacher::masked(&full, 1.0, 1.3);
        let base = base_policy(&teacher_syn, 0.9, 0.45, 0.02, 0.10, seed);

        let syn_unlabeled = make_family(
            &format!("ab{seed}-syn"),
            spec.n_syn,
            0,
            Provenance::SyntheticPlain,
            None,
            DatasetKind::Synthetic,
        );
        let (syn_pseudo, _) = label_offline(&syn_unlabeled, &base, 8, seed ^ 0x0ff2)?;
        let real = make_family(
            &format!("ab{seed}-real"),
            spec.n_real,
            0,
            Provenance::RealSeed,
            Some(&teacher_real),
            DatasetKind::Real,
        );
        let holdout = make_family(
            &format!("ab{seed}-hold"),
            HOLDOUT_N,
            0,
            Provenance::RealSeed,
            Some(&teacher_real),
            DatasetKind::Real,
        );

        let mut datasets = BTreeMap::new();
        datasets.insert("syn".to_string(), syn_pseudo.clone());
        datasets.insert("real".to_string(), real);
        let cfg = |steps: usize| TrainConfig {
            steps,
            ..dynamics_config(spec.steps, seed)
        };
        let syn_binding = DatasetBinding {
            key: "syn".into(),
            digest: Some(syn_pseudo.content_digest.clone()),
            label_mode: LabelMode::OfflinePseudo,
        };
        let real_binding = DatasetBinding {
            key: "real".into(),
            digest: None,
            label_mode: LabelMode::GroundTruth,
        };
        for mode_name in mode_names {
            let plan = match mode_name {
                "two_stage" => StagePlan {
                    mode: StageMode::TwoStage,
                    ref_reset: RefReset::PerStage,
                    stages: vec![
                        StageSpec {
                            name: "self_supervised".into(),
                            bindings: vec![syn_binding.clone()],
                            config: cfg(spec.steps),
                        },
                        StageSpec {
                            name: "supervised".into(),
                            bindings: vec![real_binding.clone()],
                            config: cfg(spec.steps),
                        },
                    ],
                },
                "reverse" => StagePlan {
                    mode: StageMode::Reverse,
                    ref_reset: RefReset::PerStage,
                    stages: vec![
                        StageSpec {
                            name: "supervised".into(),
                            bindings: vec![real_binding.clone()],
                            config: cfg(spec.steps),
                        },
                        StageSpec {
                            name: "self_supervised".into(),
                            bindings: vec![syn_binding.clone()],
                            config: cfg(spec.steps),
                        },
                    ],
                },
                _ => StagePlan {
                    mode: StageMode::OneStageMixed,
                    ref_reset: RefReset::PerStage,
                    stages: vec![StageSpec {
                        name: "mixed".into(),
                        bindings: vec![syn_binding.clone(), real_binding.clone()],
                        config: cfg(2 * spec.steps),
                    }],
                },
            };
            let outcome = run_stage_plan(&plan, &datasets, &base, Some(&holdout))?;
            write_metrics_csv(
                &outcome.metrics,
                dir.join(format!("seed{seed}_{mode_name}.csv")),
            )?;
            let final_acc = outcome
                .metrics
                .last()
                .map(|r| r.accuracy_holdout)
                .unwrap_or(f64::NAN);
            per_mode.get_mut(mode_name).unwrap().push(final_acc);
        }
    }
    let rows: Vec<AblationRow> = mode_names
        .iter()
        .map(|m| {
            let accs = per_mode[m].clone();
            let (mean, std) = mean_std(&accs);
            AblationRow {
                mode: (*m).to_string(),
                per_seed_accuracy: accs,
                mean,
                std,
            }
        })
        .collect();
    let two = rows[0].mean;
    let ordering_holds = two >= rows[1].mean && two >= rows[2].mean;
    let outcome = AblationOutcome {
        rows,
        ordering_holds,
    };
    // Summary table.
    let mut csv = String::from("mode,mean,std");
    for seed in &spec.seeds {
        csv.push_str(&format!(",seed{seed}"));
    }
    csv.push('\n');
    for row in &outcome.rows {
        csv.push_str(&format!("{},{},{}", row.mode, row.mean, row.std));
        for a in &row.per_seed_accuracy {
            csv.push_str(&format!(",{a}"));
        }
        csv.push('\n');
    }
    write_text(dir.join("ablation.csv"), &csv)?;
    write_json(dir.join("verdict.json"), &outcome)?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Alpha sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub injected_fraction_mean: f64,
    pub rare_fraction_mean: f64,
    pub accuracy_overall_mean: f64,
    pub accuracy_overall_std: f64,
    pub accuracy_rare_mean: f64,
    pub accuracy_rare_std: f64,
    pub accuracy_general_mean: f64,
    pub accuracy_general_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
}

/// Deterministic toy rare-entity list with hash embeddings.
pub fn toy_entities(n: usize, dim: usize) -> Vec<RareEntity> {
    (0..n)
        .map(|i| {
            let name = format!("entity-{i:03} syndrome");
            RareEntity::new(name.clone(), hash_embedder(&name, dim).expect("non-empty name"))
                .expect("finite embedding")
        })
        .collect()
}

/// Deterministic toy knowledge corpus: `per_entity` docs per entity, each
/// mentioning its entity so hash-embedding retrieval has signal.
pub fn toy_corpus(entities: &[RareEntity], per_entity: usize, dim: usize) -> Vec<CorpusDoc> {
    let mut docs = Vec::new();
    for (i, e) in entities.iter().enumerate() {
        for j in 0..per_entity {
            let text = format!(
                "Reference {j} on {}. It presents with pattern {i}-{j} and responds to protocol {j}.",
                e.name
            );
            docs.push(
                CorpusDoc::new(
                    format!("doc-{i:03}-{j}"),
                    text.clone(),
                    hash_embedder(&text, dim).expect("non-empty doc"),
                )
                .expect("finite embedding"),
            );
        }
    }
    docs
}

/// Seed pool for synthesis: rare tags on roughly 36% of entries so plain
/// synthetics (rare iff both seeds rare) land near the 13% natural rate.
pub fn toy_seed_pool(prefix: &str, n: usize) -> Dataset {
    let entries: Vec<Question> = (0..n)
        .map(|i| {
            // 36 of every 100 rare.
            let rarity = if (i * 97) % 100 < 36 { Rarity::Rare } else { Rarity::General };
            task_question(format!("{prefix}-{i:05}"), rarity, Provenance::RealSeed, None)
        })
        .collect();
    Dataset::new(entries, DatasetKind::Real).expect("valid seed pool")
}

/// Synthesize one dataset per alpha, pseudo-label it with the base policy,
/// run the full two-stage pipeline, and report holdout accuracy split by
/// rarity next to the measured injected fraction.
pub fn run_alpha_sweep(spec: &ExperimentSpec, alphas: &[f64]) -> Result<SweepOutcome> {
    spec.validate()?;
    let dir = spec.out_dir.join(&spec.name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let dim = 32;
    let entities = toy_entities(40, dim);
    let corpus = toy_corpus(&entities, 3, dim);
    let mut rows = Vec::new();
    let mut detail = String::from(
        "alpha,seed,injected_fraction,rare_fraction,dropped,accuracy_overall,accuracy_rare,accuracy_general\n",
    );
    for &alpha in alphas {
        let mut inj = Vec::new();
        let mut rare_frac = Vec::new();
        let mut acc_overall = Vec::new();
        let mut acc_rare = Vec::new();
        let mut acc_general = Vec::new();
        for &seed in &spec.seeds {
            let mut teacher_rng = sub_rng(seed, 0x7ea2);
            let full = gaussian_matrix(TASK_OPTIONS, TASK_DIM, 1.0, &mut teacher_rng);
            let teacher = Teacher::masked(&full, 1.0, 1.0);
            let base = base_policy(
                &teacher,
                DYN_SIGNAL,
                DYN_NOISE,
                DYN_NOISE,
                DYN_FILLER_NOISE,
                seed,
            );
            let seeds_pool = toy_seed_pool(&format!("as{seed}-seed"), 400);
            let syn_cfg = SynthesisConfig {
                alpha,
                k: 4,
                n_target: spec.n_syn,
                rng_seed: seed ^ 0x5eed,
                generator: GeneratorKind::LocalTemplate,
            };
            let syn = synthesize(&syn_cfg, &seeds_pool, &corpus, &entities, Generator::Local)?;
            let injected = crate::synthesis::injected_fraction(&syn);
            let rare = syn
                .entries
                .iter()
                .filter(|q| q.rarity == Rarity::Rare)
                .count() as f64
                / syn.len() as f64;
            let (syn_pseudo, report) = label_offline(&syn, &base, 8, seed ^ 0x0ff3)?;
            let real = make_family(
                &format!("as{seed}-real"),
                spec.n_real,
                4,
                Provenance::RealSeed,
                Some(&teacher),
                DatasetKind::Real,
            );
            let holdout = make_family(
                &format!("as{seed}-hold"),
                HOLDOUT_N,
                2,
                Provenance::RealSeed,
                Some(&teacher),
                DatasetKind::Real,
            );
            let mut datasets = BTreeMap::new();
            datasets.insert("syn".to_string(), syn_pseudo.clone());
            datasets.insert("real".to_string(), real);
            let plan = StagePlan {
                mode: StageMode::TwoStage,
                ref_reset: RefReset::PerStage,
                stages: vec![
                    StageSpec {
                        name: "self_supervised".into(),
                        bindings: vec![DatasetBinding {
                            key: "syn".into(),
                            digest: Some(syn_pseudo.content_digest.clone()),
                            label_mode: LabelMode::OfflinePseudo,
                        }],
                        config: dynamics_config(spec.steps, seed),
                    },
                    StageSpec {
                        name: "supervised".into(),
                        bindings: vec![DatasetBinding {
                            key: "real".into(),
                            digest: None,
                            label_mode: LabelMode::GroundTruth,
                        }],
                        config: dynamics_config(spec.steps, seed),
                    },
                ],
            };
            let outcome = run_stage_plan(&plan, &datasets, &base, Some(&holdout))?;
            let eval = outcome.stage_evals.last().expect("two stages ran");
            inj.push(injected);
            rare_frac.push(rare);
            acc_overall.push(eval.overall);
            acc_rare.push(eval.rare);
            acc_general.push(eval.general);
            detail.push_str(&format!(
                "{alpha},{seed},{injected},{rare},{},{},{},{}\n",
                report.dropped, eval.overall, eval.rare, eval.general
            ));
        }
        let (io_mean, _) = mean_std(&inj);
        let (rf_mean, _) = mean_std(&rare_frac);
        let (ao_mean, ao_std) = mean_std(&acc_overall);
        let (ar_mean, ar_std) = mean_std(&acc_rare);
        let (ag_mean, ag_std) = mean_std(&acc_general);
        rows.push(SweepRow {
            alpha,
            injected_fraction_mean: io_mean,
            rare_fraction_mean: rf_mean,
            accuracy_overall_mean: ao_mean,
            accuracy_overall_std: ao_std,
            accuracy_rare_mean: ar_mean,
            accuracy_rare_std: ar_std,
            accuracy_general_mean: ag_mean,
            accuracy_general_std: ag_std,
        });
    }
    write_text(dir.join("sweep_detail.csv"), &detail)?;
    let mut summary = String::from(
        "alpha,injected_fraction,rare_fraction,accuracy_overall,accuracy_overall_std,accuracy_rare,accuracy_rare_std,accuracy_general,accuracy_general_std\n",
    );
    for r in &rows {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.alpha,
            r.injected_fraction_mean,
            r.rare_fraction_mean,
            r.accuracy_overall_mean,
            r.accuracy_overall_std,
            r.accuracy_rare_mean,
            r.accuracy_rare_std,
            r.accuracy_general_mean,
            r.accuracy_general_std
        ));
    }
    write_text(dir.join("sweep.csv"), &summary)?;
    let series = vec![
        Series {
            name: "rare accuracy".into(),
            points: rows.iter().map(|r| (r.alpha, r.accuracy_rare_mean)).collect(),
        },
        Series {
            name: "general accuracy".into(),
            points: rows
                .iter()
                .map(|r| (r.alpha, r.accuracy_general_mean))
                .collect(),
        },
        Series {
            name: "injected fraction".into(),
            points: rows
                .iter()
                .map(|r| (r.alpha, r.injected_fraction_mean))
                .collect(),
        },
    ];
    write_svg(
        dir.join("sweep.svg"),
        &line_chart_svg("holdout accuracy vs alpha", "alpha", "value", &series),
    )?;
    Ok(SweepOutcome { rows })
}

// ---------------------------------------------------------------------------
// Long offline run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LongRunSeedOutcome {
    pub seed: u64,
    pub starting_accuracy: f64,
    pub final_accuracy: f64,
    pub collapse: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LongRunOutcome {
    pub per_seed: Vec<LongRunSeedOutcome>,
    pub pass: bool,
}

/// Offline-pseudo training for at least 1000 steps; passes when no collapse
/// flag fires and final holdout accuracy is at least the starting accuracy.
pub fn run_long_run(spec: &ExperimentSpec) -> Result<LongRunOutcome> {
    spec.validate()?;
    let steps = spec.steps.max(1000);
    let dir = spec.out_dir.join(&spec.name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut per_seed = Vec::new();
    for &seed in &spec.seeds {
        let mut teacher_rng = sub_rng(seed, 0x7ea3);
        let full = gaussian_matrix(TASK_OPTIONS, TASK_DIM, 1.0, &mut teacher_rng);
        let teacher = Teacher::masked(&full, 1.0, 1.0);
        let base = base_policy(
            &teacher,
            DYN_SIGNAL,
            DYN_NOISE,
            DYN_NOISE,
            DYN_FILLER_NOISE,
            seed,
        );
        let syn_unlabeled = make_family(
            &format!("lr{seed}-syn"),
            spec.n_syn,
            4,
            Provenance::SyntheticPlain,
            None,
            DatasetKind::Synthetic,
        );
        let holdout = make_family_corrupt(
            &format!("lr{seed}-hold"),
            HOLDOUT_N,
            4,
            Provenance::RealSeed,
            Some(&teacher),
            DatasetKind::Real,
            DYN_CORRUPT_PERMILLE,
        );
        let starting_accuracy = evaluate(&base, &holdout, 0, 0)?.overall;
        let (syn_pseudo, _) = label_offline(&syn_unlabeled, &base, 8, seed ^ 0x0ff4)?;
        let plan = single_stage_plan(
            "syn",
            Some(syn_pseudo.content_digest.clone()),
            LabelMode::OfflinePseudo,
            TrainConfig {
                steps,
                ..dynamics_config(steps, seed)
            },
        );
        let mut datasets = BTreeMap::new();
        datasets.insert("syn".to_string(), syn_pseudo);
        let outcome = run_stage_plan(&plan, &datasets, &base, Some(&holdout))?;
        write_metrics_csv(&outcome.metrics, dir.join(format!("seed{seed}.csv")))?;
        let series: Vec<Series> = [
            ("reward", (|r: &MetricsRecord| r.mean_reward) as fn(&MetricsRecord) -> f64),
            ("holdout_accuracy", |r| r.accuracy_holdout),
            ("agreement", |r| r.agreement_fraction),
        ]
        .iter()
        .map(|(name, f)| Series {
            name: (*name).to_string(),
            points: outcome.metrics.iter().map(|r| (r.step as f64, f(r))).collect(),
        })
        .collect();
        write_svg(
            dir.join(format!("seed{seed}.svg")),
            &line_chart_svg(
                &format!("offline long run (seed {seed})"),
                "step",
                "value",
                &series,
            ),
        )?;
        let collapse = collapse_flag(&outcome.metrics, starting_accuracy);
        let final_accuracy = outcome
            .metrics
            .last()
            .map(|r| r.accuracy_holdout)
            .unwrap_or(f64::NAN);
        let pass = !collapse && final_accuracy >= starting_accuracy;
        per_seed.push(LongRunSeedOutcome {
            seed,
            starting_accuracy,
            final_accuracy,
            collapse,
            pass,
        });
    }
    let pass = per_seed.iter().all(|s| s.pass);
    let outcome = LongRunOutcome { per_seed, pass };
    write_json(dir.join("verdict.json"), &outcome)?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Entry point + IO helpers
// ---------------------------------------------------------------------------

/// Dispatch an experiment spec to its scenario runner. Outputs land under
/// `{out_dir}/{name}/`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<()> {
    match spec.scenario {
        Scenario::LabelingDynamics => {
            run_labeling_dynamics(spec)?;
        }
        Scenario::StageAblation => {
            run_stage_ablation(spec)?;
        }
        Scenario::AlphaSweep => {
            let alphas = spec.alphas.clone();
            run_alpha_sweep(spec, &alphas)?;
        }
        Scenario::LongRun => {
            run_long_run(spec)?;
        }
    }
    Ok(())
}

pub fn load_experiment_spec(path: impl AsRef<Path>) -> Result<ExperimentSpec> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let spec: ExperimentSpec = serde_json::from_slice(&bytes)?;
    spec.validate()?;
    Ok(spec)
}

fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    file.write_all(text.as_bytes()).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_text(path, &format!("{text}\n"))
}
