//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! with the measured values (run with `--nocapture` to see them all).
//!
//! Oracles here are deliberately independent of the library code paths they
//! check: brute-force sorts, exact binomial sums, central finite differences,
//! and hand arithmetic.

use std::collections::BTreeMap;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synrl::dataset::{
    load_dataset, make_options, save_dataset, AnswerSymbol, Dataset, DatasetKind, Provenance,
    Question, Rarity,
};
use synrl::experiment::{
    collapse_flag, run_labeling_dynamics, run_long_run, run_stage_ablation, toy_corpus,
    toy_entities, toy_seed_pool, ExperimentSpec, Scenario,
};
use synrl::labeling::label_offline;
use synrl::policy::{sequence_logprob, standard_vocab, PolicyParams};
use synrl::retrieval::{retrieve_top_k, similarity, CorpusDoc, RareEntity};
use synrl::synthesis::{injected_fraction, synthesize, Generator, GeneratorKind, SynthesisConfig};
use synrl::trainer::{
    clipped_surrogate_loss, group_advantages, AdvantageVector, PolicyGrad,
};

fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

fn toy_question(id: &str) -> Question {
    Question::new(
        id,
        format!("q {id}"),
        make_options(&["a", "b", "c", "d"]),
        None,
        Rarity::General,
        Provenance::RealSeed,
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// 1. Advantage math
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_advantage_math() {
    let start = Instant::now();
    let mut checked = 0usize;
    for bits in 0u32..256 {
        let rewards: Vec<f64> = (0..8).map(|i| f64::from((bits >> i) & 1)).collect();
        let adv = group_advantages(&rewards).unwrap();
        let ones = rewards.iter().filter(|r| **r > 0.5).count();
        if ones == 0 || ones == 8 {
            assert!(
                adv.values.iter().all(|a| *a == 0.0),
                "unanimous group {bits:08b} must give zero advantages"
            );
        } else {
            let sum: f64 = adv.values.iter().sum();
            assert!(
                sum.abs() <= 1e-9,
                "advantages of {bits:08b} sum to {sum}, not 0"
            );
            // Independent re-derivation from counts alone.
            let mu = ones as f64 / 8.0;
            let sigma = (mu * (1.0 - mu)).sqrt();
            for (r, a) in rewards.iter().zip(&adv.values) {
                let expected = (r - mu) / sigma;
                assert!((a - expected).abs() < 1e-12);
            }
        }
        checked += 1;
    }
    // Hand oracle for the single-winner group.
    let mut rewards = vec![0.0; 8];
    rewards[0] = 1.0;
    let adv = group_advantages(&rewards).unwrap();
    let winner_err = (adv.values[0] - 2.6458).abs();
    let loser_err = (adv.values[1] - (-0.3780)).abs();
    let elapsed = start.elapsed();
    let pass = checked == 256 && winner_err <= 1e-4 && loser_err <= 1e-4 && elapsed.as_secs_f64() < 1.0;
    report(
        1,
        "advantage math",
        pass,
        &format!(
            "256/256 reward vectors checked; hand-oracle errors {winner_err:.2e}/{loser_err:.2e}; {elapsed:?}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Gradient check (central finite differences)
// ---------------------------------------------------------------------------

struct GradInstance {
    params: PolicyParams,
    ref_params: PolicyParams,
    question: Question,
    responses: Vec<Vec<usize>>,
    old_logprobs: Vec<Vec<f64>>,
    advantages: AdvantageVector,
    clip_eps: f64,
    kl_beta: f64,
}

fn random_instance(seed: u64) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v = rng.gen_range(3..=6usize);
        let d = rng.gen_range(1..=4usize);
        let t = rng.gen_range(1..=3usize);
        let g = rng.gen_range(2..=4usize);
        let clip_eps = 0.2;
        let kl_beta = if rng.gen_bool(0.5) { 0.0 } else { 0.05 };
        let vocab = standard_vocab(v);
        let params = PolicyParams::init_random(vocab.clone(), d, t, 1.0, 0.8, rng.gen()).unwrap();
        let ref_params = PolicyParams::init_random(vocab, d, t, 1.0, 0.8, rng.gen()).unwrap();
        let question = toy_question(&format!("acc-grad-{seed}"));
        let mut responses = Vec::new();
        let mut old_logprobs = Vec::new();
        let mut rewards = Vec::new();
        for _ in 0..g {
            let resp: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
            let lp = sequence_logprob(&params, &question, &resp).unwrap();
            old_logprobs.push(
            lp.iter()
                .map(|x| x + rng.gen_range(-0.3..0.3))
                .collect::<Vec<f64>>(),
        );
            responses.push(resp);
            rewards.push(if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        }
        let advantages = group_advantages(&rewards).unwrap();
        // The objective is kinked at the clip boundaries; resample instances
        // whose ratios sit within a hair of them.
        let margin = 1e-3;
        let mut near_kink = false;
        for (resp, old) in responses.iter().zip(&old_logprobs) {
            let lp = sequence_logprob(&params, &question, resp).unwrap();
            for (l, o) in lp.iter().zip(old.iter()) {
                let c: f64 = (l - o).exp();
                if (c - (1.0 - clip_eps)).abs() < margin || (c - (1.0 + clip_eps)).abs() < margin {
                    near_kink = true;
                }
            }
        }
        if near_kink {
            continue;
        }
        return GradInstance {
            params,
            ref_params,
            question,
            responses,
            old_logprobs,
            advantages,
            clip_eps,
            kl_beta,
        };
    }
}

fn loss_of(inst: &GradInstance, params: &PolicyParams) -> f64 {
    clipped_surrogate_loss(
        params,
        &inst.ref_params,
        &inst.question,
        &inst.responses,
        &inst.old_logprobs,
        &inst.advantages,
        inst.clip_eps,
        inst.kl_beta,
    )
    .unwrap()
    .0
}

#[test]
fn criterion_2_gradient_check() {
    let start = Instant::now();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let inst = random_instance(31_000 + trial);
        let (_, analytic, _) = clipped_surrogate_loss(
            &inst.params,
            &inst.ref_params,
            &inst.question,
            &inst.responses,
            &inst.old_logprobs,
            &inst.advantages,
            inst.clip_eps,
            inst.kl_beta,
        )
        .unwrap();
        let mut fd = PolicyGrad::zeros(&inst.params);
        let (v, d) = (inst.params.vocab_size(), inst.params.dim());
        for r in 0..v {
            for c in 0..d {
                let mut plus = inst.params.clone();
                plus.weights[[r, c]] += h;
                let mut minus = inst.params.clone();
                minus.weights[[r, c]] -= h;
                fd.weights[[r, c]] = (loss_of(&inst, &plus) - loss_of(&inst, &minus)) / (2.0 * h);
            }
        }
        for r in 0..v {
            for c in 0..v {
                let mut plus = inst.params.clone();
                plus.transitions[[r, c]] += h;
                let mut minus = inst.params.clone();
                minus.transitions[[r, c]] -= h;
                fd.transitions[[r, c]] =
                    (loss_of(&inst, &plus) - loss_of(&inst, &minus)) / (2.0 * h);
            }
        }
        for (a, f) in analytic
            .weights
            .iter()
            .chain(analytic.transitions.iter())
            .zip(fd.weights.iter().chain(fd.transitions.iter()))
        {
            let scale = a.abs().max(f.abs()).max(1e-3);
            worst = worst.max((a - f).abs() / scale);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-5 && elapsed.as_secs_f64() < 30.0;
    report(
        2,
        "gradient vs finite differences",
        pass,
        &format!("100 instances, max relative error {worst:.3e}; {elapsed:?}"),
    );
}

// ---------------------------------------------------------------------------
// 3. Retrieval oracle equivalence
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_retrieval_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut trials = 0usize;
    for trial in 0..200 {
        let n = rng.gen_range(1..=2000usize);
        let dim = rng.gen_range(2..=8usize);
        // Components from a small discrete set so exact similarity ties occur.
        let corpus: Vec<CorpusDoc> = (0..n)
            .map(|i| {
                let e: Vec<f64> = (0..dim).map(|_| f64::from(rng.gen_range(-2..=2i32))).collect();
                CorpusDoc::new(format!("doc-{i:05}"), format!("t{i}"), e).unwrap()
            })
            .collect();
        let q: Vec<f64> = (0..dim).map(|_| f64::from(rng.gen_range(-2..=2i32))).collect();
        let entity = RareEntity::new(format!("e{trial}"), q).unwrap();
        let k = rng.gen_range(1..=16usize);
        let got: Vec<&str> = retrieve_top_k(&entity, &corpus, k)
            .unwrap()
            .iter()
            .map(|d| d.doc_id.as_str())
            .collect();
        // Brute-force oracle: full sort by (similarity desc, doc_id asc).
        let mut scored: Vec<(f64, &CorpusDoc)> = corpus
            .iter()
            .map(|d| (similarity(&entity.embedding, &d.embedding).unwrap(), d))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.doc_id.cmp(&b.1.doc_id)));
        let want: Vec<&str> = scored.iter().take(k).map(|(_, d)| d.doc_id.as_str()).collect();
        assert_eq!(got, want, "trial {trial}: n={n} k={k}");
        trials += 1;
    }
    let elapsed = start.elapsed();
    let pass = trials == 200 && elapsed.as_secs_f64() < 10.0;
    report(
        3,
        "retrieval oracle equivalence",
        pass,
        &format!("200 random corpora matched the full-sort oracle; {elapsed:?}"),
    );
}

// ---------------------------------------------------------------------------
// 4. Distribution control
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_distribution_control() {
    let start = Instant::now();
    let dim = 32;
    let entities = toy_entities(30, dim);
    let corpus = toy_corpus(&entities, 2, dim);
    let seeds = toy_seed_pool("acc4-seed", 300);
    let mut detail = String::new();
    let mut pass = true;
    for alpha in [0.0, 0.13, 0.25, 0.33, 0.5] {
        let cfg = SynthesisConfig {
            alpha,
            k: 4,
            n_target: 10_000,
            rng_seed: 424_242,
            generator: GeneratorKind::LocalTemplate,
        };
        let ds = synthesize(&cfg, &seeds, &corpus, &entities, Generator::Local).unwrap();
        let measured = injected_fraction(&ds);
        let err = (measured - alpha).abs();
        detail.push_str(&format!("α={alpha}: {measured:.4} "));
        if err > 0.02 {
            pass = false;
        }
    }
    let elapsed = start.elapsed();
    pass = pass && elapsed.as_secs_f64() < 10.0;
    report(
        4,
        "distribution control",
        pass,
        &format!("injected fractions {detail}; {elapsed:?}"),
    );
}

// ---------------------------------------------------------------------------
// 5. Majority-vote amplification
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_vote_amplification() {
    let start = Instant::now();
    // Policy whose answer token is B with probability exactly 0.7 on every
    // question: position 0 is uniform over {A, B}; position 1 (the answer)
    // has transition logits [ln 0.3, ln 0.7] from either prev token.
    let vocab = standard_vocab(2);
    let weights = Array2::zeros((2, 4));
    let mut transitions = Array2::zeros((2, 2));
    for prev in 0..2 {
        transitions[[prev, 0]] = 0.3f64.ln();
        transitions[[prev, 1]] = 0.7f64.ln();
    }
    let params = PolicyParams::new(weights, transitions, 2, vocab, 1.0).unwrap();
    // Ground truth is always B; the wrong answer A precedes it in tie-break
    // order, so 4-4 tallies are losses and the exact binomial majority sum is
    // the right oracle.
    let n = 2000usize;
    let entries: Vec<Question> = (0..n)
        .map(|i| {
            Question::new(
                format!("acc5-{i:04}"),
                "binary toy",
                make_options(&["alpha", "beta"]),
                None,
                Rarity::General,
                Provenance::SyntheticPlain,
            )
            .unwrap()
        })
        .collect();
    let ds = Dataset::new(entries, DatasetKind::Synthetic).unwrap();
    let (labeled, rep) = label_offline(&ds, &params, 8, 99).unwrap();
    assert_eq!(rep.dropped, 0, "binary vocab cannot produce unparseable votes");
    let correct = labeled
        .entries
        .iter()
        .filter(|q| q.label == Some(AnswerSymbol('B')))
        .count();
    let measured = correct as f64 / labeled.len() as f64;
    // Exact binomial oracle: Σ_{j>=5} C(8,j) 0.7^j 0.3^{8-j}.
    let mut oracle = 0.0f64;
    for j in 5..=8u32 {
        let c = (1..=8).fold(1.0, |acc, i| acc * i as f64)
            / ((1..=j).fold(1.0, |acc, i| acc * i as f64)
                * (1..=(8 - j)).fold(1.0, |acc, i| acc * i as f64));
        oracle += c * 0.7f64.powi(j as i32) * 0.3f64.powi(8 - j as i32);
    }
    let elapsed = start.elapsed();
    let pass = measured > 0.7 && (measured - oracle).abs() <= 0.03 && elapsed.as_secs_f64() < 30.0;
    report(
        5,
        "majority-vote amplification",
        pass,
        &format!(
            "voted accuracy {measured:.4} vs single-sample 0.7 and binomial oracle {oracle:.4}; {elapsed:?}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Reward-hacking reproduction
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_reward_hacking() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::default_for(Scenario::LabelingDynamics, "acceptance", dir.path());
    let out = run_labeling_dynamics(&spec).unwrap();
    let elapsed = start.elapsed();
    let mut detail = String::new();
    for v in &out.verdict.per_seed {
        detail.push_str(&format!(
            "[seed {} base {:.2} gt {:.2} off {:.2} online {:.2} {}] ",
            v.seed,
            v.base_accuracy,
            v.ground_truth_final_accuracy,
            v.offline_final_accuracy,
            v.online_final_accuracy,
            if v.pass { "ok" } else { "fail" }
        ));
    }
    let pass = out.verdict.pass && elapsed.as_secs_f64() < 300.0;
    report(
        6,
        "reward-hacking reproduction",
        pass,
        &format!(
            "{}/{} seeds pass (need {}); {detail}; {elapsed:?}",
            out.verdict.passes,
            spec.seeds.len(),
            out.verdict.required
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Stage-ordering effect
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_stage_ordering() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::default_for(Scenario::StageAblation, "acceptance", dir.path());
    let out = run_stage_ablation(&spec).unwrap();
    let elapsed = start.elapsed();
    // The table must exist regardless of the verdict.
    let table = dir.path().join("acceptance").join("ablation.csv");
    let emitted = table.exists();
    let detail: Vec<String> = out
        .rows
        .iter()
        .map(|r| format!("{} {:.3}±{:.3}", r.mode, r.mean, r.std))
        .collect();
    let pass = out.ordering_holds && emitted && elapsed.as_secs_f64() < 600.0;
    report(
        7,
        "stage-ordering effect",
        pass,
        &format!("{}; report emitted: {emitted}; {elapsed:?}", detail.join(", ")),
    );
}

// ---------------------------------------------------------------------------
// 8. Long-run stability
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_long_run_stability() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::default_for(Scenario::LongRun, "acceptance", dir.path());
    spec.seeds = vec![1, 2];
    spec.steps = 1000;
    let out = run_long_run(&spec).unwrap();
    let elapsed = start.elapsed();
    let detail: Vec<String> = out
        .per_seed
        .iter()
        .map(|s| {
            format!(
                "seed {}: {:.3} -> {:.3}, collapse {}",
                s.seed, s.starting_accuracy, s.final_accuracy, s.collapse
            )
        })
        .collect();
    let pass = out.pass && elapsed.as_secs_f64() < 600.0;
    report(
        8,
        "long-run stability",
        pass,
        &format!("{}; {elapsed:?}", detail.join("; ")),
    );
}

#[test]
fn collapse_detector_unit_stream() {
    // The detector itself: synthetic metric streams hitting each clause.
    use synrl::trainer::MetricsRecord;
    let rec = |agree: f64, acc: f64| MetricsRecord {
        step: 0,
        stage: 0,
        mean_reward: 0.0,
        mean_abs_advantage: 0.0,
        clip_fraction: 0.0,
        mean_kl: 0.0,
        agreement_fraction: agree,
        accuracy_holdout: acc,
        accuracy_rare: f64::NAN,
        accuracy_general: f64::NAN,
    };
    assert!(collapse_flag(&[rec(0.999, 0.3)], 0.5));
    assert!(!collapse_flag(&[rec(0.999, 0.7)], 0.5));
    assert!(!collapse_flag(&[rec(0.5, 0.3)], 0.5));
}

// ---------------------------------------------------------------------------
// 9. CLI determinism
// ---------------------------------------------------------------------------

fn run_cli(dir: &std::path::Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_synrl"))
        .current_dir(dir)
        .args(args)
        .status()
        .expect("spawn CLI");
    assert!(status.success(), "CLI {args:?} failed");
}

fn file_bytes(dir: &std::path::Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("read {name}: {e}"))
}

#[test]
fn criterion_9_cli_determinism() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // Fixture inputs.
    let seeds = toy_seed_pool("acc9-seed", 60);
    save_dataset(&seeds, dir.join("seeds.jsonl")).unwrap();
    let mut docs = String::new();
    for i in 0..20 {
        docs.push_str(&format!(
            "{{\"doc_id\":\"d{i:03}\",\"text\":\"entity-{:03} syndrome reference {i}\"}}\n",
            i % 8
        ));
    }
    std::fs::write(dir.join("docs.jsonl"), &docs).unwrap();
    let mut ents = String::new();
    for i in 0..8 {
        ents.push_str(&format!("{{\"name\":\"entity-{i:03} syndrome\"}}\n"));
    }
    std::fs::write(dir.join("rare.jsonl"), &ents).unwrap();

    let mut identical = Vec::new();
    // Each command runs twice into separate outputs; bytes must match.
    for round in ["a", "b"] {
        run_cli(dir, &["ingest-corpus", "--dim", "32", "--in", "docs.jsonl", "--out", &format!("corpus_{round}.jsonl")]);
        run_cli(dir, &["policy", "init", "--vocab-size", "6", "--dim", "16", "--T", "4", "--seed", "3", "--out", &format!("base_{round}.ckpt")]);
    }
    identical.push(("corpus", file_bytes(dir, "corpus_a.jsonl") == file_bytes(dir, "corpus_b.jsonl")));
    identical.push(("policy", file_bytes(dir, "base_a.ckpt") == file_bytes(dir, "base_b.ckpt")));
    for round in ["a", "b"] {
        run_cli(dir, &["synthesize", "--alpha", "0.25", "--n", "150", "--seeds", "seeds.jsonl", "--corpus", "corpus_a.jsonl", "--entities", "rare.jsonl", "--out", &format!("syn_{round}.jsonl"), "--seed", "5", "--dim", "32"]);
        run_cli(dir, &["label", "--policy", "base_a.ckpt", "--in", &format!("syn_{round}.jsonl"), "--G", "8", "--seed", "11", "--out", &format!("labeled_{round}.jsonl"), "--report", &format!("report_{round}.json")]);
    }
    identical.push(("synthesize", file_bytes(dir, "syn_a.jsonl") == file_bytes(dir, "syn_b.jsonl")));
    identical.push(("label", file_bytes(dir, "labeled_a.jsonl") == file_bytes(dir, "labeled_b.jsonl")));
    identical.push(("report", file_bytes(dir, "report_a.json") == file_bytes(dir, "report_b.json")));

    // Train on the labeled output via a pinned two-stage plan.
    let labeled = load_dataset(dir.join("labeled_a.jsonl")).unwrap();
    let plan = serde_json::json!({
        "plan": {
            "mode": "two_stage",
            "ref_reset": "per_stage",
            "stages": [
                {"name": "self_supervised",
                 "bindings": [{"key": "labeled_a.jsonl", "digest": labeled.content_digest, "label_mode": "offline_pseudo"}],
                 "config": {"group_size": 8, "clip_eps": 0.2, "kl_beta": 0.001, "learning_rate": 2.0,
                             "batch_questions": 16, "steps": 20, "label_mode": "offline_pseudo", "rng_seed": 7}},
                {"name": "supervised",
                 "bindings": [{"key": "real.jsonl", "digest": null, "label_mode": "ground_truth"}],
                 "config": {"group_size": 8, "clip_eps": 0.2, "kl_beta": 0.001, "learning_rate": 2.0,
                             "batch_questions": 16, "steps": 20, "label_mode": "ground_truth", "rng_seed": 7}}
            ]
        },
        "holdout": "real.jsonl"
    });
    // A labeled "real" set: reuse the seed pool with fixed labels.
    let mut real_entries = Vec::new();
    for (i, q) in seeds.entries.iter().enumerate().take(40) {
        let mut q = q.clone();
        q.label = Some(q.options[i % 4].symbol);
        real_entries.push(q);
    }
    let real = Dataset::new(real_entries, DatasetKind::Real).unwrap();
    save_dataset(&real, dir.join("real.jsonl")).unwrap();
    std::fs::write(dir.join("plan.json"), serde_json::to_vec(&plan).unwrap()).unwrap();
    for round in ["a", "b"] {
        run_cli(dir, &["train", "--plan", "plan.json", "--policy", "base_a.ckpt", "--out", &format!("final_{round}.ckpt"), "--metrics", &format!("metrics_{round}.csv")]);
    }
    identical.push(("train ckpt", file_bytes(dir, "final_a.ckpt") == file_bytes(dir, "final_b.ckpt")));
    identical.push(("train csv", file_bytes(dir, "metrics_a.csv") == file_bytes(dir, "metrics_b.csv")));

    // Experiment rerun: every emitted file identical.
    let exp_spec = serde_json::json!({
        "name": "det",
        "scenario": "labeling_dynamics",
        "seeds": [1, 2],
        "n_syn": 150,
        "n_real": 150,
        "steps": 15,
        "out_dir": "exp_a"
    });
    std::fs::write(dir.join("spec_a.json"), serde_json::to_vec(&exp_spec).unwrap()).unwrap();
    let mut exp_b = exp_spec.clone();
    exp_b["out_dir"] = serde_json::json!("exp_b");
    std::fs::write(dir.join("spec_b.json"), serde_json::to_vec(&exp_b).unwrap()).unwrap();
    run_cli(dir, &["experiment", "run", "--spec", "spec_a.json"]);
    run_cli(dir, &["experiment", "run", "--spec", "spec_b.json"]);
    let mut exp_match = true;
    let walk = |root: &std::path::Path| -> BTreeMap<String, Vec<u8>> {
        let mut files = BTreeMap::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(p) = stack.pop() {
            for entry in std::fs::read_dir(&p).unwrap() {
                let e = entry.unwrap();
                let path = e.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).unwrap().display().to_string();
                    files.insert(rel, std::fs::read(&path).unwrap());
                }
            }
        }
        files
    };
    let fa = walk(&dir.join("exp_a"));
    let fb = walk(&dir.join("exp_b"));
    if fa.len() != fb.len() || fa.is_empty() {
        exp_match = false;
    }
    for (name, bytes) in &fa {
        if fb.get(name) != Some(bytes) {
            exp_match = false;
        }
    }
    identical.push(("experiment tree", exp_match));

    let elapsed = start.elapsed();
    let failed: Vec<&str> = identical.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let pass = failed.is_empty();
    report(
        9,
        "CLI determinism",
        pass,
        &format!(
            "{} byte-identity checks ({} files in experiment tree); mismatches: {failed:?}; {elapsed:?}",
            identical.len(),
            fa.len()
        ),
    );
}
