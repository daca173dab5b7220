//! Distribution-controllable question synthesis.
//!
//! Each generated question starts from a pair of seed questions. With
//! probability `alpha` the request is augmented with top-k documents
//! retrieved for a uniformly drawn rare entity (knowledge injection); the
//! injected fraction of the output dataset is therefore directly tunable.
//! Generation itself is delegated either to a deterministic local composer or
//! to an external HTTP generator.
//!
//! Every request draws from its own ChaCha stream `(rng_seed, request index)`,
//! so results are order-independent and the whole local pipeline is
//! reproducible byte-for-byte.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    AnswerOption, AnswerSymbol, Dataset, DatasetKind, Provenance, Question, Rarity,
};
use crate::error::{Error, Result};
use crate::retrieval::{retrieve_top_k, CorpusDoc, RareEntity};

/// Number of options every synthesized question carries.
pub const SYNTH_OPTIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    LocalTemplate,
    ExternalClient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub alpha: f64,
    /// Retrieval depth for knowledge injection.
    pub k: usize,
    pub n_target: usize,
    pub rng_seed: u64,
    pub generator: GeneratorKind,
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.n_target == 0 {
            return Err(Error::InvalidConfig("n_target must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("retrieval depth k must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            alpha: 0.25,
            k: 4,
            n_target: 1,
            rng_seed: 0,
            generator: GeneratorKind::LocalTemplate,
        }
    }
}

/// One generation request: a seed pair, plus retrieval context exactly when
/// an entity was injected.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub seed_a: Question,
    pub seed_b: Question,
    pub context: Option<Vec<CorpusDoc>>,
    pub entity: Option<RareEntity>,
}

impl GenerationRequest {
    pub fn new(
        seed_a: Question,
        seed_b: Question,
        context: Option<Vec<CorpusDoc>>,
        entity: Option<RareEntity>,
    ) -> Result<Self> {
        if context.is_some() != entity.is_some() {
            return Err(Error::InvalidConfig(
                "generation request context and entity must be present together".into(),
            ));
        }
        Ok(GenerationRequest {
            seed_a,
            seed_b,
            context,
            entity,
        })
    }

    pub fn injected(&self) -> bool {
        self.entity.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Inject,
    Plain,
}

/// Draw the injection branch: inject iff ρ < alpha with ρ ~ Uniform[0, 1).
pub fn draw_branch(rng: &mut ChaCha8Rng, alpha: f64) -> Branch {
    let rho: f64 = rng.gen();
    if rho < alpha {
        Branch::Inject
    } else {
        Branch::Plain
    }
}

/// Two distinct seed questions drawn uniformly without replacement.
pub fn sample_seed_pair<'a>(
    dataset: &'a Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<(&'a Question, &'a Question)> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::DatasetTooSmall { len: n, need: 2 });
    }
    let i = rng.gen_range(0..n);
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    Ok((&dataset.entries[i], &dataset.entries[j]))
}

const GOLDEN_GAMMA: u64 = 0x9e3779b97f4a7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic fusion of the two seeds' feature seeds.
pub fn fuse_seeds(a: u64, b: u64) -> u64 {
    splitmix64(a ^ b.rotate_left(32))
}

fn first_clause(text: &str) -> &str {
    let cut = text.find(['.', '?']).map(|i| i + 1).unwrap_or(text.len());
    text[..cut.min(160)].trim()
}

/// Rarity rule for plain synthetics: the majority rarity of the two seeds,
/// ties resolved to general.
fn plain_rarity(a: &Question, b: &Question) -> Rarity {
    if a.rarity == Rarity::Rare && b.rarity == Rarity::Rare {
        Rarity::Rare
    } else {
        Rarity::General
    }
}

/// Deterministic local composer standing in for an external generator.
///
/// Plain requests: the correct option index is a pure function of the fused
/// seed pair (recoverable by tests via [`plain_truth_index`]). Injected
/// requests: the correct option's text is the entity name, distractors are
/// other entity names drawn seeded from `distractor_pool`.
pub fn local_template_generate(
    request: &GenerationRequest,
    index: usize,
    rng: &mut ChaCha8Rng,
    distractor_pool: &[RareEntity],
) -> Result<Question> {
    let fused = fuse_seeds(request.seed_a.feature_seed, request.seed_b.feature_seed);
    let tag = splitmix64(fused ^ index as u64) & 0xffff_ffff;
    let id = format!("syn-{index:06}-{tag:08x}");
    let stem_a = first_clause(&request.seed_a.text);
    let stem_b = first_clause(&request.seed_b.text);
    if let Some(entity) = &request.entity {
        let context = request.context.as_deref().unwrap_or(&[]);
        let notes: Vec<&str> = context.iter().map(|d| first_clause(&d.text)).collect();
        let text = format!(
            "Composite case {tag:08x}. {stem_a} Considered together with: {stem_b} \
             Context notes: {} Which condition best fits the combined presentation?",
            notes.join(" ")
        );
        // Entity name is the correct option; distractors are other entity
        // names (padded with labeled variants when the pool is small).
        let mut distractors: Vec<String> = Vec::new();
        let mut candidates: Vec<&RareEntity> = distractor_pool
            .iter()
            .filter(|e| e.name != entity.name)
            .collect();
        while distractors.len() < SYNTH_OPTIONS - 1 {
            if candidates.is_empty() {
                distractors.push(format!(
                    "atypical variant {} of {}",
                    distractors.len() + 1,
                    entity.name
                ));
            } else {
                let pick = rng.gen_range(0..candidates.len());
                distractors.push(candidates.swap_remove(pick).name.clone());
            }
        }
        let correct_pos = rng.gen_range(0..SYNTH_OPTIONS);
        let mut options = Vec::with_capacity(SYNTH_OPTIONS);
        let mut d_iter = distractors.into_iter();
        for pos in 0..SYNTH_OPTIONS {
            let text = if pos == correct_pos {
                entity.name.clone()
            } else {
                d_iter.next().expect("enough distractors")
            };
            options.push(AnswerOption {
                symbol: AnswerSymbol(char::from(b'A' + pos as u8)),
                text,
            });
        }
        Question::new(
            id,
            text,
            options,
            None,
            Rarity::Rare,
            Provenance::SyntheticInjected,
        )
    } else {
        let text = format!(
            "Composite case {tag:08x}. {stem_a} Considered together with: {stem_b} \
             Which option is best supported by the combined findings?"
        );
        let mut texts: Vec<String> = Vec::with_capacity(SYNTH_OPTIONS);
        let pool_a = &request.seed_a.options;
        let pool_b = &request.seed_b.options;
        for pos in 0..SYNTH_OPTIONS {
            let src = if pos % 2 == 0 { pool_a } else { pool_b };
            texts.push(src[(pos / 2) % src.len()].text.clone());
        }
        let options: Vec<AnswerOption> = texts
            .into_iter()
            .enumerate()
            .map(|(pos, text)| AnswerOption {
                symbol: AnswerSymbol(char::from(b'A' + pos as u8)),
                text,
            })
            .collect();
        Question::new(
            id,
            text,
            options,
            None,
            plain_rarity(&request.seed_a, &request.seed_b),
            Provenance::SyntheticPlain,
        )
    }
}

/// Ground-truth option index of a plain locally-generated question, as the
/// test oracle recomputes it from the seed pair.
pub fn plain_truth_index(seed_a: &Question, seed_b: &Question) -> usize {
    (fuse_seeds(seed_a.feature_seed, seed_b.feature_seed) % SYNTH_OPTIONS as u64) as usize
}

/// Ground-truth symbol of any locally generated question, recomputed from its
/// construction inputs (injected: the option whose text is the entity name;
/// plain: [`plain_truth_index`]).
pub fn local_truth_symbol(question: &Question, request: &GenerationRequest) -> AnswerSymbol {
    match &request.entity {
        Some(entity) => question
            .options
            .iter()
            .find(|o| o.text == entity.name)
            .map(|o| o.symbol)
            .expect("injected question carries its entity as an option"),
        None => question.options[plain_truth_index(&request.seed_a, &request.seed_b)].symbol,
    }
}

fn render_seed(question: &Question) -> String {
    let opts: Vec<String> = question
        .options
        .iter()
        .map(|o| format!("{}. {}", o.symbol, o.text))
        .collect();
    format!("{} {}", question.text, opts.join(" "))
}

/// Render the generation prompt for a request: seed pair, optional knowledge
/// context, and the requirement list the external generator is asked to
/// follow.
pub fn render_prompt(request: &GenerationRequest) -> String {
    let mut out = String::new();
    out.push_str("The following reasoning-heavy seed questions are provided:\n\n");
    out.push_str(&format!("Seed Question 1: {}\n\n", render_seed(&request.seed_a)));
    out.push_str(&format!("Seed Question 2: {}\n\n", render_seed(&request.seed_b)));
    if let (Some(entity), Some(context)) = (&request.entity, &request.context) {
        out.push_str("MEDICAL KNOWLEDGE CONTEXT:\n");
        out.push_str(&format!(
            "The following medical knowledge about {} can be used:\n",
            entity.name
        ));
        for doc in context {
            out.push_str(&format!("{}\n", doc.text));
        }
        out.push('\n');
        out.push_str(
            "Your task is to generate a medical reasoning question following these requirements:\n\
             (a) Using the seed question as inspiration, generate a novel and clinically accurate question of comparable difficulty.\n\
             (b) Incorporate the MEDICAL KNOWLEDGE about rare disease if it is useful\n\
             (c) Ensure all medical content is factually correct and avoid counterfactual content (e.g., male patients with ovarian cancer)\n\
             (d) Questions must be self-contained and require multi-step reasoning, not simple fact recall\n\
             (e) Include realistic multiple-choice options that are plausible but only one is correct\n",
        );
    } else {
        out.push_str(
            "Your task is to generate a medical reasoning question following these requirements:\n\
             (a) Using the seed question as inspiration, generate a novel and clinically accurate question of comparable difficulty.\n\
             (b) Ensure all medical content is factually correct and avoid counterfactual content (e.g., male patients with ovarian cancer)\n\
             (c) Questions must be self-contained and require multi-step reasoning, not simple fact recall\n\
             (d) Include realistic multiple-choice options that are plausible but only one is correct\n",
        );
    }
    out
}

#[derive(Debug, Serialize)]
struct GeneratorRequestBody<'a> {
    prompt: &'a str,
}

#[derive(Debug, Deserialize)]
struct GeneratorResponseBody {
    question: String,
    options: Vec<AnswerOption>,
}

/// HTTP client for an external question generator.
///
/// Posts `{"prompt": ...}` and expects `{"question": ..., "options": [...]}`;
/// network and parse failures are retried with exponential backoff up to
/// `max_retries` additional attempts.
pub struct ExternalGenerator {
    pub endpoint: String,
    pub auth_token: Option<String>,
    pub max_retries: usize,
    pub base_backoff: Duration,
    client: reqwest::blocking::Client,
}

impl ExternalGenerator {
    pub fn new(endpoint: impl Into<String>, auth_token: Option<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| Error::GeneratorFailed {
                attempts: 0,
                reason: e.to_string(),
            })?;
        Ok(ExternalGenerator {
            endpoint: endpoint.into(),
            auth_token,
            max_retries: 3,
            base_backoff: Duration::from_millis(100),
            client,
        })
    }

    fn post_once(&self, prompt: &str) -> std::result::Result<GeneratorResponseBody, String> {
        let mut req = self
            .client
            .post(&self.endpoint)
            .json(&GeneratorRequestBody { prompt });
        if let Some(token) = &self.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("status {status}"));
        }
        resp.json::<GeneratorResponseBody>().map_err(|e| e.to_string())
    }

    /// Generate a question for the request, assembling id, rarity, and
    /// provenance from the request's injection state.
    pub fn generate(&self, request: &GenerationRequest, index: usize) -> Result<Question> {
        let prompt = render_prompt(request);
        let mut attempts = 0usize;
        let body = loop {
            attempts += 1;
            match self.post_once(&prompt) {
                Ok(body) => break body,
                Err(reason) => {
                    if attempts > self.max_retries {
                        return Err(Error::GeneratorFailed { attempts, reason });
                    }
                    std::thread::sleep(self.base_backoff * 2u32.pow(attempts as u32 - 1));
                }
            }
        };
        if body.options.len() < crate::dataset::MIN_OPTIONS
            || body.options.len() > crate::dataset::MAX_OPTIONS
        {
            return Err(Error::GeneratorResponse(format!(
                "{} options outside [{}, {}]",
                body.options.len(),
                crate::dataset::MIN_OPTIONS,
                crate::dataset::MAX_OPTIONS
            )));
        }
        let fused = fuse_seeds(request.seed_a.feature_seed, request.seed_b.feature_seed);
        let tag = splitmix64(fused ^ index as u64) & 0xffff_ffff;
        let (rarity, provenance) = if request.injected() {
            (Rarity::Rare, Provenance::SyntheticInjected)
        } else {
            (plain_rarity(&request.seed_a, &request.seed_b), Provenance::SyntheticPlain)
        };
        Question::new(
            format!("syn-{index:06}-{tag:08x}"),
            body.question,
            body.options,
            None,
            rarity,
            provenance,
        )
    }
}

/// How `synthesize` produces each question.
pub enum Generator<'a> {
    Local,
    External(&'a ExternalGenerator),
}

/// Run the synthesis pipeline: `n_target` questions with Bernoulli(alpha)
/// knowledge-injection branching.
///
/// Injected requests pick a uniform entity and carry exactly the top-k
/// retrieved docs as context. The output dataset is unlabeled and tagged
/// synthetic.
pub fn synthesize(
    config: &SynthesisConfig,
    seeds: &Dataset,
    corpus: &[CorpusDoc],
    entities: &[RareEntity],
    generator: Generator<'_>,
) -> Result<Dataset> {
    config.validate()?;
    if seeds.len() < 2 {
        return Err(Error::DatasetTooSmall {
            len: seeds.len(),
            need: 2,
        });
    }
    if config.alpha > 0.0 {
        if corpus.is_empty() {
            return Err(Error::MissingResource {
                what: "synthesis with alpha > 0",
                resource: "corpus",
            });
        }
        if entities.is_empty() {
            return Err(Error::MissingResource {
                what: "synthesis with alpha > 0",
                resource: "rare entities",
            });
        }
    }
    let mut entries = Vec::with_capacity(config.n_target);
    for index in 0..config.n_target {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        rng.set_stream(index as u64);
        let branch = draw_branch(&mut rng, config.alpha);
        let (seed_a, seed_b) = sample_seed_pair(seeds, &mut rng)?;
        let request = match branch {
            Branch::Inject => {
                let entity = entities[rng.gen_range(0..entities.len())].clone();
                let context: Vec<CorpusDoc> = retrieve_top_k(&entity, corpus, config.k)?
                    .into_iter()
                    .cloned()
                    .collect();
                GenerationRequest::new(seed_a.clone(), seed_b.clone(), Some(context), Some(entity))?
            }
            Branch::Plain => {
                GenerationRequest::new(seed_a.clone(), seed_b.clone(), None, None)?
            }
        };
        let question = match &generator {
            Generator::Local => local_template_generate(&request, index, &mut rng, entities)?,
            Generator::External(client) => client.generate(&request, index)?,
        };
        entries.push(question);
    }
    Dataset::new(entries, DatasetKind::Synthetic)
}

/// Fraction of entries with injected provenance.
pub fn injected_fraction(dataset: &Dataset) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    dataset
        .entries
        .iter()
        .filter(|q| q.provenance == Provenance::SyntheticInjected)
        .count() as f64
        / dataset.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_options;
    use crate::retrieval::hash_embedder;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn seed_question(id: &str, rarity: Rarity) -> Question {
        Question::new(
            id,
            format!("Seed scenario {id}. It has distinguishing findings."),
            make_options(&["finding w", "finding x", "finding y", "finding z"]),
            Some(AnswerSymbol('A')),
            rarity,
            Provenance::RealSeed,
        )
        .unwrap()
    }

    fn seed_pool(n: usize, rare_every: usize) -> Dataset {
        let entries: Vec<Question> = (0..n)
            .map(|i| {
                let rarity = if rare_every > 0 && i % rare_every == 0 {
                    Rarity::Rare
                } else {
                    Rarity::General
                };
                seed_question(&format!("seed-{i:03}"), rarity)
            })
            .collect();
        Dataset::new(entries, DatasetKind::Real).unwrap()
    }

    fn toy_entities(n: usize, dim: usize) -> Vec<RareEntity> {
        (0..n)
            .map(|i| {
                let name = format!("entity-{i:03} syndrome");
                RareEntity::new(name.clone(), hash_embedder(&name, dim).unwrap()).unwrap()
            })
            .collect()
    }

    fn toy_corpus(entities: &[RareEntity], per_entity: usize, dim: usize) -> Vec<CorpusDoc> {
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
                        hash_embedder(&text, dim).unwrap(),
                    )
                    .unwrap(),
                );
            }
        }
        docs
    }

    #[test]
    fn branch_law_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            assert_eq!(draw_branch(&mut rng, 0.0), Branch::Plain);
        }
        for _ in 0..200 {
            assert_eq!(draw_branch(&mut rng, 1.0), Branch::Inject);
        }
    }

    #[test]
    fn branch_fraction_converges() {
        let alpha = 0.25;
        let n = 100_000usize;
        let mut inject = 0usize;
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(12345);
            rng.set_stream(i as u64);
            if draw_branch(&mut rng, alpha) == Branch::Inject {
                inject += 1;
            }
        }
        let frac = inject as f64 / n as f64;
        assert!((frac - alpha).abs() <= 0.005, "fraction {frac}");
    }

    #[test]
    fn seed_pairs_are_distinct_and_in_range() {
        let ds = seed_pool(7, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (a, b) = sample_seed_pair(&ds, &mut rng).unwrap();
            assert_ne!(a.id, b.id);
        }
        let tiny = seed_pool(1, 0);
        assert!(sample_seed_pair(&tiny, &mut rng).is_err());
    }

    #[test]
    fn local_generation_is_deterministic() {
        let ds = seed_pool(4, 0);
        let entities = toy_entities(6, 16);
        let req = GenerationRequest::new(
            ds.entries[0].clone(),
            ds.entries[1].clone(),
            None,
            None,
        )
        .unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let q1 = local_template_generate(&req, 5, &mut r1, &entities).unwrap();
        let q2 = local_template_generate(&req, 5, &mut r2, &entities).unwrap();
        assert_eq!(q1, q2);
    }

    #[test]
    fn injected_question_carries_entity_option() {
        let ds = seed_pool(4, 0);
        let entities = toy_entities(6, 16);
        let corpus = toy_corpus(&entities, 2, 16);
        let entity = entities[2].clone();
        let context: Vec<CorpusDoc> = retrieve_top_k(&entity, &corpus, 4)
            .unwrap()
            .into_iter()
            .cloned()
            .collect();
        let req = GenerationRequest::new(
            ds.entries[0].clone(),
            ds.entries[1].clone(),
            Some(context),
            Some(entity.clone()),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = local_template_generate(&req, 0, &mut rng, &entities).unwrap();
        assert_eq!(q.provenance, Provenance::SyntheticInjected);
        assert_eq!(q.rarity, Rarity::Rare);
        assert!(q.options.iter().any(|o| o.text == entity.name));
        assert!(q.text.contains(&entity.name));
        assert_eq!(local_truth_symbol(&q, &req), {
            q.options
                .iter()
                .find(|o| o.text == entity.name)
                .unwrap()
                .symbol
        });
    }

    #[test]
    fn request_invariant_context_iff_entity() {
        let ds = seed_pool(2, 0);
        let entities = toy_entities(1, 16);
        assert!(GenerationRequest::new(
            ds.entries[0].clone(),
            ds.entries[1].clone(),
            None,
            Some(entities[0].clone())
        )
        .is_err());
        assert!(GenerationRequest::new(
            ds.entries[0].clone(),
            ds.entries[1].clone(),
            Some(vec![]),
            None
        )
        .is_err());
    }

    #[test]
    fn synthesize_alpha_extremes_and_unique_ids() {
        let seeds = seed_pool(10, 3);
        let entities = toy_entities(8, 16);
        let corpus = toy_corpus(&entities, 2, 16);
        let base = SynthesisConfig {
            n_target: 100,
            rng_seed: 77,
            ..SynthesisConfig::default()
        };

        let cfg0 = SynthesisConfig { alpha: 0.0, ..base.clone() };
        let ds0 = synthesize(&cfg0, &seeds, &corpus, &entities, Generator::Local).unwrap();
        assert_eq!(ds0.len(), 100);
        assert_eq!(injected_fraction(&ds0), 0.0);

        let cfg1 = SynthesisConfig { alpha: 1.0, ..base.clone() };
        let ds1 = synthesize(&cfg1, &seeds, &corpus, &entities, Generator::Local).unwrap();
        assert_eq!(injected_fraction(&ds1), 1.0);
        assert!(ds1
            .entries
            .iter()
            .all(|q| q.provenance == Provenance::SyntheticInjected));

        let mut ids: Vec<&str> = ds1.entries.iter().map(|q| q.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn synthesize_alpha0_allows_empty_resources() {
        let seeds = seed_pool(5, 0);
        let cfg = SynthesisConfig {
            alpha: 0.0,
            n_target: 10,
            ..SynthesisConfig::default()
        };
        let ds = synthesize(&cfg, &seeds, &[], &[], Generator::Local).unwrap();
        assert_eq!(ds.len(), 10);
        let cfg_pos = SynthesisConfig { alpha: 0.5, ..cfg };
        assert!(synthesize(&cfg_pos, &seeds, &[], &[], Generator::Local).is_err());
    }

    #[test]
    fn synthesize_is_digest_deterministic() {
        let seeds = seed_pool(12, 4);
        let entities = toy_entities(10, 16);
        let corpus = toy_corpus(&entities, 2, 16);
        let cfg = SynthesisConfig {
            alpha: 0.3,
            n_target: 60,
            rng_seed: 5,
            ..SynthesisConfig::default()
        };
        let a = synthesize(&cfg, &seeds, &corpus, &entities, Generator::Local).unwrap();
        let b = synthesize(&cfg, &seeds, &corpus, &entities, Generator::Local).unwrap();
        assert_eq!(a.content_digest, b.content_digest);
    }

    #[test]
    fn injected_context_equals_top_k_exactly() {
        // Re-derive each injected request's entity and context from the same
        // streams the pipeline uses and check the retrieval contract.
        let seeds = seed_pool(12, 4);
        let entities = toy_entities(10, 16);
        let corpus = toy_corpus(&entities, 3, 16);
        let cfg = SynthesisConfig {
            alpha: 1.0,
            k: 4,
            n_target: 20,
            rng_seed: 31,
            ..SynthesisConfig::default()
        };
        let ds = synthesize(&cfg, &seeds, &corpus, &entities, Generator::Local).unwrap();
        for (index, q) in ds.entries.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(index as u64);
            assert_eq!(draw_branch(&mut rng, cfg.alpha), Branch::Inject);
            let _ = sample_seed_pair(&seeds, &mut rng).unwrap();
            let entity = &entities[rng.gen_range(0..entities.len())];
            let expected = retrieve_top_k(entity, &corpus, cfg.k).unwrap();
            // The question text embeds the context notes in retrieval order.
            let mut last = 0usize;
            for doc in &expected {
                let clause = first_clause(&doc.text);
                let pos = q.text[last..]
                    .find(clause)
                    .unwrap_or_else(|| panic!("doc clause `{clause}` missing from `{}`", q.text));
                last += pos + clause.len();
            }
            assert!(q.options.iter().any(|o| o.text == entity.name));
        }
    }

    #[test]
    fn plain_rarity_follows_seed_majority() {
        let rare = seed_question("rare-a", Rarity::Rare);
        let rare2 = seed_question("rare-b", Rarity::Rare);
        let general = seed_question("gen-a", Rarity::General);
        let both_rare = GenerationRequest::new(rare.clone(), rare2, None, None).unwrap();
        let mixed = GenerationRequest::new(rare, general, None, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q1 = local_template_generate(&both_rare, 0, &mut rng, &[]).unwrap();
        assert_eq!(q1.rarity, Rarity::Rare);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q2 = local_template_generate(&mixed, 1, &mut rng, &[]).unwrap();
        assert_eq!(q2.rarity, Rarity::General);
    }

    #[test]
    fn prompt_includes_knowledge_block_only_when_injected() {
        let ds = seed_pool(2, 0);
        let entities = toy_entities(1, 16);
        let corpus = toy_corpus(&entities, 1, 16);
        let plain = GenerationRequest::new(ds.entries[0].clone(), ds.entries[1].clone(), None, None)
            .unwrap();
        let p1 = render_prompt(&plain);
        assert!(p1.contains("Seed Question 1"));
        assert!(!p1.contains("MEDICAL KNOWLEDGE CONTEXT"));
        let injected = GenerationRequest::new(
            ds.entries[0].clone(),
            ds.entries[1].clone(),
            Some(corpus.clone()),
            Some(entities[0].clone()),
        )
        .unwrap();
        let p2 = render_prompt(&injected);
        assert!(p2.contains("MEDICAL KNOWLEDGE CONTEXT"));
        assert!(p2.contains(&entities[0].name));
    }

    /// Minimal canned-response HTTP server for client tests.
    fn spawn_server(responses: Vec<String>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for response in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = [0u8; 65536];
                let mut read = 0usize;
                // Read until the full body per Content-Length arrives.
                loop {
                    let n = stream.read(&mut buf[read..]).unwrap();
                    read += n;
                    let text = String::from_utf8_lossy(&buf[..read]).to_string();
                    if let Some(head_end) = text.find("\r\n\r\n") {
                        let headers = &text[..head_end];
                        let len = headers
                            .lines()
                            .find_map(|l| {
                                let l = l.to_ascii_lowercase();
                                l.strip_prefix("content-length:")
                                    .map(|v| v.trim().parse::<usize>().unwrap())
                            })
                            .unwrap_or(0);
                        if text.len() >= head_end + 4 + len {
                            bodies.push(text[head_end + 4..].to_string());
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                stream.write_all(response.as_bytes()).unwrap();
            }
            bodies
        });
        (format!("http://{addr}/generate"), handle)
    }

    fn http_ok(json: &str) -> String {
        format!(
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{json}",
            json.len()
        )
    }

    fn http_500() -> String {
        "HTTP/1.1 500 Internal Server Error\r\nContent-Length: 0\r\nConnection: close\r\n\r\n"
            .to_string()
    }

    fn sample_request() -> GenerationRequest {
        let ds = seed_pool(2, 0);
        GenerationRequest::new(ds.entries[0].clone(), ds.entries[1].clone(), None, None).unwrap()
    }

    #[test]
    fn external_generator_parses_response() {
        let body = r#"{"question":"Generated scenario?","options":[{"symbol":"A","text":"one"},{"symbol":"B","text":"two"},{"symbol":"C","text":"three"}]}"#;
        let (url, handle) = spawn_server(vec![http_ok(body)]);
        let client = ExternalGenerator::new(url, Some("token-1".into())).unwrap();
        let q = client.generate(&sample_request(), 3).unwrap();
        assert_eq!(q.text, "Generated scenario?");
        assert_eq!(q.options.len(), 3);
        assert_eq!(q.provenance, Provenance::SyntheticPlain);
        assert!(q.label.is_none());
        let bodies = handle.join().unwrap();
        assert!(bodies[0].contains("\"prompt\""));
        assert!(bodies[0].contains("Seed Question 1"));
    }

    #[test]
    fn external_generator_retries_then_succeeds() {
        let body = r#"{"question":"After retry","options":[{"symbol":"A","text":"one"},{"symbol":"B","text":"two"}]}"#;
        let (url, handle) = spawn_server(vec![http_500(), http_ok(body)]);
        let mut client = ExternalGenerator::new(url, None).unwrap();
        client.base_backoff = Duration::from_millis(1);
        let q = client.generate(&sample_request(), 0).unwrap();
        assert_eq!(q.text, "After retry");
        handle.join().unwrap();
    }

    #[test]
    fn external_generator_fails_after_retries() {
        let (url, handle) = spawn_server(vec![http_500(), http_500(), http_500(), http_500()]);
        let mut client = ExternalGenerator::new(url, None).unwrap();
        client.max_retries = 3;
        client.base_backoff = Duration::from_millis(1);
        let err = client.generate(&sample_request(), 0);
        assert!(matches!(err, Err(Error::GeneratorFailed { attempts: 4, .. })));
        handle.join().unwrap();
    }

    #[test]
    fn external_generator_rejects_malformed_options() {
        let body = r#"{"question":"Bad","options":[{"symbol":"A","text":"only one"}]}"#;
        let (url, handle) = spawn_server(vec![http_ok(body)]);
        let client = ExternalGenerator::new(url, None).unwrap();
        let err = client.generate(&sample_request(), 0);
        assert!(matches!(err, Err(Error::GeneratorResponse(_))));
        handle.join().unwrap();
    }
}
