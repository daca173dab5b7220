//! Exact-probability toy autoregressive policy.
//!
//! The policy emits `T` tokens for a question. At each position the logits
//! are `W·φ(q) + B[prev]` scaled by temperature, where `φ(q)` is a feature
//! vector derived from the question's `feature_seed` and `B[prev]` is a
//! previous-token transition row (absent at position 0). Every distribution
//! is computed exactly, so per-token log-probabilities, ratios, and KL terms
//! carry no estimator noise.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{hex_string, AnswerSymbol, Question};
use crate::error::{Error, Result};

pub type TokenId = usize;

/// Feature vector for a question: `dim` standard normals from a ChaCha stream
/// seeded by `feature_seed`, scaled to roughly unit norm.
pub fn question_features(feature_seed: u64, dim: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(feature_seed);
    let scale = 1.0 / (dim as f64).sqrt();
    Array1::from_iter((0..dim).map(|_| {
        let x: f64 = rng.sample(StandardNormal);
        x * scale
    }))
}

/// Parameters of the toy policy: vocabulary-by-feature logit weights plus
/// previous-token transition logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// (V × d) feature logit weights.
    pub weights: Array2<f64>,
    /// (V × V) previous-token transition logits.
    pub transitions: Array2<f64>,
    /// Response length in tokens (T ≥ 1).
    pub response_len: usize,
    /// Ordered token list: answer symbols plus filler tokens.
    pub vocab: Vec<String>,
    pub temperature: f64,
}

impl PolicyParams {
    pub fn new(
        weights: Array2<f64>,
        transitions: Array2<f64>,
        response_len: usize,
        vocab: Vec<String>,
        temperature: f64,
    ) -> Result<Self> {
        let v = vocab.len();
        if v < 2 {
            return Err(Error::InvalidConfig("vocab needs at least 2 tokens".into()));
        }
        if weights.nrows() != v || transitions.shape() != [v, v] {
            return Err(Error::InvalidConfig(format!(
                "parameter shapes {:?}/{:?} do not match vocab size {v}",
                weights.shape(),
                transitions.shape()
            )));
        }
        if response_len == 0 {
            return Err(Error::InvalidConfig("response length must be >= 1".into()));
        }
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if weights.iter().chain(transitions.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("non-finite policy parameter".into()));
        }
        let mut sorted = vocab.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != vocab.len() {
            return Err(Error::InvalidConfig("vocab tokens must be unique".into()));
        }
        Ok(PolicyParams {
            weights,
            transitions,
            response_len,
            vocab,
            temperature,
        })
    }

    /// Gaussian-initialized parameters, deterministic per seed.
    pub fn init_random(
        vocab: Vec<String>,
        dim: usize,
        response_len: usize,
        temperature: f64,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let v = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let x: f64 = rng.sample(StandardNormal);
                    x * scale
                })
                .collect()
        };
        let weights = Array2::from_shape_vec((v, dim), draw(v * dim))
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let transitions = Array2::from_shape_vec((v, v), draw(v * v))
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        PolicyParams::new(weights, transitions, response_len, vocab, temperature)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.vocab.iter().position(|t| t == token)
    }

    /// Token id for an answer symbol, when the symbol is in the vocabulary.
    pub fn symbol_token(&self, symbol: AnswerSymbol) -> Option<TokenId> {
        self.token_id(&symbol.to_string())
    }

    /// Answer symbol for a token, when the token is a single letter.
    pub fn token_symbol(&self, token: TokenId) -> Option<AnswerSymbol> {
        let s = &self.vocab[token];
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Some(AnswerSymbol(c)),
            _ => None,
        }
    }

    /// Deep immutable copy used as the frozen reference policy.
    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }

    /// SHA-256 over the canonical checkpoint serialization.
    pub fn digest(&self) -> String {
        let rec = CheckpointRecord::from(self);
        let bytes = serde_json::to_vec(&rec).expect("checkpoint serializes");
        hex_string(&Sha256::digest(&bytes))
    }
}

/// Standard vocabulary for a given size: answer letters `A`.. (up to 8),
/// then filler tokens `f0`, `f1`, ...
pub fn standard_vocab(size: usize) -> Vec<String> {
    let letters = size.min(8);
    let mut vocab: Vec<String> = (0..letters)
        .map(|i| char::from(b'A' + i as u8).to_string())
        .collect();
    for i in 0..size.saturating_sub(letters) {
        vocab.push(format!("f{i}"));
    }
    vocab
}

/// Unscaled logits for one position: `W·φ + B[prev]` (transition term absent
/// at position 0).
fn raw_logits(params: &PolicyParams, features: &Array1<f64>, prev: Option<TokenId>) -> Array1<f64> {
    let mut logits = params.weights.dot(features);
    if let Some(p) = prev {
        logits += &params.transitions.row(p);
    }
    logits
}

fn softmax_scaled(logits: &Array1<f64>, temperature: f64) -> Array1<f64> {
    let scaled = logits.mapv(|z| z / temperature);
    let max = scaled.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps = scaled.mapv(|z| (z - max).exp());
    let sum = exps.sum();
    exps.mapv(|e| e / sum)
}

/// Exact next-token distribution at `position` given the previous token.
///
/// `prev` must be `None` exactly at position 0.
pub fn token_distribution(
    params: &PolicyParams,
    question: &Question,
    position: usize,
    prev: Option<TokenId>,
) -> Result<Array1<f64>> {
    if position >= params.response_len {
        return Err(Error::InvalidConfig(format!(
            "position {position} beyond response length {}",
            params.response_len
        )));
    }
    if position == 0 && prev.is_some() {
        return Err(Error::InvalidConfig(
            "position 0 takes no previous token".into(),
        ));
    }
    if position > 0 && prev.is_none() {
        return Err(Error::InvalidConfig(
            "positions past 0 require a previous token".into(),
        ));
    }
    if let Some(p) = prev {
        if p >= params.vocab_size() {
            return Err(Error::UnknownToken {
                token: format!("#{p}"),
            });
        }
    }
    let features = question_features(question.feature_seed, params.dim());
    Ok(softmax_scaled(
        &raw_logits(params, &features, prev),
        params.temperature,
    ))
}

/// Distributions along a response prefix: entry `t` conditions on
/// `response[t-1]` (nothing at `t = 0`).
pub fn prefix_distributions(
    params: &PolicyParams,
    question: &Question,
    response: &[TokenId],
) -> Result<Vec<Array1<f64>>> {
    let features = question_features(question.feature_seed, params.dim());
    let mut out = Vec::with_capacity(response.len());
    for (t, _) in response.iter().enumerate() {
        let prev = if t == 0 { None } else { Some(response[t - 1]) };
        if let Some(p) = prev {
            if p >= params.vocab_size() {
                return Err(Error::UnknownToken {
                    token: format!("#{p}"),
                });
            }
        }
        out.push(softmax_scaled(
            &raw_logits(params, &features, prev),
            params.temperature,
        ));
    }
    Ok(out)
}

/// G rollouts for one question sampled from the policy, with per-token
/// log-probabilities recorded at sampling time.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub question_id: String,
    pub responses: Vec<Vec<TokenId>>,
    pub logprobs_old: Vec<Vec<f64>>,
    pub extracted: Vec<Option<AnswerSymbol>>,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.responses.len()
    }

    /// True when all extracted answers are present and identical.
    pub fn unanimous(&self) -> bool {
        match self.extracted.first() {
            Some(Some(first)) => self.extracted.iter().all(|e| e.as_ref() == Some(first)),
            _ => false,
        }
    }
}

fn sample_index(probs: &Array1<f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Answer extraction for the token path: the last token, when it is one of
/// the question's option symbols.
pub fn extract_from_tokens(
    params: &PolicyParams,
    question: &Question,
    response: &[TokenId],
) -> Option<AnswerSymbol> {
    let last = *response.last()?;
    let sym = params.token_symbol(last)?;
    question.has_symbol(sym).then_some(sym)
}

/// Every option symbol a served question uses must be a vocabulary token.
pub fn check_vocab_covers(params: &PolicyParams, question: &Question) -> Result<()> {
    for sym in question.symbols() {
        if params.symbol_token(sym).is_none() {
            return Err(Error::InvalidConfig(format!(
                "question `{}` uses option symbol `{sym}` outside the policy vocabulary",
                question.id
            )));
        }
    }
    Ok(())
}

/// Sample a group of G independent length-T responses.
pub fn sample_group(
    params: &PolicyParams,
    question: &Question,
    group_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutGroup> {
    if group_size < 2 {
        return Err(Error::InvalidConfig(
            "group size must be >= 2 for group statistics".into(),
        ));
    }
    check_vocab_covers(params, question)?;
    let features = question_features(question.feature_seed, params.dim());
    let mut responses = Vec::with_capacity(group_size);
    let mut logprobs_old = Vec::with_capacity(group_size);
    let mut extracted = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let mut tokens = Vec::with_capacity(params.response_len);
        let mut logprobs = Vec::with_capacity(params.response_len);
        let mut prev: Option<TokenId> = None;
        for _ in 0..params.response_len {
            let probs = softmax_scaled(&raw_logits(params, &features, prev), params.temperature);
            let tok = sample_index(&probs, rng);
            logprobs.push(probs[tok].ln());
            tokens.push(tok);
            prev = Some(tok);
        }
        extracted.push(extract_from_tokens(params, question, &tokens));
        responses.push(tokens);
        logprobs_old.push(logprobs);
    }
    Ok(RolloutGroup {
        question_id: question.id.clone(),
        responses,
        logprobs_old,
        extracted,
    })
}

/// Exact per-token log-probabilities of a response under the policy.
pub fn sequence_logprob(
    params: &PolicyParams,
    question: &Question,
    response: &[TokenId],
) -> Result<Vec<f64>> {
    for &tok in response {
        if tok >= params.vocab_size() {
            return Err(Error::UnknownToken {
                token: format!("#{tok}"),
            });
        }
    }
    let dists = prefix_distributions(params, question, response)?;
    Ok(dists
        .iter()
        .zip(response)
        .map(|(d, &tok)| d[tok].ln())
        .collect())
}

/// Exact categorical KL(π_θ(·|ctx) ‖ π_ref(·|ctx)) at each position along the
/// response prefix.
pub fn per_token_kl(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    question: &Question,
    response: &[TokenId],
) -> Result<Vec<f64>> {
    if params.vocab != ref_params.vocab {
        return Err(Error::InvalidConfig(
            "policy and reference must share a vocabulary".into(),
        ));
    }
    let p_dists = prefix_distributions(params, question, response)?;
    let q_dists = prefix_distributions(ref_params, question, response)?;
    Ok(p_dists
        .iter()
        .zip(&q_dists)
        .map(|(p, q)| {
            p.iter()
                .zip(q.iter())
                .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
                .sum::<f64>()
                .max(0.0)
        })
        .collect())
}

/// Greedy argmax decode: T tokens, ties broken by lowest token id.
pub fn greedy_decode(params: &PolicyParams, question: &Question) -> Vec<TokenId> {
    let features = question_features(question.feature_seed, params.dim());
    let mut tokens = Vec::with_capacity(params.response_len);
    let mut prev: Option<TokenId> = None;
    for _ in 0..params.response_len {
        let probs = softmax_scaled(&raw_logits(params, &features, prev), params.temperature);
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        tokens.push(best);
        prev = Some(best);
    }
    tokens
}

/// On-disk checkpoint schema.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointRecord {
    vocab: Vec<String>,
    dim: usize,
    response_len: usize,
    temperature: f64,
    weights: Vec<Vec<f64>>,
    transitions: Vec<Vec<f64>>,
}

impl From<&PolicyParams> for CheckpointRecord {
    fn from(p: &PolicyParams) -> Self {
        CheckpointRecord {
            vocab: p.vocab.clone(),
            dim: p.dim(),
            response_len: p.response_len,
            temperature: p.temperature,
            weights: p.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
            transitions: p
                .transitions
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    digest: String,
    policy: CheckpointRecord,
}

/// Write a checkpoint: canonical JSON with an embedded digest over the policy
/// record.
pub fn save_checkpoint(params: &PolicyParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let rec = CheckpointRecord::from(params);
    let digest = params.digest();
    let file = CheckpointFile {
        digest,
        policy: rec,
    };
    let bytes = serde_json::to_vec(&file)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(&bytes).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(b"\n").map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PolicyParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    let rec = file.policy;
    let v = rec.vocab.len();
    let flat_w: Vec<f64> = rec.weights.into_iter().flatten().collect();
    let flat_b: Vec<f64> = rec.transitions.into_iter().flatten().collect();
    let weights = Array2::from_shape_vec((v, rec.dim), flat_w)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let transitions =
        Array2::from_shape_vec((v, v), flat_b).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let params = PolicyParams::new(
        weights,
        transitions,
        rec.response_len,
        rec.vocab,
        rec.temperature,
    )?;
    let actual = params.digest();
    if actual != file.digest {
        return Err(Error::DigestMismatch {
            name: path.display().to_string(),
            expected: file.digest,
            actual,
        });
    }
    Ok(params)
}
