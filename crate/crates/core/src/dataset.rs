//! Domain types for questions and datasets, deterministic serialization, and
//! the answer-extraction / verification-reward primitives.
//!
//! Datasets are stored as line-delimited JSON with a stable field order so
//! that the SHA-256 content digest is reproducible byte-for-byte. The digest
//! is what the trainer pins to guarantee offline pseudo-labels are never
//! silently rewritten.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A single canonical option letter, e.g. `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AnswerSymbol(pub char);

impl AnswerSymbol {
    pub fn as_char(&self) -> char {
        self.0
    }
}

impl fmt::Display for AnswerSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for AnswerSymbol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for AnswerSymbol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Ok(AnswerSymbol(c)),
            _ => Err(serde::de::Error::custom(format!(
                "answer symbol must be a single character, got `{s}`"
            ))),
        }
    }
}

/// One answer option: a symbol plus its display text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub symbol: AnswerSymbol,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rarity {
    Rare,
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RealSeed,
    SyntheticInjected,
    SyntheticPlain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Real,
    Synthetic,
}

/// Minimum / maximum number of answer options a question may carry.
pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 8;

/// A multiple-choice question.
///
/// `feature_seed` is derived from `id` (first eight bytes of its SHA-256) and
/// is never serialized; it drives the toy policy's feature vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub options: Vec<AnswerOption>,
    pub label: Option<AnswerSymbol>,
    pub rarity: Rarity,
    pub provenance: Provenance,
    pub feature_seed: u64,
}

/// Wire form of [`Question`]: the exact on-disk schema and field order.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct QuestionRecord {
    id: String,
    text: String,
    options: Vec<AnswerOption>,
    label: Option<AnswerSymbol>,
    rarity: Rarity,
    provenance: Provenance,
}

impl From<&Question> for QuestionRecord {
    fn from(q: &Question) -> Self {
        QuestionRecord {
            id: q.id.clone(),
            text: q.text.clone(),
            options: q.options.clone(),
            label: q.label,
            rarity: q.rarity,
            provenance: q.provenance,
        }
    }
}

/// Deterministic 64-bit seed from a question id.
pub fn feature_seed_from_id(id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

impl Question {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        options: Vec<AnswerOption>,
        label: Option<AnswerSymbol>,
        rarity: Rarity,
        provenance: Provenance,
    ) -> Result<Self> {
        let id = id.into();
        let feature_seed = feature_seed_from_id(&id);
        let q = Question {
            id,
            text: text.into(),
            options,
            label,
            rarity,
            provenance,
            feature_seed,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.options.len() < MIN_OPTIONS || self.options.len() > MAX_OPTIONS {
            return Err(Error::InvalidQuestion {
                id: self.id.clone(),
                reason: format!(
                    "option count {} outside [{MIN_OPTIONS}, {MAX_OPTIONS}]",
                    self.options.len()
                ),
            });
        }
        let symbols: BTreeSet<AnswerSymbol> = self.options.iter().map(|o| o.symbol).collect();
        if symbols.len() != self.options.len() {
            return Err(Error::InvalidQuestion {
                id: self.id.clone(),
                reason: "duplicate option symbols".into(),
            });
        }
        if let Some(label) = self.label {
            if !symbols.contains(&label) {
                return Err(Error::InvalidQuestion {
                    id: self.id.clone(),
                    reason: format!("label `{label}` not among option symbols"),
                });
            }
        }
        if self.provenance == Provenance::SyntheticInjected && self.rarity != Rarity::Rare {
            return Err(Error::InvalidQuestion {
                id: self.id.clone(),
                reason: "synthetic_injected questions must be tagged rare".into(),
            });
        }
        if self.feature_seed != feature_seed_from_id(&self.id) {
            return Err(Error::InvalidQuestion {
                id: self.id.clone(),
                reason: "feature_seed does not match id".into(),
            });
        }
        Ok(())
    }

    /// Option symbols in option order.
    pub fn symbols(&self) -> Vec<AnswerSymbol> {
        self.options.iter().map(|o| o.symbol).collect()
    }

    pub fn has_symbol(&self, symbol: AnswerSymbol) -> bool {
        self.options.iter().any(|o| o.symbol == symbol)
    }

    fn from_record(rec: QuestionRecord) -> Result<Self> {
        Question::new(
            rec.id, rec.text, rec.options, rec.label, rec.rarity, rec.provenance,
        )
    }

    fn to_line(&self) -> String {
        serde_json::to_string(&QuestionRecord::from(self)).expect("question serializes")
    }
}

/// An ordered collection of questions with a pinned content digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub entries: Vec<Question>,
    pub kind: DatasetKind,
    pub content_digest: String,
}

impl Dataset {
    pub fn new(entries: Vec<Question>, kind: DatasetKind) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for q in &entries {
            q.validate()?;
            if !seen.insert(q.id.clone()) {
                return Err(Error::DuplicateId { id: q.id.clone() });
            }
        }
        let content_digest = compute_digest(&entries);
        Ok(Dataset {
            entries,
            kind,
            content_digest,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Recompute the digest over current entries and compare with the stored
    /// one. The trainer calls this every epoch to catch label tampering.
    pub fn verify_digest(&self) -> Result<()> {
        let actual = compute_digest(&self.entries);
        if actual != self.content_digest {
            return Err(Error::DigestMismatch {
                name: "<in-memory>".into(),
                expected: self.content_digest.clone(),
                actual,
            });
        }
        Ok(())
    }

    /// True when every entry carries a label.
    pub fn fully_labeled(&self) -> bool {
        self.entries.iter().all(|q| q.label.is_some())
    }
}

/// SHA-256 over the canonical line-delimited serialization of `entries`.
pub fn compute_digest(entries: &[Question]) -> String {
    let mut hasher = Sha256::new();
    for q in entries {
        hasher.update(q.to_line().as_bytes());
        hasher.update(b"\n");
    }
    hex_string(&hasher.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Write a dataset as canonical line-delimited JSON. The bytes written are
/// exactly the digest input, so a file round-trips digest-identically.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for q in &dataset.entries {
        out.extend_from_slice(q.to_line().as_bytes());
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    file.write_all(&out).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Load a line-delimited dataset. Kind is inferred: any synthetic-provenance
/// entry makes the dataset synthetic.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QuestionRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.display().to_string(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
        let q = Question::from_record(rec).map_err(|e| Error::MalformedRecord {
            path: path.display().to_string(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        entries.push(q);
    }
    let kind = if entries.iter().any(|q| {
        matches!(
            q.provenance,
            Provenance::SyntheticInjected | Provenance::SyntheticPlain
        )
    }) {
        DatasetKind::Synthetic
    } else {
        DatasetKind::Real
    };
    Dataset::new(entries, kind)
}

fn answer_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"The answer is\s*([A-Za-z])\b").expect("valid regex"))
}

/// Extract the final answer from a free-text response.
///
/// Scans for the evaluation-prompt suffix `The answer is <L>` and returns the
/// letter of the last occurrence whose `<L>` is one of the question's option
/// symbols. `None` signals an unparseable response; it is a valid outcome,
/// not an error.
pub fn extract_answer(response_text: &str, options: &[AnswerSymbol]) -> Option<AnswerSymbol> {
    answer_regex()
        .captures_iter(response_text)
        .filter_map(|cap| {
            let c = cap.get(1)?.as_str().chars().next()?;
            let sym = AnswerSymbol(c);
            options.contains(&sym).then_some(sym)
        })
        .last()
}

/// Binary verification reward: 1.0 iff the extracted answer equals the label.
/// Unparseable responses (`None`) score 0.0.
pub fn verification_reward(label: AnswerSymbol, extracted: Option<AnswerSymbol>) -> f64 {
    match extracted {
        Some(sym) if sym == label => 1.0,
        _ => 0.0,
    }
}

/// Standard option symbols `A`, `B`, ... used when constructing questions.
pub fn standard_symbols(n: usize) -> Vec<AnswerSymbol> {
    (0..n)
        .map(|i| AnswerSymbol(char::from(b'A' + i as u8)))
        .collect()
}

/// Simple options with symbol letters and given texts.
pub fn make_options(texts: &[&str]) -> Vec<AnswerOption> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| AnswerOption {
            symbol: AnswerSymbol(char::from(b'A' + i as u8)),
            text: (*t).to_string(),
        })
        .collect()
}
