//! Sources of top-k token distributions: a JSON Lines probe cache, a
//! closed-form synthetic model, and a remote HTTP inference endpoint.

mod cache;
mod http;
mod prompt;
mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::hex_digest;

pub use cache::{open_cache, write_cache, CacheBackend, CacheHeader, CacheRecord, CACHE_FORMAT};
pub use http::{HttpBackend, HttpConfig, ProbeRequest};
pub use prompt::{build_prompt, PromptMode, PromptStyle, FEWSHOT_PREAMBLE, INFILL_SLOT};
pub use synthetic::{Affinity, SyntheticBackend, SyntheticSpec};

/// Wire encoding of a subject outside the top-k.
pub const ABSENT: i64 = -1;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("cache miss for prompt_id {prompt_id}")]
    CacheMiss { prompt_id: String },
    #[error("unsupported cache format {found} (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("truncated or malformed cache record at line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("transport error after {attempts} attempt(s): {msg}")]
    Transport { attempts: usize, msg: String },
    #[error("server returned status {0}")]
    Status(u16),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid probe request: {0}")]
    InvalidRequest(String),
    #[error("prompt variant has no {0:?} placeholder")]
    MissingPlaceholder(String),
    #[error("synthetic backend: {0}")]
    Synthetic(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Hex identifier of a prompt text.
pub fn prompt_id(prompt: &str) -> String {
    hex_digest(prompt.as_bytes(), 16)
}

/// First token of a subject under the whitespace tokenizer.
pub fn subject_token(name: &str) -> &str {
    name.split_whitespace().next().unwrap_or(name)
}

/// Surface form used for matching: subword markers and surrounding
/// punctuation stripped, lowercased.
pub fn normalize_token(token: &str) -> String {
    let t = token.trim();
    let t = t
        .strip_prefix('\u{0120}')
        .or_else(|| t.strip_prefix('\u{2581}'))
        .or_else(|| t.strip_prefix("##"))
        .unwrap_or(t);
    t.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_lowercase()
}

/// Ordered top-k list of (token, probability).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TopKDistribution {
    entries: Vec<(String, f64)>,
}

impl TopKDistribution {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self, BackendError> {
        let mut sum = 0.0;
        let mut prev = f64::INFINITY;
        let mut seen = std::collections::HashSet::new();
        for (tok, p) in &entries {
            if !(0.0..=1.0).contains(p) {
                return Err(BackendError::InvalidDistribution(format!(
                    "probability {p} of {tok:?} outside [0,1]"
                )));
            }
            if *p > prev {
                return Err(BackendError::InvalidDistribution(format!(
                    "probabilities not sorted at {tok:?}"
                )));
            }
            if !seen.insert(tok.as_str()) {
                return Err(BackendError::InvalidDistribution(format!(
                    "duplicate token {tok:?}"
                )));
            }
            prev = *p;
            sum += p;
        }
        if sum > 1.0 + 1e-9 {
            return Err(BackendError::InvalidDistribution(format!(
                "probabilities sum to {sum}"
            )));
        }
        Ok(TopKDistribution { entries })
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn probs(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, p)| *p).collect()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn mass(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }

    /// Index of the first entry whose normalized token equals the subject's first token.
    pub fn find_subject(&self, name: &str) -> Option<usize> {
        let want = normalize_token(subject_token(name));
        self.entries
            .iter()
            .position(|(t, _)| normalize_token(t) == want)
    }

    fn truncated(&self, k: usize) -> TopKDistribution {
        TopKDistribution {
            entries: self.entries[..k.min(self.entries.len())].to_vec(),
        }
    }
}

/// Top-k distribution for one prompt plus resolved subject positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub prompt_id: String,
    pub prompt: String,
    pub dist: TopKDistribution,
    /// `None` marks a subject outside the top-k.
    pub subjects: BTreeMap<String, Option<usize>>,
}

impl ProbeResult {
    pub fn subject_index(&self, name: &str) -> Option<usize> {
        self.subjects.get(name).copied().flatten()
    }

    pub fn subject_prob(&self, name: &str) -> Option<f64> {
        self.subject_index(name).map(|i| self.dist.entries[i].1)
    }

    /// Checks the index invariants: every mapped index is inside the top-k
    /// and its token is a (sub)word prefix of the subject's first token.
    pub fn validate(&self) -> Result<(), BackendError> {
        let k = self.dist.k();
        for (name, idx) in &self.subjects {
            if let Some(i) = idx {
                if *i >= k {
                    return Err(BackendError::InvalidDistribution(format!(
                        "subject {name:?} index {i} >= k={k}"
                    )));
                }
                let tok = normalize_token(self.dist.token(*i));
                let want = normalize_token(subject_token(name));
                if tok.is_empty() || !want.starts_with(&tok) {
                    return Err(BackendError::InvalidDistribution(format!(
                        "token {:?} at index {i} does not match subject {name:?}",
                        self.dist.token(*i)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Restricts to the first `k` entries; subjects beyond become absent.
    /// Subjects not yet mapped are resolved by token match.
    fn restrict(mut self, subjects: &[&str], k: usize) -> ProbeResult {
        if k < self.dist.k() {
            self.dist = self.dist.truncated(k);
            for idx in self.subjects.values_mut() {
                if matches!(idx, Some(i) if *i >= k) {
                    *idx = None;
                }
            }
        }
        for s in subjects {
            if !self.subjects.contains_key(*s) {
                let found = self.dist.find_subject(s);
                self.subjects.insert((*s).to_string(), found);
            }
        }
        self
    }
}

/// A source of top-k distributions. Implementations are shareable across threads.
pub trait Backend: Send + Sync {
    /// Raw lookup; callers should go through [`probe`].
    fn probe_raw(&self, prompt: &str, subjects: &[&str], k: usize)
        -> Result<ProbeResult, BackendError>;

    fn describe(&self) -> String;
}

/// Probes a backend and checks the result at the interface boundary.
pub fn probe(
    backend: &dyn Backend,
    prompt: &str,
    subjects: &[&str],
    k: usize,
) -> Result<ProbeResult, BackendError> {
    if k < 2 {
        return Err(BackendError::InvalidRequest(format!("k={k} must be >= 2")));
    }
    if subjects.is_empty() {
        return Err(BackendError::InvalidRequest("no subjects given".into()));
    }
    let raw = backend.probe_raw(prompt, subjects, k)?;
    // Re-run the distribution checks: backends are not trusted.
    TopKDistribution::new(raw.dist.entries.clone())?;
    if raw.dist.k() < k {
        return Err(BackendError::Malformed(format!(
            "expected {k} entries, got {}",
            raw.dist.k()
        )));
    }
    let res = raw.restrict(subjects, k);
    res.validate()?;
    Ok(res)
}

/// Probes a prompt without subject slots (evaluation questions).
pub fn probe_tokens(
    backend: &dyn Backend,
    prompt: &str,
    k: usize,
) -> Result<TopKDistribution, BackendError> {
    if k < 2 {
        return Err(BackendError::InvalidRequest(format!("k={k} must be >= 2")));
    }
    let raw = backend.probe_raw(prompt, &[], k)?;
    let dist = TopKDistribution::new(raw.dist.entries)?;
    if dist.k() < k {
        return Err(BackendError::Malformed(format!(
            "expected {k} entries, got {}",
            dist.k()
        )));
    }
    Ok(dist.truncated(k))
}
