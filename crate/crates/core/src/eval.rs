//! Utility retention: specified-question accuracy and multiple-choice Acc@n.
//!
//! A question is a hit at cutoff n when one of its accepted answers matches
//! a token among the n most probable entries. With a refine layer the
//! entries are re-ranked by the layer's output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{normalize_token, probe_tokens, subject_token, Backend, BackendError};
use crate::lexicon::MASK_PLACEHOLDER;
use crate::metrics::ProbeSetup;
use crate::par;
use crate::refine::{RefineError, RefineParams};

pub const DEFAULT_CUTOFFS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Item { line: usize, msg: String },
    #[error("no items to evaluate")]
    Empty,
    #[error("cutoff must be >= 1")]
    BadCutoff,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Refine(#[from] RefineError),
}

/// A question whose mask has a known answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecifiedQuestion {
    pub prompt: String,
    pub expected: Vec<String>,
}

impl SpecifiedQuestion {
    pub fn validate(&self) -> Result<(), String> {
        if !self.prompt.contains(MASK_PLACEHOLDER) {
            return Err(format!("prompt has no {MASK_PLACEHOLDER}"));
        }
        if self.expected.iter().all(|e| normalize_token(e).is_empty()) {
            return Err("expected answers are empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub passage: String,
    pub question: String,
    /// Label → option text, e.g. "A" → "the park".
    pub options: BTreeMap<String, String>,
    pub gold: String,
    #[serde(default)]
    pub gold_word: Option<String>,
}

impl McqItem {
    pub fn validate(&self) -> Result<(), String> {
        if self.options.len() != 4 {
            return Err(format!("expected 4 options, found {}", self.options.len()));
        }
        if !self.options.contains_key(&self.gold) {
            return Err(format!("gold label {:?} is not an option", self.gold));
        }
        Ok(())
    }

    /// Passage, question, labelled options, then `Answer: [MASK]`.
    pub fn text(&self) -> String {
        let mut s = format!("{}\nQuestion: {}\n", self.passage.trim(), self.question.trim());
        for (label, option) in &self.options {
            s.push_str(&format!("{label}. {}\n", option.trim()));
        }
        s.push_str("Answer: ");
        s.push_str(MASK_PLACEHOLDER);
        s
    }

    fn answers(&self) -> Vec<String> {
        let mut out = vec![self.gold.clone()];
        out.extend(self.gold_word.clone());
        out
    }
}

fn load_jsonl<T: for<'de> Deserialize<'de>>(
    path: &Path,
    check: impl Fn(&T) -> Result<(), String>,
) -> Result<Vec<T>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(line).map_err(|e| EvalError::Item {
            line: i + 1,
            msg: e.to_string(),
        })?;
        check(&item).map_err(|msg| EvalError::Item { line: i + 1, msg })?;
        out.push(item);
    }
    Ok(out)
}

pub fn load_specified(path: impl AsRef<Path>) -> Result<Vec<SpecifiedQuestion>, EvalError> {
    load_jsonl(path.as_ref(), SpecifiedQuestion::validate)
}

pub fn load_mcq(path: impl AsRef<Path>) -> Result<Vec<McqItem>, EvalError> {
    load_jsonl(path.as_ref(), McqItem::validate)
}

/// Normalized tokens in rank order, re-ranked by the refine layer if given.
/// Ties keep base order.
pub fn ranked_tokens(
    tokens: &[String],
    probs: &[f64],
    refine: Option<&RefineParams>,
) -> Result<Vec<String>, RefineError> {
    let order: Vec<usize> = match refine {
        None => (0..tokens.len()).collect(),
        Some(params) => {
            let q = params.forward(probs)?.probs;
            let mut idx: Vec<usize> = (0..q.len()).collect();
            idx.sort_by(|&a, &b| q[b].total_cmp(&q[a]));
            idx
        }
    };
    Ok(order.into_iter().map(|i| normalize_token(&tokens[i])).collect())
}

/// Smallest 1-based rank at which any answer matches, if any.
pub fn hit_rank(ranked: &[String], answers: &[String]) -> Option<usize> {
    let wanted: Vec<String> = answers
        .iter()
        .map(|a| normalize_token(subject_token(a)))
        .filter(|a| !a.is_empty())
        .collect();
    ranked
        .iter()
        .position(|t| !t.is_empty() && wanted.iter().any(|w| w == t))
        .map(|p| p + 1)
}

/// One row of an accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub name: String,
    pub items: usize,
    /// Cutoff → accuracy.
    pub accuracy: BTreeMap<usize, f64>,
    /// Per-item hit rank (1-based), `None` when no answer is in the top-k.
    pub ranks: Vec<Option<usize>>,
}

impl AccuracyRow {
    fn from_ranks(name: &str, ranks: Vec<Option<usize>>, cutoffs: &[usize]) -> Self {
        let n = ranks.len();
        let accuracy = cutoffs
            .iter()
            .map(|&c| {
                let hits = ranks.iter().filter(|r| matches!(r, Some(r) if *r <= c)).count();
                (c, hits as f64 / n as f64)
            })
            .collect();
        AccuracyRow {
            name: name.to_string(),
            items: n,
            accuracy,
            ranks,
        }
    }
}

fn check_cutoffs(cutoffs: &[usize]) -> Result<(), EvalError> {
    if cutoffs.contains(&0) {
        Err(EvalError::BadCutoff)
    } else {
        Ok(())
    }
}

fn eval_prompts(
    name: &str,
    texts: &[(String, Vec<String>)],
    backend: &dyn Backend,
    setup: &ProbeSetup,
    refine: Option<&RefineParams>,
    cutoffs: &[usize],
) -> Result<AccuracyRow, EvalError> {
    if texts.is_empty() {
        return Err(EvalError::Empty);
    }
    check_cutoffs(cutoffs)?;
    let ranks = par::map(texts, |(text, answers)| -> Result<Option<usize>, EvalError> {
        let prompt = setup.style.render(text, MASK_PLACEHOLDER)?;
        let dist = probe_tokens(backend, &prompt, setup.k)?;
        let tokens: Vec<String> = dist.entries().iter().map(|(t, _)| t.clone()).collect();
        let ranked = ranked_tokens(&tokens, &dist.probs(), refine)?;
        Ok(hit_rank(&ranked, answers))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(AccuracyRow::from_ranks(name, ranks, cutoffs))
}

pub fn eval_specified(
    questions: &[SpecifiedQuestion],
    backend: &dyn Backend,
    setup: &ProbeSetup,
    refine: Option<&RefineParams>,
    cutoffs: &[usize],
    name: &str,
) -> Result<AccuracyRow, EvalError> {
    let texts: Vec<(String, Vec<String>)> = questions
        .iter()
        .map(|q| (q.prompt.clone(), q.expected.clone()))
        .collect();
    eval_prompts(name, &texts, backend, setup, refine, cutoffs)
}

pub fn eval_mcq(
    items: &[McqItem],
    backend: &dyn Backend,
    setup: &ProbeSetup,
    refine: Option<&RefineParams>,
    cutoffs: &[usize],
    name: &str,
) -> Result<AccuracyRow, EvalError> {
    for (i, item) in items.iter().enumerate() {
        item.validate()
            .map_err(|msg| EvalError::Item { line: i + 1, msg })?;
    }
    let texts: Vec<(String, Vec<String>)> =
        items.iter().map(|it| (it.text(), it.answers())).collect();
    eval_prompts(name, &texts, backend, setup, refine, cutoffs)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
}

impl AccuracyTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// `name,items,acc@1,acc@3,...` with the cutoffs of the first row.
    pub fn to_csv(&self) -> String {
        let cutoffs: Vec<usize> = self
            .rows
            .first()
            .map(|r| r.accuracy.keys().copied().collect())
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["name".to_string(), "items".to_string()];
        header.extend(cutoffs.iter().map(|c| format!("acc@{c}")));
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.name.clone(), r.items.to_string()];
            rec.extend(
                cutoffs
                    .iter()
                    .map(|c| r.accuracy.get(c).map(|a| a.to_string()).unwrap_or_default()),
            );
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}
