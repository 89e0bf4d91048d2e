//! Closed-form synthetic language model used as a test oracle.
//!
//! For a prompt mentioning subjects `s` and `o` with attribute `a`:
//!
//! ```text
//! share(s) = w(g_s, a) / (w(g_s, a) + w(g_o, a))       positive polarity
//!          = w(g_o, a) / (w(g_s, a) + w(g_o, a))       negated polarity
//! mass     = subject_mass (+ polarity_noise if negated)
//! S(s)     = mass * share(s) + skew   if s is mentioned first
//!          = mass * share(s) - skew   otherwise
//! ```
//!
//! The remaining `k - 2` slots are filler tokens sharing `filler_mass` with
//! linearly decreasing weights. Filler labels are the only thing the seed
//! changes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    prompt_id, subject_token, Backend, BackendError, ProbeResult, PromptStyle, TopKDistribution,
};
use crate::lexicon::{hex_digest, Lexicon, Polarity};

const MAX_FILLERS: usize = 62;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Affinity {
    /// Every group weighs the same on every attribute.
    Uniform,
    /// Attribute `i` favours group `i mod |groups|` (groups in lexical order)
    /// with weight `share`; all other groups weigh `1 - share`.
    Alternating { share: f64 },
    /// Explicit weights per group and positive attribute text.
    Table {
        default: f64,
        weights: BTreeMap<String, BTreeMap<String, f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(default = "default_subject_mass")]
    pub subject_mass: f64,
    #[serde(default)]
    pub positional_skew: f64,
    #[serde(default)]
    pub polarity_noise: f64,
    #[serde(default = "default_filler_mass")]
    pub filler_mass: f64,
    pub affinity: Affinity,
}

fn default_subject_mass() -> f64 {
    0.5
}

fn default_filler_mass() -> f64 {
    0.3
}

impl SyntheticSpec {
    pub fn fair(positional_skew: f64) -> Self {
        SyntheticSpec {
            subject_mass: default_subject_mass(),
            positional_skew,
            polarity_noise: 0.0,
            filler_mass: default_filler_mass(),
            affinity: Affinity::Uniform,
        }
    }

    pub fn alternating(share: f64, positional_skew: f64) -> Self {
        SyntheticSpec {
            affinity: Affinity::Alternating { share },
            ..Self::fair(positional_skew)
        }
    }

    /// Parses `fair`, `fair:<skew>`, `alternating:<share>[:<skew>]`, or a path to a JSON spec.
    pub fn from_arg(arg: &str) -> Result<Self, BackendError> {
        let bad = |m: String| BackendError::Synthetic(m);
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("bad number {s:?} in synthetic spec")))
        };
        let parts: Vec<&str> = arg.split(':').collect();
        match parts.as_slice() {
            ["fair"] => Ok(Self::fair(0.0)),
            ["fair", skew] => Ok(Self::fair(num(skew)?)),
            ["alternating", share] => Ok(Self::alternating(num(share)?, 0.0)),
            ["alternating", share, skew] => Ok(Self::alternating(num(share)?, num(skew)?)),
            _ => Self::load(arg),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| BackendError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Synthetic(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    spec: SyntheticSpec,
    style: PromptStyle,
    groups: Vec<String>,
    subject_group: HashMap<String, usize>,
    attributes: HashMap<String, (usize, Polarity)>,
    attribute_names: Vec<String>,
    filler_labels: Vec<String>,
    seed: u64,
}

impl SyntheticBackend {
    pub fn new(
        lexicon: &Lexicon,
        spec: SyntheticSpec,
        style: PromptStyle,
        seed: u64,
    ) -> Result<Self, BackendError> {
        style.validate()?;
        let groups = lexicon.groups();
        let group_idx: HashMap<&str, usize> = groups
            .iter()
            .enumerate()
            .map(|(i, g)| (g.as_str(), i))
            .collect();
        let subject_group = lexicon
            .subjects()
            .iter()
            .map(|s| (s.name.clone(), group_idx[s.group.as_str()]))
            .collect();
        let mut attributes = HashMap::new();
        for (i, a) in lexicon.attributes().iter().enumerate() {
            attributes.insert(a.positive.clone(), (i, Polarity::Positive));
            attributes.insert(a.negative.clone(), (i, Polarity::Negated));
        }
        let attribute_names = lexicon
            .attributes()
            .iter()
            .map(|a| a.positive.clone())
            .collect();
        let filler_labels = (0..MAX_FILLERS)
            .map(|i| {
                let key = format!("{seed}:{i}");
                format!("~{}", hex_digest(key.as_bytes(), 4))
            })
            .collect();
        let backend = SyntheticBackend {
            spec,
            style,
            groups,
            subject_group,
            attributes,
            attribute_names,
            filler_labels,
            seed,
        };
        backend.check_ranges()?;
        Ok(backend)
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    fn weight(&self, group: usize, attr: usize) -> f64 {
        match &self.spec.affinity {
            Affinity::Uniform => 1.0,
            Affinity::Alternating { share } => {
                if attr % self.groups.len() == group {
                    *share
                } else {
                    1.0 - share
                }
            }
            Affinity::Table { default, weights } => weights
                .get(&self.groups[group])
                .and_then(|m| m.get(&self.attribute_names[attr]))
                .copied()
                .unwrap_or(*default),
        }
    }

    /// Closed-form score of subject `group` facing `other` on attribute `attr`.
    pub fn subject_score(
        &self,
        group: usize,
        other: usize,
        attr: usize,
        polarity: Polarity,
        mentioned_first: bool,
    ) -> f64 {
        let (ws, wo) = (self.weight(group, attr), self.weight(other, attr));
        let share = match polarity {
            Polarity::Positive => ws / (ws + wo),
            Polarity::Negated => wo / (ws + wo),
        };
        let mass = match polarity {
            Polarity::Positive => self.spec.subject_mass,
            Polarity::Negated => self.spec.subject_mass + self.spec.polarity_noise,
        };
        let skew = if mentioned_first {
            self.spec.positional_skew
        } else {
            -self.spec.positional_skew
        };
        mass * share + skew
    }

    fn check_ranges(&self) -> Result<(), BackendError> {
        let s = &self.spec;
        for (name, v) in [
            ("subject_mass", s.subject_mass),
            ("filler_mass", s.filler_mass),
            ("positional_skew", s.positional_skew),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(BackendError::Synthetic(format!("{name}={v} must be >= 0")));
            }
        }
        if let Affinity::Alternating { share } = s.affinity {
            if !(share > 0.0 && share < 1.0) {
                return Err(BackendError::Synthetic(format!(
                    "alternating share {share} outside (0,1)"
                )));
            }
        }
        let g = self.groups.len();
        for attr in 0..self.attribute_names.len() {
            for a in 0..g {
                if !(self.weight(a, attr) > 0.0) {
                    return Err(BackendError::Synthetic(format!(
                        "non-positive affinity for group {} on {:?}",
                        self.groups[a], self.attribute_names[attr]
                    )));
                }
                for b in 0..g {
                    if a == b {
                        continue;
                    }
                    for pol in Polarity::ALL {
                        let first = self.subject_score(a, b, attr, pol, true);
                        let second = self.subject_score(b, a, attr, pol, false);
                        let total = first + second + s.filler_mass;
                        if !(0.0..=1.0).contains(&first)
                            || !(0.0..=1.0).contains(&second)
                            || total > 1.0 + 1e-12
                        {
                            return Err(BackendError::Synthetic(format!(
                                "probabilities outside [0,1] for groups ({}, {}) on {:?}: {first}, {second}, total {total}",
                                self.groups[a], self.groups[b], self.attribute_names[attr]
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn parse_prompt<'a>(
        &self,
        prompt: &'a str,
        subjects: &[&'a str],
    ) -> Result<(usize, Polarity, [&'a str; 2]), BackendError> {
        let question = self
            .style
            .question(prompt)
            .ok_or_else(|| BackendError::Synthetic("prompt does not match the style".into()))?;
        let slot = format!("{} ", self.style.slot());
        let (head, tail) = question
            .rsplit_once(&slot)
            .ok_or_else(|| BackendError::Synthetic("no answer slot in prompt".into()))?;
        let clause = tail.trim().trim_end_matches('.').trim();
        let (attr, polarity) = *self
            .attributes
            .get(clause)
            .ok_or_else(|| BackendError::Synthetic(format!("unknown attribute {clause:?}")))?;
        let [a, b] = match subjects {
            [a, b] => [*a, *b],
            _ => {
                return Err(BackendError::Synthetic(format!(
                    "expected 2 subjects, got {}",
                    subjects.len()
                )))
            }
        };
        let pa = find_word(head, a)
            .ok_or_else(|| BackendError::Synthetic(format!("{a:?} not in prompt")))?;
        let pb = find_word(head, b)
            .ok_or_else(|| BackendError::Synthetic(format!("{b:?} not in prompt")))?;
        let order = if pa <= pb { [a, b] } else { [b, a] };
        Ok((attr, polarity, order))
    }
}

fn find_word(hay: &str, word: &str) -> Option<usize> {
    let bytes = hay.as_bytes();
    let mut from = 0;
    while let Some(rel) = hay[from..].find(word) {
        let start = from + rel;
        let end = start + word.len();
        let before_ok = start == 0 || !(bytes[start - 1] as char).is_alphanumeric();
        let after_ok = end == hay.len() || !(bytes[end] as char).is_alphanumeric();
        if before_ok && after_ok {
            return Some(start);
        }
        from = start + 1;
    }
    None
}

impl Backend for SyntheticBackend {
    fn probe_raw(
        &self,
        prompt: &str,
        subjects: &[&str],
        k: usize,
    ) -> Result<ProbeResult, BackendError> {
        if k < 2 || k - 2 > MAX_FILLERS {
            return Err(BackendError::InvalidRequest(format!(
                "synthetic backend supports 2 <= k <= {}",
                MAX_FILLERS + 2
            )));
        }
        let (attr, polarity, [first, second]) = self.parse_prompt(prompt, subjects)?;
        let group = |name: &str| {
            self.subject_group
                .get(name)
                .copied()
                .ok_or_else(|| BackendError::Synthetic(format!("unknown subject {name:?}")))
        };
        let (g1, g2) = (group(first)?, group(second)?);
        if g1 == g2 {
            return Err(BackendError::Synthetic("subjects share a group".into()));
        }
        let (t1, t2) = (subject_token(first), subject_token(second));
        if t1 == t2 {
            return Err(BackendError::Synthetic(format!(
                "subjects {first:?} and {second:?} share the token {t1:?}"
            )));
        }

        let mut entries: Vec<(String, f64)> = Vec::with_capacity(k);
        entries.push((t1.to_string(), self.subject_score(g1, g2, attr, polarity, true)));
        entries.push((t2.to_string(), self.subject_score(g2, g1, attr, polarity, false)));
        let n = k - 2;
        let denom = (n * (n + 1) / 2) as f64;
        for i in 0..n {
            let w = (n - i) as f64 / denom;
            entries.push((self.filler_labels[i].clone(), self.spec.filler_mass * w));
        }
        // Stable: ties keep first-mentioned, second-mentioned, fillers.
        entries.sort_by(|a, b| b.1.total_cmp(&a.1));

        let dist = TopKDistribution::new(entries)?;
        let index_of = |tok: &str| dist.entries().iter().position(|(t, _)| t == tok);
        let subjects = [
            (first.to_string(), index_of(t1)),
            (second.to_string(), index_of(t2)),
        ]
        .into_iter()
        .collect();
        Ok(ProbeResult {
            prompt_id: prompt_id(prompt),
            prompt: prompt.to_string(),
            dist,
            subjects,
        })
    }

    fn describe(&self) -> String {
        format!(
            "synthetic:{} seed={}",
            serde_json::to_string(&self.spec).unwrap_or_default(),
            self.seed
        )
    }
}
