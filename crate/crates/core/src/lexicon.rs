//! Subject, attribute and context lexicons, template enumeration and
//! train/test splitting.
//!
//! A lexicon file is line-oriented UTF-8:
//!
//! ```text
//! format=1
//! category=gender          # optional
//! [subjects]
//! John<TAB>male
//! [attributes]
//! was a senator<TAB>was never a senator
//! [contexts]
//! got off the flight to visit
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const LEXICON_FORMAT: u32 = 1;
pub const SPLIT_FORMAT: u32 = 1;

/// Placeholder used in generated variant texts.
pub const MASK_PLACEHOLDER: &str = "[MASK]";

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: String, expected: u32 },
    #[error("duplicate subject {0:?}")]
    DuplicateSubject(String),
    #[error("duplicate attribute {0:?}")]
    DuplicateAttribute(String),
    #[error("duplicate context {0:?}")]
    DuplicateContext(String),
    #[error("line {line}: attribute {attribute:?} is missing its negation")]
    MissingNegation { line: usize, attribute: String },
    #[error("fewer than 2 groups (found {0})")]
    TooFewGroups(usize),
    #[error("lexicon declares category {found} but {expected} was requested")]
    CategoryMismatch { found: Category, expected: Category },
    #[error("unknown subject {0:?}")]
    UnknownSubject(String),
    #[error("unknown context {0:?}")]
    UnknownContext(String),
    #[error("empty {0} subset")]
    EmptySubset(&'static str),
    #[error("train and test partitions overlap on {0:?}")]
    Overlap(String),
    #[error("cannot partition {what}: {reason}")]
    CannotPartition { what: &'static str, reason: String },
    #[error("invalid split config: {0}")]
    SplitConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Gender,
    Nationality,
    Ethnicity,
    Religion,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Gender => "gender",
            Category::Nationality => "nationality",
            Category::Ethnicity => "ethnicity",
            Category::Religion => "religion",
        }
    }

    /// Gender splits partition subjects; every other category partitions contexts.
    pub fn partitions_subjects(self) -> bool {
        self == Category::Gender
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gender" => Ok(Category::Gender),
            "nationality" | "country" => Ok(Category::Nationality),
            "ethnicity" => Ok(Category::Ethnicity),
            "religion" => Ok(Category::Religion),
            other => Err(format!("unknown category {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subject {
    pub name: String,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attribute {
    pub positive: String,
    pub negative: String,
}

/// A validated lexicon for one bias category. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    category: Category,
    subjects: Vec<Subject>,
    attributes: Vec<Attribute>,
    contexts: Vec<String>,
}

impl Lexicon {
    pub fn new(
        category: Category,
        subjects: Vec<Subject>,
        attributes: Vec<Attribute>,
        contexts: Vec<String>,
    ) -> Result<Self, LexiconError> {
        let mut seen = HashSet::new();
        for s in &subjects {
            if !seen.insert(s.name.as_str()) {
                return Err(LexiconError::DuplicateSubject(s.name.clone()));
            }
        }
        let mut seen = HashSet::new();
        for a in &attributes {
            if a.negative.trim().is_empty() {
                return Err(LexiconError::MissingNegation {
                    line: 0,
                    attribute: a.positive.clone(),
                });
            }
            if !seen.insert(a.positive.as_str()) {
                return Err(LexiconError::DuplicateAttribute(a.positive.clone()));
            }
        }
        let mut seen = HashSet::new();
        for c in &contexts {
            if !seen.insert(c.as_str()) {
                return Err(LexiconError::DuplicateContext(c.clone()));
            }
        }
        let groups: BTreeSet<&str> = subjects.iter().map(|s| s.group.as_str()).collect();
        if groups.len() < 2 {
            return Err(LexiconError::TooFewGroups(groups.len()));
        }
        Ok(Lexicon {
            category,
            subjects,
            attributes,
            contexts,
        })
    }

    pub fn load(path: impl AsRef<Path>, category: Category) -> Result<Self, LexiconError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, category)
    }

    pub fn parse(text: &str, category: Category) -> Result<Self, LexiconError> {
        #[derive(Clone, Copy)]
        enum Section {
            Header,
            Subjects,
            Attributes,
            Contexts,
        }

        let mut section = Section::Header;
        let mut saw_format = false;
        let mut subjects = Vec::new();
        let mut attributes = Vec::new();
        let mut contexts = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if !saw_format {
                match trimmed.strip_prefix("format=") {
                    Some(v) if v.trim() == LEXICON_FORMAT.to_string() => {
                        saw_format = true;
                        continue;
                    }
                    Some(v) => {
                        return Err(LexiconError::FormatVersion {
                            found: v.trim().to_string(),
                            expected: LEXICON_FORMAT,
                        })
                    }
                    None => {
                        return Err(LexiconError::Parse {
                            line: line_no,
                            msg: "missing `format=1` header".into(),
                        })
                    }
                }
            }
            match trimmed {
                "[subjects]" => {
                    section = Section::Subjects;
                    continue;
                }
                "[attributes]" => {
                    section = Section::Attributes;
                    continue;
                }
                "[contexts]" => {
                    section = Section::Contexts;
                    continue;
                }
                _ => {}
            }
            match section {
                Section::Header => {
                    if let Some(v) = trimmed.strip_prefix("category=") {
                        let found = v.parse::<Category>().map_err(|msg| LexiconError::Parse {
                            line: line_no,
                            msg,
                        })?;
                        if found != category {
                            return Err(LexiconError::CategoryMismatch {
                                found,
                                expected: category,
                            });
                        }
                    } else {
                        return Err(LexiconError::Parse {
                            line: line_no,
                            msg: format!("unexpected line before first section: {trimmed:?}"),
                        });
                    }
                }
                Section::Subjects => {
                    let (name, group) = split_tab(line).ok_or_else(|| LexiconError::Parse {
                        line: line_no,
                        msg: format!("subject {trimmed:?} has no group column"),
                    })?;
                    if group.is_empty() || name.is_empty() {
                        return Err(LexiconError::Parse {
                            line: line_no,
                            msg: "empty subject name or group".into(),
                        });
                    }
                    subjects.push(Subject {
                        name: name.to_string(),
                        group: group.to_string(),
                    });
                }
                Section::Attributes => {
                    let (pos, neg) = split_tab(line).unwrap_or((trimmed, ""));
                    if neg.is_empty() {
                        return Err(LexiconError::MissingNegation {
                            line: line_no,
                            attribute: pos.to_string(),
                        });
                    }
                    attributes.push(Attribute {
                        positive: pos.to_string(),
                        negative: neg.to_string(),
                    });
                }
                Section::Contexts => contexts.push(trimmed.to_string()),
            }
        }
        if !saw_format {
            return Err(LexiconError::Parse {
                line: 0,
                msg: "empty lexicon file".into(),
            });
        }
        Self::new(category, subjects, attributes, contexts)
    }

    /// The `category=` header of a lexicon file, if present and valid.
    pub fn declared_category(text: &str) -> Option<Category> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .take_while(|l| !l.starts_with('['))
            .find_map(|l| l.strip_prefix("category="))
            .and_then(|v| v.trim().parse().ok())
    }

    /// Serializes back into the lexicon file format.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("format={LEXICON_FORMAT}\ncategory={}\n[subjects]\n", self.category);
        for s in &self.subjects {
            out.push_str(&format!("{}\t{}\n", s.name, s.group));
        }
        out.push_str("[attributes]\n");
        for a in &self.attributes {
            out.push_str(&format!("{}\t{}\n", a.positive, a.negative));
        }
        out.push_str("[contexts]\n");
        for c in &self.contexts {
            out.push_str(c);
            out.push('\n');
        }
        out
    }

    pub fn category(&self) -> Category {
        self.category
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn contexts(&self) -> &[String] {
        &self.contexts
    }

    /// Distinct groups in lexical order.
    pub fn groups(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.subjects.iter().map(|s| s.group.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn subject(&self, name: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.name == name)
    }

    /// A sub-lexicon restricted to the named subjects and contexts. Attributes are kept.
    pub fn view(&self, subjects: &[String], contexts: &[String]) -> Result<Lexicon, LexiconError> {
        if subjects.is_empty() {
            return Err(LexiconError::EmptySubset("subject"));
        }
        if contexts.is_empty() {
            return Err(LexiconError::EmptySubset("context"));
        }
        let by_name: HashMap<&str, &Subject> =
            self.subjects.iter().map(|s| (s.name.as_str(), s)).collect();
        let subs = subjects
            .iter()
            .map(|n| {
                by_name
                    .get(n.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| LexiconError::UnknownSubject(n.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let known: HashSet<&str> = self.contexts.iter().map(String::as_str).collect();
        for c in contexts {
            if !known.contains(c.as_str()) {
                return Err(LexiconError::UnknownContext(c.clone()));
            }
        }
        Lexicon::new(
            self.category,
            subs,
            self.attributes.clone(),
            contexts.to_vec(),
        )
    }
}

fn split_tab(line: &str) -> Option<(&str, &str)> {
    let (a, b) = line.split_once('\t')?;
    Some((a.trim(), b.trim()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    X1First,
    X2First,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negated,
}

impl Ordering {
    pub const ALL: [Ordering; 2] = [Ordering::X1First, Ordering::X2First];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Polarity {
    pub const ALL: [Polarity; 2] = [Polarity::Positive, Polarity::Negated];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateId(pub String);

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One under-specified question: two subjects from different groups, a
/// context clause and an attribute with its negation.
///
/// `x1` is always the subject whose group name sorts first, so that the
/// sign of the comparative bias has a fixed meaning per group pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemplateInstance {
    pub category: Category,
    pub x1: Subject,
    pub x2: Subject,
    pub context: String,
    pub attribute: Attribute,
}

impl TemplateInstance {
    /// Stable content hash of (category, sorted names, context, positive attribute).
    pub fn id(&self) -> TemplateId {
        let (a, b) = if self.x1.name <= self.x2.name {
            (&self.x1.name, &self.x2.name)
        } else {
            (&self.x2.name, &self.x1.name)
        };
        let key = format!(
            "{}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}",
            self.category, a, b, self.context, self.attribute.positive
        );
        TemplateId(hex_digest(key.as_bytes(), 8))
    }

    pub fn subject(&self, which: usize) -> &Subject {
        if which == 0 {
            &self.x1
        } else {
            &self.x2
        }
    }

    pub fn attribute_text(&self, polarity: Polarity) -> &str {
        match polarity {
            Polarity::Positive => &self.attribute.positive,
            Polarity::Negated => &self.attribute.negative,
        }
    }
}

/// Lowercase hex of the first `bytes` bytes of the SHA-256 digest.
pub fn hex_digest(data: &[u8], bytes: usize) -> String {
    let digest = Sha256::digest(data);
    digest[..bytes.min(32)]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVariant {
    pub template: TemplateId,
    pub ordering: Ordering,
    pub polarity: Polarity,
    pub mask_token: String,
    pub text: String,
}

/// The four (ordering, polarity) variants of a template, in the order
/// x1-first/positive, x2-first/positive, x1-first/negated, x2-first/negated.
pub fn expand_variants(t: &TemplateInstance, mask_token: &str) -> [PromptVariant; 4] {
    let id = t.id();
    let make = |ordering: Ordering, polarity: Polarity| {
        let (first, second) = match ordering {
            Ordering::X1First => (&t.x1.name, &t.x2.name),
            Ordering::X2First => (&t.x2.name, &t.x1.name),
        };
        PromptVariant {
            template: id.clone(),
            ordering,
            polarity,
            mask_token: mask_token.to_string(),
            text: format!(
                "{first} {} {second}. {mask_token} {}.",
                t.context,
                t.attribute_text(polarity)
            ),
        }
    };
    [
        make(Ordering::X1First, Polarity::Positive),
        make(Ordering::X2First, Polarity::Positive),
        make(Ordering::X1First, Polarity::Negated),
        make(Ordering::X2First, Polarity::Negated),
    ]
}

/// Row index of a variant in the 4-row layout used by score matrices.
pub fn variant_row(ordering: Ordering, polarity: Polarity) -> usize {
    polarity.index() * 2 + ordering.index()
}

/// Every cross-group subject pair x context x attribute of the lexicon,
/// sorted by canonical id.
pub fn enumerate_templates(lex: &Lexicon) -> Result<Vec<TemplateInstance>, LexiconError> {
    let subjects: Vec<String> = lex.subjects.iter().map(|s| s.name.clone()).collect();
    enumerate_subset(lex, &lex.contexts, &subjects)
}

pub fn enumerate_subset(
    lex: &Lexicon,
    contexts: &[String],
    subjects: &[String],
) -> Result<Vec<TemplateInstance>, LexiconError> {
    if contexts.is_empty() {
        return Err(LexiconError::EmptySubset("context"));
    }
    if subjects.is_empty() {
        return Err(LexiconError::EmptySubset("subject"));
    }
    let known_ctx: HashSet<&str> = lex.contexts.iter().map(String::as_str).collect();
    for c in contexts {
        if !known_ctx.contains(c.as_str()) {
            return Err(LexiconError::UnknownContext(c.clone()));
        }
    }
    let subs = subjects
        .iter()
        .map(|n| lex.subject(n).ok_or_else(|| LexiconError::UnknownSubject(n.clone())))
        .collect::<Result<Vec<_>, _>>()?;

    let mut pairs = Vec::new();
    for (i, a) in subs.iter().enumerate() {
        for b in &subs[i + 1..] {
            if a.group == b.group {
                continue;
            }
            let (x1, x2) = if a.group < b.group { (a, b) } else { (b, a) };
            pairs.push(((*x1).clone(), (*x2).clone()));
        }
    }

    let mut out = Vec::with_capacity(pairs.len() * contexts.len() * lex.attributes.len());
    for (x1, x2) in &pairs {
        for c in contexts {
            for a in &lex.attributes {
                out.push(TemplateInstance {
                    category: lex.category,
                    x1: x1.clone(),
                    x2: x2.clone(),
                    context: c.clone(),
                    attribute: a.clone(),
                });
            }
        }
    }
    let mut keyed: Vec<(TemplateId, TemplateInstance)> =
        out.into_iter().map(|t| (t.id(), t)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(keyed.into_iter().map(|(_, t)| t).collect())
}

/// Number of templates without materializing them.
pub fn count_templates(lex: &Lexicon) -> usize {
    let mut per_group: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &lex.subjects {
        *per_group.entry(s.group.as_str()).or_default() += 1;
    }
    let n = lex.subjects.len();
    let same: usize = per_group.values().map(|&g| g * (g.saturating_sub(1)) / 2).sum();
    let cross = n * n.saturating_sub(1) / 2 - same;
    cross * lex.contexts.len() * lex.attributes.len()
}

/// How one side of a split selects its members.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Selection {
    #[default]
    All,
    Count(usize),
    Names(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitConfig {
    pub category: Option<Category>,
    pub seed: u64,
    pub train_subjects: Selection,
    pub test_subjects: Selection,
    pub train_contexts: Selection,
    pub test_contexts: Selection,
}

impl SplitConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parses the `key=value` split format. List members use the singular
    /// key once per entry (`train_context=...`), counts the plural key.
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut cfg = SplitConfig::default();
        let mut saw_format = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| LexiconError::Parse {
                line: idx + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !saw_format {
                if key != "format" {
                    return Err(LexiconError::Parse {
                        line: idx + 1,
                        msg: "missing `format=1` header".into(),
                    });
                }
                if value != SPLIT_FORMAT.to_string() {
                    return Err(LexiconError::FormatVersion {
                        found: value.to_string(),
                        expected: SPLIT_FORMAT,
                    });
                }
                saw_format = true;
                continue;
            }
            let count = || {
                value.parse::<usize>().map_err(|_| LexiconError::Parse {
                    line: idx + 1,
                    msg: format!("{key} expects a count, got {value:?}"),
                })
            };
            match key {
                "category" => {
                    cfg.category = Some(value.parse().map_err(|msg| LexiconError::Parse {
                        line: idx + 1,
                        msg,
                    })?)
                }
                "seed" => {
                    cfg.seed = value.parse().map_err(|_| LexiconError::Parse {
                        line: idx + 1,
                        msg: format!("bad seed {value:?}"),
                    })?
                }
                "train_subjects" => set_count(&mut cfg.train_subjects, count()?, key)?,
                "test_subjects" => set_count(&mut cfg.test_subjects, count()?, key)?,
                "train_contexts" => set_count(&mut cfg.train_contexts, count()?, key)?,
                "test_contexts" => set_count(&mut cfg.test_contexts, count()?, key)?,
                "train_subject" => push_name(&mut cfg.train_subjects, value, key)?,
                "test_subject" => push_name(&mut cfg.test_subjects, value, key)?,
                "train_context" => push_name(&mut cfg.train_contexts, value, key)?,
                "test_context" => push_name(&mut cfg.test_contexts, value, key)?,
                other => {
                    return Err(LexiconError::Parse {
                        line: idx + 1,
                        msg: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        if !saw_format {
            return Err(LexiconError::Parse {
                line: 0,
                msg: "empty split config".into(),
            });
        }
        Ok(cfg)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("format={SPLIT_FORMAT}\n");
        if let Some(c) = self.category {
            out.push_str(&format!("category={c}\n"));
        }
        out.push_str(&format!("seed={}\n", self.seed));
        for (sel, plural, singular) in [
            (&self.train_subjects, "train_subjects", "train_subject"),
            (&self.test_subjects, "test_subjects", "test_subject"),
            (&self.train_contexts, "train_contexts", "train_context"),
            (&self.test_contexts, "test_contexts", "test_context"),
        ] {
            match sel {
                Selection::All => {}
                Selection::Count(n) => out.push_str(&format!("{plural}={n}\n")),
                Selection::Names(names) => {
                    for n in names {
                        out.push_str(&format!("{singular}={n}\n"));
                    }
                }
            }
        }
        out
    }
}

fn set_count(sel: &mut Selection, n: usize, key: &str) -> Result<(), LexiconError> {
    match sel {
        Selection::All => {
            *sel = Selection::Count(n);
            Ok(())
        }
        _ => Err(LexiconError::SplitConfig(format!(
            "{key} given twice or mixed with explicit names"
        ))),
    }
}

fn push_name(sel: &mut Selection, name: &str, key: &str) -> Result<(), LexiconError> {
    match sel {
        Selection::All => {
            *sel = Selection::Names(vec![name.to_string()]);
            Ok(())
        }
        Selection::Names(v) => {
            v.push(name.to_string());
            Ok(())
        }
        Selection::Count(_) => Err(LexiconError::SplitConfig(format!(
            "{key} mixed with a count"
        ))),
    }
}

/// Train and test views of a lexicon.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Lexicon,
    pub test: Lexicon,
}

/// Splits a lexicon. Gender partitions subjects (drawn round-robin across
/// groups so counts stay balanced) and shares contexts; every other category
/// partitions contexts and shares subjects.
pub fn split(lex: &Lexicon, cfg: &SplitConfig) -> Result<Split, LexiconError> {
    if let Some(c) = cfg.category {
        if c != lex.category {
            return Err(LexiconError::CategoryMismatch {
                found: c,
                expected: lex.category,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Subject draw order: shuffle within each group, then interleave groups.
    let mut by_group: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for s in &lex.subjects {
        by_group.entry(s.group.as_str()).or_default().push(s.name.clone());
    }
    for members in by_group.values_mut() {
        members.shuffle(&mut rng);
    }
    let mut subject_order = Vec::with_capacity(lex.subjects.len());
    let longest = by_group.values().map(Vec::len).max().unwrap_or(0);
    for i in 0..longest {
        for members in by_group.values() {
            if let Some(n) = members.get(i) {
                subject_order.push(n.clone());
            }
        }
    }
    let mut context_order = lex.contexts.clone();
    context_order.shuffle(&mut rng);

    let (train_subjects, test_subjects, train_contexts, test_contexts) =
        if lex.category.partitions_subjects() {
            let (a, b) = partition(
                &subject_order,
                &cfg.train_subjects,
                &cfg.test_subjects,
                "subjects",
            )?;
            let (c, d) = shared(&context_order, &cfg.train_contexts, &cfg.test_contexts)?;
            (a, b, c, d)
        } else {
            let (c, d) = partition(
                &context_order,
                &cfg.train_contexts,
                &cfg.test_contexts,
                "contexts",
            )?;
            let (a, b) = shared(&subject_order, &cfg.train_subjects, &cfg.test_subjects)?;
            (a, b, c, d)
        };

    Ok(Split {
        train: lex.view(&train_subjects, &train_contexts)?,
        test: lex.view(&test_subjects, &test_contexts)?,
    })
}

fn partition(
    order: &[String],
    train: &Selection,
    test: &Selection,
    what: &'static str,
) -> Result<(Vec<String>, Vec<String>), LexiconError> {
    let n = order.len();
    let (train_v, test_v) = match (train, test) {
        (Selection::Names(a), Selection::Names(b)) => (a.clone(), b.clone()),
        (Selection::Names(a), other) => {
            let rest: Vec<String> = order.iter().filter(|x| !a.contains(x)).cloned().collect();
            (a.clone(), take(&rest, other, rest.len())?)
        }
        (other, Selection::Names(b)) => {
            let rest: Vec<String> = order.iter().filter(|x| !b.contains(x)).cloned().collect();
            (take(&rest, other, rest.len())?, b.clone())
        }
        (tr, te) => {
            let train_n = match (tr, te) {
                (Selection::Count(a), _) => *a,
                (_, Selection::Count(b)) => n.saturating_sub(*b),
                _ => n.div_ceil(2),
            };
            let test_n = match te {
                Selection::Count(b) => *b,
                _ => n.saturating_sub(train_n),
            };
            if train_n + test_n > n {
                return Err(LexiconError::CannotPartition {
                    what,
                    reason: format!("{train_n} train + {test_n} test exceeds {n} available"),
                });
            }
            (
                order[..train_n].to_vec(),
                order[train_n..train_n + test_n].to_vec(),
            )
        }
    };
    if train_v.is_empty() || test_v.is_empty() {
        return Err(LexiconError::CannotPartition {
            what,
            reason: format!(
                "{n} available, {} train / {} test",
                train_v.len(),
                test_v.len()
            ),
        });
    }
    let train_set: HashSet<&String> = train_v.iter().collect();
    if let Some(dup) = test_v.iter().find(|x| train_set.contains(x)) {
        return Err(LexiconError::Overlap(dup.clone()));
    }
    Ok((train_v, test_v))
}

fn shared(
    order: &[String],
    train: &Selection,
    test: &Selection,
) -> Result<(Vec<String>, Vec<String>), LexiconError> {
    Ok((
        take(order, train, order.len())?,
        take(order, test, order.len())?,
    ))
}

fn take(order: &[String], sel: &Selection, default: usize) -> Result<Vec<String>, LexiconError> {
    match sel {
        Selection::All => Ok(order[..default.min(order.len())].to_vec()),
        Selection::Count(n) if *n <= order.len() => Ok(order[..*n].to_vec()),
        Selection::Count(n) => Err(LexiconError::SplitConfig(format!(
            "requested {n} items, only {} available",
            order.len()
        ))),
        Selection::Names(v) => Ok(v.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(groups: &[(&str, &str)], attrs: usize, contexts: usize) -> Lexicon {
        Lexicon::new(
            Category::Religion,
            groups
                .iter()
                .map(|(n, g)| Subject {
                    name: n.to_string(),
                    group: g.to_string(),
                })
                .collect(),
            (0..attrs)
                .map(|i| Attribute {
                    positive: format!("is trait{i}"),
                    negative: format!("is never trait{i}"),
                })
                .collect(),
            (0..contexts).map(|i| format!("sat near{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let text = "format=1\n[subjects]\nJohn\tmale\nMary\tfemale\n[attributes]\nwas a senator\twas never a senator\n[contexts]\ngot off the flight to visit\n";
        let lex = Lexicon::parse(text, Category::Gender).unwrap();
        assert_eq!(lex.groups(), vec!["female", "male"]);
        assert_eq!(Lexicon::parse(&lex.to_file_string(), Category::Gender).unwrap(), lex);

        let one_group = "format=1\n[subjects]\nJohn\tmale\nBob\tmale\n[attributes]\na\tb\n[contexts]\nc\n";
        let err = Lexicon::parse(one_group, Category::Gender).unwrap_err();
        assert!(err.to_string().contains("fewer than 2 groups"));

        let no_neg = "format=1\n[subjects]\nJohn\tmale\nMary\tfemale\n[attributes]\nwas a senator\n[contexts]\nc\n";
        assert!(matches!(
            Lexicon::parse(no_neg, Category::Gender),
            Err(LexiconError::MissingNegation { line: 6, .. })
        ));

        let dup = "format=1\n[subjects]\nJohn\tmale\nJohn\tfemale\n[attributes]\na\tb\n[contexts]\nc\n";
        assert!(matches!(
            Lexicon::parse(dup, Category::Gender),
            Err(LexiconError::DuplicateSubject(_))
        ));

        let v2 = "format=2\n[subjects]\n";
        assert!(matches!(
            Lexicon::parse(v2, Category::Gender),
            Err(LexiconError::FormatVersion { .. })
        ));
    }

    #[test]
    fn example_variant_text() {
        let t = TemplateInstance {
            category: Category::Gender,
            x1: Subject {
                name: "John".into(),
                group: "male".into(),
            },
            x2: Subject {
                name: "Mary".into(),
                group: "female".into(),
            },
            context: "got off the flight to visit".into(),
            attribute: Attribute {
                positive: "was a senator".into(),
                negative: "was never a senator".into(),
            },
        };
        let v = expand_variants(&t, "[MASK]");
        assert_eq!(v[0].text, "John got off the flight to visit Mary. [MASK] was a senator.");
        assert_eq!(v[1].text, "Mary got off the flight to visit John. [MASK] was a senator.");
        assert!(v[2].text.contains("was never a senator"));
        assert_eq!(v[2].text.replace("was never a senator", "was a senator"), v[0].text);
        for x in &v {
            assert_eq!(x.text.matches("[MASK]").count(), 1);
        }
    }

    #[test]
    fn minimal_cross_product() {
        let lex = tiny(&[("a", "g1"), ("b", "g2")], 1, 1);
        let ts = enumerate_templates(&lex).unwrap();
        assert_eq!(ts.len(), 1);
        assert_eq!(count_templates(&lex), 1);
    }

    #[test]
    fn x1_is_group_sorted_first() {
        let lex = tiny(&[("zed", "alpha"), ("amy", "beta"), ("kim", "gamma")], 2, 2);
        for t in enumerate_templates(&lex).unwrap() {
            assert!(t.x1.group < t.x2.group);
        }
    }

    #[test]
    fn id_ignores_subject_order() {
        let lex = tiny(&[("a", "g1"), ("b", "g2")], 1, 1);
        let mut t = enumerate_templates(&lex).unwrap().remove(0);
        let id = t.id();
        std::mem::swap(&mut t.x1, &mut t.x2);
        assert_eq!(t.id(), id);
    }

    #[test]
    fn empty_subsets_rejected() {
        let lex = tiny(&[("a", "g1"), ("b", "g2")], 1, 1);
        assert!(matches!(
            enumerate_subset(&lex, &[], &["a".into()]),
            Err(LexiconError::EmptySubset("context"))
        ));
        assert!(matches!(
            enumerate_subset(&lex, lex.contexts(), &[]),
            Err(LexiconError::EmptySubset("subject"))
        ));
    }

    #[test]
    fn single_context_cannot_partition() {
        let lex = tiny(&[("a", "g1"), ("b", "g2")], 1, 1);
        let err = split(&lex, &SplitConfig::default()).unwrap_err();
        assert!(matches!(err, LexiconError::CannotPartition { what: "contexts", .. }));
    }

    #[test]
    fn explicit_overlap_rejected() {
        let lex = tiny(&[("a", "g1"), ("b", "g2")], 1, 3);
        let cfg = SplitConfig {
            train_contexts: Selection::Names(vec!["sat near0".into(), "sat near1".into()]),
            test_contexts: Selection::Names(vec!["sat near1".into()]),
            ..Default::default()
        };
        assert!(matches!(split(&lex, &cfg), Err(LexiconError::Overlap(_))));
    }

    #[test]
    fn split_config_parse() {
        let cfg = SplitConfig::parse(
            "format=1\ncategory=gender\nseed=7\ntrain_subjects=60\ntest_subjects=40\ntrain_context=a b\ntrain_context=c\n",
        )
        .unwrap();
        assert_eq!(cfg.train_subjects, Selection::Count(60));
        assert_eq!(
            cfg.train_contexts,
            Selection::Names(vec!["a b".into(), "c".into()])
        );
        assert_eq!(SplitConfig::parse(&cfg.to_file_string()).unwrap(), cfg);
        assert!(SplitConfig::parse("format=2\n").is_err());
        assert!(SplitConfig::parse("format=1\ntrain_subjects=3\ntrain_subject=x\n").is_err());
    }
}
