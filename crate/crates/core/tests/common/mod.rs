#![allow(dead_code)]

use std::collections::BTreeMap;

use refinelm::backend::{Affinity, PromptStyle, SyntheticBackend, SyntheticSpec};
use refinelm::lexicon::{enumerate_templates, split, Attribute, Split, SplitConfig, Subject};
use refinelm::metrics::{resolve_all, ProbeSetup, ResolvedTemplate};
use refinelm::trainer::TemplatePool;
use refinelm::{Category, Lexicon};

pub const MASK: &str = "[MASK]";

/// `per_group` subjects in each of `groups` groups, named `<G><i>`.
pub fn lexicon(
    category: Category,
    groups: usize,
    per_group: usize,
    attributes: usize,
    contexts: usize,
) -> Lexicon {
    let mut subjects = Vec::new();
    for g in 0..groups {
        for i in 0..per_group {
            subjects.push(Subject {
                name: format!("S{g}x{i}"),
                group: format!("g{g:02}"),
            });
        }
    }
    let attributes = (0..attributes)
        .map(|i| Attribute {
            positive: format!("was trait{i}"),
            negative: format!("was never trait{i}"),
        })
        .collect();
    let contexts = (0..contexts).map(|i| format!("met place{i} with")).collect();
    Lexicon::new(category, subjects, attributes, contexts).unwrap()
}

pub fn gender_lexicon() -> Lexicon {
    lexicon(Category::Gender, 2, 6, 10, 4)
}

/// Bias strength cycling 0.6/0.7/0.8 over attributes, favoured group
/// alternating, first-mention skew 0.05: μ₀ ≈ 0.19 on a two-group lexicon.
pub fn heterogeneous_spec(lex: &Lexicon, shares: &[f64], skew: f64) -> SyntheticSpec {
    let groups = lex.groups();
    let mut weights: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (i, a) in lex.attributes().iter().enumerate() {
        let s = shares[i % shares.len()];
        for (g, name) in groups.iter().enumerate() {
            let w = if g == i % groups.len() { s } else { 1.0 - s };
            weights
                .entry(name.clone())
                .or_default()
                .insert(a.positive.clone(), w);
        }
    }
    SyntheticSpec {
        affinity: Affinity::Table {
            default: 0.5,
            weights,
        },
        ..SyntheticSpec::fair(skew)
    }
}

pub fn a7_spec(lex: &Lexicon) -> SyntheticSpec {
    heterogeneous_spec(lex, &[0.6, 0.7, 0.8], 0.05)
}

pub fn synthetic(lex: &Lexicon, spec: SyntheticSpec) -> SyntheticBackend {
    SyntheticBackend::new(lex, spec, PromptStyle::masked(MASK), 1).unwrap()
}

pub fn setup() -> ProbeSetup {
    ProbeSetup::masked(8)
}

pub struct Prepared {
    pub split: Split,
    pub pool: TemplatePool,
    pub heldout: Vec<ResolvedTemplate>,
}

pub fn prepare(lex: &Lexicon, backend: &SyntheticBackend) -> Prepared {
    let split = split(lex, &SplitConfig::default()).unwrap();
    let train = resolve_all(&enumerate_templates(&split.train).unwrap(), backend, &setup()).unwrap();
    let heldout = resolve_all(&enumerate_templates(&split.test).unwrap(), backend, &setup()).unwrap();
    Prepared {
        split,
        pool: TemplatePool::from_resolved(train).unwrap(),
        heldout,
    }
}

/// Probes every variant prompt of `templates` once, as an exporter would.
pub fn dump(
    backend: &dyn refinelm::Backend,
    templates: &[refinelm::TemplateInstance],
    setup: &ProbeSetup,
) -> Vec<refinelm::ProbeResult> {
    let mut out = Vec::new();
    for t in templates {
        let names = [t.x1.name.as_str(), t.x2.name.as_str()];
        for p in refinelm::metrics::template_prompts(t, setup).unwrap() {
            out.push(refinelm::backend::probe(backend, &p, &names, setup.k).unwrap());
        }
    }
    out
}
