mod common;

use std::collections::{BTreeMap, BTreeSet};

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refinelm::backend::{CacheRecord, SyntheticSpec};
use refinelm::lexicon::{count_templates, enumerate_templates, split, Selection, SplitConfig};
use refinelm::metrics::{self, comparative_bias};
use refinelm::refine::softmax;
use refinelm::{Category, RefineParams, ScoreQuad, TopKDistribution};

use common::*;

/// Plain re-statement of the refine forward pass.
fn forward_oracle(params: &RefineParams, p: &[f64]) -> Vec<f64> {
    let (k, h) = (params.k(), params.h());
    let total: f64 = p.iter().sum();
    let p_hat: Vec<f64> = p.iter().map(|x| x / total).collect();
    let mut hidden = vec![0.0; h];
    for (j, a) in hidden.iter_mut().enumerate() {
        let mut u = params.b1()[j];
        for i in 0..k {
            u += params.w1()[j * k + i] * p_hat[i];
        }
        *a = u.tanh();
    }
    let z: Vec<f64> = (0..k)
        .map(|i| {
            let mut z = (p_hat[i] + 1e-12).ln() + params.b2()[i];
            for j in 0..h {
                z += params.w2()[i * h + j] * hidden[j];
            }
            z
        })
        .collect();
    softmax(&z)
}

fn random_input(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut p: Vec<f64> = (0..k).map(|_| rng.random_range(0.001..1.0)).collect();
    let s = rng.random_range(0.2..1.0) / p.iter().sum::<f64>();
    p.iter_mut().for_each(|x| *x *= s);
    p
}

fn perturbed(k: usize, seed: u64, rng: &mut ChaCha8Rng) -> RefineParams {
    let mut params = RefineParams::init(k, 2 * k, seed).unwrap();
    for x in params.w2_mut() {
        *x = rng.random_range(-1.0..1.0);
    }
    for x in params.b2_mut() {
        *x = rng.random_range(-0.5..0.5);
    }
    params
}

#[test]
fn forward_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in [2, 3, 8, 40] {
        for seed in 0..25 {
            let params = perturbed(k, seed, &mut rng);
            let p = random_input(&mut rng, k);
            let got = params.forward(&p).unwrap().probs;
            for (a, b) in got.iter().zip(forward_oracle(&params, &p)) {
                assert_relative_eq!(*a, b, max_relative = 1e-12);
            }
        }
    }
}

#[test]
fn refine_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in [3, 8] {
        for draw in 0..100 {
            let params = perturbed(k, draw, &mut rng);
            let p = random_input(&mut rng, k);
            let up: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let obj = |prm: &RefineParams| -> f64 {
                forward_oracle(prm, &p).iter().zip(&up).map(|(q, u)| q * u).sum()
            };
            let grad = params.backward(&p, &up).unwrap();
            let h = 1e-6;
            let mut err = 0.0f64;
            for i in 0..params.len() {
                let mut a = params.clone();
                a.as_mut_slice()[i] += h;
                let mut b = params.clone();
                b.as_mut_slice()[i] -= h;
                let fd = (obj(&a) - obj(&b)) / (2.0 * h);
                err += (fd - grad.as_slice()[i]).powi(2);
            }
            let rel = err.sqrt() / grad.norm().max(1e-8);
            assert!(rel < 1e-5, "k={k} draw {draw}: relative error {rel}");
        }
    }
}

#[test]
fn synthetic_biases_match_closed_form() {
    let lex = gender_lexicon();
    let groups = lex.groups();
    for (share, skew, noise) in [(0.5, 0.0, 0.0), (0.7, 0.05, 0.0), (0.6, 0.02, 0.1), (0.8, 0.0, 0.05)] {
        let spec = SyntheticSpec {
            polarity_noise: noise,
            ..SyntheticSpec::alternating(share, skew)
        };
        let m = spec.subject_mass;
        let backend = synthetic(&lex, spec);
        let report = metrics::measure(&enumerate_templates(&lex).unwrap(), &backend, &setup(), None, &groups)
            .unwrap();
        let attrs: Vec<&str> = lex.attributes().iter().map(|a| a.positive.as_str()).collect();
        for t in &report.templates {
            let ai = attrs.iter().position(|a| *a == t.attribute).unwrap();
            let g1 = groups.iter().position(|g| *g == t.group_x1).unwrap();
            let s1 = if ai % groups.len() == g1 { share } else { 1.0 - share };
            assert_relative_eq!(t.delta, 2.0 * skew, epsilon = 1e-12);
            assert_relative_eq!(t.epsilon, (2.0 * skew - noise * s1).abs(), epsilon = 1e-12);
            assert_relative_eq!(t.c, 0.5 * (2.0 * m + noise) * (2.0 * s1 - 1.0), epsilon = 1e-12);
        }
        let want_mu = 0.5 * (2.0 * m + noise) * (2.0 * share - 1.0).abs();
        assert_relative_eq!(report.mu, want_mu, epsilon = 1e-12);
    }
}

fn unit() -> impl Strategy<Value = f64> {
    0.0..1.0f64
}

proptest! {
    #[test]
    fn relabeling_negates_comparative_bias(rows in prop::array::uniform4(prop::array::uniform2(unit()))) {
        let q = ScoreQuad::from_rows(rows);
        let c = comparative_bias(&q).unwrap().2;
        prop_assert_eq!(comparative_bias(&q.swap_subjects()).unwrap().2, -c);
        prop_assert_eq!(q.swap_subjects().swap_subjects(), q);
    }

    #[test]
    fn refine_output_is_a_distribution(
        seed in any::<u64>(),
        raw in prop::collection::vec(0.0..1.0f64, 2..12),
    ) {
        prop_assume!(raw.iter().sum::<f64>() > 1e-6);
        let params = RefineParams::init(raw.len(), 2 * raw.len(), seed).unwrap();
        let q = params.forward(&raw).unwrap().probs;
        prop_assert!(q.iter().all(|x| x.is_finite() && *x >= 0.0));
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_output_layer_is_identity(
        seed in any::<u64>(),
        raw in prop::collection::vec(1e-4..1.0f64, 2..12),
    ) {
        let mut params = RefineParams::init(raw.len(), 2 * raw.len(), seed).unwrap();
        params.w2_mut().fill(0.0);
        params.b2_mut().fill(0.0);
        let total: f64 = raw.iter().sum();
        let q = params.forward(&raw).unwrap().probs;
        for (q, p) in q.iter().zip(&raw) {
            prop_assert!((q - p / total).abs() < 1e-9);
        }
    }

    #[test]
    fn split_sides_are_disjoint(
        per_group in 2..8usize,
        contexts in 2..8usize,
        seed in any::<u64>(),
        gender in any::<bool>(),
    ) {
        let category = if gender { Category::Gender } else { Category::Religion };
        let lex = lexicon(category, 2, per_group, 3, contexts);
        let cfg = SplitConfig { seed, ..SplitConfig::default() };
        let Ok(sp) = split(&lex, &cfg) else { return Ok(()) };
        let names = |l: &refinelm::Lexicon| -> BTreeSet<String> {
            l.subjects().iter().map(|s| s.name.clone()).collect()
        };
        let ctx = |l: &refinelm::Lexicon| -> BTreeSet<String> { l.contexts().iter().cloned().collect() };
        if gender {
            prop_assert!(names(&sp.train).is_disjoint(&names(&sp.test)));
            prop_assert_eq!(ctx(&sp.train), ctx(&lex));
        } else {
            prop_assert!(ctx(&sp.train).is_disjoint(&ctx(&sp.test)));
            prop_assert_eq!(names(&sp.train), names(&lex));
        }
        let train = enumerate_templates(&sp.train).unwrap();
        let test: BTreeSet<_> = enumerate_templates(&sp.test).unwrap().iter().map(|t| t.id()).collect();
        prop_assert!(train.iter().all(|t| !test.contains(&t.id())));
    }

    #[test]
    fn count_matches_enumeration(
        sizes in prop::collection::vec(1..5usize, 2..5),
        attributes in 1..4usize,
        contexts in 1..4usize,
    ) {
        let mut subjects = Vec::new();
        for (g, n) in sizes.iter().enumerate() {
            for i in 0..*n {
                subjects.push(refinelm::lexicon::Subject { name: format!("N{g}x{i}"), group: format!("grp{g}") });
            }
        }
        let attrs = (0..attributes)
            .map(|i| refinelm::lexicon::Attribute { positive: format!("was a{i}"), negative: format!("was not a{i}") })
            .collect();
        let ctxs = (0..contexts).map(|i| format!("saw c{i} with")).collect();
        let lex = refinelm::Lexicon::new(Category::Religion, subjects, attrs, ctxs).unwrap();
        let mut pairs = 0;
        for a in 0..sizes.len() {
            for b in a + 1..sizes.len() {
                pairs += sizes[a] * sizes[b];
            }
        }
        let n = enumerate_templates(&lex).unwrap().len();
        prop_assert_eq!(n, pairs * attributes * contexts);
        prop_assert_eq!(count_templates(&lex), n);
    }

    #[test]
    fn cache_record_json_round_trip(
        probs in prop::collection::vec(0.0..0.11f64, 2..10),
        idx in prop::collection::vec(-1..10i64, 0..3),
    ) {
        let mut probs = probs;
        probs.sort_by(|a, b| b.total_cmp(a));
        let k = probs.len() as i64;
        let rec = CacheRecord {
            prompt_id: "abc".into(),
            prompt: "A met B. [MASK] was kind.".into(),
            topk: probs.iter().enumerate().map(|(i, p)| (format!("t{i}"), *p)).collect(),
            subjects: idx.iter().enumerate().map(|(i, x)| (format!("s{i}"), (*x).min(k - 1))).collect::<BTreeMap<_, _>>(),
        };
        let text = serde_json::to_string(&rec).unwrap();
        let back: CacheRecord = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &rec);
        prop_assert!(back.topk.iter().zip(&rec.topk).all(|(a, b)| a.1.to_bits() == b.1.to_bits()));
        prop_assert!(TopKDistribution::new(back.topk).is_ok());
    }

    #[test]
    fn unsorted_or_excess_mass_is_rejected(a in 0.01..0.5f64, b in 0.51..1.0f64) {
        prop_assert!(TopKDistribution::new(vec![("x".into(), a), ("y".into(), b)]).is_err());
        prop_assert!(TopKDistribution::new(vec![("x".into(), b), ("y".into(), b)]).is_err());
    }
}

#[test]
fn selection_counts_are_respected() {
    let lex = lexicon(Category::Gender, 2, 5, 2, 3);
    let cfg = SplitConfig {
        seed: 3,
        train_subjects: Selection::Count(6),
        test_subjects: Selection::Count(4),
        ..SplitConfig::default()
    };
    let sp = split(&lex, &cfg).unwrap();
    assert_eq!(sp.train.subjects().len(), 6);
    assert_eq!(sp.test.subjects().len(), 4);
    assert_eq!(sp.train.groups().len(), 2);
}
