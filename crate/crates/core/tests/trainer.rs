mod common;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refinelm::lexicon::enumerate_templates;
use refinelm::metrics::{comparative_bias, resolve_template, score_quad};
use refinelm::trainer::*;
use refinelm::RefineParams;

use common::*;

/// Σ_j w_j log(f_j + η) computed from scratch: forward each variant, rescale
/// by mass, build blocks, pool with L1.
fn objective(batch: &Batch, params: &RefineParams, w: &[f64]) -> f64 {
    let blocks: Vec<Vec<f64>> = batch
        .templates
        .iter()
        .map(|t| {
            let mut b = Vec::new();
            for v in &t.variants {
                let q = params.forward(&v.probs).unwrap().probs;
                let mass: f64 = v.probs.iter().sum();
                for idx in v.index {
                    b.push(mass * q[idx.unwrap()]);
                }
            }
            b
        })
        .collect();
    let n = blocks.len() as f64;
    blocks
        .iter()
        .zip(w)
        .map(|(bj, wj)| {
            let f: f64 = blocks
                .iter()
                .map(|bi| bi.iter().zip(bj).map(|(a, b)| (a - b).abs()).sum::<f64>())
                .sum::<f64>()
                / n;
            wj * (f + POOL_FLOOR).ln()
        })
        .sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn log_pool_gradient_matches_finite_differences() {
    let lex = gender_lexicon();
    let backend = synthetic(&lex, a7_spec(&lex));
    let templates = enumerate_templates(&lex).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let n = 2 + trial % 3;
        let members = (0..n)
            .map(|_| {
                let t = &templates[rng.random_range(0..templates.len())];
                Arc::new(resolve_template(t, &backend, &common::setup()).unwrap())
            })
            .collect();
        let batch = Batch {
            context: String::new(),
            templates: members,
        };
        let params = RefineParams::init(8, 5, trial as u64).unwrap();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..0.0)).collect();
        let (_, grad) = weighted_log_pool_grad(&batch, &params, &w).unwrap();
        let h = 1e-6;
        for i in (0..params.len()).step_by(7) {
            let mut p = params.clone();
            p.as_mut_slice()[i] += h;
            let up = objective(&batch, &p, &w);
            p.as_mut_slice()[i] -= 2.0 * h;
            let down = objective(&batch, &p, &w);
            let fd = (up - down) / (2.0 * h);
            let an = grad.as_slice()[i];
            assert!(
                rel_err(an, fd) < 1e-4 || (an - fd).abs() < 1e-9,
                "trial {trial} param {i}: analytic {an} vs fd {fd}"
            );
        }
    }
}

#[test]
fn zeta_matches_score_quad() {
    let lex = gender_lexicon();
    let backend = synthetic(&lex, a7_spec(&lex));
    let templates = enumerate_templates(&lex).unwrap();
    let params = RefineParams::init(8, 16, 3).unwrap();
    let batch = Batch {
        context: String::new(),
        templates: templates[..6]
            .iter()
            .map(|t| Arc::new(resolve_template(t, &backend, &common::setup()).unwrap()))
            .collect(),
    };
    let zeta = build_zeta(&batch, &params).unwrap();
    assert_eq!(zeta.shape(), (24, 2));
    for (t, block) in templates[..6].iter().zip(&zeta.blocks) {
        let q = score_quad(t, &backend, Some(&params), &common::setup()).unwrap();
        let rows = q.rows().unwrap();
        for r in 0..4 {
            for c in 0..2 {
                assert!((rows[r][c] - block[r][c]).abs() <= 1e-15);
            }
        }
        let want = -comparative_bias(&q).unwrap().2.abs();
        let got = reward(
            &Batch {
                context: String::new(),
                templates: vec![Arc::new(resolve_template(t, &backend, &common::setup()).unwrap())],
            },
            &params,
        )
        .unwrap()[0];
        assert_eq!(got, want);
    }
}

#[test]
fn symmetric_backend_gives_equal_columns() {
    let lex = gender_lexicon();
    let backend = synthetic(&lex, refinelm::backend::SyntheticSpec::fair(0.0));
    let prepared = prepare(&lex, &backend);
    let mut params = RefineParams::init(8, 16, 0).unwrap();
    params.w2_mut().fill(0.0);
    params.b2_mut().fill(0.0);
    for b in prepared.pool.batches(16, 0, 0).iter().take(3) {
        for block in build_zeta(b, &params).unwrap().blocks {
            for row in block {
                assert!((row[0] - row[1]).abs() < 1e-3);
            }
        }
    }
}

#[test]
fn zero_step_budget_returns_init() {
    let lex = gender_lexicon();
    let backend = synthetic(&lex, a7_spec(&lex));
    let prepared = prepare(&lex, &backend);
    let cfg = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    let out = train(&prepared.pool, &[], &lex.groups(), &cfg, &mut NullSink).unwrap();
    assert_eq!(out.params, RefineParams::init(cfg.k, cfg.h, cfg.seed).unwrap());
    assert_eq!(out.steps_run, 0);
}

#[test]
fn seeded_runs_write_identical_checkpoints() {
    let lex = gender_lexicon();
    let backend = synthetic(&lex, a7_spec(&lex));
    let prepared = prepare(&lex, &backend);
    let cfg = TrainConfig {
        steps: 60,
        eval_every: 20,
        checkpoint_every: 30,
        ..TrainConfig::default()
    };
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = DirSink::create(dir.path()).unwrap();
        train(&prepared.pool, &prepared.heldout, &lex.groups(), &cfg, &mut sink).unwrap();
        assert!(dir.path().join("ckpt_000030.json").exists());
        let last = sink.last_checkpoint.clone().unwrap();
        assert!(last.ends_with("ckpt_000060.json"));
        let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 60);
        let evals = std::fs::read_to_string(dir.path().join("eval_log.jsonl")).unwrap();
        assert_eq!(evals.lines().count(), 4);
        bytes.push(std::fs::read(last).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn training_bias_falls_over_ten_step_windows() {
    let lex = gender_lexicon();
    let backend = synthetic(&lex, a7_spec(&lex));
    let prepared = prepare(&lex, &backend);
    let cfg = TrainConfig::default();
    let all: Vec<_> = prepared
        .pool
        .batches(1_000_000, 0, 0)
        .into_iter()
        .flat_map(|b| b.templates)
        .collect();
    let mean_abs_c = |p: &RefineParams| {
        let xs: Vec<f64> = all
            .iter()
            .map(|t| comparative_bias(&t.quad(Some(p)).unwrap()).unwrap().2.abs())
            .collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let mut params = RefineParams::init(cfg.k, cfg.h, cfg.seed).unwrap();
    let initial = mean_abs_c(&params);
    let mut per_step = Vec::new();
    let mut epoch = 0;
    let mut batches = prepared.pool.batches(cfg.batch_size, cfg.seed, epoch).into_iter();
    for _ in 0..500 {
        let batch = batches.next().unwrap_or_else(|| {
            epoch += 1;
            batches = prepared.pool.batches(cfg.batch_size, cfg.seed, epoch).into_iter();
            batches.next().unwrap()
        });
        params = step(&params, &batch, &cfg).unwrap().0;
        per_step.push(mean_abs_c(&params));
    }
    let windows: Vec<f64> = per_step.chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for w in windows.windows(2) {
        assert!(w[1] <= w[0] * 1.02, "window mean of |C| rose: {windows:?}");
    }
    let coarse: Vec<f64> = per_step.chunks(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    for w in coarse.windows(2) {
        assert!(w[1] < w[0], "50-step mean of |C| rose: {coarse:?}");
    }
    assert!(windows[0] < initial);
    assert!(*windows.last().unwrap() < 0.5 * initial);
}

#[test]
fn all_absent_templates_are_rejected() {
    let lex = gender_lexicon();
    let backend = synthetic(&lex, a7_spec(&lex));
    let templates = enumerate_templates(&lex).unwrap();
    let records = dump(&backend, &templates[..5], &common::setup())
        .into_iter()
        .map(|mut r| {
            r.subjects.values_mut().for_each(|v| *v = None);
            r
        });
    let cache = refinelm::backend::CacheBackend::from_records(
        refinelm::backend::CacheHeader::new(8, "masked"),
        records,
    );
    let err = build_batches(&templates[..5], &cache, &common::setup(), &TrainConfig::default())
        .unwrap_err();
    assert!(matches!(err, TrainError::NoEligible { skipped: 5 }), "{err}");
}
