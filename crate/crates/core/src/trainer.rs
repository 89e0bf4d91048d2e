//! Contextual-bandit policy-gradient training of the refine layer.
//!
//! Each step takes a batch of templates sharing one context, scores their
//! four variants through the current layer into 4×2 blocks ζ_i, pools each
//! block into f_j = avg_i ‖ζ_i − ζ_j‖₁, and moves the parameters by
//!
//! ```text
//! Δθ = (1/|B|) Σ_j r_j ∇θ log(f_j + η_f),   r_j = −|C_j|
//! ```
//!
//! with global-norm clipping.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Backend;
use crate::metrics::{
    aggregate, comparative_bias, resolve_all, template_biases, MetricsError, ProbeSetup,
    ResolvedTemplate,
};
use crate::par;
use crate::refine::{RefineError, RefineParams};
use crate::TemplateInstance;

/// Floor inside log(f) so identical blocks (f = 0) keep a finite gradient.
pub const POOL_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no eligible templates ({skipped} skipped with an absent subject)")]
    NoEligible { skipped: usize },
    #[error("batch of {0} templates; at least 2 are needed")]
    BatchTooSmall(usize),
    #[error("non-finite gradient at step {step}")]
    NonFinite { step: usize },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("template in batch has an absent subject score")]
    Ineligible,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error("checkpoint sink: {0}")]
    Sink(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub h: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Held-out evaluation every this many steps (0 = only at the end).
    pub eval_every: usize,
    /// Checkpoint every this many steps (0 = only the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 8,
            h: 16,
            lr: 1e-2,
            batch_size: 16,
            steps: 2000,
            seed: 0,
            clip_norm: 1.0,
            eval_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!(
                "batch size {} must be >= 2",
                self.batch_size
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::Config("clip norm must be > 0".into()));
        }
        if self.k < 2 || self.h == 0 {
            return Err(TrainError::Config(format!("bad layer shape k={} h={}", self.k, self.h)));
        }
        Ok(())
    }
}

/// Templates sharing one context.
#[derive(Debug, Clone)]
pub struct Batch {
    pub context: String,
    pub templates: Vec<Arc<ResolvedTemplate>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Eligible training templates grouped by context.
#[derive(Debug, Clone, Default)]
pub struct TemplatePool {
    by_context: BTreeMap<String, Vec<Arc<ResolvedTemplate>>>,
    pub eligible: usize,
    pub skipped: usize,
}

impl TemplatePool {
    pub fn from_resolved(resolved: Vec<ResolvedTemplate>) -> Result<Self, TrainError> {
        let mut pool = TemplatePool::default();
        for r in resolved {
            if r.eligible() {
                pool.eligible += 1;
                pool.by_context
                    .entry(r.template.context.clone())
                    .or_default()
                    .push(Arc::new(r));
            } else {
                pool.skipped += 1;
            }
        }
        if pool.eligible == 0 {
            return Err(TrainError::NoEligible {
                skipped: pool.skipped,
            });
        }
        Ok(pool)
    }

    pub fn contexts(&self) -> impl Iterator<Item = &str> {
        self.by_context.keys().map(String::as_str)
    }

    /// One epoch of context-pure batches. Templates are shuffled within each
    /// context, cut into chunks of `batch_size`, and the batch order is
    /// shuffled; a trailing chunk of a single template is dropped.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut out = Vec::new();
        for (context, members) in &self.by_context {
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            for chunk in shuffled.chunks(batch_size.max(2)) {
                if chunk.len() >= 2 {
                    out.push(Batch {
                        context: context.clone(),
                        templates: chunk.to_vec(),
                    });
                }
            }
        }
        out.shuffle(&mut rng);
        out
    }
}

#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub pool: TemplatePool,
    pub batches: Vec<Batch>,
}

/// Probes the templates, drops ineligible ones and forms the first epoch of batches.
pub fn build_batches(
    templates: &[TemplateInstance],
    backend: &dyn Backend,
    setup: &ProbeSetup,
    cfg: &TrainConfig,
) -> Result<BatchPlan, TrainError> {
    let resolved = resolve_all(templates, backend, setup)?;
    let pool = TemplatePool::from_resolved(resolved)?;
    let batches = pool.batches(cfg.batch_size, cfg.seed, 0);
    Ok(BatchPlan { pool, batches })
}

/// Stacked 4×2 blocks, one per template, rows (τ12(a), τ21(a), τ12(ā), τ21(ā)),
/// columns (x1, x2).
#[derive(Debug, Clone, PartialEq)]
pub struct ZetaMatrix {
    pub blocks: Vec<[[f64; 2]; 4]>,
}

impl ZetaMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (4 * self.blocks.len(), 2)
    }
}

pub fn build_zeta(batch: &Batch, params: &RefineParams) -> Result<ZetaMatrix, TrainError> {
    let blocks = par::map(&batch.templates, |t| -> Result<[[f64; 2]; 4], TrainError> {
        t.quad(Some(params))?.rows().ok_or(TrainError::Ineligible)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(ZetaMatrix { blocks })
}

fn block_l1(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

/// f_j = (1/|B|) Σ_i ‖ζ_i − ζ_j‖₁, self-distance included.
pub fn pool_f(zeta: &ZetaMatrix) -> Vec<f64> {
    let n = zeta.blocks.len();
    (0..n)
        .map(|j| {
            let d: Vec<f64> = zeta
                .blocks
                .iter()
                .map(|bi| block_l1(bi, &zeta.blocks[j]))
                .collect();
            par::pairwise_sum(&d) / n as f64
        })
        .collect()
}

/// r_j = −|C_j| under the refined scores.
pub fn reward(batch: &Batch, params: &RefineParams) -> Result<Vec<f64>, TrainError> {
    par::map(&batch.templates, |t| -> Result<f64, TrainError> {
        let q = t.quad(Some(params))?;
        let (_, _, c) = comparative_bias(&q)?;
        Ok(-c.abs())
    })
    .into_iter()
    .collect()
}

/// Largest of the eight refined subject scores (diagnostic only).
pub fn action_probability(t: &ResolvedTemplate, params: &RefineParams) -> Result<f64, TrainError> {
    t.quad(Some(params))?.max().ok_or(TrainError::Ineligible)
}

struct TemplateTrace {
    traces: Vec<crate::refine::Trace>,
    masses: [f64; 4],
    block: [[f64; 2]; 4],
}

fn trace_template(t: &ResolvedTemplate, params: &RefineParams) -> Result<TemplateTrace, TrainError> {
    let mut traces = Vec::with_capacity(4);
    let mut masses = [0.0; 4];
    let mut block = [[0.0; 2]; 4];
    for (row, v) in t.variants.iter().enumerate() {
        let tr = params.trace(&v.probs)?;
        let mass: f64 = v.probs.iter().sum();
        for s in 0..2 {
            let i = v.index[s].ok_or(TrainError::Ineligible)?;
            block[row][s] = mass * tr.q[i];
        }
        masses[row] = mass;
        traces.push(tr);
    }
    Ok(TemplateTrace {
        traces,
        masses,
        block,
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Returns (f, ∇θ Σ_j w_j log(f_j + η_f)).
pub fn weighted_log_pool_grad(
    batch: &Batch,
    params: &RefineParams,
    weights: &[f64],
) -> Result<(Vec<f64>, RefineParams), TrainError> {
    let n = batch.len();
    assert_eq!(weights.len(), n, "one weight per template");
    let traced = par::map(&batch.templates, |t| trace_template(t, params))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let zeta = ZetaMatrix {
        blocks: traced.iter().map(|t| t.block).collect(),
    };
    let f = pool_f(&zeta);
    let g: Vec<f64> = f
        .iter()
        .zip(weights)
        .map(|(f, w)| w / (f + POOL_FLOOR))
        .collect();

    // dL/dζ_i,e = (1/n) Σ_j (g_i + g_j) sign(ζ_i,e − ζ_j,e)
    let inv_n = 1.0 / n as f64;
    let idx: Vec<usize> = (0..n).collect();
    let partials = par::map(&idx, |&i| -> Result<RefineParams, TrainError> {
        let tt = &traced[i];
        let mut grad = RefineParams::zeros(params.k(), params.h());
        for row in 0..4 {
            let mut upstream = vec![0.0; params.k()];
            for s in 0..2 {
                let mut d = 0.0;
                for j in 0..n {
                    d += (g[i] + g[j]) * sign(tt.block[row][s] - zeta.blocks[j][row][s]);
                }
                let slot = batch.templates[i].variants[row].index[s].ok_or(TrainError::Ineligible)?;
                upstream[slot] += d * inv_n * tt.masses[row];
            }
            params.backward_trace(&tt.traces[row], &upstream, &mut grad)?;
        }
        Ok(grad)
    });
    let mut total = RefineParams::zeros(params.k(), params.h());
    for p in partials {
        let p = p?;
        for (t, x) in total.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *t += x;
        }
    }
    Ok((f, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean_reward: f64,
    /// Norm of Δθ before clipping.
    pub update_norm: f64,
    pub clipped: bool,
    pub f_mean: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub batch_size: usize,
}

/// One policy-gradient step. Returns the updated parameters.
pub fn step(
    params: &RefineParams,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(RefineParams, StepStats), TrainError> {
    let n = batch.len();
    if n < 2 {
        return Err(TrainError::BatchTooSmall(n));
    }
    let r = reward(batch, params)?;
    let weights: Vec<f64> = r.iter().map(|r| r / n as f64).collect();
    let (f, mut delta) = weighted_log_pool_grad(batch, params, &weights)?;
    if !delta.is_finite() {
        return Err(TrainError::NonFinite { step: 0 });
    }
    let norm = delta.norm();
    let clipped = norm > cfg.clip_norm;
    if clipped {
        let s = cfg.clip_norm / norm;
        delta.as_mut_slice().iter_mut().for_each(|x| *x *= s);
    }
    let mut next = params.clone();
    for (p, d) in next.as_mut_slice().iter_mut().zip(delta.as_slice()) {
        *p += cfg.lr * d;
    }
    let stats = StepStats {
        mean_reward: par::mean(&r).unwrap_or(0.0),
        update_norm: norm,
        clipped,
        f_mean: par::mean(&f).unwrap_or(0.0),
        f_min: f.iter().cloned().fold(f64::INFINITY, f64::min),
        f_max: f.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        batch_size: n,
    };
    Ok((next, stats))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub update_norm: f64,
    pub elapsed_ms: u64,
    pub skipped: usize,
    pub context: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub step: usize,
    pub mu: f64,
    pub avg_positional: f64,
    pub avg_attributive: f64,
    pub mean_abs_c: f64,
}

/// Receives log records, held-out evaluations and checkpoints during training.
pub trait TrainSink {
    fn on_step(&mut self, _rec: &StepRecord) -> Result<(), TrainError> {
        Ok(())
    }
    fn on_eval(&mut self, _eval: &EvalSummary) -> Result<(), TrainError> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _step: usize, _params: &RefineParams) -> Result<(), TrainError> {
        Ok(())
    }
}

pub struct NullSink;

impl TrainSink for NullSink {}

/// Writes `train_log.jsonl`, `eval_log.jsonl` and `ckpt_<step>.json` into a directory.
pub struct DirSink {
    dir: PathBuf,
    log: BufWriter<File>,
    evals: BufWriter<File>,
    pub last_checkpoint: Option<PathBuf>,
}

impl DirSink {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self, TrainError> {
        let dir = dir.as_ref().to_path_buf();
        let err = |e: std::io::Error| TrainError::Sink(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(&dir).map_err(err)?;
        let log = BufWriter::new(File::create(dir.join("train_log.jsonl")).map_err(err)?);
        let evals = BufWriter::new(File::create(dir.join("eval_log.jsonl")).map_err(err)?);
        Ok(DirSink {
            dir,
            log,
            evals,
            last_checkpoint: None,
        })
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.dir.join(format!("ckpt_{step:06}.json"))
    }
}

fn write_line<T: Serialize>(w: &mut impl Write, v: &T) -> Result<(), TrainError> {
    serde_json::to_writer(&mut *w, v).map_err(|e| TrainError::Sink(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| TrainError::Sink(e.to_string()))
}

impl TrainSink for DirSink {
    fn on_step(&mut self, rec: &StepRecord) -> Result<(), TrainError> {
        write_line(&mut self.log, rec)
    }

    fn on_eval(&mut self, eval: &EvalSummary) -> Result<(), TrainError> {
        write_line(&mut self.evals, eval)
    }

    fn on_checkpoint(&mut self, step: usize, params: &RefineParams) -> Result<(), TrainError> {
        let path = self.checkpoint_path(step);
        params
            .save(&path)
            .map_err(|e| TrainError::Sink(e.to_string()))?;
        self.log.flush().map_err(|e| TrainError::Sink(e.to_string()))?;
        self.evals.flush().map_err(|e| TrainError::Sink(e.to_string()))?;
        self.last_checkpoint = Some(path);
        Ok(())
    }
}

/// Bias of the held-out templates under `params`.
pub fn evaluate(
    heldout: &[ResolvedTemplate],
    params: &RefineParams,
    groups: &[String],
    step: usize,
) -> Result<EvalSummary, TrainError> {
    let (biases, skipped) = template_biases(heldout, Some(params))?;
    let report = aggregate(&biases, groups, skipped)?;
    let abs_c: Vec<f64> = biases.iter().map(|b| b.c.abs()).collect();
    Ok(EvalSummary {
        step,
        mu: report.mu,
        avg_positional: report.avg_positional,
        avg_attributive: report.avg_attributive,
        mean_abs_c: par::mean(&abs_c).unwrap_or(0.0),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: RefineParams,
    pub steps_run: usize,
    pub evals: Vec<EvalSummary>,
}

impl TrainOutcome {
    pub fn initial_eval(&self) -> Option<&EvalSummary> {
        self.evals.first()
    }

    pub fn final_eval(&self) -> Option<&EvalSummary> {
        self.evals.last()
    }
}

/// Runs `cfg.steps` updates over the pool, cycling through reshuffled
/// epochs. Held-out bias is measured before the first step, every
/// `eval_every` steps and after the last one (when `heldout` is non-empty).
pub fn train(
    pool: &TemplatePool,
    heldout: &[ResolvedTemplate],
    groups: &[String],
    cfg: &TrainConfig,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut params = RefineParams::init(cfg.k, cfg.h, cfg.seed)?;
    let mut evals = Vec::new();
    let do_eval = !heldout.is_empty();
    if do_eval {
        let e = evaluate(heldout, &params, groups, 0)?;
        sink.on_eval(&e)?;
        evals.push(e);
    }
    let start = Instant::now();
    let mut epoch = 0u64;
    let mut batches = pool.batches(cfg.batch_size, cfg.seed, epoch).into_iter();
    let mut done = 0;
    while done < cfg.steps {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                batches = pool.batches(cfg.batch_size, cfg.seed, epoch).into_iter();
                match batches.next() {
                    Some(b) => b,
                    None => {
                        return Err(TrainError::Config(
                            "pool yields no batch of at least 2 templates".into(),
                        ))
                    }
                }
            }
        };
        let (next, stats) = step(&params, &batch, cfg).map_err(|e| match e {
            TrainError::NonFinite { .. } => TrainError::NonFinite { step: done + 1 },
            other => other,
        })?;
        params = next;
        done += 1;
        sink.on_step(&StepRecord {
            step: done,
            mean_reward: stats.mean_reward,
            update_norm: stats.update_norm,
            elapsed_ms: start.elapsed().as_millis() as u64,
            skipped: pool.skipped,
            context: batch.context.clone(),
        })?;
        if do_eval && cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.steps {
            let e = evaluate(heldout, &params, groups, done)?;
            sink.on_eval(&e)?;
            evals.push(e);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
            sink.on_checkpoint(done, &params)?;
        }
    }
    if do_eval && done > 0 {
        let e = evaluate(heldout, &params, groups, done)?;
        sink.on_eval(&e)?;
        evals.push(e);
    }
    sink.on_checkpoint(done, &params)?;
    Ok(TrainOutcome {
        params,
        steps_run: done,
        evals,
    })
}
