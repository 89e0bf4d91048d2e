//! The debiasing layer: a residual map from a top-k probability vector to a
//! reweighted distribution over the same k slots.
//!
//! ```text
//! p̂ = p / Σp
//! z = log(p̂ + η) + W2 · tanh(W1 · p̂ + b1) + b2
//! q = softmax(z)
//! ```
//!
//! Slot `i` is the i-th most probable base-model token; the layer has no
//! notion of token identity.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LOG_FLOOR: f64 = 1e-12;
pub const CHECKPOINT_FORMAT: u32 = 1;
/// Half-width of the uniform draw for the output projection at init.
pub const OUTPUT_INIT_SCALE: f64 = 1e-3;
/// Inputs live on the simplex, so the hidden layer needs O(1) weights for
/// its units to vary across inputs.
pub const HIDDEN_INIT_SCALE: f64 = 2.0;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("k={0} must be at least 2")]
    TooSmallK(usize),
    #[error("hidden width must be at least 1")]
    ZeroHidden,
    #[error("input has {got} entries, layer expects {want}")]
    Dimension { got: usize, want: usize },
    #[error("input must be finite and non-negative with positive sum")]
    InvalidInput,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Weights of the layer, stored flat as `[W1 (h×k) | b1 (h) | W2 (k×h) | b2 (k)]`,
/// matrices row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineParams {
    k: usize,
    h: usize,
    data: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type RefineGrad = RefineParams;

pub fn param_count(k: usize, h: usize) -> usize {
    2 * h * k + h + k
}

impl RefineParams {
    pub fn zeros(k: usize, h: usize) -> Self {
        RefineParams {
            k,
            h,
            data: vec![0.0; param_count(k, h)],
        }
    }

    /// Near-identity start: hidden layer drawn from U(±2), output
    /// projection from U(±1e-3).
    pub fn init(k: usize, h: usize, seed: u64) -> Result<Self, RefineError> {
        if k < 2 {
            return Err(RefineError::TooSmallK(k));
        }
        if h == 0 {
            return Err(RefineError::ZeroHidden);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(k, h);
        let bound = HIDDEN_INIT_SCALE;
        for w in p.w1_mut() {
            *w = rng.random_range(-bound..bound);
        }
        for b in p.b1_mut() {
            *b = rng.random_range(-bound..bound);
        }
        for w in p.w2_mut() {
            *w = rng.random_range(-OUTPUT_INIT_SCALE..OUTPUT_INIT_SCALE);
        }
        for b in p.b2_mut() {
            *b = rng.random_range(-OUTPUT_INIT_SCALE..OUTPUT_INIT_SCALE);
        }
        Ok(p)
    }

    pub fn from_parts(
        k: usize,
        h: usize,
        w1: &[f64],
        b1: &[f64],
        w2: &[f64],
        b2: &[f64],
    ) -> Result<Self, RefineError> {
        if k < 2 {
            return Err(RefineError::TooSmallK(k));
        }
        if h == 0 {
            return Err(RefineError::ZeroHidden);
        }
        if w1.len() != h * k || b1.len() != h || w2.len() != k * h || b2.len() != k {
            return Err(RefineError::Checkpoint(format!(
                "matrix shapes do not match k={k}, h={h}"
            )));
        }
        let data: Vec<f64> = [w1, b1, w2, b2].concat();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(RefineError::Checkpoint("non-finite parameter".into()));
        }
        Ok(RefineParams { k, h, data })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn offsets(&self) -> [usize; 4] {
        let (k, h) = (self.k, self.h);
        [0, h * k, h * k + h, 2 * h * k + h]
    }

    pub fn w1(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[0]..o[1]]
    }

    pub fn b1(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[1]..o[2]]
    }

    pub fn w2(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[2]..o[3]]
    }

    pub fn b2(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[3]..]
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o[0]..o[1]]
    }

    pub fn b1_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o[1]..o[2]]
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o[2]..o[3]]
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o[3]..]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn forward(&self, p: &[f64]) -> Result<RefinedDistribution, RefineError> {
        Ok(RefinedDistribution {
            probs: self.trace(p)?.q,
        })
    }

    /// Forward pass keeping the intermediates needed by [`Self::backward_trace`].
    pub fn trace(&self, p: &[f64]) -> Result<Trace, RefineError> {
        let (k, h) = (self.k, self.h);
        if p.len() != k {
            return Err(RefineError::Dimension {
                got: p.len(),
                want: k,
            });
        }
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(RefineError::InvalidInput);
        }
        let total: f64 = p.iter().sum();
        if !(total > 0.0) {
            return Err(RefineError::InvalidInput);
        }
        let p_hat: Vec<f64> = p.iter().map(|x| x / total).collect();

        let (w1, b1, w2, b2) = (self.w1(), self.b1(), self.w2(), self.b2());
        let hidden: Vec<f64> = (0..h)
            .map(|j| {
                let row = &w1[j * k..(j + 1) * k];
                let u: f64 = row.iter().zip(&p_hat).map(|(w, x)| w * x).sum::<f64>() + b1[j];
                u.tanh()
            })
            .collect();
        let z: Vec<f64> = (0..k)
            .map(|i| {
                let row = &w2[i * h..(i + 1) * h];
                (p_hat[i] + LOG_FLOOR).ln()
                    + row.iter().zip(&hidden).map(|(w, a)| w * a).sum::<f64>()
                    + b2[i]
            })
            .collect();
        let q = softmax(&z);
        Ok(Trace { p_hat, hidden, q })
    }

    /// Gradient of `upstream · forward(p)` with respect to the parameters.
    pub fn backward(&self, p: &[f64], upstream: &[f64]) -> Result<RefineGrad, RefineError> {
        let trace = self.trace(p)?;
        let mut grad = RefineParams::zeros(self.k, self.h);
        self.backward_trace(&trace, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Accumulates (adds) the parameter gradient for one traced input into `grad`.
    pub fn backward_trace(
        &self,
        trace: &Trace,
        upstream: &[f64],
        grad: &mut RefineGrad,
    ) -> Result<(), RefineError> {
        let (k, h) = (self.k, self.h);
        if upstream.len() != k {
            return Err(RefineError::Dimension {
                got: upstream.len(),
                want: k,
            });
        }
        if grad.k != k || grad.h != h {
            return Err(RefineError::Dimension {
                got: grad.k,
                want: k,
            });
        }
        let q = &trace.q;
        let gq: f64 = upstream.iter().zip(q).map(|(g, q)| g * q).sum();
        // Softmax Jacobian: dz_i = q_i (g_i - Σ_j g_j q_j).
        let dz: Vec<f64> = q.iter().zip(upstream).map(|(q, g)| q * (g - gq)).collect();

        let w2 = self.w2();
        {
            let gw2 = grad.w2_mut();
            for i in 0..k {
                for j in 0..h {
                    gw2[i * h + j] += dz[i] * trace.hidden[j];
                }
            }
        }
        for (g, d) in grad.b2_mut().iter_mut().zip(&dz) {
            *g += d;
        }
        let du: Vec<f64> = (0..h)
            .map(|j| {
                let da: f64 = (0..k).map(|i| w2[i * h + j] * dz[i]).sum();
                let a = trace.hidden[j];
                da * (1.0 - a * a)
            })
            .collect();
        for (g, d) in grad.b1_mut().iter_mut().zip(&du) {
            *g += d;
        }
        let gw1 = grad.w1_mut();
        for j in 0..h {
            for i in 0..k {
                gw1[j * k + i] += du[j] * trace.p_hat[i];
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let rows = |m: &[f64], r: usize, c: usize| -> Vec<Vec<f64>> {
            (0..r).map(|i| m[i * c..(i + 1) * c].to_vec()).collect()
        };
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            k: self.k,
            h: self.h,
            w1: rows(self.w1(), self.h, self.k),
            b1: self.b1().to_vec(),
            w2: rows(self.w2(), self.k, self.h),
            b2: self.b2().to_vec(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, RefineError> {
        if c.format != CHECKPOINT_FORMAT {
            return Err(RefineError::Checkpoint(format!(
                "unsupported format {} (expected {CHECKPOINT_FORMAT})",
                c.format
            )));
        }
        if c.w1.iter().any(|r| r.len() != c.k) || c.w2.iter().any(|r| r.len() != c.h) {
            return Err(RefineError::Checkpoint("ragged matrix rows".into()));
        }
        Self::from_parts(
            c.k,
            c.h,
            &c.w1.concat(),
            &c.b1,
            &c.w2.concat(),
            &c.b2,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RefineError> {
        let c: Checkpoint =
            serde_json::from_str(text).map_err(|e| RefineError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RefineError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|source| RefineError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RefineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| RefineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub p_hat: Vec<f64>,
    pub hidden: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedDistribution {
    pub probs: Vec<f64>,
}

/// On-disk parameter document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub k: usize,
    pub h: usize,
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q).ln())
        .sum()
}
