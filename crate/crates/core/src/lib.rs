//! Bias measurement on under-specified questions and a post-hoc top-k
//! refine layer trained with a contextual-bandit policy gradient.

pub mod backend;
pub mod chart;
pub mod eval;
pub mod lexicon;
pub mod metrics;
pub mod par;
pub mod refine;
pub mod trainer;

pub use backend::{Backend, BackendError, ProbeResult, PromptStyle, TopKDistribution};
pub use lexicon::{Category, Lexicon, LexiconError, TemplateInstance};
pub use metrics::{BiasReport, MetricsError, ProbeSetup, ScoreQuad};
pub use refine::{RefineError, RefineParams};
