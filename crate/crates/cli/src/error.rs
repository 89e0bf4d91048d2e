use refinelm::backend::BackendError;
use refinelm::chart::ChartError;
use refinelm::eval::EvalError;
use refinelm::trainer::TrainError;
use refinelm::{LexiconError, MetricsError, RefineError};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Backend(String),
    /// Prompt ids absent from the cache, listed in full.
    Misses(Vec<String>),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) | CliError::Misses(_) => EXIT_DATA,
            CliError::Backend(_) => EXIT_BACKEND,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Backend(m) => write!(f, "backend error: {m}"),
            CliError::Misses(ids) => {
                writeln!(f, "data error: {} prompts missing from cache", ids.len())?;
                for id in ids {
                    writeln!(f, "  missing prompt_id {id}")?;
                }
                Ok(())
            }
        }
    }
}

impl From<LexiconError> for CliError {
    fn from(e: LexiconError) -> Self {
        match e {
            LexiconError::SplitConfig(_) | LexiconError::CategoryMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Transport { .. } | BackendError::Status(_) => {
                CliError::Backend(e.to_string())
            }
            BackendError::CacheMiss { prompt_id } => CliError::Misses(vec![prompt_id]),
            BackendError::InvalidRequest(_)
            | BackendError::MissingPlaceholder(_)
            | BackendError::Synthetic(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Misses(ids) => CliError::Misses(ids),
            MetricsError::Backend(b) => b.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<RefineError> for CliError {
    fn from(e: RefineError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Metrics(m) => m.into(),
            TrainError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Backend(b) => b.into(),
            EvalError::BadCutoff => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ChartError> for CliError {
    fn from(e: ChartError) -> Self {
        CliError::Data(e.to_string())
    }
}
