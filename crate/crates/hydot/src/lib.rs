//! Configuration-driven experiment harness around `hydot-core`.

pub mod config;
pub mod experiments;
pub mod output;
pub mod pipeline;

use thiserror::Error;

pub use config::{ExperimentConfig, ExperimentKind};
pub use experiments::{run, RunReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: hydot_core::Error,
    },

    #[error("writing {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Process exit code: 2 for configuration errors, 3 for numerical
    /// non-convergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Stage { source, .. } if is_convergence_failure(source) => 3,
            _ => 1,
        }
    }
}

fn is_convergence_failure(e: &hydot_core::Error) -> bool {
    use hydot_core::Error as E;
    match e {
        E::NotConverged { .. } | E::FieldSolve { .. } | E::NotPositiveDefinite => true,
        E::Compression { source, .. } => is_convergence_failure(source),
        _ => false,
    }
}

/// Attaches a stage name to core errors.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, HarnessError>;
}

impl<T> StageExt<T> for hydot_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, HarnessError> {
        self.map_err(|source| HarnessError::Stage { stage, source })
    }
}
