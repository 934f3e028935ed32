use scatternet::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("solver: {0}")]
    Solver(String),
    #[error("{0}")]
    Divergence(String),
    #[error("incompatible inputs: {0}")]
    Compatibility(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Compatibility(_) => 5,
            CliError::Io { .. } | CliError::Other(_) => 1,
        }
    }

    pub fn io(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.to_string();
        move |source| CliError::Io { context, source }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Solver { .. } | TrainError::Em(_) => CliError::Solver(e.to_string()),
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Mismatch { .. } => CliError::Compatibility(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use scatternet::em::EmError;

    #[test]
    fn exit_codes_follow_the_table() {
        let solver = TrainError::Solver { sample: "s".into(), source: EmError::Singular { pivot_ratio: 0.0 } };
        assert_eq!(CliError::from(solver).exit_code(), 3);
        assert_eq!(CliError::from(TrainError::Divergence { step: 4, loss: 1e13 }).exit_code(), 4);
        assert_eq!(CliError::from(TrainError::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(TrainError::Mismatch { expected: 1, actual: 2 }).exit_code(), 5);
        assert_eq!(CliError::Compatibility("x".into()).exit_code(), 5);
    }
}
