use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    TrainingDiverged { iteration: usize, loss: f64 },
    #[error("integration diverged at step {step}")]
    Diverged { step: usize },
    #[error("correlation undefined: input vector is constant")]
    UndefinedCorrelation,
    #[error("effect size undefined: pooled standard deviation is zero")]
    UndefinedEffect,
    #[error("hypothesis not satisfied: {0}")]
    Hypothesis(String),
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid;
