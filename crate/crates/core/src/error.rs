use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid polyline: {0}")]
    InvalidPolyline(&'static str),

    #[error("invalid box extents: half_length {half_length}, half_width {half_width}")]
    InvalidBox { half_length: f64, half_width: f64 },

    #[error("degenerate candidate")]
    DegenerateCandidate,

    #[error("empty candidate group")]
    EmptyCandidateGroup,

    #[error("episode finished")]
    EpisodeFinished,

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("support mismatch: candidate {index} has zero probability under one of the distributions")]
    SupportMismatch { index: usize },

    #[error("non-stochastic kernel at state {state}, candidate {candidate}: row sums to {sum}")]
    NonStochasticKernel { state: usize, candidate: usize, sum: f64 },

    #[error("variance of the control variate is zero")]
    ZeroVariance,

    #[error("singular linear system")]
    Singular,

    #[error("non-finite loss in round {round}, epoch {epoch}: {detail}")]
    NonFiniteLoss { round: usize, epoch: usize, detail: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("decision step {step} is beyond the end of the episode ({last} decisions)")]
    StepBeyondEpisode { step: usize, last: usize },
}
