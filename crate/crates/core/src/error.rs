use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the laboratory. Every variant maps to a stable
/// machine-readable code through [`Error::code`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("invalid construction spec: {0}")]
    InvalidSpec(String),
    #[error("stage mismatch: expected stage {expected}, found stage {found}")]
    StageMismatch { expected: usize, found: usize },
    #[error("stage {0} is not available")]
    StageUnavailable(usize),
    #[error("internal invariant violated: {0}")]
    InternalInvariant(String),
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("value could not be certified exact: {0}")]
    NotExact(String),
    #[error("spacers cannot certify an exact answer: {0}")]
    NonmonotoneSpacers(String),
    #[error("dense enumeration too large: {0}")]
    TooLarge(String),
    #[error("construction is not Sidon: {0}")]
    NotSidon(String),
    #[error("invalid C(nu) descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("cylinder atom enumeration over budget: {0}")]
    CombinatorialBudget(String),
    #[error("image cannot be resolved at any built stage: {0}")]
    Unresolvable(String),
    #[error("sampling region does not contain the event sets: {0}")]
    RegionTooSmall(String),
    #[error("stage {stage} has an empty window: {reason}")]
    InfeasibleWindow { stage: usize, reason: String },
    #[error("stage {stage}: permutation pieces for n={first} and n={second} collide")]
    PieceCollision { stage: usize, first: u64, second: u64 },
    #[error("orbit leaves the tower: {0}")]
    OrbitExit(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "invalid_spec",
            Error::StageMismatch { .. } => "stage_mismatch",
            Error::StageUnavailable(_) => "stage_unavailable",
            Error::InternalInvariant(_) => "internal_invariant",
            Error::BudgetExceeded(_) => "budget_exceeded",
            Error::NotExact(_) => "not_exact",
            Error::NonmonotoneSpacers(_) => "nonmonotone_spacers",
            Error::TooLarge(_) => "too_large",
            Error::NotSidon(_) => "not_sidon",
            Error::InvalidDescriptor(_) => "invalid_descriptor",
            Error::CombinatorialBudget(_) => "combinatorial_budget",
            Error::Unresolvable(_) => "unresolvable",
            Error::RegionTooSmall(_) => "region_too_small",
            Error::InfeasibleWindow { .. } => "infeasible_window",
            Error::PieceCollision { .. } => "piece_collision",
            Error::OrbitExit(_) => "orbit_exit",
            Error::Parse { .. } => "parse",
        }
    }

    /// True for errors that mean "infeasible under the configured budget"
    /// rather than bad input or a bug.
    pub fn is_budget(&self) -> bool {
        matches!(
            self,
            Error::BudgetExceeded(_)
                | Error::TooLarge(_)
                | Error::CombinatorialBudget(_)
                | Error::NotExact(_)
                | Error::NonmonotoneSpacers(_)
                | Error::Unresolvable(_)
                | Error::OrbitExit(_)
        )
    }
}
