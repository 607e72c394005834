use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("time grid must be strictly increasing from 0 (violated at index {index})")]
    NonIncreasingGrid { index: usize },
    #[error("mark kernel at step {step} is not a probability vector (sum {sum})")]
    KernelNotProbability { step: usize, sum: f64 },
    #[error("compensator increment ΔA at step {step} is {value}, expected a value in [0, 1)")]
    CompensatorOutOfRange { step: usize, value: f64 },
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },
    #[error("mark space must contain at least one mark")]
    EmptyMarkSpace,
    #[error("duplicate mark label {0:?}")]
    DuplicateMark(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("scenario tree would have {nodes} nodes, above the cap of {cap}")]
    TreeTooLarge { nodes: u128, cap: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error("field domain mismatch: {0}")]
    FieldDomainMismatch(String),
    #[error("field value at node {node} is not finite")]
    NonFinite { node: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeneratorError {
    #[error("length mismatch: u has {u} entries, φ has {phi}")]
    LengthMismatch { u: usize, phi: usize },
    #[error("inf-convolution requires a convex (or concave, mirrored) generator")]
    NotConvex,
    #[error("inner minimization of the inf-convolution did not converge: {0}")]
    MinimizerDiverged(String),
    #[error("invalid generator parameter: {0}")]
    InvalidParameter(String),
    #[error("user table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("implicit fixed point diverged at node {node} after {iterations} iterations (β̃·ΔA may be too large; try the explicit scheme)")]
    FixedPointDiverged { node: usize, iterations: usize },
    #[error("step integration at node {node} failed to reach tolerance")]
    IntegrationFailed { node: usize },
    #[error("obstacle exceeds terminal value at leaf {node}")]
    ObstacleAboveTerminal { node: usize },
    #[error("stopping rule is not adapted to the tree: {0}")]
    RuleNotAdapted(String),
    #[error("scheme {scheme} is not available here: {reason}")]
    SchemeUnsupported { scheme: &'static str, reason: &'static str },
    #[error("driver produced a non-finite value at node {node}")]
    NonFinite { node: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("enumeration of {count} candidates exceeds the cap of {cap}")]
    EnumerationTooLarge { count: u128, cap: u128 },
    #[error("brute-force utility needs a finite constraint grid")]
    ContinuousConstraintSet,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PricingError {
    #[error("price positivity violated at step {step}: one-step factor {factor}")]
    PricePositivityViolated { step: usize, factor: f64 },
    #[error("constraint set is empty")]
    EmptyConstraintSet,
    #[error("invalid market: {0}")]
    InvalidMarket(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Umbrella error for callers that drive several modules at once.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Pricing(#[from] PricingError),
}

impl Error {
    /// True for failures of the numerical machinery itself (as opposed to
    /// invalid inputs).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Solver(SolverError::FixedPointDiverged { .. })
                | Error::Solver(SolverError::IntegrationFailed { .. })
                | Error::Solver(SolverError::NonFinite { .. })
                | Error::Solver(SolverError::Generator(GeneratorError::MinimizerDiverged(_)))
                | Error::Generator(GeneratorError::MinimizerDiverged(_))
                | Error::Pricing(PricingError::Solver(_))
                | Error::Oracle(OracleError::Solver(_))
        )
    }
}
