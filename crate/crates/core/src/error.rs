use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("lattice of dimension {dim} and side {side} overflows the vertex index space")]
    IndexOverflow { dim: usize, side: usize },

    #[error("line {line}: cannot parse edge: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: self-edge at vertex {vertex}")]
    SelfEdge { line: usize, vertex: usize },

    #[error("line {line}: non-positive weight {weight}")]
    NonPositiveWeight { line: usize, weight: f64 },

    #[error("line {line}: duplicate edge ({u}, {v})")]
    DuplicateEdge { line: usize, u: usize, v: usize },

    #[error("line {line}: edge ({u}, {v}) listed with weights {first} and {second}")]
    NonSymmetric { line: usize, u: usize, v: usize, first: f64, second: f64 },

    #[error("graph is disconnected ({components} components)")]
    Disconnected { components: usize },

    #[error("vertex {0} out of range")]
    VertexOutOfRange(usize),

    #[error("domain is empty")]
    EmptyDomain,

    #[error("target set is empty")]
    EmptySet,

    #[error("vertex {0} is not inside the domain")]
    NotInDomain(usize),

    #[error("recurrent domain: the component of vertex {vertex} has no escape")]
    RecurrentDomain { vertex: usize },

    #[error("conjugate gradient stalled: relative residual {residual:e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },

    #[error("ill-conditioned variational system: residual {residual:e}")]
    IllConditioned { residual: f64 },

    #[error("{what}: size {size} exceeds the limit {limit}")]
    TooLarge { what: &'static str, size: usize, limit: usize },

    #[error("graph is not a lattice box")]
    NotLattice,

    #[error("spectral sampler needs unit weights and a one-layer Dirichlet halo")]
    NonUnitWeights,

    #[error("margin violation: {0}")]
    Margin(String),

    #[error("spectral radius {0} too close to 1: loop measure is infinite")]
    Recurrence(f64),

    #[error("loop truncation tail {tail:e} exceeds the budget {budget:e}; raise n_max")]
    TailBudget { tail: f64, budget: f64 },

    #[error("sets overlap at vertex {0}")]
    Overlap(usize),

    #[error("base vertex {0} is not a packing site")]
    BaseNotSite(usize),

    #[error("fit needs at least 3 points with positive values, got {0}")]
    TooFewPoints(usize),

    #[error("io: {0}")]
    Io(String),

    #[error("replica {replica}: {source}")]
    Replica { replica: u64, source: Box<Error> },
}

impl Error {
    /// Stable machine-readable code, one per variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::IndexOverflow { .. } => "index-overflow",
            Error::Parse { .. } => "parse",
            Error::SelfEdge { .. } => "self-edge",
            Error::NonPositiveWeight { .. } => "non-positive-weight",
            Error::DuplicateEdge { .. } => "duplicate-edge",
            Error::NonSymmetric { .. } => "non-symmetric",
            Error::Disconnected { .. } => "disconnected",
            Error::VertexOutOfRange(_) => "vertex-out-of-range",
            Error::EmptyDomain => "empty-domain",
            Error::EmptySet => "empty-set",
            Error::NotInDomain(_) => "not-in-domain",
            Error::RecurrentDomain { .. } => "recurrent-domain",
            Error::NotConverged { .. } => "not-converged",
            Error::IllConditioned { .. } => "ill-conditioned",
            Error::TooLarge { .. } => "too-large",
            Error::NotLattice => "not-lattice",
            Error::NonUnitWeights => "non-unit-weights",
            Error::Margin(_) => "margin",
            Error::Recurrence(_) => "recurrence",
            Error::TailBudget { .. } => "tail-budget",
            Error::Overlap(_) => "overlap",
            Error::BaseNotSite(_) => "base-not-site",
            Error::TooFewPoints(_) => "too-few-points",
            Error::Io(_) => "io",
            Error::Replica { source, .. } => source.code(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
