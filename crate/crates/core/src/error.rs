use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument lies outside the domain of a closed-form expression.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two indices refer to the same physical element.
    #[error("self-pair: element {0} coupled with itself, use the self-impedance instead")]
    SelfPair(usize),

    /// Elements of two distinct arrays occupy the same point.
    #[error("overlapping elements: row {row}, column {col} are co-located")]
    Overlap { row: usize, col: usize },

    /// Phase too close to a multiple of pi for the two-port impedance to exist.
    #[error("phase {phase} rad is within {guard} rad of a singular point")]
    Singularity { phase: f64, guard: f64 },

    #[error("ill-conditioned pivot block at block row {block} (layer {layer}): condition estimate {cond:.3e}")]
    IllConditioned { block: usize, layer: usize, cond: f64 },

    #[error("numerical failure in subband {subband}: {source}")]
    Subband {
        subband: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("degenerate channel for user {user} on subband {subband} with positive power")]
    DegenerateChannel { user: usize, subband: usize },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn in_subband(self, subband: usize) -> Self {
        Error::Subband {
            subband,
            source: Box::new(self),
        }
    }

    /// True for errors that come from user-provided configuration rather than
    /// numerics.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::Index(_) => true,
            Error::Subband { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
