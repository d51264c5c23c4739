use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum PanelError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("duplicate cell for unit `{unit}` at time `{time}`")]
    DuplicateCell { unit: String, time: String },

    #[error("degenerate panel: {0}")]
    DegeneratePanel(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("numeric overflow evaluating {family} at index {eta}")]
    NumericOverflow { family: &'static str, eta: f64 },

    #[error("degenerate projection: {0}")]
    DegenerateProjection(String),

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("separation: {0}")]
    Separation(String),

    #[error("not converged after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NotConverged { iterations: usize, gradient_norm: f64 },

    #[error("singular information matrix: {0}")]
    SingularInformation(String),

    #[error("invalid trimming parameter L={trim} for T={periods}")]
    InvalidTrim { trim: usize, periods: usize },

    #[error("invalid partial effect spec: {0}")]
    InvalidSpec(String),

    #[error("jackknife subfit on {subpanel} failed: {source}")]
    JackknifeSubfit {
        subpanel: String,
        #[source]
        source: Box<PanelError>,
    },

    #[error("study unreliable: {failures} of {replications} replications failed")]
    StudyUnreliable { failures: usize, replications: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl PanelError {
    /// True for errors caused by the input data rather than the optimizer.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            PanelError::Io(_)
                | PanelError::Parse(_)
                | PanelError::DuplicateCell { .. }
                | PanelError::DegeneratePanel(_)
                | PanelError::InvalidData(_)
                | PanelError::DegenerateProjection(_)
                | PanelError::SingularInformation(_)
        )
    }

    /// Short variant name, used to tally failures.
    pub fn kind(&self) -> &'static str {
        match self {
            PanelError::Io(_) => "io",
            PanelError::Parse(_) => "parse",
            PanelError::DuplicateCell { .. } => "duplicate-cell",
            PanelError::DegeneratePanel(_) => "degenerate-panel",
            PanelError::InvalidData(_) => "invalid-data",
            PanelError::NumericOverflow { .. } => "numeric-overflow",
            PanelError::DegenerateProjection(_) => "degenerate-projection",
            PanelError::NumericalBreakdown(_) => "numerical-breakdown",
            PanelError::Separation(_) => "separation",
            PanelError::NotConverged { .. } => "not-converged",
            PanelError::SingularInformation(_) => "singular-information",
            PanelError::InvalidTrim { .. } => "invalid-trim",
            PanelError::InvalidSpec(_) => "invalid-spec",
            PanelError::JackknifeSubfit { .. } => "jackknife-subfit",
            PanelError::StudyUnreliable { .. } => "study-unreliable",
            PanelError::Config(_) => "config",
        }
    }
}

pub type Result<T> = std::result::Result<T, PanelError>;
