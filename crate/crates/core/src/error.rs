use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // graph invariants
    #[error("adjacency is not symmetric at ({row}, {col}): {forward} vs {backward}")]
    AsymmetricAdjacency {
        row: usize,
        col: usize,
        forward: f64,
        backward: f64,
    },
    #[error("adjacency entry ({row}, {col}) = {value} outside [0, 1]")]
    NegativeWeight { row: usize, col: usize, value: f64 },
    #[error("adjacency diagonal entry {index} = {value} is nonzero")]
    NonzeroDiagonal { index: usize, value: f64 },
    #[error("feature matrix has {rows} rows but graph has {nodes} nodes")]
    FeatureShapeMismatch { rows: usize, nodes: usize },
    #[error("graph has zero feature norm{}", .graph.map(|g| format!(" (graph {g})")).unwrap_or_default())]
    ZeroFeatures { graph: Option<usize> },
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    // tudataset
    #[error("{}:{line}: {message}", .file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("edge ({src}, {dst}) joins node of graph {src_graph} to node of graph {dst_graph}")]
    InconsistentIndicator {
        src: usize,
        dst: usize,
        src_graph: usize,
        dst_graph: usize,
    },
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // tensor / tape
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("loss must be 1x1, got {rows}x{cols}")]
    NotScalarLoss { rows: usize, cols: usize },
    #[error("index {index} out of range for {op} with bound {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    // gnn
    #[error("feature dimension mismatch: model expects {expected}, data has {found}")]
    FeatureDimMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("all sample weights are zero")]
    AllZeroWeights,
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    // gw
    #[error("gromov-wasserstein input is not symmetric")]
    NonSymmetricInput,
    #[error("sinkhorn scaling diverged (epsilon too small for the cost scale)")]
    SinkhornDiverged,
    #[error("gromov-wasserstein failed on prototype pair ({i}, {j}): {source}")]
    PairFailed {
        i: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },

    // distill
    #[error("basis needs at least two prototypes, got {0}")]
    KTooSmall(usize),
    #[error("prototype {index} has zero feature norm")]
    PrototypeZeroFeatures { index: usize },
    #[error("outer iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("basis schema version {found} not supported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("corrupt field `{field}`: {reason}")]
    CorruptField { field: String, reason: String },

    // adapt
    #[error("every graph in the domain is degenerate (zero features)")]
    AllGraphsDegenerate,

    // datagen
    #[error("shift spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_iteration(iteration: usize, source: Error) -> Self {
        Error::AtIteration {
            iteration,
            source: Box::new(source),
        }
    }

    /// Strips iteration/pair context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } | Error::PairFailed { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::SinkhornDiverged | Error::NonFinite(_) | Error::NotScalarLoss { .. }
        )
    }

    /// True for failures caused by malformed or incompatible data.
    pub fn is_data(&self) -> bool {
        matches!(
            self.root(),
            Error::AsymmetricAdjacency { .. }
                | Error::NegativeWeight { .. }
                | Error::NonzeroDiagonal { .. }
                | Error::FeatureShapeMismatch { .. }
                | Error::ZeroFeatures { .. }
                | Error::InvalidDomain(_)
                | Error::Parse { .. }
                | Error::InconsistentIndicator { .. }
                | Error::Io { .. }
                | Error::FeatureDimMismatch { .. }
                | Error::LabelOutOfRange { .. }
                | Error::AllGraphsDegenerate
                | Error::SchemaVersionMismatch { .. }
                | Error::CorruptField { .. }
                | Error::PrototypeZeroFeatures { .. }
                | Error::Json(_)
        )
    }
}
