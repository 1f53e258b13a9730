//! Error type shared across the calibration pipeline.

use thiserror::Error;

/// Failures surfaced by the library. Variants carry enough context to tell a
/// misconfigured call from data the algorithms genuinely cannot handle.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on arguments was violated (dimension mismatch, empty
    /// input, out-of-range parameter).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Histogram thresholding found no two-class structure to separate.
    #[error("no bimodal structure: intensity histogram has a single occupied level")]
    NoBimodalStructure,

    /// A region of interest shrank below the minimum pixel count needed for a
    /// stable level estimate.
    #[error("{region} region of interest too small: {pixels} px (need >= {min} px)")]
    EmptyRoi {
        region: &'static str,
        pixels: usize,
        min: usize,
    },

    /// A synthesized kernel had no positive mass after clamping.
    #[error("degenerate kernel: no positive mass to normalize")]
    DegenerateKernel,

    /// The edge-response linear system is rank deficient and no ridge term was
    /// supplied to regularize it.
    #[error("singular system: edge-response operator is rank deficient")]
    SingularSystem,

    /// No usable edge was detected in the analysis region.
    #[error("no edge found in the analysis region")]
    NoEdgeFound,

    /// The optimization loss became NaN or infinite; the run was aborted.
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    /// Inverse filtering would amplify frequencies without bound.
    #[error("divergent restoration: kernel spectrum has zeros and no noise floor was given")]
    DivergentRestoration,

    /// Too many grid cells failed to calibrate for the field to be usable.
    #[error("calibration failed: {failed} of {total} grid cells unusable")]
    CalibrationFailed { failed: usize, total: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for [`Error::InvalidInput`] with formatted context.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
