//! Point-spread-function calibration from circle-grid captures.
//!
//! The library covers the full loop needed to characterize spatially varying
//! lens blur from a single photograph of a planar dot chart:
//!
//! 1. [`chart`] renders the calibration target and splits captures into a
//!    grid of analysis patches.
//! 2. [`optics`] and [`sensor`] simulate the forward path: field-dependent
//!    blur, mixed Gaussian-Poisson shot noise, and color-filter-array
//!    sampling with bilinear reconstruction.
//! 3. [`proxy`] builds a two-level sharp estimate of each patch from
//!    morphology and adaptive thresholding.
//! 4. [`flow`] and [`psf`] parameterize the unknowns: a coarse-to-fine
//!    displacement field that registers the proxy to the capture, and a
//!    nonnegative unit-sum kernel expressed through softmax logits or a
//!    sinusoidal coordinate network.
//! 5. [`optim`] jointly fits both by first-order descent on an L1
//!    intensity-plus-gradient reblurring objective.
//! 6. [`metrics`] and [`deblur`] score recovered kernels (PSNR, SSIM, MTF,
//!    slanted-edge SFR) and apply them in a tiled Wiener restoration.
//!
//! All raster data is `f64` in `[0, 1]`; operators that participate in the
//! optimization expose exact adjoints so gradients are analytic rather than
//! numeric.

pub mod chart;
pub mod deblur;
pub mod error;
pub mod field;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod ops;
pub mod optics;
pub mod optim;
pub mod proxy;
pub mod psf;
pub mod raster;
pub mod sensor;

pub use error::{Error, Result};
pub use raster::{FlowField, Image, Kernel};
