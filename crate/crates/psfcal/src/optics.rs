//! Synthetic optics: field-dependent blur kernels and sensor noise.
//!
//! Ground-truth kernels are Gaussian mixtures whose amplitudes, centroid
//! offsets, and covariances are quadratic polynomials of the normalized
//! field position, so blur grows and skews smoothly toward the frame edges
//! the way real lens aberrations do. Blur is applied patch-wise with a
//! locally constant kernel, matching the model the calibrator fits.
//!
//! Noise is signal-dependent: a Poisson term on scaled intensity plus
//! additive Gaussian read noise. Every pixel draws from its own counter-based
//! RNG stream, so results are independent of evaluation order and identical
//! across thread counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{grid_cells, PsfField};
use crate::ops::conv2d;
use crate::raster::{Image, Kernel};

/// Quadratic polynomial in normalized field position `(u, v)`:
/// `c0 + cu*u + cv*v + cuu*u^2 + cuv*u*v + cvv*v^2`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct FieldPoly {
    pub c0: f64,
    #[serde(default)]
    pub cu: f64,
    #[serde(default)]
    pub cv: f64,
    #[serde(default)]
    pub cuu: f64,
    #[serde(default)]
    pub cuv: f64,
    #[serde(default)]
    pub cvv: f64,
}

impl FieldPoly {
    pub fn constant(c0: f64) -> Self {
        FieldPoly {
            c0,
            ..Default::default()
        }
    }

    pub fn eval(&self, u: f64, v: f64) -> f64 {
        self.c0 + self.cu * u + self.cv * v + self.cuu * u * u + self.cuv * u * v + self.cvv * v * v
    }
}

/// One Gaussian mixture component of the blur model. All quantities are in
/// kernel pixels; covariances in pixels squared.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub amplitude: FieldPoly,
    pub offset_x: FieldPoly,
    pub offset_y: FieldPoly,
    pub cov_xx: FieldPoly,
    pub cov_xy: FieldPoly,
    pub cov_yy: FieldPoly,
}

/// Field-dependent blur model for one lens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AberrationSpec {
    /// Side of the rasterized kernels (odd).
    pub kernel_side: usize,
    pub components: Vec<GaussianComponent>,
    /// Per-channel focus factor; channel `c` scales every covariance by
    /// `chroma[c]^2`, modeling longitudinal chromatic aberration.
    #[serde(default = "default_chroma")]
    pub chroma: [f64; 3],
}

fn default_chroma() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

impl AberrationSpec {
    /// A plausible default lens: an isotropic core that grows anisotropic
    /// off-axis plus an outward-displaced halo that vanishes at the center.
    /// At field (0, 0) the model is a single isotropic Gaussian.
    pub fn default_lens(kernel_side: usize) -> Self {
        AberrationSpec {
            kernel_side,
            components: vec![
                GaussianComponent {
                    amplitude: FieldPoly::constant(1.0),
                    offset_x: FieldPoly {
                        cu: 0.5,
                        ..Default::default()
                    },
                    offset_y: FieldPoly {
                        cv: 0.5,
                        ..Default::default()
                    },
                    cov_xx: FieldPoly {
                        c0: 1.0,
                        cuu: 2.0,
                        ..Default::default()
                    },
                    cov_xy: FieldPoly {
                        cuv: 1.0,
                        ..Default::default()
                    },
                    cov_yy: FieldPoly {
                        c0: 1.0,
                        cvv: 2.0,
                        ..Default::default()
                    },
                },
                GaussianComponent {
                    amplitude: FieldPoly {
                        cuu: 0.22,
                        cvv: 0.22,
                        ..Default::default()
                    },
                    offset_x: FieldPoly {
                        cu: 1.3,
                        ..Default::default()
                    },
                    offset_y: FieldPoly {
                        cv: 1.3,
                        ..Default::default()
                    },
                    cov_xx: FieldPoly::constant(4.0),
                    cov_xy: FieldPoly::constant(0.0),
                    cov_yy: FieldPoly::constant(4.0),
                },
            ],
            chroma: [0.92, 1.0, 1.1],
        }
    }
}

/// Rasterizes the mixture at `field_pos` on the kernel grid with unit
/// chromatic factor; see [`synth_psf_channel`] for per-channel kernels.
pub fn synth_psf(spec: &AberrationSpec, field_pos: (f64, f64)) -> Result<Kernel> {
    synth_with_scale(spec, field_pos, 1.0)
}

/// Rasterizes the mixture for one color channel, applying the chromatic
/// covariance factor `chroma[channel]^2`.
pub fn synth_psf_channel(
    spec: &AberrationSpec,
    field_pos: (f64, f64),
    channel: usize,
) -> Result<Kernel> {
    if channel > 2 {
        return Err(Error::invalid("channel index must be 0, 1, or 2"));
    }
    let s = spec.chroma[channel];
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::invalid("chroma factors must be positive"));
    }
    synth_with_scale(spec, field_pos, s * s)
}

fn synth_with_scale(spec: &AberrationSpec, field_pos: (f64, f64), cov_scale: f64) -> Result<Kernel> {
    let side = spec.kernel_side;
    if side == 0 || side % 2 == 0 {
        return Err(Error::invalid(format!("kernel side {side} must be odd")));
    }
    if spec.components.is_empty() {
        return Err(Error::invalid("aberration model needs at least one component"));
    }
    let (u, v) = field_pos;
    let r = (side / 2) as f64;
    let mut weights = vec![0.0; side * side];
    for comp in &spec.components {
        let amp = comp.amplitude.eval(u, v);
        if amp == 0.0 {
            continue;
        }
        let mx = comp.offset_x.eval(u, v);
        let my = comp.offset_y.eval(u, v);
        let sxx = comp.cov_xx.eval(u, v) * cov_scale;
        let sxy = comp.cov_xy.eval(u, v) * cov_scale;
        let syy = comp.cov_yy.eval(u, v) * cov_scale;
        let det = sxx * syy - sxy * sxy;
        if !(det > 0.0) || !(sxx > 0.0) {
            return Err(Error::invalid(format!(
                "covariance [[{sxx}, {sxy}], [{sxy}, {syy}]] at field ({u}, {v}) is not positive definite"
            )));
        }
        // Inverse covariance for the exponent.
        let (ixx, ixy, iyy) = (syy / det, -sxy / det, sxx / det);
        for j in 0..side {
            let dy = j as f64 - r - my;
            for i in 0..side {
                let dx = i as f64 - r - mx;
                let q = ixx * dx * dx + 2.0 * ixy * dx * dy + iyy * dy * dy;
                weights[j * side + i] += amp * (-0.5 * q).exp();
            }
        }
    }
    Kernel::from_weights(side, &weights)
}

/// Ground-truth kernel grid: evaluates the model at every cell center of a
/// `rows x cols` field for `channels` color planes.
pub fn synth_field(
    spec: &AberrationSpec,
    rows: usize,
    cols: usize,
    channels: usize,
) -> Result<PsfField> {
    if channels == 0 || channels > 3 {
        return Err(Error::invalid("field channels must be 1..=3"));
    }
    let mut field = PsfField::new(rows, cols, channels);
    for row in 0..rows {
        for col in 0..cols {
            // Cell centers of a unit tiling; matches patch field positions
            // for images whose size divides evenly.
            let u = 2.0 * (col as f64 + 0.5) / cols as f64 - 1.0;
            let v = 2.0 * (row as f64 + 0.5) / rows as f64 - 1.0;
            for c in 0..channels {
                let k = if channels == 1 {
                    synth_psf(spec, (u, v))?
                } else {
                    synth_psf_channel(spec, (u, v), c)?
                };
                field.set(row, col, c, k);
            }
        }
    }
    Ok(field)
}

/// Applies a per-region blur: each grid cell is convolved with its own
/// kernel. Cell aprons read true neighboring pixels inside the image and
/// replicate at the frame borders, so cells agree with a full-frame
/// convolution by their local kernel.
pub fn blur_field(img: &Image, field: &PsfField) -> Result<Image> {
    if field.channels() != img.channels() {
        return Err(Error::invalid(format!(
            "field has {} channels, image has {}",
            field.channels(),
            img.channels()
        )));
    }
    if !field.is_complete() {
        return Err(Error::invalid("blur_field requires a complete kernel grid"));
    }
    let cells = grid_cells(img.width(), img.height(), field.grid_rows(), field.grid_cols())?;
    let mut out = Image::new(img.width(), img.height(), img.channels());
    for cell in cells {
        for c in 0..img.channels() {
            let k = field.kernel(cell.row, cell.col, c).expect("complete field");
            if k.side() > cell.width.min(cell.height) {
                return Err(Error::invalid(format!(
                    "kernel side {} exceeds cell {}x{}",
                    k.side(),
                    cell.width,
                    cell.height
                )));
            }
            let a = k.radius() as isize;
            let plane = if img.channels() == 1 {
                img.clone()
            } else {
                img.plane(c)
            };
            let ext = plane.crop_replicated(
                cell.x0 as isize - a,
                cell.y0 as isize - a,
                cell.width + 2 * a as usize,
                cell.height + 2 * a as usize,
            );
            let blurred = conv2d(&ext, k);
            for y in 0..cell.height {
                for x in 0..cell.width {
                    out.set(
                        cell.x0 + x,
                        cell.y0 + y,
                        c,
                        blurred.get(x + a as usize, y + a as usize, 0),
                    );
                }
            }
        }
    }
    Ok(out)
}

/// Mixed noise model: `out = Poisson(poisson_scale * v) / poisson_scale +
/// Normal(0, gaussian_var)`, clamped to `[0, 1]`. Variance at intensity `v`
/// is `v / poisson_scale + gaussian_var` before clamping.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Variance of the additive Gaussian term.
    pub gaussian_var: f64,
    /// Photon scale: larger values mean less shot noise.
    pub poisson_scale: f64,
}

impl NoiseSpec {
    /// Splits a target total variance evenly between the Gaussian and
    /// Poisson terms, with the Poisson share computed at `reference_level`.
    pub fn split_even(total_var: f64, reference_level: f64) -> Self {
        assert!(total_var > 0.0 && reference_level > 0.0);
        NoiseSpec {
            gaussian_var: total_var / 2.0,
            poisson_scale: reference_level / (total_var / 2.0),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gaussian_var >= 0.0) || !self.gaussian_var.is_finite() {
            return Err(Error::invalid("gaussian_var must be finite and nonnegative"));
        }
        if !(self.poisson_scale > 0.0) {
            return Err(Error::invalid("poisson_scale must be positive"));
        }
        Ok(())
    }
}

/// Poisson means below this use exact inversion sampling; above it, a
/// rounded normal approximation.
const POISSON_NORMAL_CUTOFF: f64 = 50.0;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller on (0, 1] uniforms; explicit so the stream is pinned.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sample_poisson<R: Rng>(rng: &mut R, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    if mean < POISSON_NORMAL_CUTOFF {
        // Inversion by sequential search through the CDF.
        let mut p = (-mean).exp();
        let mut cdf = p;
        let mut k = 0u64;
        let u: f64 = rng.random();
        // The tail beyond ~mean + 40*sqrt(mean) is below f64 resolution;
        // the bound only guards against infinite loops on degenerate input.
        let cap = (mean + 40.0 * mean.sqrt() + 20.0) as u64;
        while u > cdf && k < cap {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        k as f64
    } else {
        let z = standard_normal(rng);
        (mean + mean.sqrt() * z).round().max(0.0)
    }
}

/// Adds signal-dependent sensor noise. Each sample `(x, y, c)` draws from an
/// independent stream keyed on `(seed, x, y, c)`, making the output
/// deterministic and order-independent. Input intensities are treated as
/// nonnegative; output is clamped to `[0, 1]`.
pub fn add_noise(img: &Image, spec: &NoiseSpec, seed: u64) -> Result<Image> {
    spec.validate()?;
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let sigma = spec.gaussian_var.sqrt();
    let mut out = Image::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let index = ((y * w + x) * ch + c) as u64;
                let stream = splitmix64(seed ^ splitmix64(index));
                let mut rng = ChaCha8Rng::seed_from_u64(stream);
                let v = img.get(x, y, c).max(0.0);
                let shot = sample_poisson(&mut rng, spec.poisson_scale * v) / spec.poisson_scale;
                let read = if sigma > 0.0 {
                    sigma * standard_normal(&mut rng)
                } else {
                    0.0
                };
                out.set(x, y, c, (shot + read).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}
