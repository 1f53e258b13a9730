//! Calibration target rendering and patch extraction.
//!
//! The target is a rectangular grid of dark circles on a bright background.
//! Circle boundaries present every edge orientation in every neighborhood,
//! which is what lets a local linear system pin down a full 2-D kernel
//! instead of just its profile across one edge direction.
//!
//! Rendering is supersampled: each pixel averages `supersample^2` coverage
//! tests, optionally through the inverse of an affine board-pose
//! perturbation, so edges are anti-aliased consistently with an ideal
//! area-sampling camera.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::grid_cells;
use crate::raster::Image;

/// Geometry and photometry of the circle-grid target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircleGridSpec {
    /// Grid rows (may be zero for a blank canvas).
    pub rows: usize,
    /// Grid columns (may be zero for a blank canvas).
    pub cols: usize,
    /// Center-to-center spacing in pixels.
    pub pitch: f64,
    /// Circle radius in pixels; must stay below `pitch / 2`.
    pub radius: f64,
    /// Blank border around the grid in pixels.
    pub margin: f64,
    /// Intensity inside circles.
    pub dark_level: f64,
    /// Background intensity.
    pub bright_level: f64,
    /// Subsamples per axis per pixel for anti-aliasing.
    pub supersample: u32,
}

impl Default for CircleGridSpec {
    fn default() -> Self {
        CircleGridSpec {
            rows: 3,
            cols: 3,
            pitch: 64.0,
            radius: 20.0,
            margin: 0.0,
            dark_level: 0.1,
            bright_level: 0.9,
            supersample: 8,
        }
    }
}

impl CircleGridSpec {
    /// Canvas size implied by the grid geometry.
    pub fn canvas_size(&self) -> (usize, usize) {
        let w = (self.cols as f64 * self.pitch + 2.0 * self.margin).round() as usize;
        let h = (self.rows as f64 * self.pitch + 2.0 * self.margin).round() as usize;
        (w, h)
    }

    /// Nominal (untransformed) center of circle `(row, col)`.
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.margin + (col as f64 + 0.5) * self.pitch,
            self.margin + (row as f64 + 0.5) * self.pitch,
        )
    }

    fn validate(&self) -> Result<()> {
        let has_circles = self.rows > 0 && self.cols > 0;
        if has_circles && (self.radius <= 0.0 || self.radius >= self.pitch / 2.0) {
            return Err(Error::invalid(format!(
                "circle radius {} must lie in (0, pitch/2 = {})",
                self.radius,
                self.pitch / 2.0
            )));
        }
        if !(0.0..=1.0).contains(&self.dark_level)
            || !(0.0..=1.0).contains(&self.bright_level)
            || self.dark_level >= self.bright_level
        {
            return Err(Error::invalid(
                "levels must satisfy 0 <= dark < bright <= 1",
            ));
        }
        if self.supersample == 0 {
            return Err(Error::invalid("supersample must be at least 1"));
        }
        let (w, h) = self.canvas_size();
        if w == 0 || h == 0 {
            return Err(Error::invalid("canvas collapses to zero size"));
        }
        Ok(())
    }
}

/// Affine pose perturbation of the chart plane: a point `p` on the nominal
/// chart appears at `A p + t` on the canvas. The linear part must have
/// positive determinant (no reflection or collapse).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "AffineRepr", into = "AffineRepr")]
pub struct AffinePerturbation {
    /// Row-major `[[a, b, tx], [c, d, ty]]`.
    m: [[f64; 3]; 2],
}

#[derive(Serialize, Deserialize)]
struct AffineRepr {
    matrix: [[f64; 3]; 2],
}

impl TryFrom<AffineRepr> for AffinePerturbation {
    type Error = Error;

    fn try_from(r: AffineRepr) -> Result<Self> {
        AffinePerturbation::new(r.matrix)
    }
}

impl From<AffinePerturbation> for AffineRepr {
    fn from(a: AffinePerturbation) -> AffineRepr {
        AffineRepr { matrix: a.m }
    }
}

impl AffinePerturbation {
    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if !(det > 1e-12) || !m.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "affine determinant {det} must be positive"
            )));
        }
        Ok(AffinePerturbation { m })
    }

    pub fn identity() -> Self {
        AffinePerturbation {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    /// Pure translation.
    pub fn translation(tx: f64, ty: f64) -> Self {
        AffinePerturbation {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    /// Rotation by `theta` radians and isotropic `scale` about `center`,
    /// followed by translation `(tx, ty)`.
    pub fn similarity(center: (f64, f64), theta: f64, scale: f64, tx: f64, ty: f64) -> Result<Self> {
        let (s, c) = theta.sin_cos();
        let (a, b) = (scale * c, -scale * s);
        let (cc, d) = (scale * s, scale * c);
        let (cx, cy) = center;
        AffinePerturbation::new([
            [a, b, cx - a * cx - b * cy + tx],
            [cc, d, cy - cc * cx - d * cy + ty],
        ])
    }

    /// Draws a small random pose: rotation within `±max_rot_deg`, isotropic
    /// scale in `[scale_lo, scale_hi]`, translation within `±max_shift`
    /// pixels, rotating about `center`.
    pub fn sample<R: Rng>(
        rng: &mut R,
        center: (f64, f64),
        max_rot_deg: f64,
        scale_lo: f64,
        scale_hi: f64,
        max_shift: f64,
    ) -> Result<Self> {
        let theta = rng.random_range(-max_rot_deg..=max_rot_deg).to_radians();
        let scale = rng.random_range(scale_lo..=scale_hi);
        let tx = rng.random_range(-max_shift..=max_shift);
        let ty = rng.random_range(-max_shift..=max_shift);
        AffinePerturbation::similarity(center, theta, scale, tx, ty)
    }

    /// Forward map: chart point to canvas point.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.m[0][2],
            self.m[1][0] * x + self.m[1][1] * y + self.m[1][2],
        )
    }

    /// Inverse map: canvas point back to chart coordinates.
    pub fn apply_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let det = self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0];
        let (rx, ry) = (x - self.m[0][2], y - self.m[1][2]);
        (
            (self.m[1][1] * rx - self.m[0][1] * ry) / det,
            (-self.m[1][0] * rx + self.m[0][0] * ry) / det,
        )
    }

    /// Largest singular value of the linear part: bounds how far the
    /// transform can stretch a radius.
    fn max_stretch(&self) -> f64 {
        let [[a, b, _], [c, d, _]] = self.m;
        let t = a * a + b * b + c * c + d * d;
        let det = a * d - b * c;
        let disc = ((t * t / 4.0) - det * det).max(0.0).sqrt();
        (t / 2.0 + disc).sqrt()
    }
}

/// Output of [`render_chart`]: the canvas plus a diagnostic count of circles
/// that may extend past it under the requested pose.
#[derive(Debug, Clone)]
pub struct ChartRender {
    pub image: Image,
    /// Circles whose transformed footprint is not certainly inside the
    /// canvas. Rendering still proceeds; callers may warn.
    pub clipped_circles: usize,
}

/// Renders the target, optionally under an affine pose perturbation.
/// Supersampled coverage makes circle boundaries sub-pixel accurate.
pub fn render_chart(
    spec: &CircleGridSpec,
    xform: Option<&AffinePerturbation>,
) -> Result<ChartRender> {
    spec.validate()?;
    let (w, h) = spec.canvas_size();
    let mut img = Image::new(w, h, 1);
    let ss = spec.supersample as usize;
    let inv_ss = 1.0 / ss as f64;
    let r2 = spec.radius * spec.radius;
    let has_circles = spec.rows > 0 && spec.cols > 0;
    for y in 0..h {
        for x in 0..w {
            let mut inside = 0usize;
            if has_circles {
                for sy in 0..ss {
                    let py = y as f64 + (sy as f64 + 0.5) * inv_ss;
                    for sx in 0..ss {
                        let px = x as f64 + (sx as f64 + 0.5) * inv_ss;
                        let (cxp, cyp) = match xform {
                            Some(t) => t.apply_inverse(px, py),
                            None => (px, py),
                        };
                        // Circles never overlap (radius < pitch/2), so only
                        // the nearest lattice center can contain the point.
                        let col = (((cxp - spec.margin) / spec.pitch - 0.5).round())
                            .clamp(0.0, spec.cols as f64 - 1.0) as usize;
                        let row = (((cyp - spec.margin) / spec.pitch - 0.5).round())
                            .clamp(0.0, spec.rows as f64 - 1.0) as usize;
                        let (ccx, ccy) = spec.center(row, col);
                        let (dx, dy) = (cxp - ccx, cyp - ccy);
                        if dx * dx + dy * dy <= r2 {
                            inside += 1;
                        }
                    }
                }
            }
            let coverage = inside as f64 / (ss * ss) as f64;
            // Lerp with a vanishing term at each end so full and zero
            // coverage reproduce the configured levels bitwise.
            let v = spec.dark_level * coverage + spec.bright_level * (1.0 - coverage);
            img.set(x, y, 0, v);
        }
    }
    let mut clipped = 0usize;
    if has_circles {
        let stretch = xform.map_or(1.0, |t| t.max_stretch());
        let reach = spec.radius * stretch;
        for row in 0..spec.rows {
            for col in 0..spec.cols {
                let (cx, cy) = spec.center(row, col);
                let (tx, ty) = match xform {
                    Some(t) => t.apply(cx, cy),
                    None => (cx, cy),
                };
                if tx - reach < 0.0
                    || ty - reach < 0.0
                    || tx + reach > w as f64
                    || ty + reach > h as f64
                {
                    clipped += 1;
                }
            }
        }
    }
    Ok(ChartRender {
        image: img,
        clipped_circles: clipped,
    })
}

/// Renders a two-level half-plane edge tilted `angle_deg` from vertical,
/// passing through the image center shifted by `offset` pixels along the
/// edge normal. Used to validate slanted-edge frequency-response analysis.
pub fn render_slanted_edge(
    width: usize,
    height: usize,
    angle_deg: f64,
    offset: f64,
    dark_level: f64,
    bright_level: f64,
    supersample: u32,
) -> Result<Image> {
    if width == 0 || height == 0 || supersample == 0 {
        return Err(Error::invalid("edge canvas and supersample must be positive"));
    }
    if dark_level >= bright_level {
        return Err(Error::invalid("edge needs dark < bright"));
    }
    let theta = angle_deg.to_radians();
    // Edge runs along (sin t, cos t); its normal points toward +x.
    let (nx, ny) = (theta.cos(), -theta.sin());
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let ss = supersample as usize;
    let inv_ss = 1.0 / ss as f64;
    let mut img = Image::new(width, height, 1);
    for y in 0..height {
        for x in 0..width {
            let mut bright = 0usize;
            for sy in 0..ss {
                let py = y as f64 + (sy as f64 + 0.5) * inv_ss;
                for sx in 0..ss {
                    let px = x as f64 + (sx as f64 + 0.5) * inv_ss;
                    let s = (px - cx) * nx + (py - cy) * ny - offset;
                    if s > 0.0 {
                        bright += 1;
                    }
                }
            }
            let coverage = bright as f64 / (ss * ss) as f64;
            img.set(x, y, 0, bright_level * coverage + dark_level * (1.0 - coverage));
        }
    }
    Ok(img)
}

/// One analysis patch cut from a capture.
#[derive(Debug, Clone)]
pub struct Patch {
    pub image: Image,
    /// Normalized position of the patch center in the full frame, both axes
    /// in `[-1, 1]`.
    pub field_pos: (f64, f64),
    /// Top-left corner of the patch in full-frame pixels.
    pub origin: (usize, usize),
    pub row: usize,
    pub col: usize,
}

/// Splits `img` into a `rows x cols` grid of patches. Cell sides are the
/// integer quotient of the image size; remainders go to the last row and
/// column, so the patches tile the image exactly.
pub fn patchify(img: &Image, rows: usize, cols: usize) -> Result<Vec<Patch>> {
    let cells = grid_cells(img.width(), img.height(), rows, cols)?;
    Ok(cells
        .into_iter()
        .map(|cell| Patch {
            image: img.crop_replicated(cell.x0 as isize, cell.y0 as isize, cell.width, cell.height),
            field_pos: cell.field_pos(img.width(), img.height()),
            origin: (cell.x0, cell.y0),
            row: cell.row,
            col: cell.col,
        })
        .collect())
}
