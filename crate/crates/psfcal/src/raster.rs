//! Core raster containers: images, blur kernels, and dense flow fields.
//!
//! Pixels are `f64`, stored row-major with interleaved channels. Nominal
//! intensity range is `[0, 1]`; operations that leave that range say so.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense raster with `channels` interleaved samples per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Zero-filled image.
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        assert!(channels >= 1, "image needs at least one channel");
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Image filled with `value` in every sample.
    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Self {
        let mut img = Image::new(width, height, channels);
        img.data.fill(value);
        img
    }

    /// Wraps an existing buffer; `data.len()` must equal `w * h * channels`.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "buffer length {} does not match {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// True when `other` has identical width, height, and channel count.
    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn add_at(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] += v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Extracts channel `c` as a single-channel image.
    pub fn plane(&self, c: usize) -> Image {
        assert!(c < self.channels, "channel {c} out of range");
        let mut out = Image::new(self.width, self.height, 1);
        for p in 0..self.width * self.height {
            out.data[p] = self.data[p * self.channels + c];
        }
        out
    }

    /// Interleaves equally sized single-channel planes.
    pub fn from_planes(planes: &[Image]) -> Result<Image> {
        let first = planes
            .first()
            .ok_or_else(|| Error::invalid("from_planes needs at least one plane"))?;
        let (w, h) = (first.width, first.height);
        let mut out = Image::new(w, h, planes.len());
        for (c, plane) in planes.iter().enumerate() {
            if plane.width != w || plane.height != h || plane.channels != 1 {
                return Err(Error::invalid("planes must be single-channel and same size"));
            }
            for p in 0..w * h {
                out.data[p * planes.len() + c] = plane.data[p];
            }
        }
        Ok(out)
    }

    /// Repeats a single-channel image across `n` channels.
    pub fn replicate(&self, n: usize) -> Result<Image> {
        if self.channels != 1 {
            return Err(Error::invalid("replicate expects a single-channel image"));
        }
        let mut out = Image::new(self.width, self.height, n);
        for p in 0..self.width * self.height {
            for c in 0..n {
                out.data[p * n + c] = self.data[p];
            }
        }
        Ok(out)
    }

    /// Applies `f` to every sample in place.
    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Clamps every sample to `[0, 1]`.
    pub fn clamp01(&mut self) {
        self.map_inplace(|v| v.clamp(0.0, 1.0));
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Copies the rectangle with top-left `(x0, y0)` and size `w x h`.
    /// Source coordinates outside the image replicate the nearest pixel, so
    /// the rectangle may extend past the borders (used for patch aprons).
    pub fn crop_replicated(&self, x0: isize, y0: isize, w: usize, h: usize) -> Image {
        let mut out = Image::new(w, h, self.channels);
        for y in 0..h {
            let sy = (y0 + y as isize).clamp(0, self.height as isize - 1) as usize;
            for x in 0..w {
                let sx = (x0 + x as isize).clamp(0, self.width as isize - 1) as usize;
                for c in 0..self.channels {
                    out.data[(y * w + x) * self.channels + c] = self.get(sx, sy, c);
                }
            }
        }
        out
    }

    /// Writes `src` into this image with top-left at `(x0, y0)`; the
    /// rectangle must fit.
    pub fn paste(&mut self, src: &Image, x0: usize, y0: usize) {
        assert_eq!(src.channels, self.channels, "channel mismatch in paste");
        assert!(x0 + src.width <= self.width && y0 + src.height <= self.height);
        for y in 0..src.height {
            for x in 0..src.width {
                for c in 0..self.channels {
                    self.set(x0 + x, y0 + y, c, src.get(x, y, c));
                }
            }
        }
    }
}

/// Discrete convolution kernel: odd side, nonnegative taps summing to one.
///
/// The invariants are established at construction and every mutation goes
/// through [`Kernel::from_weights`], so holding a `Kernel` is proof of a
/// valid blur model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelRepr", into = "KernelRepr")]
pub struct Kernel {
    side: usize,
    data: Vec<f64>,
}

/// Serialized form of [`Kernel`]: `{"side": n, "data": [row-major taps]}`.
#[derive(Serialize, Deserialize)]
struct KernelRepr {
    side: usize,
    data: Vec<f64>,
}

impl TryFrom<KernelRepr> for Kernel {
    type Error = Error;

    fn try_from(r: KernelRepr) -> Result<Kernel> {
        Kernel::new(r.side, r.data)
    }
}

impl From<Kernel> for KernelRepr {
    fn from(k: Kernel) -> KernelRepr {
        KernelRepr {
            side: k.side,
            data: k.data,
        }
    }
}

/// Largest tolerated deviation of the tap sum from one at construction.
const KERNEL_SUM_TOL: f64 = 1e-6;

impl Kernel {
    /// Validates and wraps raw taps (row-major, length `side * side`).
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if side == 0 || side % 2 == 0 {
            return Err(Error::invalid(format!("kernel side {side} must be odd")));
        }
        if data.len() != side * side {
            return Err(Error::invalid(format!(
                "kernel data length {} does not match side {}",
                data.len(),
                side
            )));
        }
        if data.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::invalid("kernel taps must be finite and nonnegative"));
        }
        let sum: f64 = data.iter().sum();
        if (sum - 1.0).abs() > KERNEL_SUM_TOL {
            return Err(Error::invalid(format!(
                "kernel taps sum to {sum}, expected 1 within {KERNEL_SUM_TOL}"
            )));
        }
        Ok(Kernel { side, data })
    }

    /// Clamps negative weights to zero and normalizes the rest to sum one.
    /// Errors with [`Error::DegenerateKernel`] when nothing positive remains.
    pub fn from_weights(side: usize, weights: &[f64]) -> Result<Self> {
        if side == 0 || side % 2 == 0 || weights.len() != side * side {
            return Err(Error::invalid("kernel side must be odd and match data length"));
        }
        let clamped: Vec<f64> = weights
            .iter()
            .map(|&v| if v.is_finite() && v > 0.0 { v } else { 0.0 })
            .collect();
        let sum: f64 = clamped.iter().sum();
        if sum <= 0.0 {
            return Err(Error::DegenerateKernel);
        }
        Ok(Kernel {
            side,
            data: clamped.iter().map(|v| v / sum).collect(),
        })
    }

    /// Identity kernel: single unit tap at the center.
    pub fn delta(side: usize) -> Self {
        assert!(side % 2 == 1, "kernel side must be odd");
        let mut data = vec![0.0; side * side];
        data[(side / 2) * side + side / 2] = 1.0;
        Kernel { side, data }
    }

    /// Uniform box kernel.
    pub fn uniform(side: usize) -> Self {
        assert!(side % 2 == 1, "kernel side must be odd");
        Kernel {
            side,
            data: vec![1.0 / (side * side) as f64; side * side],
        }
    }

    /// Isotropic Gaussian sampled at cell centers and renormalized.
    pub fn gaussian(side: usize, sigma: f64) -> Self {
        assert!(side % 2 == 1, "kernel side must be odd");
        assert!(sigma > 0.0, "sigma must be positive");
        let r = (side / 2) as f64;
        let mut data = vec![0.0; side * side];
        for j in 0..side {
            for i in 0..side {
                let dx = i as f64 - r;
                let dy = j as f64 - r;
                data[j * side + i] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
        let sum: f64 = data.iter().sum();
        for v in &mut data {
            *v /= sum;
        }
        Kernel { side, data }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Half-width: taps span offsets `-radius ..= radius` on each axis.
    pub fn radius(&self) -> usize {
        self.side / 2
    }

    /// Tap at column `i`, row `j`.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.side && j < self.side);
        self.data[j * self.side + i]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Centroid of the tap mass in offset coordinates (0 is the center cell).
    pub fn centroid(&self) -> (f64, f64) {
        let r = (self.side / 2) as f64;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for j in 0..self.side {
            for i in 0..self.side {
                let w = self.data[j * self.side + i];
                cx += w * (i as f64 - r);
                cy += w * (j as f64 - r);
            }
        }
        (cx, cy)
    }

    /// Treats the taps as a single-channel image (for SSIM-style metrics and
    /// heatmap export).
    pub fn to_image(&self) -> Image {
        Image::from_vec(self.side, self.side, 1, self.data.clone()).expect("kernel is square")
    }
}

/// Dense per-pixel displacement field.
///
/// `dx`/`dy` give the sampling offset in pixels: warping reads the source at
/// `(x + dx, y + dy)`, so positive `dx` shifts content left in the output.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl FlowField {
    /// All-zero (identity) field.
    pub fn zero(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "flow dimensions must be positive");
        FlowField {
            width,
            height,
            dx: vec![0.0; width * height],
            dy: vec![0.0; width * height],
        }
    }

    /// Constant displacement everywhere.
    pub fn uniform(width: usize, height: usize, dx: f64, dy: f64) -> Self {
        let mut f = FlowField::zero(width, height);
        f.dx.fill(dx);
        f.dy.fill(dy);
        f
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, dx: f64, dy: f64) {
        let i = y * self.width + x;
        self.dx[i] = dx;
        self.dy[i] = dy;
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    pub fn dx_mut(&mut self) -> &mut [f64] {
        &mut self.dx
    }

    pub fn dy_mut(&mut self) -> &mut [f64] {
        &mut self.dy
    }

    /// Adds `other` sample-wise; shapes must match.
    pub fn add_assign(&mut self, other: &FlowField) {
        assert!(self.width == other.width && self.height == other.height);
        for (a, b) in self.dx.iter_mut().zip(&other.dx) {
            *a += b;
        }
        for (a, b) in self.dy.iter_mut().zip(&other.dy) {
            *a += b;
        }
    }

    /// Mean Euclidean distance to `other`, useful as an endpoint error.
    pub fn mean_endpoint_error(&self, other: &FlowField) -> f64 {
        assert!(self.width == other.width && self.height == other.height);
        let n = self.dx.len() as f64;
        self.dx
            .iter()
            .zip(&self.dy)
            .zip(other.dx.iter().zip(&other.dy))
            .map(|((ax, ay), (bx, by))| ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt())
            .sum::<f64>()
            / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_roundtrips_samples() {
        let mut img = Image::new(4, 3, 2);
        img.set(2, 1, 1, 0.5);
        assert_eq!(img.get(2, 1, 1), 0.5);
        assert_eq!(img.get(2, 1, 0), 0.0);
    }

    #[test]
    fn image_plane_and_from_planes_are_inverse() {
        let mut img = Image::new(3, 2, 3);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let planes: Vec<Image> = (0..3).map(|c| img.plane(c)).collect();
        let back = Image::from_planes(&planes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn crop_replicated_extends_borders() {
        let img = Image::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = img.crop_replicated(-1, -1, 4, 4);
        assert_eq!(c.get(0, 0, 0), 1.0); // clamped to top-left source pixel
        assert_eq!(c.get(3, 3, 0), 4.0); // clamped to bottom-right
        assert_eq!(c.get(1, 1, 0), 1.0); // interior copy
        assert_eq!(c.get(2, 2, 0), 4.0);
    }

    #[test]
    fn kernel_new_validates_invariants() {
        assert!(Kernel::new(2, vec![0.25; 4]).is_err(), "even side rejected");
        assert!(Kernel::new(3, vec![0.1; 9]).is_err(), "sum 0.9 rejected");
        let mut taps = vec![0.0; 9];
        taps[4] = 1.0;
        assert!(Kernel::new(3, taps.clone()).is_ok());
        taps[0] = -0.1;
        taps[4] = 1.1;
        assert!(Kernel::new(3, taps).is_err(), "negative tap rejected");
    }

    #[test]
    fn kernel_from_weights_clamps_and_normalizes() {
        let k = Kernel::from_weights(3, &[-1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(k.get(1, 1), 0.5);
        assert_eq!(k.get(2, 2), 0.5);
        assert_eq!(k.get(0, 0), 0.0);
        let sum: f64 = k.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_from_weights_rejects_all_nonpositive() {
        let r = Kernel::from_weights(3, &[0.0; 9]);
        assert!(matches!(r, Err(Error::DegenerateKernel)));
    }

    #[test]
    fn kernel_delta_centroid_is_zero() {
        let k = Kernel::delta(7);
        let (cx, cy) = k.centroid();
        assert_eq!((cx, cy), (0.0, 0.0));
        assert_eq!(k.get(3, 3), 1.0);
    }

    #[test]
    fn kernel_gaussian_is_normalized_and_symmetric() {
        let k = Kernel::gaussian(9, 1.5);
        let sum: f64 = k.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!((k.get(2, 4) - k.get(6, 4)).abs() < 1e-15, "left-right symmetry");
        assert!((k.get(4, 2) - k.get(4, 6)).abs() < 1e-15, "top-bottom symmetry");
    }

    #[test]
    fn kernel_json_roundtrip_preserves_taps() {
        let k = Kernel::gaussian(5, 1.0);
        let s = serde_json::to_string(&k).unwrap();
        let back: Kernel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, k);
    }

    #[test]
    fn kernel_json_rejects_invalid_payload() {
        let r: std::result::Result<Kernel, _> =
            serde_json::from_str(r#"{"side": 3, "data": [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]}"#);
        assert!(r.is_err(), "unnormalized taps must not deserialize");
    }

    #[test]
    fn flow_uniform_and_epe() {
        let a = FlowField::uniform(4, 4, 1.0, 0.0);
        let b = FlowField::uniform(4, 4, 1.0, 1.0);
        assert!((a.mean_endpoint_error(&b) - 1.0).abs() < 1e-15);
    }
}
