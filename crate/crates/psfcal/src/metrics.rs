//! Kernel fidelity scores and frequency-response analysis.
//!
//! Kernels are compared by PSNR/SSIM on their weight grids. Frequency
//! response comes from two independent routes that must agree: the 2-D
//! discrete Fourier magnitude of a kernel, and the classical slanted-edge
//! measurement (oversampled edge profile, differentiated, windowed,
//! transformed). The slanted-edge route never touches the kernel, which is
//! what makes the agreement a meaningful check of calibrated PSFs.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::conv2d;
use crate::raster::{Image, Kernel};

/// Maximum PSNR reported; identical inputs score exactly this sentinel.
pub const PSNR_CAP_DB: f64 = 300.0;

/// One frequency-response slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtfCurve {
    /// Cycles per pixel, uniformly spaced from 0 to 0.5 (Nyquist).
    pub frequencies: Vec<f64>,
    /// Contrast preserved at each frequency; exactly 1 at DC.
    pub modulation: Vec<f64>,
    /// Direction of the slice (or measured edge-normal direction), radians.
    pub orientation: f64,
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * ((peak * peak) / mse).log10()).min(PSNR_CAP_DB)
}

/// Peak signal-to-noise ratio between kernel weight grids, in dB. The peak
/// is the largest ground-truth weight; identical kernels report the cap.
pub fn kernel_psnr(est: &Kernel, gt: &Kernel) -> Result<f64> {
    if est.side() != gt.side() {
        return Err(Error::invalid(format!(
            "kernel sides differ: {} vs {}",
            est.side(),
            gt.side()
        )));
    }
    let mse = est
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / gt.data().len() as f64;
    Ok(psnr_from_mse(mse, gt.max_value()))
}

/// Mean PSNR between images, computed against a unit dynamic range.
pub fn image_psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::invalid("image shapes differ"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(psnr_from_mse(mse, 1.0))
}

/// Structural similarity between kernel weight grids, treated as images
/// with dynamic range equal to the largest ground-truth weight. Local
/// statistics use a 7x7 Gaussian window (sigma 1.5) with replicated
/// borders; the map is averaged over every cell.
pub fn kernel_ssim(est: &Kernel, gt: &Kernel) -> Result<f64> {
    if est.side() != gt.side() {
        return Err(Error::invalid(format!(
            "kernel sides differ: {} vs {}",
            est.side(),
            gt.side()
        )));
    }
    let l = gt.max_value();
    let c1 = (0.01 * l) * (0.01 * l);
    let c2 = (0.03 * l) * (0.03 * l);
    let window = Kernel::gaussian(7, 1.5);
    let a = est.to_image();
    let b = gt.to_image();
    let mut a2 = a.clone();
    a2.map_inplace(|v| v * v);
    let mut b2 = b.clone();
    b2.map_inplace(|v| v * v);
    let mut ab = a.clone();
    for (v, &w) in ab.data_mut().iter_mut().zip(b.data()) {
        *v *= w;
    }
    let mu_a = conv2d(&a, &window);
    let mu_b = conv2d(&b, &window);
    let m_a2 = conv2d(&a2, &window);
    let m_b2 = conv2d(&b2, &window);
    let m_ab = conv2d(&ab, &window);
    let n = a.data().len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a.data()[i], mu_b.data()[i]);
        let va = m_a2.data()[i] - ma * ma;
        let vb = m_b2.data()[i] - mb * mb;
        let cov = m_ab.data()[i] - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        total += s;
    }
    Ok(total / n as f64)
}

/// 2-D DFT magnitude of the kernel embedded in an `n x n` zero pad,
/// row-major, unnormalized.
fn dft2_magnitude(k: &Kernel, n: usize) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let side = k.side();
    let mut grid = vec![Complex::new(0.0, 0.0); n * n];
    for j in 0..side {
        for i in 0..side {
            grid[j * n + i].re = k.get(i, j);
        }
    }
    for row in grid.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = grid[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            grid[y * n + x] = col[y];
        }
    }
    grid.into_iter().map(|c| c.norm()).collect()
}

/// Wrap-around bilinear sample of an `n x n` spectrum at continuous DFT
/// coordinates (may be negative).
fn sample_spectrum(mag: &[f64], n: usize, gx: f64, gy: f64) -> f64 {
    let x0 = gx.floor();
    let y0 = gy.floor();
    let tx = gx - x0;
    let ty = gy - y0;
    let at = |xi: f64, yi: f64| -> f64 {
        let x = (xi as isize).rem_euclid(n as isize) as usize;
        let y = (yi as isize).rem_euclid(n as isize) as usize;
        mag[y * n + x]
    };
    let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1.0, y0) * tx;
    let bot = at(x0, y0 + 1.0) * (1.0 - tx) + at(x0 + 1.0, y0 + 1.0) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Modulation transfer function of a kernel along one orientation,
/// sampled at `n_freq` uniformly spaced frequencies from 0 to Nyquist.
/// The spectrum is computed on a 4x zero-padded grid and slices are read
/// by bilinear interpolation in frequency space.
pub fn mtf_from_psf(k: &Kernel, n_freq: usize, orientation: f64) -> Result<MtfCurve> {
    if n_freq < 2 {
        return Err(Error::invalid("an MTF curve needs at least two samples"));
    }
    let n = 4 * k.side();
    let mag = dft2_magnitude(k, n);
    let dc = mag[0];
    if !(dc > 0.0) {
        return Err(Error::DegenerateKernel);
    }
    let (cx, cy) = (orientation.cos(), orientation.sin());
    let mut frequencies = Vec::with_capacity(n_freq);
    let mut modulation = Vec::with_capacity(n_freq);
    for i in 0..n_freq {
        let f = 0.5 * i as f64 / (n_freq - 1) as f64;
        let m = sample_spectrum(&mag, n, f * cx * n as f64, f * cy * n as f64) / dc;
        frequencies.push(f);
        modulation.push(m);
    }
    debug_assert_eq!(modulation[0], 1.0);
    Ok(MtfCurve {
        frequencies,
        modulation,
        orientation,
    })
}

/// Edge-profile oversampling factor of the slanted-edge analysis.
const ESF_OVERSAMPLE: f64 = 4.0;

/// Slanted-edge spatial frequency response of a single-channel patch
/// holding one near-vertical edge (a few degrees of tilt make successive
/// rows sample the profile at shifted subpixel phases).
///
/// The edge line is found by regressing per-row gradient centroids; pixels
/// project onto the edge normal into a 4x oversampled profile, whose
/// difference quotient is Hamming-windowed around its centroid and Fourier
/// transformed. Normalization makes DC exactly 1 and the finite-difference
/// rolloff is divided out. `nominal_angle` (radians from vertical) is the
/// caller's expectation; a measured tilt outside (1, 15) degrees of
/// magnitude is logged as unreliable but still analyzed.
pub fn slanted_edge_sfr(patch: &Image, nominal_angle: f64, n_freq: usize) -> Result<MtfCurve> {
    if patch.channels() != 1 {
        return Err(Error::invalid("edge analysis expects a single-channel patch"));
    }
    if n_freq < 2 {
        return Err(Error::invalid("an MTF curve needs at least two samples"));
    }
    let (w, h) = (patch.width(), patch.height());
    if w < 8 || h < 8 {
        return Err(Error::invalid("edge patch must be at least 8x8"));
    }

    // Per-row subpixel edge abscissa from the |gradient| centroid.
    let mut rows: Vec<(f64, f64)> = Vec::new(); // (y center, x centroid)
    for y in 0..h {
        let mut mass = 0.0;
        let mut moment = 0.0;
        for x in 0..w - 1 {
            let g = (patch.get(x + 1, y, 0) - patch.get(x, y, 0)).abs();
            mass += g;
            moment += g * (x as f64 + 1.0); // sample sits between the pair
        }
        if mass > 1e-9 {
            rows.push((y as f64 + 0.5, moment / mass));
        }
    }
    if rows.len() < 2 {
        return Err(Error::NoEdgeFound);
    }

    // Least-squares line x = a + b y through the centroids.
    let n = rows.len() as f64;
    let sy: f64 = rows.iter().map(|r| r.0).sum();
    let sx: f64 = rows.iter().map(|r| r.1).sum();
    let syy: f64 = rows.iter().map(|r| r.0 * r.0).sum();
    let sxy: f64 = rows.iter().map(|r| r.0 * r.1).sum();
    let denom = n * syy - sy * sy;
    if denom.abs() < 1e-12 {
        return Err(Error::NoEdgeFound);
    }
    let b = (n * sxy - sy * sx) / denom;
    let a = (sx - b * sy) / n;
    let theta = b.atan();
    let tilt_deg = theta.to_degrees().abs();
    if !(1.0..=15.0).contains(&tilt_deg) {
        log::warn!(
            "edge tilt {tilt_deg:.2} degrees is outside the reliable (1, 15) range \
             (nominal {:.2})",
            nominal_angle.to_degrees()
        );
    }

    // Project pixel centers onto the edge normal and bin the profile.
    let cos_t = theta.cos();
    let delta = 1.0 / ESF_OVERSAMPLE;
    let mut s_min = f64::INFINITY;
    let mut s_max = f64::NEG_INFINITY;
    let mut samples: Vec<(f64, f64)> = Vec::with_capacity(w * h);
    for y in 0..h {
        let yc = y as f64 + 0.5;
        for x in 0..w {
            let s = (x as f64 + 0.5 - (a + b * yc)) * cos_t;
            s_min = s_min.min(s);
            s_max = s_max.max(s);
            samples.push((s, patch.get(x, y, 0)));
        }
    }
    let bins = ((s_max - s_min) / delta).ceil() as usize + 1;
    let mut acc = vec![0.0; bins];
    let mut cnt = vec![0usize; bins];
    for (s, v) in samples {
        let i = (((s - s_min) / delta) as usize).min(bins - 1);
        acc[i] += v;
        cnt[i] += 1;
    }
    let mut esf = vec![f64::NAN; bins];
    for i in 0..bins {
        if cnt[i] > 0 {
            esf[i] = acc[i] / cnt[i] as f64;
        }
    }
    // Fill unpopulated bins from their populated neighbors.
    let filled: Vec<usize> = (0..bins).filter(|&i| cnt[i] > 0).collect();
    if filled.len() < 4 {
        return Err(Error::NoEdgeFound);
    }
    for i in 0..bins {
        if cnt[i] == 0 {
            let next = filled.partition_point(|&j| j < i);
            esf[i] = if next == 0 {
                esf[filled[0]]
            } else if next == filled.len() {
                esf[filled[filled.len() - 1]]
            } else {
                let (lo, hi) = (filled[next - 1], filled[next]);
                let t = (i - lo) as f64 / (hi - lo) as f64;
                esf[lo] * (1.0 - t) + esf[hi] * t
            };
        }
    }

    // Difference quotient of the profile, windowed around its centroid.
    let m = bins - 1;
    let mut lsf: Vec<f64> = (0..m).map(|i| esf[i + 1] - esf[i]).collect();
    let total: f64 = lsf.iter().map(|v| v.abs()).sum();
    if total < 1e-9 {
        return Err(Error::NoEdgeFound);
    }
    let centroid: f64 = lsf
        .iter()
        .enumerate()
        .map(|(i, v)| i as f64 * v.abs())
        .sum::<f64>()
        / total;
    let half = (centroid.max(m as f64 - 1.0 - centroid)).max(1.0);
    for (i, v) in lsf.iter_mut().enumerate() {
        let t = (i as f64 - centroid) / half;
        *v *= 0.54 + 0.46 * (std::f64::consts::PI * t).cos();
    }

    // Direct transform at the requested frequencies. DC normalization,
    // then two box rolloffs are divided out: the finite-difference stencil
    // and the profile binning aperture, each a sin(pi f d)/(pi f d) factor
    // at the bin pitch.
    let dc: f64 = lsf.iter().sum();
    if dc.abs() < 1e-12 {
        return Err(Error::NoEdgeFound);
    }
    let mut frequencies = Vec::with_capacity(n_freq);
    let mut modulation = Vec::with_capacity(n_freq);
    for i in 0..n_freq {
        let f = 0.5 * i as f64 / (n_freq - 1) as f64;
        let mag = if i == 0 {
            1.0
        } else {
            let (mut re, mut im) = (0.0, 0.0);
            let omega = -2.0 * std::f64::consts::PI * f * delta;
            for (j, v) in lsf.iter().enumerate() {
                let (s, c) = (omega * j as f64).sin_cos();
                re += v * c;
                im += v * s;
            }
            let arg = std::f64::consts::PI * f * delta;
            let correction = (arg / arg.sin()).powi(2);
            (re * re + im * im).sqrt() / dc.abs() * correction
        };
        frequencies.push(f);
        modulation.push(mag);
    }
    Ok(MtfCurve {
        frequencies,
        modulation,
        orientation: theta,
    })
}

/// Root-mean-square modulation difference over `[0, f_max]`, with `b`
/// linearly resampled onto `a`'s frequency grid.
pub fn curve_rms_delta(a: &MtfCurve, b: &MtfCurve, f_max: f64) -> Result<f64> {
    if a.frequencies.is_empty() || b.frequencies.is_empty() {
        return Err(Error::invalid("empty curve"));
    }
    let b_lo = *b.frequencies.first().unwrap();
    let b_hi = *b.frequencies.last().unwrap();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &f) in a.frequencies.iter().enumerate() {
        if f > f_max || f < b_lo || f > b_hi {
            continue;
        }
        let j = b.frequencies.partition_point(|&g| g <= f).min(b.frequencies.len() - 1);
        let (j0, j1) = if j == 0 { (0, 0) } else { (j - 1, j) };
        let mb = if j0 == j1 || b.frequencies[j1] == b.frequencies[j0] {
            b.modulation[j0]
        } else {
            let t = (f - b.frequencies[j0]) / (b.frequencies[j1] - b.frequencies[j0]);
            b.modulation[j0] * (1.0 - t) + b.modulation[j1] * t
        };
        let d = a.modulation[i] - mb;
        sum += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid(
            "curves share no frequencies at or below the cutoff",
        ));
    }
    Ok((sum / n as f64).sqrt())
}
