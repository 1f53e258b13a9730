//! Image operators used across simulation and calibration.
//!
//! Convolution, warping, gradients, and flow resampling are linear (or, for
//! warping, locally linear) maps; each comes with an exact adjoint so the
//! optimizer can run reverse-mode differentiation without a tape. Borders
//! replicate the nearest pixel everywhere, implemented by clamping source
//! coordinates, and the adjoints transpose exactly that clamped indexing.

use crate::error::{Error, Result};
use crate::raster::{FlowField, Image, Kernel};

/// True 2-D convolution with replicate borders, applied per channel:
/// `out(x, y) = sum_q k(q) * img(x - qx, y - qy)` with source coordinates
/// clamped to the image, `q` ranging over centered tap offsets.
pub fn conv2d(img: &Image, k: &Kernel) -> Image {
    if img.channels() == 1 {
        return conv2d_plane(img, k);
    }
    let planes: Vec<Image> = (0..img.channels())
        .map(|c| conv2d_plane(&img.plane(c), k))
        .collect();
    Image::from_planes(&planes).expect("planes share the image shape")
}

fn conv2d_plane(img: &Image, k: &Kernel) -> Image {
    debug_assert_eq!(img.channels(), 1);
    let (w, h) = (img.width(), img.height());
    let side = k.side();
    let r = k.radius() as isize;
    let src = img.data();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let orow = &mut out[y * w..(y + 1) * w];
        for j in 0..side {
            let sy = (y as isize - (j as isize - r)).clamp(0, h as isize - 1) as usize;
            let srow = &src[sy * w..(sy + 1) * w];
            for i in 0..side {
                let wt = k.get(i, j);
                if wt == 0.0 {
                    continue;
                }
                let dx = i as isize - r;
                // Interior span where x - dx stays in bounds.
                let x_lo = dx.max(0) as usize;
                let x_hi = (w as isize + dx.min(0)) as usize; // exclusive
                let shift = dx;
                let s_lo = (x_lo as isize - shift) as usize;
                let dst = &mut orow[x_lo..x_hi];
                let ssrc = &srow[s_lo..s_lo + (x_hi - x_lo)];
                for (d, s) in dst.iter_mut().zip(ssrc) {
                    *d += wt * s;
                }
                // Left border: source clamps to column 0.
                let edge_l = wt * srow[0];
                for d in orow[..x_lo].iter_mut() {
                    *d += edge_l;
                }
                // Right border: source clamps to the last column.
                let edge_r = wt * srow[w - 1];
                for d in orow[x_hi..].iter_mut() {
                    *d += edge_r;
                }
            }
        }
    }
    Image::from_vec(w, h, 1, out).expect("size preserved")
}

/// Adjoint of [`conv2d`] with respect to the image: scatters `grad_out`
/// through the transposed clamped indexing. Satisfies
/// `<conv2d(x, k), y> == <x, conv2d_adjoint_image(y, k)>` exactly.
pub fn conv2d_adjoint_image(grad_out: &Image, k: &Kernel) -> Image {
    let ch = grad_out.channels();
    if ch == 1 {
        return conv2d_adjoint_image_plane(grad_out, k);
    }
    let planes: Vec<Image> = (0..ch)
        .map(|c| conv2d_adjoint_image_plane(&grad_out.plane(c), k))
        .collect();
    Image::from_planes(&planes).expect("planes share the image shape")
}

fn conv2d_adjoint_image_plane(grad_out: &Image, k: &Kernel) -> Image {
    debug_assert_eq!(grad_out.channels(), 1);
    let (w, h) = (grad_out.width(), grad_out.height());
    let side = k.side();
    let r = k.radius() as isize;
    let gout = grad_out.data();
    let mut gsrc = vec![0.0; w * h];
    for y in 0..h {
        let grow = &gout[y * w..(y + 1) * w];
        for j in 0..side {
            let sy = (y as isize - (j as isize - r)).clamp(0, h as isize - 1) as usize;
            let srow = &mut gsrc[sy * w..(sy + 1) * w];
            for i in 0..side {
                let wt = k.get(i, j);
                if wt == 0.0 {
                    continue;
                }
                let dx = i as isize - r;
                let x_lo = dx.max(0) as usize;
                let x_hi = (w as isize + dx.min(0)) as usize;
                let s_lo = (x_lo as isize - dx) as usize;
                let dst = &mut srow[s_lo..s_lo + (x_hi - x_lo)];
                let gsl = &grow[x_lo..x_hi];
                for (d, g) in dst.iter_mut().zip(gsl) {
                    *d += wt * g;
                }
                let left: f64 = grow[..x_lo].iter().sum();
                srow[0] += wt * left;
                let right: f64 = grow[x_hi..].iter().sum();
                srow[w - 1] += wt * right;
            }
        }
    }
    Image::from_vec(w, h, 1, gsrc).expect("size preserved")
}

/// Gradient of `sum(grad_out .* conv2d(img, k))` with respect to the raw tap
/// weights, returned row-major. Channels accumulate into the same taps.
pub fn conv2d_grad_kernel(grad_out: &Image, img: &Image, side: usize) -> Vec<f64> {
    assert!(grad_out.same_shape(img), "shape mismatch in kernel gradient");
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let r = (side / 2) as isize;
    let mut gk = vec![0.0; side * side];
    for c in 0..ch {
        let (gplane, splane);
        let (gout, src): (&[f64], &[f64]) = if ch == 1 {
            (grad_out.data(), img.data())
        } else {
            gplane = grad_out.plane(c);
            splane = img.plane(c);
            (gplane.data(), splane.data())
        };
        for y in 0..h {
            let grow = &gout[y * w..(y + 1) * w];
            for j in 0..side {
                let sy = (y as isize - (j as isize - r)).clamp(0, h as isize - 1) as usize;
                let srow = &src[sy * w..(sy + 1) * w];
                for i in 0..side {
                    let dx = i as isize - r;
                    let x_lo = dx.max(0) as usize;
                    let x_hi = (w as isize + dx.min(0)) as usize;
                    let s_lo = (x_lo as isize - dx) as usize;
                    let mut acc = 0.0;
                    for (g, s) in grow[x_lo..x_hi].iter().zip(&srow[s_lo..s_lo + (x_hi - x_lo)]) {
                        acc += g * s;
                    }
                    let left: f64 = grow[..x_lo].iter().sum();
                    let right: f64 = grow[x_hi..].iter().sum();
                    gk[j * side + i] += acc + left * srow[0] + right * srow[w - 1];
                }
            }
        }
    }
    gk
}

#[derive(Clone, Copy)]
struct BilinearTap {
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
    /// Zero when the source x coordinate hit the clamp (derivative w.r.t.
    /// the flow vanishes there); one otherwise. Same for `live_y`.
    live_x: f64,
    live_y: f64,
}

#[inline]
fn bilinear_tap(sx: f64, sy: f64, w: usize, h: usize) -> BilinearTap {
    let (cx, live_x) = if sx <= 0.0 {
        (0.0, 0.0)
    } else if sx >= (w - 1) as f64 {
        ((w - 1) as f64, 0.0)
    } else {
        (sx, 1.0)
    };
    let (cy, live_y) = if sy <= 0.0 {
        (0.0, 0.0)
    } else if sy >= (h - 1) as f64 {
        ((h - 1) as f64, 0.0)
    } else {
        (sy, 1.0)
    };
    let mut x0 = cx.floor() as usize;
    let mut y0 = cy.floor() as usize;
    if x0 + 1 >= w {
        x0 = w.saturating_sub(2);
    }
    if y0 + 1 >= h {
        y0 = h.saturating_sub(2);
    }
    BilinearTap {
        x0,
        y0,
        fx: cx - x0 as f64,
        fy: cy - y0 as f64,
        live_x,
        live_y,
    }
}

#[inline]
fn sample_plane(data: &[f64], w: usize, t: &BilinearTap) -> f64 {
    let i00 = t.y0 * w + t.x0;
    let i10 = i00 + 1;
    let i01 = i00 + w;
    let i11 = i01 + 1;
    (1.0 - t.fx) * (1.0 - t.fy) * data[i00]
        + t.fx * (1.0 - t.fy) * data[i10]
        + (1.0 - t.fx) * t.fy * data[i01]
        + t.fx * t.fy * data[i11]
}

/// Backward warp with bilinear sampling: reads the source at
/// `(x + dx, y + dy)`, clamping sample coordinates to the image rectangle.
/// A positive uniform `dx` therefore shifts content left.
pub fn warp(img: &Image, v: &FlowField) -> Result<Image> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    if v.width() != w || v.height() != h {
        return Err(Error::invalid(format!(
            "flow {}x{} does not match image {}x{}",
            v.width(),
            v.height(),
            w,
            h
        )));
    }
    if w < 2 || h < 2 {
        return Err(Error::invalid("warp needs an image of at least 2x2"));
    }
    let mut out = Image::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = v.get(x, y);
            let t = bilinear_tap(x as f64 + dx, y as f64 + dy, w, h);
            for c in 0..ch {
                let v00 = img.get(t.x0, t.y0, c);
                let v10 = img.get(t.x0 + 1, t.y0, c);
                let v01 = img.get(t.x0, t.y0 + 1, c);
                let v11 = img.get(t.x0 + 1, t.y0 + 1, c);
                let val = (1.0 - t.fx) * (1.0 - t.fy) * v00
                    + t.fx * (1.0 - t.fy) * v10
                    + (1.0 - t.fx) * t.fy * v01
                    + t.fx * t.fy * v11;
                out.set(x, y, c, val);
            }
        }
    }
    Ok(out)
}

/// Reverse-mode derivatives of [`warp`]: given `grad_out`, returns the
/// gradient with respect to the source image (exact adjoint of the sampling
/// weights) and with respect to the flow (through the bilinear interpolant;
/// zero where the sample coordinate sat on the clamp).
pub fn warp_adjoint(grad_out: &Image, img: &Image, v: &FlowField) -> (Image, FlowField) {
    assert!(grad_out.same_shape(img), "shape mismatch in warp adjoint");
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut gimg = Image::new(w, h, ch);
    let mut gflow = FlowField::zero(w, h);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = v.get(x, y);
            let t = bilinear_tap(x as f64 + dx, y as f64 + dy, w, h);
            let mut gdx = 0.0;
            let mut gdy = 0.0;
            for c in 0..ch {
                let g = grad_out.get(x, y, c);
                if g == 0.0 {
                    continue;
                }
                gimg.add_at(t.x0, t.y0, c, g * (1.0 - t.fx) * (1.0 - t.fy));
                gimg.add_at(t.x0 + 1, t.y0, c, g * t.fx * (1.0 - t.fy));
                gimg.add_at(t.x0, t.y0 + 1, c, g * (1.0 - t.fx) * t.fy);
                gimg.add_at(t.x0 + 1, t.y0 + 1, c, g * t.fx * t.fy);
                let v00 = img.get(t.x0, t.y0, c);
                let v10 = img.get(t.x0 + 1, t.y0, c);
                let v01 = img.get(t.x0, t.y0 + 1, c);
                let v11 = img.get(t.x0 + 1, t.y0 + 1, c);
                gdx += g * ((1.0 - t.fy) * (v10 - v00) + t.fy * (v11 - v01));
                gdy += g * ((1.0 - t.fx) * (v01 - v00) + t.fx * (v11 - v10));
            }
            gflow.set(x, y, gdx * t.live_x, gdy * t.live_y);
        }
    }
    (gimg, gflow)
}

/// Grayscale dilation (running maximum) over a square window of side
/// `2 * radius + 1`; the window clamps at the borders, which matches
/// replicate padding. Single-channel only.
pub fn dilate(img: &Image, radius: usize) -> Result<Image> {
    morph(img, radius, f64::max, f64::NEG_INFINITY)
}

/// Grayscale erosion (running minimum); see [`dilate`].
pub fn erode(img: &Image, radius: usize) -> Result<Image> {
    morph(img, radius, f64::min, f64::INFINITY)
}

fn morph(img: &Image, radius: usize, pick: fn(f64, f64) -> f64, seed: f64) -> Result<Image> {
    if img.channels() != 1 {
        return Err(Error::invalid("morphology expects a single-channel image"));
    }
    if radius == 0 {
        return Err(Error::invalid("morphology radius must be at least 1"));
    }
    let (w, h) = (img.width(), img.height());
    let r = radius as isize;
    // Horizontal pass, then vertical: the square window is separable.
    let src = img.data();
    let mut mid = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w as isize {
            let lo = (x - r).max(0) as usize;
            let hi = ((x + r).min(w as isize - 1)) as usize;
            let mut m = seed;
            for &v in &row[lo..=hi] {
                m = pick(m, v);
            }
            mid[y * w + x as usize] = m;
        }
    }
    let mut out = vec![0.0; w * h];
    for x in 0..w {
        for y in 0..h as isize {
            let lo = (y - r).max(0) as usize;
            let hi = ((y + r).min(h as isize - 1)) as usize;
            let mut m = seed;
            for yy in lo..=hi {
                m = pick(m, mid[yy * w + x]);
            }
            out[y as usize * w + x] = m;
        }
    }
    Image::from_vec(w, h, 1, out)
}

/// Number of histogram bins used by [`otsu_threshold`].
const OTSU_BINS: usize = 256;

/// Otsu's threshold over a 256-bin histogram of `[0, 1]` intensities.
/// Returns the lower edge of the first above-threshold bin, so `v < t`
/// selects the dark class. Ties pick the lowest maximizing split; an image
/// whose samples fall into a single bin has no two-class structure.
pub fn otsu_threshold(img: &Image) -> Result<f64> {
    let mut hist = [0u64; OTSU_BINS];
    for &v in img.data() {
        let b = ((v.clamp(0.0, 1.0)) * OTSU_BINS as f64) as usize;
        hist[b.min(OTSU_BINS - 1)] += 1;
    }
    if hist.iter().filter(|&&n| n > 0).count() < 2 {
        return Err(Error::NoBimodalStructure);
    }
    let total: u64 = hist.iter().sum();
    let total_f = total as f64;
    let global_sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(b, &n)| b as f64 * n as f64)
        .sum();
    let mut best_split = 0usize;
    let mut best_var = f64::NEG_INFINITY;
    let mut count0 = 0.0;
    let mut sum0 = 0.0;
    for s in 0..OTSU_BINS - 1 {
        count0 += hist[s] as f64;
        sum0 += s as f64 * hist[s] as f64;
        let count1 = total_f - count0;
        if count0 == 0.0 || count1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / count0;
        let mu1 = (global_sum - sum0) / count1;
        let var = count0 * count1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_split = s;
        }
    }
    Ok((best_split + 1) as f64 / OTSU_BINS as f64)
}

/// Forward-difference gradients per channel. The last column of `gx` and the
/// last row of `gy` are zero, keeping output sizes equal to the input.
pub fn gradient_xy(img: &Image) -> Result<(Image, Image)> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    if w < 2 || h < 2 {
        return Err(Error::invalid("gradient needs an image of at least 2x2"));
    }
    let mut gx = Image::new(w, h, ch);
    let mut gy = Image::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                if x + 1 < w {
                    gx.set(x, y, c, img.get(x + 1, y, c) - img.get(x, y, c));
                }
                if y + 1 < h {
                    gy.set(x, y, c, img.get(x, y + 1, c) - img.get(x, y, c));
                }
            }
        }
    }
    Ok((gx, gy))
}

/// Adjoint of [`gradient_xy`]: maps cotangents of `(gx, gy)` back to the
/// image. Entries in the zero column/row of the forward output are ignored.
pub fn gradient_xy_adjoint(gx_bar: &Image, gy_bar: &Image) -> Image {
    assert!(gx_bar.same_shape(gy_bar), "gradient cotangents must match");
    let (w, h, ch) = (gx_bar.width(), gx_bar.height(), gx_bar.channels());
    let mut out = Image::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut v = 0.0;
                if x + 1 < w {
                    v -= gx_bar.get(x, y, c);
                }
                if x >= 1 {
                    v += gx_bar.get(x - 1, y, c);
                }
                if y + 1 < h {
                    v -= gy_bar.get(x, y, c);
                }
                if y >= 1 {
                    v += gy_bar.get(x, y - 1, c);
                }
                out.set(x, y, c, v);
            }
        }
    }
    out
}

/// Halves resolution: 3x3 binomial prefilter (replicate borders) followed by
/// decimation at even coordinates. Output dims are `ceil(w/2) x ceil(h/2)`.
pub fn downsample2(img: &Image) -> Image {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = Image::new(ow, oh, ch);
    const W1D: [f64; 3] = [0.25, 0.5, 0.25];
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, wy) in W1D.iter().enumerate() {
                    let sy = (2 * oy as isize + j as isize - 1).clamp(0, h as isize - 1) as usize;
                    for (i, wx) in W1D.iter().enumerate() {
                        let sx =
                            (2 * ox as isize + i as isize - 1).clamp(0, w as isize - 1) as usize;
                        acc += wy * wx * img.get(sx, sy, c);
                    }
                }
                out.set(ox, oy, c, acc);
            }
        }
    }
    out
}

/// Source coordinate for corner-anchored resampling: `x * src / dst`.
#[inline]
fn grid_tap(x: usize, src: usize, dst: usize) -> f64 {
    x as f64 * src as f64 / dst as f64
}

/// Resamples a flow field to `dst_w x dst_h` with bilinear interpolation and
/// scales displacements by the per-axis resolution ratio, so a field y
/// describing motion at one scale describes the same physical motion at the
/// new scale. Linear in the input field.
pub fn resize_flow(v: &FlowField, dst_w: usize, dst_h: usize) -> FlowField {
    let (ws, hs) = (v.width(), v.height());
    assert!(dst_w > 0 && dst_h > 0, "resize target must be positive");
    let sx_scale = dst_w as f64 / ws as f64;
    let sy_scale = dst_h as f64 / hs as f64;
    let mut out = FlowField::zero(dst_w, dst_h);
    for y in 0..dst_h {
        for x in 0..dst_w {
            let t = bilinear_tap(grid_tap(x, ws, dst_w), grid_tap(y, hs, dst_h), ws, hs);
            let dx = sample_plane(v.dx(), ws, &t) * sx_scale;
            let dy = sample_plane(v.dy(), ws, &t) * sy_scale;
            out.set(x, y, dx, dy);
        }
    }
    out
}

/// Adjoint of [`resize_flow`] back onto a `src_w x src_h` field.
pub fn resize_flow_adjoint(grad_out: &FlowField, src_w: usize, src_h: usize) -> FlowField {
    let (wd, hd) = (grad_out.width(), grad_out.height());
    let sx_scale = wd as f64 / src_w as f64;
    let sy_scale = hd as f64 / src_h as f64;
    let mut gsrc = FlowField::zero(src_w, src_h);
    for y in 0..hd {
        for x in 0..wd {
            let t = bilinear_tap(grid_tap(x, src_w, wd), grid_tap(y, src_h, hd), src_w, src_h);
            let (gx, gy) = grad_out.get(x, y);
            let (gx, gy) = (gx * sx_scale, gy * sy_scale);
            let w00 = (1.0 - t.fx) * (1.0 - t.fy);
            let w10 = t.fx * (1.0 - t.fy);
            let w01 = (1.0 - t.fx) * t.fy;
            let w11 = t.fx * t.fy;
            let idx = [
                (t.x0, t.y0, w00),
                (t.x0 + 1, t.y0, w10),
                (t.x0, t.y0 + 1, w01),
                (t.x0 + 1, t.y0 + 1, w11),
            ];
            for (xx, yy, wgt) in idx {
                let (adx, ady) = gsrc.get(xx, yy);
                gsrc.set(xx, yy, adx + wgt * gx, ady + wgt * gy);
            }
        }
    }
    gsrc
}

/// Doubles flow resolution and displacement magnitude: the exact `2x` case
/// of [`resize_flow`].
pub fn upsample_flow(v: &FlowField) -> FlowField {
    resize_flow(v, v.width() * 2, v.height() * 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_image(w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, 0, 0.1 * x as f64 + 0.05 * y as f64);
            }
        }
        img
    }

    fn seeded_image(w: usize, h: usize, ch: usize, seed: u64) -> Image {
        // Small deterministic LCG keeps oracle tests reproducible without RNG
        // plumbing.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut img = Image::new(w, h, ch);
        for v in img.data_mut() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = (state >> 11) as f64 / (1u64 << 53) as f64;
        }
        img
    }

    /// Direct triple-loop convolution used as the oracle for the sliced
    /// implementation. Kept deliberately naive.
    fn conv2d_bruteforce(img: &Image, k: &Kernel) -> Image {
        let (w, h, ch) = (img.width(), img.height(), img.channels());
        let r = k.radius() as isize;
        let mut out = Image::new(w, h, ch);
        for y in 0..h as isize {
            for x in 0..w as isize {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for j in 0..k.side() as isize {
                        for i in 0..k.side() as isize {
                            let sx = (x - (i - r)).clamp(0, w as isize - 1) as usize;
                            let sy = (y - (j - r)).clamp(0, h as isize - 1) as usize;
                            acc += k.get(i as usize, j as usize) * img.get(sx, sy, c);
                        }
                    }
                    out.set(x as usize, y as usize, c, acc);
                }
            }
        }
        out
    }

    fn assert_images_close(a: &Image, b: &Image, tol: f64, what: &str) {
        assert!(a.same_shape(b), "{what}: shape mismatch");
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "{what}: sample {i} differs: {x} vs {y}"
            );
        }
    }

    #[test]
    fn conv2d_delta_is_identity() {
        let img = seeded_image(13, 9, 1, 7);
        let out = conv2d(&img, &Kernel::delta(5));
        assert_images_close(&out, &img, 0.0, "delta conv");
    }

    #[test]
    fn conv2d_constant_preserved_up_to_borders() {
        let img = Image::constant(16, 12, 1, 0.37);
        let k = Kernel::gaussian(7, 1.3);
        let out = conv2d(&img, &k);
        // Replicate borders make constants exact fixed points everywhere.
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_bruteforce_on_random_data() {
        for seed in 0..4u64 {
            let img = seeded_image(17, 11, 1, seed);
            let k = Kernel::from_weights(
                5,
                &seeded_image(5, 5, 1, seed + 100).data().to_vec(),
            )
            .unwrap();
            let fast = conv2d(&img, &k);
            let slow = conv2d_bruteforce(&img, &k);
            assert_images_close(&fast, &slow, 1e-13, "conv vs brute force");
        }
    }

    #[test]
    fn conv2d_multichannel_matches_per_plane() {
        let img = seeded_image(9, 8, 3, 3);
        let k = Kernel::gaussian(3, 0.8);
        let full = conv2d(&img, &k);
        for c in 0..3 {
            let plane = conv2d(&img.plane(c), &k);
            assert_images_close(&full.plane(c), &plane, 0.0, "channel split");
        }
    }

    #[test]
    fn conv2d_adjoint_image_is_exact_transpose() {
        let x = seeded_image(14, 10, 1, 21);
        let ybar = seeded_image(14, 10, 1, 22);
        let k = Kernel::from_weights(7, &seeded_image(7, 7, 1, 23).data().to_vec()).unwrap();
        let ax = conv2d(&x, &k);
        let aty = conv2d_adjoint_image(&ybar, &k);
        let lhs: f64 = ax.data().iter().zip(ybar.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        assert!(
            (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0),
            "adjoint identity violated: {lhs} vs {rhs}"
        );
    }

    #[test]
    fn conv2d_grad_kernel_matches_explicit_sum() {
        // The objective <gout, conv(img, K)> is linear in the raw taps, so
        // its gradient has the closed form
        //   g(i, j) = sum_{x,y} gout(x, y) * img(clamp(x - (i - r)), clamp(y - (j - r)))
        // which an independent loop computes here.
        let img = seeded_image(10, 9, 2, 31);
        let gout = seeded_image(10, 9, 2, 32);
        let side = 5usize;
        let r = side as isize / 2;
        let (w, h) = (img.width() as isize, img.height() as isize);
        let mut oracle = vec![0.0; side * side];
        for j in 0..side as isize {
            for i in 0..side as isize {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let sx = (x - (i - r)).clamp(0, w - 1) as usize;
                        let sy = (y - (j - r)).clamp(0, h - 1) as usize;
                        for c in 0..img.channels() {
                            acc += gout.get(x as usize, y as usize, c) * img.get(sx, sy, c);
                        }
                    }
                }
                oracle[(j * side as isize + i) as usize] = acc;
            }
        }
        let grad = conv2d_grad_kernel(&gout, &img, side);
        for t in 0..side * side {
            assert!(
                (grad[t] - oracle[t]).abs() < 1e-12 * oracle[t].abs().max(1.0),
                "tap {t}: {} vs oracle {}",
                grad[t],
                oracle[t]
            );
        }
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let img = seeded_image(11, 7, 2, 40);
        let v = FlowField::zero(11, 7);
        let out = warp(&img, &v).unwrap();
        assert_images_close(&out, &img, 0.0, "zero-flow warp");
    }

    #[test]
    fn warp_unit_flow_shifts_content_left() {
        let img = ramp_image(12, 6);
        let v = FlowField::uniform(12, 6, 1.0, 0.0);
        let out = warp(&img, &v).unwrap();
        for y in 0..6 {
            for x in 0..11 {
                assert!(
                    (out.get(x, y, 0) - img.get(x + 1, y, 0)).abs() < 1e-12,
                    "shift mismatch at {x},{y}"
                );
            }
            // Rightmost column clamps to the source border.
            assert!((out.get(11, y, 0) - img.get(11, y, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_half_pixel_interpolates_ramp_exactly() {
        let img = ramp_image(10, 8);
        let v = FlowField::uniform(10, 8, 0.5, 0.5);
        let out = warp(&img, &v).unwrap();
        // Interior of a bilinear ramp: sampling at +0.5 adds half the slope
        // on each axis.
        for y in 0..7 {
            for x in 0..9 {
                let expect = img.get(x, y, 0) + 0.5 * 0.1 + 0.5 * 0.05;
                assert!(
                    (out.get(x, y, 0) - expect).abs() < 1e-12,
                    "ramp interpolation at {x},{y}"
                );
            }
        }
    }

    #[test]
    fn warp_adjoint_image_part_is_exact_transpose() {
        let img = seeded_image(9, 9, 1, 50);
        let mut v = FlowField::zero(9, 9);
        for y in 0..9 {
            for x in 0..9 {
                v.set(x, y, 0.3 * ((x + 2 * y) % 5) as f64 - 0.6, 0.2 * ((2 * x + y) % 7) as f64 - 0.5);
            }
        }
        let ybar = seeded_image(9, 9, 1, 51);
        let ax = warp(&img, &v).unwrap();
        let (aty, _) = warp_adjoint(&ybar, &img, &v);
        let lhs: f64 = ax.data().iter().zip(ybar.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn warp_flow_gradient_matches_finite_differences() {
        let img = seeded_image(8, 8, 1, 60);
        let mut v = FlowField::zero(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                // Non-integer offsets keep sampling away from interpolation
                // kinks so central differences are valid.
                v.set(x, y, 0.37 - 0.11 * (x % 3) as f64, -0.23 + 0.07 * (y % 4) as f64);
            }
        }
        let gout = seeded_image(8, 8, 1, 61);
        let (_, gflow) = warp_adjoint(&gout, &img, &v);
        let h = 1e-6;
        let objective = |vv: &FlowField| -> f64 {
            warp(&img, vv)
                .unwrap()
                .data()
                .iter()
                .zip(gout.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        for &(x, y) in &[(2usize, 3usize), (5, 5), (1, 6), (6, 1)] {
            let (dx, dy) = v.get(x, y);
            let mut vp = v.clone();
            vp.set(x, y, dx + h, dy);
            let mut vm = v.clone();
            vm.set(x, y, dx - h, dy);
            let fd = (objective(&vp) - objective(&vm)) / (2.0 * h);
            let (gx, _) = gflow.get(x, y);
            assert!(
                (fd - gx).abs() < 1e-6 * fd.abs().max(1.0),
                "flow-x gradient at {x},{y}: fd {fd} vs {gx}"
            );
        }
    }

    fn morph_bruteforce(img: &Image, radius: usize, dilate_mode: bool) -> Image {
        let (w, h) = (img.width(), img.height());
        let r = radius as isize;
        let mut out = Image::new(w, h, 1);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut m = if dilate_mode {
                    f64::NEG_INFINITY
                } else {
                    f64::INFINITY
                };
                for j in -r..=r {
                    for i in -r..=r {
                        let sx = (x + i).clamp(0, w as isize - 1) as usize;
                        let sy = (y + j).clamp(0, h as isize - 1) as usize;
                        let v = img.get(sx, sy, 0);
                        m = if dilate_mode { m.max(v) } else { m.min(v) };
                    }
                }
                out.set(x as usize, y as usize, 0, m);
            }
        }
        out
    }

    #[test]
    fn morphology_matches_bruteforce() {
        for seed in 0..3u64 {
            let img = seeded_image(15, 12, 1, 70 + seed);
            for radius in [1usize, 2, 4] {
                let d = dilate(&img, radius).unwrap();
                let e = erode(&img, radius).unwrap();
                assert_images_close(&d, &morph_bruteforce(&img, radius, true), 0.0, "dilate");
                assert_images_close(&e, &morph_bruteforce(&img, radius, false), 0.0, "erode");
            }
        }
    }

    #[test]
    fn morphology_constant_is_fixed_point() {
        let img = Image::constant(9, 9, 1, 0.4);
        assert_images_close(&dilate(&img, 3).unwrap(), &img, 0.0, "dilate const");
        assert_images_close(&erode(&img, 3).unwrap(), &img, 0.0, "erode const");
    }

    #[test]
    fn dilate_single_pixel_paints_square() {
        let mut img = Image::new(11, 11, 1);
        img.set(5, 5, 0, 1.0);
        let d = dilate(&img, 2).unwrap();
        let mut count = 0;
        for y in 0..11 {
            for x in 0..11 {
                let inside = (3..=7).contains(&x) && (3..=7).contains(&y);
                assert_eq!(d.get(x, y, 0), if inside { 1.0 } else { 0.0 });
                count += inside as usize;
            }
        }
        assert_eq!(count, 25, "(2r+1)^2 footprint");
    }

    #[test]
    fn morphology_rejects_bad_arguments() {
        let img = Image::new(4, 4, 3);
        assert!(dilate(&img, 1).is_err(), "multi-channel rejected");
        let img1 = Image::new(4, 4, 1);
        assert!(erode(&img1, 0).is_err(), "zero radius rejected");
    }

    #[test]
    fn otsu_splits_binary_image_at_lowest_bin() {
        let mut img = Image::new(8, 8, 1);
        for i in 32..64 {
            img.data_mut()[i] = 1.0;
        }
        let t = otsu_threshold(&img).unwrap();
        assert!((t - 1.0 / 256.0).abs() < 1e-12, "lowest maximizing split, got {t}");
        // The threshold separates the classes.
        assert!(0.0 < t && t <= 1.0);
    }

    #[test]
    fn otsu_separates_two_gaussian_clusters() {
        // Ties break toward the lower split, so the threshold lands just
        // above the largest dark-cluster sample; with enough draws the
        // sigma = 0.05 tails reach past 0.4, placing it between the modes.
        let mut img = Image::new(512, 512, 1);
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            let (u1, u2) = (next().max(1e-12), next());
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *v = (if i % 2 == 0 { 0.2 } else { 0.8 } + 0.05 * z).clamp(0.0, 1.0);
        }
        let t = otsu_threshold(&img).unwrap();
        assert!(t > 0.4 && t < 0.6, "threshold {t} should fall between clusters");
    }

    #[test]
    fn otsu_rejects_constant_image() {
        let img = Image::constant(6, 6, 1, 0.5);
        assert!(matches!(otsu_threshold(&img), Err(Error::NoBimodalStructure)));
    }

    /// Independent Otsu oracle: recomputes class statistics from scratch for
    /// every candidate split.
    fn otsu_bruteforce(img: &Image) -> Option<f64> {
        let bins: Vec<usize> = img
            .data()
            .iter()
            .map(|&v| (((v.clamp(0.0, 1.0)) * 256.0) as usize).min(255))
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for s in 0..255usize {
            let c0: Vec<f64> = bins.iter().filter(|&&b| b <= s).map(|&b| b as f64).collect();
            let c1: Vec<f64> = bins.iter().filter(|&&b| b > s).map(|&b| b as f64).collect();
            if c0.is_empty() || c1.is_empty() {
                continue;
            }
            let mu0 = c0.iter().sum::<f64>() / c0.len() as f64;
            let mu1 = c1.iter().sum::<f64>() / c1.len() as f64;
            let var = c0.len() as f64 * c1.len() as f64 * (mu0 - mu1).powi(2);
            if best.map_or(true, |(_, bv)| var > bv) {
                best = Some((s, var));
            }
        }
        best.map(|(s, _)| (s + 1) as f64 / 256.0)
    }

    #[test]
    fn otsu_matches_bruteforce_oracle() {
        for seed in 0..6u64 {
            let mut img = seeded_image(12, 12, 1, 90 + seed);
            // Push toward bimodality so the oracle has structure to find.
            img.map_inplace(|v| if v < 0.5 { v * 0.4 } else { 0.6 + v * 0.4 });
            let t = otsu_threshold(&img).unwrap();
            let oracle = otsu_bruteforce(&img).unwrap();
            assert_eq!(t, oracle, "seed {seed}");
        }
    }

    #[test]
    fn gradient_of_ramp_is_constant_with_zero_edges() {
        let img = ramp_image(9, 7);
        let (gx, gy) = gradient_xy(&img).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                let ex = if x == 8 { 0.0 } else { 0.1 };
                let ey = if y == 6 { 0.0 } else { 0.05 };
                assert!((gx.get(x, y, 0) - ex).abs() < 1e-12);
                assert!((gy.get(x, y, 0) - ey).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_adjoint_is_exact_transpose() {
        let x = seeded_image(10, 8, 1, 101);
        let gxbar = seeded_image(10, 8, 1, 102);
        let gybar = seeded_image(10, 8, 1, 103);
        let (gx, gy) = gradient_xy(&x).unwrap();
        let aty = gradient_xy_adjoint(&gxbar, &gybar);
        let lhs: f64 = gx
            .data()
            .iter()
            .zip(gxbar.data())
            .chain(gy.data().iter().zip(gybar.data()))
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn downsample2_sizes_and_constant() {
        let img = Image::constant(9, 6, 1, 0.8);
        let d = downsample2(&img);
        assert_eq!((d.width(), d.height()), (5, 3));
        for &v in d.data() {
            assert!((v - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample2_preserves_linear_ramps_in_interior() {
        let img = ramp_image(16, 16);
        let d = downsample2(&img);
        // The binomial filter is symmetric, so it reproduces linear signals
        // away from the borders.
        for y in 1..7 {
            for x in 1..7 {
                let expect = img.get(2 * x, 2 * y, 0);
                assert!(
                    (d.get(x, y, 0) - expect).abs() < 1e-12,
                    "interior sample {x},{y}"
                );
            }
        }
    }

    #[test]
    fn upsample_flow_doubles_size_and_magnitude() {
        let v = FlowField::uniform(5, 4, 1.0, -0.5);
        let u = upsample_flow(&v);
        assert_eq!((u.width(), u.height()), (10, 8));
        for y in 0..8 {
            for x in 0..10 {
                let (dx, dy) = u.get(x, y);
                assert!((dx - 2.0).abs() < 1e-12 && (dy + 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_zero_flow_stays_zero() {
        let u = upsample_flow(&FlowField::zero(3, 3));
        assert!(u.dx().iter().chain(u.dy()).all(|&v| v == 0.0));
    }

    #[test]
    fn resize_flow_adjoint_is_exact_transpose() {
        let src = {
            let mut f = FlowField::zero(5, 7);
            for y in 0..7 {
                for x in 0..5 {
                    f.set(x, y, (x * y) as f64 * 0.1, x as f64 - y as f64 * 0.3);
                }
            }
            f
        };
        let up = resize_flow(&src, 12, 11);
        let mut ybar = FlowField::zero(12, 11);
        for y in 0..11 {
            for x in 0..12 {
                ybar.set(x, y, ((x + y) % 3) as f64 - 1.0, ((x * 2 + y) % 5) as f64 * 0.2);
            }
        }
        let aty = resize_flow_adjoint(&ybar, 5, 7);
        let lhs: f64 = up
            .dx()
            .iter()
            .zip(ybar.dx())
            .chain(up.dy().iter().zip(ybar.dy()))
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = src
            .dx()
            .iter()
            .zip(aty.dx())
            .chain(src.dy().iter().zip(aty.dy()))
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn conv2d_preserves_constants(level in 0.0f64..1.0, seed in 0u64..1000) {
            let img = Image::constant(7, 7, 1, level);
            let weights = seeded_image(5, 5, 1, seed).data().to_vec();
            if let Ok(k) = Kernel::from_weights(5, &weights) {
                let out = conv2d(&img, &k);
                for &v in out.data() {
                    prop_assert!((v - level).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn erosion_below_dilation_pointwise(seed in 0u64..1000, radius in 1usize..4) {
            let img = seeded_image(10, 10, 1, seed);
            let d = dilate(&img, radius).unwrap();
            let e = erode(&img, radius).unwrap();
            for i in 0..img.data().len() {
                prop_assert!(e.data()[i] <= img.data()[i] + 1e-15);
                prop_assert!(img.data()[i] <= d.data()[i] + 1e-15);
            }
        }

        #[test]
        fn otsu_agrees_with_exhaustive_oracle(seed in 0u64..500) {
            let img = seeded_image(8, 8, 1, seed);
            let t = otsu_threshold(&img).unwrap();
            let oracle = otsu_bruteforce(&img).unwrap();
            prop_assert_eq!(t, oracle);
        }

        #[test]
        fn warp_identity_under_zero_flow(seed in 0u64..1000) {
            let img = seeded_image(6, 6, 2, seed);
            let out = warp(&img, &FlowField::zero(6, 6)).unwrap();
            prop_assert_eq!(out, img);
        }
    }
}
