//! Color-filter-array sampling and bilinear reconstruction.
//!
//! `capture_forward` models what a Bayer sensor plus a linear demosaicker do
//! to a full-color image: keep one channel per pixel, then interpolate each
//! channel from its own sampling sites. The whole map is linear, built from
//! per-pixel stencils, and `capture_adjoint` scatters through the identical
//! stencils, so the adjoint identity holds to round-off.
//!
//! Bilinear demosaicing never mixes channels: red is interpolated only from
//! red sites, and likewise for green and blue. Calibration exploits this by
//! running the forward model one channel at a time ([`channel_forward`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

/// Channel indices used throughout: 0 = red, 1 = green, 2 = blue.
pub const RED: usize = 0;
pub const GREEN: usize = 1;
pub const BLUE: usize = 2;

/// The four 2x2 Bayer tilings, named by their top-left quad reading order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CfaPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl CfaPattern {
    /// 2x2 color table indexed `[y % 2][x % 2]`.
    fn table(self) -> [[usize; 2]; 2] {
        match self {
            CfaPattern::Rggb => [[RED, GREEN], [GREEN, BLUE]],
            CfaPattern::Bggr => [[BLUE, GREEN], [GREEN, RED]],
            CfaPattern::Grbg => [[GREEN, RED], [BLUE, GREEN]],
            CfaPattern::Gbrg => [[GREEN, BLUE], [RED, GREEN]],
        }
    }

    /// Color sampled at absolute pixel `(x, y)`.
    #[inline]
    pub fn color_at(self, x: usize, y: usize) -> usize {
        self.table()[y % 2][x % 2]
    }

    /// Pattern seen by a crop whose top-left corner sits at `(dx, dy)` in the
    /// original image: `shifted(dx, dy).color_at(x, y) == color_at(x+dx, y+dy)`.
    pub fn shifted(self, dx: usize, dy: usize) -> CfaPattern {
        let t = self.table();
        let shifted = [
            [t[dy % 2][dx % 2], t[dy % 2][(dx + 1) % 2]],
            [t[(dy + 1) % 2][dx % 2], t[(dy + 1) % 2][(dx + 1) % 2]],
        ];
        for p in [
            CfaPattern::Rggb,
            CfaPattern::Bggr,
            CfaPattern::Grbg,
            CfaPattern::Gbrg,
        ] {
            if p.table() == shifted {
                return p;
            }
        }
        unreachable!("every shift of a Bayer tiling is a Bayer tiling")
    }

    /// Parity `(px, py)` of the sampling lattice for `channel`; green
    /// occupies both checkerboard phases and has no single parity.
    fn parity(self, channel: usize) -> Option<(usize, usize)> {
        let t = self.table();
        for py in 0..2 {
            for px in 0..2 {
                if t[py][px] == channel && channel != GREEN {
                    return Some((px, py));
                }
            }
        }
        None
    }
}

/// Single-plane sensor readout plus the pattern that produced it.
#[derive(Debug, Clone)]
pub struct RawMosaic {
    pub pattern: CfaPattern,
    pub image: Image,
}

/// Keeps one sample per pixel according to the pattern.
pub fn mosaic(img: &Image, pattern: CfaPattern) -> Result<RawMosaic> {
    if img.channels() != 3 {
        return Err(Error::invalid("mosaic expects a 3-channel image"));
    }
    let (w, h) = (img.width(), img.height());
    let mut out = Image::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, 0, img.get(x, y, pattern.color_at(x, y)));
        }
    }
    Ok(RawMosaic {
        pattern,
        image: out,
    })
}

/// Up to four (x, y, weight) taps describing one interpolated sample.
type Stencil = ([(usize, usize, f64); 4], usize);

/// Interpolation stencil for `channel` at pixel `(x, y)`. Taps reference
/// only sites of that channel; weights sum to one. Shared by the forward
/// gather and the adjoint scatter so the two stay exact transposes.
fn stencil(pattern: CfaPattern, channel: usize, x: usize, y: usize, w: usize, h: usize) -> Stencil {
    let mut taps = [(0usize, 0usize, 0.0f64); 4];
    if pattern.color_at(x, y) == channel {
        taps[0] = (x, y, 1.0);
        return (taps, 1);
    }
    if channel == GREEN {
        // Green forms a checkerboard; at non-green pixels every in-bounds
        // axial neighbor is green. Average the ones that exist.
        let mut n = 0usize;
        let neighbors = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in neighbors {
            if nx < w && ny < h {
                taps[n] = (nx, ny, 1.0);
                n += 1;
            }
        }
        let wgt = 1.0 / n as f64;
        for t in taps[..n].iter_mut() {
            t.2 = wgt;
        }
        return (taps, n);
    }
    // Red/blue sit on a rectangular half-rate lattice: bilinear interpolation
    // in site-index space, clamped at the lattice hull (replication).
    let (px, py) = pattern.parity(channel).expect("red/blue have a parity");
    let nsx = (w - px).div_ceil(2);
    let nsy = (h - py).div_ceil(2);
    let gx = ((x as f64 - px as f64) / 2.0).clamp(0.0, (nsx - 1) as f64);
    let gy = ((y as f64 - py as f64) / 2.0).clamp(0.0, (nsy - 1) as f64);
    let x0 = (gx.floor() as usize).min(nsx.saturating_sub(2));
    let y0 = (gy.floor() as usize).min(nsy.saturating_sub(2));
    let fx = gx - x0 as f64;
    let fy = gy - y0 as f64;
    let x1 = (x0 + 1).min(nsx - 1);
    let y1 = (y0 + 1).min(nsy - 1);
    let site = |sx: usize, sy: usize| (2 * sx + px, 2 * sy + py);
    let mut n = 0usize;
    let mut push = |(sx, sy): (usize, usize), wgt: f64| {
        if wgt == 0.0 {
            return;
        }
        // Merge duplicate taps produced by clamping at the hull.
        for t in taps[..n].iter_mut() {
            if t.0 == sx && t.1 == sy {
                t.2 += wgt;
                return;
            }
        }
        taps[n] = (sx, sy, wgt);
        n += 1;
    };
    push(site(x0, y0), (1.0 - fx) * (1.0 - fy));
    push(site(x1, y0), fx * (1.0 - fy));
    push(site(x0, y1), (1.0 - fx) * fy);
    push(site(x1, y1), fx * fy);
    drop(push);
    (taps, n)
}

/// Reconstructs a full 3-channel image from a mosaic by per-channel linear
/// interpolation. Sampled sites are preserved exactly.
pub fn demosaic_bilinear(raw: &RawMosaic) -> Image {
    let (w, h) = (raw.image.width(), raw.image.height());
    let mut out = Image::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let (taps, n) = stencil(raw.pattern, c, x, y, w, h);
                let mut acc = 0.0;
                for &(sx, sy, wgt) in &taps[..n] {
                    acc += wgt * raw.image.get(sx, sy, 0);
                }
                out.set(x, y, c, acc);
            }
        }
    }
    out
}

/// Sensor capture model: mosaic followed by bilinear demosaic.
pub fn capture_forward(img: &Image, pattern: CfaPattern) -> Result<Image> {
    let raw = mosaic(img, pattern)?;
    Ok(demosaic_bilinear(&raw))
}

/// Exact adjoint of [`capture_forward`]: demosaic taps scatter into the raw
/// plane, and the raw plane scatters back to the channel each site samples.
pub fn capture_adjoint(grad: &Image, pattern: CfaPattern) -> Result<Image> {
    if grad.channels() != 3 {
        return Err(Error::invalid("capture_adjoint expects a 3-channel cotangent"));
    }
    let (w, h) = (grad.width(), grad.height());
    let mut graw = Image::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let g = grad.get(x, y, c);
                if g == 0.0 {
                    continue;
                }
                let (taps, n) = stencil(pattern, c, x, y, w, h);
                for &(sx, sy, wgt) in &taps[..n] {
                    graw.add_at(sx, sy, 0, wgt * g);
                }
            }
        }
    }
    let mut out = Image::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, pattern.color_at(x, y), graw.get(x, y, 0));
        }
    }
    Ok(out)
}

/// Channel-restricted capture: because bilinear demosaicing never crosses
/// channels, channel `c` of `capture_forward(img)` depends only on channel
/// `c` of `img`. This computes that restriction on a single plane.
pub fn channel_forward(plane: &Image, pattern: CfaPattern, channel: usize) -> Result<Image> {
    if plane.channels() != 1 {
        return Err(Error::invalid("channel_forward expects a single-channel plane"));
    }
    if channel > 2 {
        return Err(Error::invalid("channel index must be 0, 1, or 2"));
    }
    let (w, h) = (plane.width(), plane.height());
    let mut out = Image::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let (taps, n) = stencil(pattern, channel, x, y, w, h);
            let mut acc = 0.0;
            for &(sx, sy, wgt) in &taps[..n] {
                acc += wgt * plane.get(sx, sy, 0);
            }
            out.set(x, y, 0, acc);
        }
    }
    Ok(out)
}

/// Exact adjoint of [`channel_forward`].
pub fn channel_adjoint(grad: &Image, pattern: CfaPattern, channel: usize) -> Result<Image> {
    if grad.channels() != 1 {
        return Err(Error::invalid("channel_adjoint expects a single-channel cotangent"));
    }
    let (w, h) = (grad.width(), grad.height());
    let mut out = Image::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let g = grad.get(x, y, 0);
            if g == 0.0 {
                continue;
            }
            let (taps, n) = stencil(pattern, channel, x, y, w, h);
            for &(sx, sy, wgt) in &taps[..n] {
                out.add_at(sx, sy, 0, wgt * g);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded_image(w: usize, h: usize, ch: usize, seed: u64) -> Image {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut img = Image::new(w, h, ch);
        for v in img.data_mut() {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            *v = (state >> 11) as f64 / (1u64 << 53) as f64;
        }
        img
    }

    const ALL: [CfaPattern; 4] = [
        CfaPattern::Rggb,
        CfaPattern::Bggr,
        CfaPattern::Grbg,
        CfaPattern::Gbrg,
    ];

    #[test]
    fn color_at_matches_pattern_names() {
        assert_eq!(CfaPattern::Rggb.color_at(0, 0), RED);
        assert_eq!(CfaPattern::Rggb.color_at(1, 0), GREEN);
        assert_eq!(CfaPattern::Rggb.color_at(0, 1), GREEN);
        assert_eq!(CfaPattern::Rggb.color_at(1, 1), BLUE);
        assert_eq!(CfaPattern::Bggr.color_at(0, 0), BLUE);
        assert_eq!(CfaPattern::Grbg.color_at(1, 0), RED);
        assert_eq!(CfaPattern::Gbrg.color_at(0, 1), RED);
    }

    #[test]
    fn shifted_patterns_relabel_coordinates() {
        for p in ALL {
            for dy in 0..2 {
                for dx in 0..2 {
                    let s = p.shifted(dx, dy);
                    for y in 0..4 {
                        for x in 0..4 {
                            assert_eq!(s.color_at(x, y), p.color_at(x + dx, y + dy));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mosaic_selects_matching_channel() {
        let mut img = Image::new(4, 4, 3);
        for y in 0..4 {
            for x in 0..4 {
                img.set(x, y, RED, 0.2);
                img.set(x, y, GREEN, 0.5);
                img.set(x, y, BLUE, 0.8);
            }
        }
        let raw = mosaic(&img, CfaPattern::Rggb).unwrap();
        assert_eq!(raw.image.get(0, 0, 0), 0.2);
        assert_eq!(raw.image.get(1, 0, 0), 0.5);
        assert_eq!(raw.image.get(0, 1, 0), 0.5);
        assert_eq!(raw.image.get(1, 1, 0), 0.8);
    }

    #[test]
    fn demosaic_preserves_sampled_sites() {
        let img = seeded_image(8, 6, 3, 11);
        for p in ALL {
            let raw = mosaic(&img, p).unwrap();
            let rec = demosaic_bilinear(&raw);
            for y in 0..6 {
                for x in 0..8 {
                    let c = p.color_at(x, y);
                    assert_eq!(
                        rec.get(x, y, c),
                        img.get(x, y, c),
                        "site ({x},{y}) channel {c} pattern {p:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn demosaic_reconstructs_linear_ramp_in_interior() {
        let mut img = Image::new(12, 10, 3);
        for y in 0..10 {
            for x in 0..12 {
                for c in 0..3 {
                    img.set(x, y, c, x as f64 / 20.0);
                }
            }
        }
        for p in ALL {
            let rec = demosaic_bilinear(&mosaic(&img, p).unwrap());
            for y in 2..8 {
                for x in 2..10 {
                    for c in 0..3 {
                        assert!(
                            (rec.get(x, y, c) - img.get(x, y, c)).abs() < 1e-12,
                            "ramp mismatch at ({x},{y},{c}) pattern {p:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn capture_forward_fixes_constant_gray() {
        let img = Image::constant(9, 7, 3, 0.42);
        for p in ALL {
            let cap = capture_forward(&img, p).unwrap();
            for &v in cap.data() {
                assert!((v - 0.42).abs() < 1e-15, "gray constancy under {p:?}");
            }
        }
    }

    #[test]
    fn capture_forward_is_idempotent() {
        let img = seeded_image(10, 9, 3, 17);
        for p in ALL {
            let once = capture_forward(&img, p).unwrap();
            let twice = capture_forward(&once, p).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                assert!((a - b).abs() < 1e-14, "projection idempotence under {p:?}");
            }
        }
    }

    #[test]
    fn capture_forward_is_linear() {
        let a = seeded_image(7, 8, 3, 21);
        let b = seeded_image(7, 8, 3, 22);
        let (alpha, beta) = (0.6, -1.3);
        for p in ALL {
            let mut combo = a.clone();
            for (i, v) in combo.data_mut().iter_mut().enumerate() {
                *v = alpha * a.data()[i] + beta * b.data()[i];
            }
            let lhs = capture_forward(&combo, p).unwrap();
            let ca = capture_forward(&a, p).unwrap();
            let cb = capture_forward(&b, p).unwrap();
            for i in 0..lhs.data().len() {
                let rhs = alpha * ca.data()[i] + beta * cb.data()[i];
                assert!((lhs.data()[i] - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn capture_adjoint_identity_holds_to_roundoff() {
        let x = seeded_image(11, 9, 3, 31);
        let ybar = seeded_image(11, 9, 3, 32);
        for p in ALL {
            let ax = capture_forward(&x, p).unwrap();
            let aty = capture_adjoint(&ybar, p).unwrap();
            let lhs: f64 = ax.data().iter().zip(ybar.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() < 1e-10,
                "adjoint identity under {p:?}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn channel_forward_matches_full_capture() {
        let img = seeded_image(9, 11, 3, 41);
        for p in ALL {
            let full = capture_forward(&img, p).unwrap();
            for c in 0..3 {
                let restricted = channel_forward(&img.plane(c), p, c).unwrap();
                for i in 0..restricted.data().len() {
                    assert_eq!(
                        restricted.data()[i],
                        full.plane(c).data()[i],
                        "channel {c} restriction under {p:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn channel_adjoint_identity_holds() {
        let x = seeded_image(8, 10, 1, 51);
        let ybar = seeded_image(8, 10, 1, 52);
        for p in ALL {
            for c in 0..3 {
                let ax = channel_forward(&x, p, c).unwrap();
                let aty = channel_adjoint(&ybar, p, c).unwrap();
                let lhs: f64 = ax.data().iter().zip(ybar.data()).map(|(a, b)| a * b).sum();
                let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-12, "channel {c} under {p:?}");
            }
        }
    }

    #[test]
    fn odd_sized_images_demosaic_without_panic() {
        // Odd dimensions exercise single-site rows/columns of the half-rate
        // lattices and the clamped stencils at the far borders.
        for (w, h) in [(5usize, 5usize), (2, 2), (3, 7), (2, 5)] {
            let img = seeded_image(w, h, 3, (w * 31 + h) as u64);
            for p in ALL {
                let rec = demosaic_bilinear(&mosaic(&img, p).unwrap());
                for y in 0..h {
                    for x in 0..w {
                        let c = p.color_at(x, y);
                        assert_eq!(rec.get(x, y, c), img.get(x, y, c));
                    }
                }
            }
        }
    }
}
