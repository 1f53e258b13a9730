//! Binary proxy construction: a two-valued estimate of the latent sharp
//! patch, recovered from a blurred observation by morphology and Otsu
//! thresholding.
//!
//! Dilation and erosion each flatten the blur transition from one side;
//! their average has a clean bimodal histogram whose Otsu split separates
//! the dark and bright plateaus. The Otsu split seeds a rough mask from
//! which the plateau intensities are measured over transition-free (eroded)
//! regions; the final mask thresholds the observation at the plateau
//! midpoint. That midpoint contour is the 50% crossing of the edge spread,
//! which for symmetric blur is the true region boundary, and unlike the raw
//! Otsu split it does not drift when dark and bright areas are unbalanced.

use crate::error::{Error, Result};
use crate::ops::{dilate, erode, otsu_threshold};
use crate::raster::Image;

/// Fewest pixels an eroded level-estimation region may contain.
pub const MIN_ROI_PIXELS: usize = 16;

/// Two-valued proxy for the latent sharp patch.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryProxy {
    /// Exactly two-valued image: `dark_level` where `dark_mask`, else
    /// `bright_level`.
    pub image: Image,
    pub dark_level: f64,
    pub bright_level: f64,
    /// Per-pixel support of the dark region, row-major.
    pub dark_mask: Vec<bool>,
}

/// Statistics of an ROI that reproduce the exact value on constant regions:
/// the mean of N identical samples must be that sample, which naive sum/N
/// does not guarantee in floating point.
fn roi_level(b: &Image, roi: &[bool]) -> (f64, usize) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &inside) in roi.iter().enumerate() {
        if inside {
            let v = b.data()[i];
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return (f64::NAN, 0);
    }
    let level = if lo == hi { lo } else { sum / n as f64 };
    (level, n)
}

fn erode_mask(mask: &[bool], width: usize, height: usize, radius: usize) -> Result<Vec<bool>> {
    let mut ind = Image::new(width, height, 1);
    for (i, &m) in mask.iter().enumerate() {
        ind.data_mut()[i] = if m { 1.0 } else { 0.0 };
    }
    let er = erode(&ind, radius)?;
    Ok(er.data().iter().map(|&v| v > 0.5).collect())
}

/// Splits `b` at `t`, erodes both classes by `morph_radius`, and measures
/// plateau levels over the eroded supports. Errors if either support drops
/// below [`MIN_ROI_PIXELS`].
fn mask_and_levels(
    b: &Image,
    t: f64,
    morph_radius: usize,
) -> Result<(Vec<bool>, f64, f64)> {
    let (w, h) = (b.width(), b.height());
    let dark_mask: Vec<bool> = b.data().iter().map(|&v| v < t).collect();

    let dark_roi = erode_mask(&dark_mask, w, h, morph_radius)?;
    let bright_full: Vec<bool> = dark_mask.iter().map(|&m| !m).collect();
    let bright_roi = erode_mask(&bright_full, w, h, morph_radius)?;

    let (dark_level, dark_n) = roi_level(b, &dark_roi);
    if dark_n < MIN_ROI_PIXELS {
        return Err(Error::EmptyRoi {
            region: "dark",
            pixels: dark_n,
            min: MIN_ROI_PIXELS,
        });
    }
    let (bright_level, bright_n) = roi_level(b, &bright_roi);
    if bright_n < MIN_ROI_PIXELS {
        return Err(Error::EmptyRoi {
            region: "bright",
            pixels: bright_n,
            min: MIN_ROI_PIXELS,
        });
    }
    // Every dark sample is < t and every bright sample >= t, so the means
    // cannot invert.
    debug_assert!(dark_level < bright_level);
    Ok((dark_mask, dark_level, bright_level))
}

/// Builds the binary proxy for a single-channel patch.
///
/// `morph_radius` should be about the blur radius: large enough that the
/// dilated and eroded images plateau across the transition band, small
/// enough not to swallow the thinnest feature. Levels are measured over
/// regions eroded by the same radius.
pub fn build_proxy(b: &Image, morph_radius: usize) -> Result<BinaryProxy> {
    if b.channels() != 1 {
        return Err(Error::invalid(format!(
            "proxy input must be single-channel, got {}",
            b.channels()
        )));
    }
    let d = dilate(b, morph_radius)?;
    let e = erode(b, morph_radius)?;
    let mut precursor = d;
    for (p, &ev) in precursor.data_mut().iter_mut().zip(e.data()) {
        *p = (*p + ev) / 2.0;
    }
    let seed_t = otsu_threshold(&precursor)?;

    // Pass 1: rough split at the Otsu threshold, good enough to find the
    // plateaus. Pass 2: re-split at the plateau midpoint, the blur-symmetric
    // boundary estimate.
    let (_, rough_dark, rough_bright) = mask_and_levels(b, seed_t, morph_radius)?;
    let mid_t = (rough_dark + rough_bright) / 2.0;
    let (dark_mask, dark_level, bright_level) = mask_and_levels(b, mid_t, morph_radius)?;

    let mut image = Image::new(b.width(), b.height(), 1);
    for (o, &m) in image.data_mut().iter_mut().zip(&dark_mask) {
        *o = if m { dark_level } else { bright_level };
    }
    Ok(BinaryProxy {
        image,
        dark_level,
        bright_level,
        dark_mask,
    })
}
