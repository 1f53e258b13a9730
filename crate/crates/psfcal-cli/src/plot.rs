//! Polyline plots rendered straight into an RGB raster. The rasters carry
//! no text; captions and legends belong to the surrounding HTML, which
//! keeps this renderer free of font handling.

use psfcal::Image;

/// One curve: data-space points plus an RGB stroke color in `[0, 1]`.
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: [f64; 3],
}

/// Stroke colors cycled across series; chosen to stay distinct on white.
pub const PALETTE: [[f64; 3]; 6] = [
    [0.12, 0.29, 0.69],
    [0.80, 0.25, 0.10],
    [0.13, 0.55, 0.22],
    [0.55, 0.15, 0.60],
    [0.85, 0.55, 0.05],
    [0.10, 0.60, 0.65],
];

/// Hex form of [`PALETTE`] for HTML legends that must match the strokes.
pub fn palette_hex(i: usize) -> String {
    let c = PALETTE[i % PALETTE.len()];
    format!(
        "#{:02x}{:02x}{:02x}",
        (c[0] * 255.0).round() as u8,
        (c[1] * 255.0).round() as u8,
        (c[2] * 255.0).round() as u8
    )
}

const MARGIN: usize = 16;
const GRID_DIVS: usize = 5;

/// Renders series into a `width x height` plot. The x range spans the data;
/// the y range spans the data unless `y_range` pins it (e.g. `(0, 1.05)`
/// for modulation curves).
pub fn line_plot(
    series: &[Series],
    width: usize,
    height: usize,
    y_range: Option<(f64, f64)>,
) -> Image {
    let mut img = Image::constant(width.max(4 * MARGIN), height.max(4 * MARGIN), 3, 1.0);
    let (w, h) = (img.width(), img.height());
    let (x0, x1, y0, y1) = data_range(series, y_range);

    let left = MARGIN as f64;
    let right = (w - MARGIN) as f64;
    let top = MARGIN as f64;
    let bottom = (h - MARGIN) as f64;
    let to_px = |x: f64, y: f64| {
        let px = left + (x - x0) / (x1 - x0) * (right - left);
        let py = bottom - (y - y0) / (y1 - y0) * (bottom - top);
        (px, py)
    };

    let grid = [0.85, 0.85, 0.87];
    for d in 0..=GRID_DIVS {
        let t = d as f64 / GRID_DIVS as f64;
        let gx = left + t * (right - left);
        let gy = top + t * (bottom - top);
        stroke(&mut img, (gx, top), (gx, bottom), grid);
        stroke(&mut img, (left, gy), (right, gy), grid);
    }
    let frame = [0.25, 0.25, 0.28];
    stroke(&mut img, (left, top), (right, top), frame);
    stroke(&mut img, (right, top), (right, bottom), frame);
    stroke(&mut img, (right, bottom), (left, bottom), frame);
    stroke(&mut img, (left, bottom), (left, top), frame);

    for s in series {
        for pair in s.points.windows(2) {
            stroke(&mut img, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), s.color);
        }
    }
    img
}

fn data_range(series: &[Series], y_range: Option<(f64, f64)>) -> (f64, f64, f64, f64) {
    let mut x0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            if x.is_finite() {
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
            if y.is_finite() {
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    if !x0.is_finite() || x1 <= x0 {
        (x0, x1) = (0.0, 1.0);
    }
    if let Some((lo, hi)) = y_range {
        (y0, y1) = (lo, hi);
    } else if !y0.is_finite() || y1 <= y0 {
        (y0, y1) = (0.0, 1.0);
    } else {
        let pad = 0.05 * (y1 - y0);
        y0 -= pad;
        y1 += pad;
    }
    (x0, x1, y0, y1)
}

/// Draws a 1px line by dense sampling with a bilinear splat; repeated
/// blending toward the stroke color converges instead of over-saturating.
fn stroke(img: &mut Image, a: (f64, f64), b: (f64, f64), color: [f64; 3]) {
    let len = ((b.0 - a.0).hypot(b.1 - a.1)).max(1e-9);
    let steps = (len / 0.4).ceil() as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        splat(img, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), color);
    }
}

fn splat(img: &mut Image, fx: f64, fy: f64, color: [f64; 3]) {
    let x0 = fx.floor();
    let y0 = fy.floor();
    let (ax, ay) = (fx - x0, fy - y0);
    blend(img, x0 as isize, y0 as isize, color, (1.0 - ax) * (1.0 - ay));
    blend(img, x0 as isize + 1, y0 as isize, color, ax * (1.0 - ay));
    blend(img, x0 as isize, y0 as isize + 1, color, (1.0 - ax) * ay);
    blend(img, x0 as isize + 1, y0 as isize + 1, color, ax * ay);
}

fn blend(img: &mut Image, x: isize, y: isize, color: [f64; 3], alpha: f64) {
    if x < 0 || y < 0 || x >= img.width() as isize || y >= img.height() as isize {
        return;
    }
    let (x, y) = (x as usize, y as usize);
    for c in 0..3 {
        let v = img.get(x, y, c);
        img.set(x, y, c, v + (color[c] - v) * alpha);
    }
}
