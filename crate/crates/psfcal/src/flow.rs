//! Coarse-to-fine deformation field aligning the binary proxy to the
//! observation.
//!
//! The flow is parameterized directly: a pyramid of per-pixel displacement
//! fields, coarsest first, each level holding residual detail at its scale.
//! Composition upsamples every active level to full resolution (scaling
//! displacement magnitudes with the size ratio) and sums them, so gradients
//! distribute linearly across levels. Coarse levels move content by many
//! full-resolution pixels per unit of parameter, which is what lets a few
//! hundred gradient steps pull a misaligned proxy into place before fine
//! levels refine subpixel detail.

use crate::error::{Error, Result};
use crate::ops::{gradient_xy, gradient_xy_adjoint, resize_flow, resize_flow_adjoint};
use crate::raster::{FlowField, Image};

/// Smallest admissible coarsest-level extent.
pub const MIN_COARSE_DIM: usize = 4;

/// Pyramid of displacement fields, coarsest first. Levels above
/// `current_level` are inactive: zero-initialized and excluded from
/// composition until the schedule reaches them.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams {
    levels: Vec<FlowField>,
    width: usize,
    height: usize,
    current: usize,
}

/// Dimensions of pyramid level `level` (0 = coarsest) for a full resolution
/// of `width` x `height`: each finer level doubles, the finest matching the
/// image exactly.
pub fn level_dims(width: usize, height: usize, levels: usize, level: usize) -> (usize, usize) {
    let shift = levels - 1 - level;
    (
        width.div_ceil(1usize << shift),
        height.div_ceil(1usize << shift),
    )
}

impl FlowParams {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// Index of the finest level currently optimized; composition includes
    /// levels `0..=current_level()`.
    pub fn current_level(&self) -> usize {
        self.current
    }

    pub fn set_current_level(&mut self, level: usize) {
        assert!(level < self.levels.len(), "level {level} out of range");
        self.current = level;
    }

    pub fn level(&self, level: usize) -> &FlowField {
        &self.levels[level]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut FlowField {
        &mut self.levels[level]
    }

    pub fn full_width(&self) -> usize {
        self.width
    }

    pub fn full_height(&self) -> usize {
        self.height
    }
}

/// Builds a zero-initialized (identity-warp) pyramid with the coarsest
/// level active.
pub fn init_flow(width: usize, height: usize, levels: usize) -> Result<FlowParams> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("flow needs a nonzero image extent"));
    }
    if levels == 0 {
        return Err(Error::invalid("flow pyramid needs at least one level"));
    }
    let (cw, ch) = level_dims(width, height, levels, 0);
    if cw < MIN_COARSE_DIM || ch < MIN_COARSE_DIM {
        return Err(Error::invalid(format!(
            "{levels} levels reduce {width}x{height} to {cw}x{ch}; coarsest must be at least {MIN_COARSE_DIM}x{MIN_COARSE_DIM}"
        )));
    }
    let fields = (0..levels)
        .map(|l| {
            let (w, h) = level_dims(width, height, levels, l);
            FlowField::zero(w, h)
        })
        .collect();
    Ok(FlowParams {
        levels: fields,
        width,
        height,
        current: 0,
    })
}

/// Full-resolution displacement: the sum of every active level upsampled to
/// the image size, with magnitudes scaled by the per-axis size ratio.
pub fn compose_flow(p: &FlowParams) -> FlowField {
    let mut total = FlowField::zero(p.width, p.height);
    for level in &p.levels[..=p.current] {
        let up = resize_flow(level, p.width, p.height);
        total.add_assign(&up);
    }
    total
}

/// Gradients of the active pyramid levels given the gradient of the composed
/// full-resolution field. Inactive levels receive zero fields of their shape.
pub fn compose_flow_adjoint(p: &FlowParams, grad_full: &FlowField) -> Vec<FlowField> {
    assert!(
        grad_full.width() == p.width && grad_full.height() == p.height,
        "cotangent shape {}x{} must match full resolution {}x{}",
        grad_full.width(),
        grad_full.height(),
        p.width,
        p.height
    );
    p.levels
        .iter()
        .enumerate()
        .map(|(l, field)| {
            if l <= p.current {
                resize_flow_adjoint(grad_full, field.width(), field.height())
            } else {
                FlowField::zero(field.width(), field.height())
            }
        })
        .collect()
}

fn component_planes(v: &FlowField) -> (Image, Image) {
    let w = v.width();
    let h = v.height();
    let dx = Image::from_vec(w, h, 1, v.dx().to_vec()).expect("component length");
    let dy = Image::from_vec(w, h, 1, v.dy().to_vec()).expect("component length");
    (dx, dy)
}

/// Mean squared forward-difference gradient over both displacement
/// components: zero for constant (translational) flow, growing with local
/// distortion.
pub fn flow_smoothness(v: &FlowField) -> f64 {
    let (dx, dy) = component_planes(v);
    let n = (v.width() * v.height()) as f64;
    let mut acc = 0.0;
    for plane in [&dx, &dy] {
        let (gx, gy) = gradient_xy(plane).expect("single-channel plane");
        acc += gx.data().iter().map(|g| g * g).sum::<f64>();
        acc += gy.data().iter().map(|g| g * g).sum::<f64>();
    }
    acc / n
}

/// Exact gradient of [`flow_smoothness`] with respect to the field.
pub fn flow_smoothness_grad(v: &FlowField) -> FlowField {
    let (dx, dy) = component_planes(v);
    let n = (v.width() * v.height()) as f64;
    let mut out = FlowField::zero(v.width(), v.height());
    for (plane, comp) in [(&dx, 0usize), (&dy, 1usize)] {
        let (mut gx, mut gy) = gradient_xy(plane).expect("single-channel plane");
        // d/dg of sum(g^2)/n is 2g/n; pull it back through the difference
        // stencil.
        gx.map_inplace(|g| 2.0 * g / n);
        gy.map_inplace(|g| 2.0 * g / n);
        let back = gradient_xy_adjoint(&gx, &gy);
        let dst = if comp == 0 { out.dx_mut() } else { out.dy_mut() };
        dst.copy_from_slice(back.data());
    }
    out
}
