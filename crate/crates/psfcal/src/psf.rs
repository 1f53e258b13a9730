//! Kernel parameterizations and the closed-form edge-spread baseline.
//!
//! Both optimizable representations realize a kernel through a softmax over
//! the kernel cells, so nonnegativity and unit energy hold by construction
//! at every optimizer step. The logit grid stores one unconstrained value
//! per cell; the coordinate MLP is a small sinusoidal network queried at
//! cell centers, trading per-cell freedom for a smooth implicit surface.
//!
//! As a reference point that needs no iterative optimization at all,
//! `esf_linear_solve` recovers the kernel from a sharp/blurred pair as a
//! ridge least-squares problem over windows near region boundaries, and
//! `column_rank_diagnostic` measures how well a target's edge geometry
//! conditions that system: curved boundaries excite all window shifts,
//! straight edges leave whole subspaces unobserved.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{dilate, gradient_xy};
use crate::raster::{Image, Kernel};

/// Numerically stabilized softmax (max subtraction).
fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Pullback of the softmax: given k = softmax(logits) and dL/dk, returns
/// dL/dlogits = k .* (g - <g, k>).
fn softmax_vjp(k: &[f64], grad_k: &[f64]) -> Vec<f64> {
    let dot: f64 = k.iter().zip(grad_k).map(|(a, b)| a * b).sum();
    k.iter().zip(grad_k).map(|(ki, gi)| ki * (gi - dot)).collect()
}

/// Direct kernel parameterization: one unconstrained logit per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrid {
    side: usize,
    logits: Vec<f64>,
}

impl LogitGrid {
    /// Zero logits: realizes the uniform kernel.
    pub fn new(side: usize) -> Result<Self> {
        if side == 0 || side % 2 == 0 {
            return Err(Error::invalid(format!("kernel side {side} must be odd")));
        }
        Ok(LogitGrid {
            side,
            logits: vec![0.0; side * side],
        })
    }

    pub fn from_logits(side: usize, logits: Vec<f64>) -> Result<Self> {
        if side == 0 || side % 2 == 0 {
            return Err(Error::invalid(format!("kernel side {side} must be odd")));
        }
        if logits.len() != side * side {
            return Err(Error::invalid("logit count must be side^2"));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::invalid("logits must be finite"));
        }
        Ok(LogitGrid { side, logits })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn params(&self) -> &[f64] {
        &self.logits
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Softmax realization; panics if logits were mutated to non-finite
    /// values (optimizers must guard their iterates).
    pub fn realize(&self) -> Kernel {
        Kernel::new(self.side, softmax(&self.logits)).expect("softmax of finite logits")
    }

    /// Gradient of a loss with respect to the logits, given its gradient
    /// with respect to the realized kernel weights.
    pub fn kernel_grad(&self, grad_kernel: &[f64]) -> Vec<f64> {
        assert_eq!(grad_kernel.len(), self.logits.len());
        softmax_vjp(&softmax(&self.logits), grad_kernel)
    }
}

/// Realizes the kernel from a logit grid.
pub fn kernel_from_logits(g: &LogitGrid) -> Kernel {
    g.realize()
}

/// Sinusoidal frequency scale of the coordinate MLP.
pub const MLP_OMEGA0: f64 = 30.0;
/// Default hidden widths of the coordinate MLP.
pub const MLP_HIDDEN: [usize; 2] = [64, 64];

/// Implicit kernel representation: a small MLP with sine activations maps a
/// cell-center coordinate in [-1, 1]^2 to a logit; the kernel is the softmax
/// of the logits over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordMlp {
    side: usize,
    widths: Vec<usize>,
    omega0: f64,
    params: Vec<f64>,
}

impl CoordMlp {
    /// Standard architecture (2 -> 64 -> 64 -> 1, omega0 = 30) with
    /// sine-aware initialization: first layer U(-1/in, 1/in), later layers
    /// U(+-sqrt(6/in)/omega0).
    pub fn new(side: usize, seed: u64) -> Result<Self> {
        Self::with_architecture(side, &MLP_HIDDEN, MLP_OMEGA0, seed)
    }

    pub fn with_architecture(
        side: usize,
        hidden: &[usize],
        omega0: f64,
        seed: u64,
    ) -> Result<Self> {
        if side == 0 || side % 2 == 0 {
            return Err(Error::invalid(format!("kernel side {side} must be odd")));
        }
        if hidden.is_empty() || hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if !(omega0 > 0.0) {
            return Err(Error::invalid("omega0 must be positive"));
        }
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(2);
        widths.extend_from_slice(hidden);
        widths.push(1);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for l in 1..widths.len() {
            let fan_in = widths[l - 1] as f64;
            let bound = if l == 1 {
                1.0 / fan_in
            } else {
                (6.0 / fan_in).sqrt() / omega0
            };
            for _ in 0..widths[l] * widths[l - 1] {
                params.push(rng.random_range(-bound..bound));
            }
            for _ in 0..widths[l] {
                params.push(0.0);
            }
        }
        Ok(CoordMlp {
            side,
            widths,
            omega0,
            params,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Cell-center query coordinates, covering [-1, 1]^2 once per cell.
    fn coords(&self) -> Vec<(f64, f64)> {
        let side = self.side;
        let r = (side / 2) as f64;
        let scale = if r > 0.0 { 1.0 / r } else { 0.0 };
        let mut pts = Vec::with_capacity(side * side);
        for j in 0..side {
            for i in 0..side {
                pts.push(((i as f64 - r) * scale, (j as f64 - r) * scale));
            }
        }
        pts
    }

    /// Offsets of (weights, biases) for layer `l` (1-based) in the flat
    /// parameter vector.
    fn layer_span(&self, l: usize) -> (usize, usize, usize) {
        let mut off = 0;
        for k in 1..l {
            off += self.widths[k] * self.widths[k - 1] + self.widths[k];
        }
        let w_len = self.widths[l] * self.widths[l - 1];
        (off, off + w_len, off + w_len + self.widths[l])
    }

    /// Forward pass for one query; returns per-layer pre-activations and
    /// activations (activations[0] is the input).
    fn forward(&self, u: f64, v: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let depth = self.widths.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(depth);
        acts.push(vec![u, v]);
        for l in 1..=depth {
            let (w0, b0, _) = self.layer_span(l);
            let (n_out, n_in) = (self.widths[l], self.widths[l - 1]);
            let mut z = vec![0.0; n_out];
            let prev = &acts[l - 1];
            for o in 0..n_out {
                let row = &self.params[w0 + o * n_in..w0 + (o + 1) * n_in];
                let mut acc = self.params[b0 + o];
                for (wi, ai) in row.iter().zip(prev) {
                    acc += wi * ai;
                }
                z[o] = acc;
            }
            let a = if l < depth {
                z.iter().map(|&x| (self.omega0 * x).sin()).collect()
            } else {
                z.clone()
            };
            pres.push(z);
            acts.push(a);
        }
        (pres, acts)
    }

    fn logits(&self) -> Vec<f64> {
        self.coords()
            .iter()
            .map(|&(u, v)| {
                let (_, acts) = self.forward(u, v);
                acts.last().expect("nonempty network")[0]
            })
            .collect()
    }

    /// Softmax realization over the cell-center queries.
    pub fn realize(&self) -> Kernel {
        Kernel::new(self.side, softmax(&self.logits())).expect("softmax of finite logits")
    }

    /// Gradient of a loss with respect to the flat parameter vector, given
    /// its gradient with respect to the realized kernel weights.
    pub fn kernel_grad(&self, grad_kernel: &[f64]) -> Vec<f64> {
        let coords = self.coords();
        assert_eq!(grad_kernel.len(), coords.len());
        let depth = self.widths.len() - 1;

        let mut caches = Vec::with_capacity(coords.len());
        let mut logits = Vec::with_capacity(coords.len());
        for &(u, v) in &coords {
            let fwd = self.forward(u, v);
            logits.push(fwd.1[depth][0]);
            caches.push(fwd);
        }
        let g_logits = softmax_vjp(&softmax(&logits), grad_kernel);

        let mut grad = vec![0.0; self.params.len()];
        for ((pres, acts), &gl) in caches.iter().zip(&g_logits) {
            let mut delta = vec![gl];
            for l in (1..=depth).rev() {
                let (w0, b0, _) = self.layer_span(l);
                let (n_out, n_in) = (self.widths[l], self.widths[l - 1]);
                let prev = &acts[l - 1];
                for o in 0..n_out {
                    let d = delta[o];
                    let row = &mut grad[w0 + o * n_in..w0 + (o + 1) * n_in];
                    for (gi, ai) in row.iter_mut().zip(prev) {
                        *gi += d * ai;
                    }
                    grad[b0 + o] += d;
                }
                if l > 1 {
                    let mut prev_delta = vec![0.0; n_in];
                    for o in 0..n_out {
                        let d = delta[o];
                        let row = &self.params[w0 + o * n_in..w0 + (o + 1) * n_in];
                        for (pd, wi) in prev_delta.iter_mut().zip(row) {
                            *pd += d * wi;
                        }
                    }
                    // Sine activation pullback of the layer below.
                    let z_prev = &pres[l - 2];
                    for (pd, &z) in prev_delta.iter_mut().zip(z_prev) {
                        *pd *= self.omega0 * (self.omega0 * z).cos();
                    }
                    delta = prev_delta;
                }
            }
        }
        grad
    }
}

/// Realizes the kernel from a coordinate MLP.
pub fn mlp_kernel(m: &CoordMlp) -> Kernel {
    m.realize()
}

/// Euclidean projection onto the probability simplex {k >= 0, sum k = 1}.
pub fn project_simplex(w: &[f64]) -> Vec<f64> {
    assert!(!w.is_empty());
    let mut u = w.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite weights"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    w.iter().map(|&wi| (wi - theta).max(0.0)).collect()
}

/// Rows of the window operator: pixel positions whose full side^2 window is
/// in bounds, restricted to within Chebyshev distance `side` of a boundary
/// pixel (nonzero forward-difference gradient). Falls back to every
/// in-bounds window when the image has no boundary at all, so degenerate
/// targets still produce a diagnosable operator.
fn boundary_rows(i_sharp: &Image, side: usize) -> Result<Vec<(usize, usize)>> {
    let (w, h) = (i_sharp.width(), i_sharp.height());
    let r = side / 2;
    if w < side || h < side {
        return Err(Error::invalid(format!(
            "{w}x{h} patch cannot host side-{side} windows"
        )));
    }
    let (gx, gy) = gradient_xy(i_sharp)?;
    let mut edge = Image::new(w, h, 1);
    let mut any = false;
    for i in 0..w * h {
        if gx.data()[i].abs() + gy.data()[i].abs() > 0.0 {
            edge.data_mut()[i] = 1.0;
            any = true;
        }
    }
    let near: Vec<bool> = if any {
        dilate(&edge, side)?.data().iter().map(|&v| v > 0.5).collect()
    } else {
        vec![true; w * h]
    };
    let mut rows = Vec::new();
    for y in r..h - r {
        for x in r..w - r {
            if near[y * w + x] {
                rows.push((x, y));
            }
        }
    }
    Ok(rows)
}

/// Builds the dense window operator A (rows = windows of `i_sharp`, columns
/// = kernel taps in convolution orientation) over the boundary-restricted
/// row set, so that A * k equals conv2d(i_sharp, k) at those pixels.
fn window_operator(i_sharp: &Image, side: usize, rows: &[(usize, usize)]) -> DMatrix<f64> {
    let r = (side / 2) as isize;
    let m = side * side;
    DMatrix::from_fn(rows.len(), m, |n, col| {
        let (x, y) = rows[n];
        let (i, j) = ((col % side) as isize, (col / side) as isize);
        i_sharp.get(
            (x as isize - (i - r)) as usize,
            (y as isize - (j - r)) as usize,
            0,
        )
    })
}

fn check_esf_inputs(i_sharp: &Image, side: usize) -> Result<()> {
    if i_sharp.channels() != 1 {
        return Err(Error::invalid("edge-spread solve expects single-channel input"));
    }
    if side == 0 || side % 2 == 0 {
        return Err(Error::invalid(format!("kernel side {side} must be odd")));
    }
    Ok(())
}

/// Recovers a blur kernel from an aligned sharp/blurred pair by ridge least
/// squares over boundary windows, projected onto the probability simplex.
///
/// `ridge` is relative: the actual Tikhonov term is `ridge * trace(Gram)`.
pub fn esf_linear_solve(i_sharp: &Image, b: &Image, side: usize, ridge: f64) -> Result<Kernel> {
    check_esf_inputs(i_sharp, side)?;
    if !i_sharp.same_shape(b) {
        return Err(Error::invalid("sharp and blurred images must share shape"));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::invalid("ridge must be finite and nonnegative"));
    }
    let rows = boundary_rows(i_sharp, side)?;
    let m = side * side;
    if rows.len() < m {
        return Err(Error::SingularSystem);
    }
    let a = window_operator(i_sharp, side, &rows);
    let rhs_obs = DVector::from_fn(rows.len(), |n, _| {
        let (x, y) = rows[n];
        b.get(x, y, 0)
    });
    let gram = a.transpose() * &a;
    let atb = a.transpose() * rhs_obs;
    let ridge_eff = ridge * gram.trace();

    // Ridge stabilizes a noisy but informative system; it cannot conjure
    // information the target never encoded. Rank-deficient operators
    // (constant patches, straight edges) error out instead of returning the
    // minimum-norm artifact.
    let eig = nalgebra::linalg::SymmetricEigen::new(gram);
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let lam_floor = (RANK_REL_THRESHOLD * RANK_REL_THRESHOLD) * lam_max;
    if lam_max <= 0.0 || eig.eigenvalues.iter().any(|&l| l < lam_floor) {
        return Err(Error::SingularSystem);
    }
    let coeffs = eig.eigenvectors.transpose() * atb;
    let mut scaled = DVector::zeros(m);
    for i in 0..m {
        scaled[i] = coeffs[i] / (eig.eigenvalues[i] + ridge_eff);
    }
    let sol = &eig.eigenvectors * scaled;
    let projected = project_simplex(sol.as_slice());
    Kernel::new(side, projected)
}

/// Threshold (relative to the largest singular value) below which a singular
/// value does not count toward the effective rank.
pub const RANK_REL_THRESHOLD: f64 = 1e-6;

/// Conditioning of the boundary-window operator for a given target image:
/// returns (condition estimate sigma_max/sigma_min, effective rank at
/// 1e-6 * sigma_max). Singular values come from the exact symmetric
/// eigendecomposition of the Gram matrix.
pub fn column_rank_diagnostic(i_sharp: &Image, side: usize) -> Result<(f64, usize)> {
    check_esf_inputs(i_sharp, side)?;
    let rows = boundary_rows(i_sharp, side)?;
    if rows.is_empty() {
        return Err(Error::invalid("no admissible rows in the patch"));
    }
    let a = window_operator(i_sharp, side, &rows);
    let gram = a.transpose() * &a;
    let eig = nalgebra::linalg::SymmetricEigen::new(gram);
    let mut sigmas: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .collect();
    sigmas.sort_by(|x, y| y.partial_cmp(x).expect("finite spectrum"));
    let s_max = sigmas[0];
    if s_max == 0.0 {
        return Ok((f64::INFINITY, 0));
    }
    let s_min = *sigmas.last().expect("nonempty spectrum");
    let rank = sigmas
        .iter()
        .filter(|&&s| s >= RANK_REL_THRESHOLD * s_max)
        .count();
    let cond = if s_min > 0.0 {
        s_max / s_min
    } else {
        f64::INFINITY
    };
    Ok((cond, rank))
}
