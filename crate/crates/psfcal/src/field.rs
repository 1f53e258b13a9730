//! Spatial grid bookkeeping: field positions, cell rectangles, and the
//! per-region kernel container shared by simulation, calibration, and
//! restoration.

use crate::error::{Error, Result};
use crate::raster::Kernel;

/// One rectangle of a `rows x cols` tiling of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub row: usize,
    pub col: usize,
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl CellRect {
    /// Normalized field position of the cell center relative to the full
    /// image: both coordinates lie in `[-1, 1]` with `(0, 0)` at the image
    /// center.
    pub fn field_pos(&self, image_w: usize, image_h: usize) -> (f64, f64) {
        let cx = self.x0 as f64 + self.width as f64 / 2.0;
        let cy = self.y0 as f64 + self.height as f64 / 2.0;
        (
            (cx - image_w as f64 / 2.0) / (image_w as f64 / 2.0),
            (cy - image_h as f64 / 2.0) / (image_h as f64 / 2.0),
        )
    }
}

/// Tiles `width x height` into `rows x cols` rectangles. Cell sides are the
/// integer quotient; the last row and column absorb the remainder. Errors
/// when the grid does not fit (more cells than pixels along an axis).
pub fn grid_cells(width: usize, height: usize, rows: usize, cols: usize) -> Result<Vec<CellRect>> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("grid must have at least one row and column"));
    }
    if cols > width || rows > height {
        return Err(Error::invalid(format!(
            "grid {rows}x{cols} larger than image {width}x{height}"
        )));
    }
    let cw = width / cols;
    let chh = height / rows;
    let mut cells = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        let y0 = row * chh;
        let h = if row + 1 == rows { height - y0 } else { chh };
        for col in 0..cols {
            let x0 = col * cw;
            let w = if col + 1 == cols { width - x0 } else { cw };
            cells.push(CellRect {
                row,
                col,
                x0,
                y0,
                width: w,
                height: h,
            });
        }
    }
    Ok(cells)
}

/// Grid of per-region, per-channel kernels. Cells that failed calibration
/// stay `None`; consumers decide whether holes are tolerable.
#[derive(Debug, Clone)]
pub struct PsfField {
    grid_rows: usize,
    grid_cols: usize,
    channels: usize,
    kernels: Vec<Option<Kernel>>,
}

impl PsfField {
    pub fn new(grid_rows: usize, grid_cols: usize, channels: usize) -> Self {
        assert!(grid_rows > 0 && grid_cols > 0 && channels > 0);
        PsfField {
            grid_rows,
            grid_cols,
            channels,
            kernels: vec![None; grid_rows * grid_cols * channels],
        }
    }

    pub fn grid_rows(&self) -> usize {
        self.grid_rows
    }

    pub fn grid_cols(&self) -> usize {
        self.grid_cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    fn idx(&self, row: usize, col: usize, channel: usize) -> usize {
        assert!(
            row < self.grid_rows && col < self.grid_cols && channel < self.channels,
            "field index ({row},{col},{channel}) out of range"
        );
        (row * self.grid_cols + col) * self.channels + channel
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, k: Kernel) {
        let i = self.idx(row, col, channel);
        self.kernels[i] = Some(k);
    }

    pub fn kernel(&self, row: usize, col: usize, channel: usize) -> Option<&Kernel> {
        self.kernels[self.idx(row, col, channel)].as_ref()
    }

    /// Number of empty cells.
    pub fn hole_count(&self) -> usize {
        self.kernels.iter().filter(|k| k.is_none()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.hole_count() == 0
    }

    /// Iterates `(row, col, channel, kernel)` over filled cells.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize, &Kernel)> {
        self.kernels.iter().enumerate().filter_map(move |(i, k)| {
            k.as_ref().map(|k| {
                let ch = i % self.channels;
                let cell = i / self.channels;
                (cell / self.grid_cols, cell % self.grid_cols, ch, k)
            })
        })
    }
}
