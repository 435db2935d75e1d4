use crate::error::{Error, Result};

/// Sliding-window geometry over a channel-last `[H, W, C]` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl WindowGeom {
    pub fn new(height: usize, width: usize, channels: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Dimension(format!("window kernel {kernel} and stride {stride} must be positive")));
        }
        if kernel > height + 2 * pad || kernel > width + 2 * pad {
            return Err(Error::Dimension(format!(
                "window {kernel} larger than padded grid {height}x{width} (pad {pad})"
            )));
        }
        Ok(WindowGeom { height, width, channels, kernel, stride, pad })
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Number of window positions.
    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn grid_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn cols_len(&self) -> usize {
        self.positions() * self.kernel * self.kernel * self.channels
    }

    /// Calls `f(col_offset, grid_offset)` for every in-bounds (window slot,
    /// grid cell) pair; each offset addresses the start of a `C`-vector.
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize)) {
        let (k, c) = (self.kernel, self.channels);
        let ow = self.out_width();
        for oy in 0..self.out_height() {
            for ox in 0..ow {
                let pos = oy * ow + ox;
                for ky in 0..k {
                    let y = (oy * self.stride + ky) as isize - self.pad as isize;
                    if y < 0 || y >= self.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let x = (ox * self.stride + kx) as isize - self.pad as isize;
                        if x < 0 || x >= self.width as isize {
                            continue;
                        }
                        let col = ((pos * k + ky) * k + kx) * c;
                        let cell = (y as usize * self.width + x as usize) * c;
                        f(col, cell);
                    }
                }
            }
        }
    }

    /// `[H, W, C]` -> `[L, k*k, C]`, zero where the window hangs over the border.
    pub fn unfold(&self, grid: &[f64]) -> Vec<f64> {
        let c = self.channels;
        let mut cols = vec![0.0; self.cols_len()];
        self.for_each_pair(|col, cell| cols[col..col + c].copy_from_slice(&grid[cell..cell + c]));
        cols
    }

    /// Adjoint of [`unfold`](Self::unfold): overlapping window slots are summed.
    pub fn fold_into(&self, cols: &[f64], grid: &mut [f64]) {
        let c = self.channels;
        self.for_each_pair(|col, cell| {
            for (g, v) in grid[cell..cell + c].iter_mut().zip(&cols[col..col + c]) {
                *g += v;
            }
        });
    }

    pub fn fold(&self, cols: &[f64]) -> Vec<f64> {
        let mut grid = vec![0.0; self.grid_len()];
        self.fold_into(cols, &mut grid);
        grid
    }

    /// How many window slots cover each grid cell, as an `[H, W]` table.
    pub fn overlap_counts(&self) -> Vec<f64> {
        let one = WindowGeom { channels: 1, ..*self };
        one.fold(&vec![1.0; one.cols_len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_windows() {
        assert!(WindowGeom::new(4, 4, 1, 0, 1, 0).is_err());
        assert!(WindowGeom::new(4, 4, 1, 2, 0, 0).is_err());
        assert!(WindowGeom::new(2, 2, 1, 5, 1, 1).is_err());
    }

    #[test]
    fn three_by_three_padded_counts() {
        let g = WindowGeom::new(3, 3, 1, 3, 1, 1).unwrap();
        assert_eq!(g.positions(), 9);
        // corners are covered by 4 windows, edges by 6, centre by 9
        assert_eq!(g.overlap_counts(), vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }
}
