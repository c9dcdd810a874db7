use super::{FeatureGrid, Pose2D};

/// Precomputed bilinear resampling from a grid in one agent frame to another.
///
/// Cell `(row, col)` has its centre at local coordinates
/// `((col - (W-1)/2)·m, (row - (H-1)/2)·m)`, so every agent sits at the centre
/// of its own grid.
#[derive(Clone, Debug)]
pub struct WarpPlan {
    height: usize,
    width: usize,
    /// Per output cell: up to four `(source cell, weight)` taps.
    taps: Vec<[(u32, f64); 4]>,
    counts: Vec<u8>,
}

impl WarpPlan {
    pub fn new(height: usize, width: usize, from: &Pose2D, to: &Pose2D, meters_per_cell: f64) -> Self {
        assert!(meters_per_cell > 0.0, "meters_per_cell must be positive");
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let (sd, cd) = (to.yaw - from.yaw).sin_cos();
        let (sf, cf) = from.yaw.sin_cos();
        let (dx, dy) = (to.x - from.x, to.y - from.y);
        // `to` origin expressed in `from` cells.
        let tx = (cf * dx + sf * dy) / meters_per_cell;
        let ty = (-sf * dx + cf * dy) / meters_per_cell;

        let n = height * width;
        let mut taps = vec![[(0u32, 0.0f64); 4]; n];
        let mut counts = vec![0u8; n];
        for row in 0..height {
            for col in 0..width {
                let (lx, ly) = (col as f64 - cx, row as f64 - cy);
                let u = cd * lx - sd * ly + tx + cx;
                let v = sd * lx + cd * ly + ty + cy;
                let (u0, v0) = (u.floor(), v.floor());
                let (fu, fv) = (u - u0, v - v0);
                let cell = row * width + col;
                let mut k = 0usize;
                for (du, dv, wgt) in [
                    (0.0, 0.0, (1.0 - fu) * (1.0 - fv)),
                    (1.0, 0.0, fu * (1.0 - fv)),
                    (0.0, 1.0, (1.0 - fu) * fv),
                    (1.0, 1.0, fu * fv),
                ] {
                    if wgt == 0.0 {
                        continue;
                    }
                    let (su, sv) = (u0 + du, v0 + dv);
                    if su < 0.0 || sv < 0.0 || su >= width as f64 || sv >= height as f64 {
                        continue;
                    }
                    taps[cell][k] = ((sv as usize * width + su as usize) as u32, wgt);
                    k += 1;
                }
                counts[cell] = k as u8;
            }
        }
        Self {
            height,
            width,
            taps,
            counts,
        }
    }

    pub fn apply(&self, g: &FeatureGrid) -> FeatureGrid {
        assert_eq!((g.height(), g.width()), (self.height, self.width));
        let c = g.channels();
        let mut out = FeatureGrid::zeros(self.height, self.width, c);
        for cell in 0..self.taps.len() {
            let taps = &self.taps[cell][..self.counts[cell] as usize];
            if taps.is_empty() {
                continue;
            }
            let dst = out.cell_mut(cell);
            for &(src, w) in taps {
                let s = g.cell(src as usize);
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += w * v;
                }
            }
        }
        out
    }

    /// Transpose of [`apply`](Self::apply): scatters output gradients back to the source grid.
    pub fn adjoint(&self, grad_out: &FeatureGrid) -> FeatureGrid {
        let c = grad_out.channels();
        let mut out = FeatureGrid::zeros(self.height, self.width, c);
        for cell in 0..self.taps.len() {
            let g = grad_out.cell(cell);
            for &(src, w) in &self.taps[cell][..self.counts[cell] as usize] {
                let dst = out.cell_mut(src as usize);
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += w * v;
                }
            }
        }
        out
    }
}

/// Resamples `g`, expressed in the `from` frame, into the `to` frame. Cells that
/// map outside the source grid are zero.
pub fn bilinear_warp(g: &FeatureGrid, from: &Pose2D, to: &Pose2D, meters_per_cell: f64) -> FeatureGrid {
    if from == to {
        return g.clone();
    }
    WarpPlan::new(g.height(), g.width(), from, to, meters_per_cell).apply(g)
}
