use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{FeatureGrid, RngStream};
use crate::quant::BlockApply;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// 3×3, stride 1, zero padding 1.
    Conv3x3,
    /// 1×1 map applied independently at every cell.
    Linear,
}

impl LayerKind {
    pub fn taps(self) -> usize {
        match self {
            LayerKind::Conv3x3 => 9,
            LayerKind::Linear => 1,
        }
    }
}

/// Weighted layer; `weight` is laid out `[tap][cin][cout]`, taps row-major over
/// the offsets `(dr, dc) ∈ {−1, 0, 1}²`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_for(layer: &Layer) -> Self {
        Self {
            weight: vec![0.0; layer.weight.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }
}

#[inline]
fn neighbour(row: usize, col: usize, tap: usize, h: usize, w: usize) -> Option<usize> {
    let r = row as isize + (tap / 3) as isize - 1;
    let c = col as isize + (tap % 3) as isize - 1;
    if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
        None
    } else {
        Some(r as usize * w + c as usize)
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

impl Layer {
    pub fn zeros(kind: LayerKind, cin: usize, cout: usize) -> Self {
        Self {
            kind,
            cin,
            cout,
            weight: vec![0.0; kind.taps() * cin * cout],
            bias: vec![0.0; cout],
        }
    }

    /// He-normal weights, zero bias.
    pub fn he_init(kind: LayerKind, cin: usize, cout: usize, rng: &mut RngStream) -> Self {
        let mut l = Self::zeros(kind, cin, cout);
        let std = (2.0 / l.fan_in() as f64).sqrt();
        for w in &mut l.weight {
            *w = std * rng.normal();
        }
        l
    }

    pub fn fan_in(&self) -> usize {
        self.kind.taps() * self.cin
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check_input(&self, x: &FeatureGrid) -> Result<()> {
        if x.channels() != self.cin {
            return Err(Error::shape(format!(
                "{:?} layer expects {} channels, got {}",
                self.kind,
                self.cin,
                x.channels()
            )));
        }
        Ok(())
    }

    /// Pre-activation output.
    pub fn forward(&self, x: &FeatureGrid) -> Result<FeatureGrid> {
        self.forward_with(&self.weight, x)
    }

    /// Pre-activation output using substitute weights of the same shape.
    pub fn forward_with(&self, weight: &[f64], x: &FeatureGrid) -> Result<FeatureGrid> {
        self.check_input(x)?;
        debug_assert_eq!(weight.len(), self.weight.len());
        let (h, w) = (x.height(), x.width());
        let (cin, cout) = (self.cin, self.cout);
        let mut out = FeatureGrid::zeros(h, w, cout);
        match self.kind {
            LayerKind::Linear => {
                for cell in 0..h * w {
                    let o = out.cell_mut(cell);
                    o.copy_from_slice(&self.bias);
                    for (ci, &v) in x.cell(cell).iter().enumerate() {
                        if v != 0.0 {
                            axpy(o, v, &weight[ci * cout..(ci + 1) * cout]);
                        }
                    }
                }
            }
            LayerKind::Conv3x3 => {
                for row in 0..h {
                    for col in 0..w {
                        let o = out.cell_mut(row * w + col);
                        o.copy_from_slice(&self.bias);
                        for tap in 0..9 {
                            let Some(src) = neighbour(row, col, tap, h, w) else { continue };
                            let xs = x.cell(src);
                            let wt = &weight[tap * cin * cout..(tap + 1) * cin * cout];
                            for (ci, &v) in xs.iter().enumerate() {
                                if v != 0.0 {
                                    axpy(o, v, &wt[ci * cout..(ci + 1) * cout]);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Input row (im2col patch) feeding output cell `cell`, length `fan_in`.
    pub fn patch(&self, x: &FeatureGrid, cell: usize, out: &mut [f64]) {
        let cin = self.cin;
        match self.kind {
            LayerKind::Linear => out.copy_from_slice(x.cell(cell)),
            LayerKind::Conv3x3 => {
                let (h, w) = (x.height(), x.width());
                let (row, col) = (cell / w, cell % w);
                for tap in 0..9 {
                    let dst = &mut out[tap * cin..(tap + 1) * cin];
                    match neighbour(row, col, tap, h, w) {
                        Some(src) => dst.copy_from_slice(x.cell(src)),
                        None => dst.fill(0.0),
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients for upstream gradient `dy` (w.r.t. the
    /// pre-activation output) and returns the input gradient when requested.
    pub fn backward(&self, x: &FeatureGrid, dy: &FeatureGrid, grad: &mut LayerGrad, need_dx: bool) -> Option<FeatureGrid> {
        let (h, w) = (x.height(), x.width());
        let (cin, cout) = (self.cin, self.cout);
        let mut dx = need_dx.then(|| FeatureGrid::zeros(h, w, cin));
        for row in 0..h {
            for col in 0..w {
                let cell = row * w + col;
                let g = dy.cell(cell);
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                axpy(&mut grad.bias, 1.0, g);
                for tap in 0..self.kind.taps() {
                    let src = match self.kind {
                        LayerKind::Linear => cell,
                        LayerKind::Conv3x3 => match neighbour(row, col, tap, h, w) {
                            Some(s) => s,
                            None => continue,
                        },
                    };
                    let base = tap * cin * cout;
                    for (ci, &v) in x.cell(src).iter().enumerate() {
                        if v != 0.0 {
                            axpy(&mut grad.weight[base + ci * cout..base + (ci + 1) * cout], v, g);
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let d = dx.cell_mut(src);
                        for (ci, dv) in d.iter_mut().enumerate() {
                            let wr = &self.weight[base + ci * cout..base + (ci + 1) * cout];
                            *dv += wr.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
        dx
    }
}

pub fn relu(x: &FeatureGrid) -> FeatureGrid {
    let mut y = x.clone();
    relu_in_place(&mut y);
    y
}

pub fn relu_in_place(x: &mut FeatureGrid) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the pre-activation `z` was not positive.
pub fn relu_backward(z: &FeatureGrid, grad: &mut FeatureGrid) {
    for (g, &v) in grad.data_mut().iter_mut().zip(z.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn maxpool2(x: &FeatureGrid) -> FeatureGrid {
    let (h, w, c) = (x.height() / 2, x.width() / 2, x.channels());
    let mut out = FeatureGrid::zeros(h, w, c);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dr, dc)| x.get(2 * r + dr, 2 * col + dc, ch))
                    .fold(f64::NEG_INFINITY, f64::max);
                out.set(r, col, ch, m);
            }
        }
    }
    out
}

/// Routes each pooled gradient to the first maximal input of its window.
pub fn maxpool2_backward(x: &FeatureGrid, dy: &FeatureGrid) -> FeatureGrid {
    let mut dx = FeatureGrid::zeros_like(x);
    for r in 0..dy.height() {
        for col in 0..dy.width() {
            for ch in 0..x.channels() {
                let mut best = (2 * r, 2 * col);
                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                    if x.get(2 * r + dr, 2 * col + dc, ch) > x.get(best.0, best.1, ch) {
                        best = (2 * r + dr, 2 * col + dc);
                    }
                }
                let g = dx.get(best.0, best.1, ch) + dy.get(r, col, ch);
                dx.set(best.0, best.1, ch, g);
            }
        }
    }
    dx
}

/// A layer plus optional trailing ReLU, evaluated on im2col rows.
pub struct RowBlock<'a> {
    pub layer: &'a Layer,
    pub relu: bool,
}

impl RowBlock<'_> {
    /// Accumulation order matches [`Layer::forward_with`], so outputs agree bitwise.
    #[inline]
    pub fn row(&self, weight: &[f64], input: &[f64], out: &mut [f64]) {
        let cout = self.layer.cout;
        out.copy_from_slice(&self.layer.bias);
        for (k, &v) in input.iter().enumerate() {
            if v != 0.0 {
                axpy(out, v, &weight[k * cout..(k + 1) * cout]);
            }
        }
        if self.relu {
            for o in out.iter_mut() {
                if *o < 0.0 {
                    *o = 0.0;
                }
            }
        }
    }
}

impl BlockApply for RowBlock<'_> {
    fn in_dim(&self) -> usize {
        self.layer.fan_in()
    }

    fn out_dim(&self) -> usize {
        self.layer.cout
    }

    fn apply(&self, weight: &[f64], input: &[f64], out: &mut [f64]) {
        let (k, c) = (self.in_dim(), self.out_dim());
        for (x, o) in input.chunks(k).zip(out.chunks_mut(c)) {
            self.row(weight, x, o);
        }
    }

    fn weight_vjp(&self, weight: &[f64], input: &[f64], grad_out: &[f64], grad_w: &mut [f64]) {
        let (k, c) = (self.in_dim(), self.out_dim());
        let mut y = vec![0.0; c];
        let mut g = vec![0.0; c];
        for (x, go) in input.chunks(k).zip(grad_out.chunks(c)) {
            g.copy_from_slice(go);
            if self.relu {
                self.row(weight, x, &mut y);
                for (gi, yi) in g.iter_mut().zip(&y) {
                    if *yi <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            for (kk, &v) in x.iter().enumerate() {
                if v != 0.0 {
                    axpy(&mut grad_w[kk * c..(kk + 1) * c], v, &g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_grid(seed: u64, h: usize, w: usize, c: usize) -> FeatureGrid {
        let mut r = RngStream::new(seed);
        FeatureGrid::new(h, w, c, (0..h * w * c).map(|_| r.normal()).collect()).unwrap()
    }

    fn random_layer(seed: u64, kind: LayerKind, cin: usize, cout: usize) -> Layer {
        let mut r = RngStream::new(seed);
        let mut l = Layer::he_init(kind, cin, cout, &mut r);
        for b in &mut l.bias {
            *b = r.normal() * 0.1;
        }
        l
    }

    /// Direct 3×3 convolution with explicit padding checks.
    fn reference_conv(l: &Layer, x: &FeatureGrid) -> FeatureGrid {
        let (h, w) = (x.height() as isize, x.width() as isize);
        let mut out = FeatureGrid::zeros(x.height(), x.width(), l.cout);
        for r in 0..h {
            for c in 0..w {
                for co in 0..l.cout {
                    let mut acc = l.bias[co];
                    for dr in -1..=1isize {
                        for dc in -1..=1isize {
                            let (rr, cc) = (r + dr, c + dc);
                            if rr < 0 || cc < 0 || rr >= h || cc >= w {
                                continue;
                            }
                            let tap = ((dr + 1) * 3 + (dc + 1)) as usize;
                            for ci in 0..l.cin {
                                acc += x.get(rr as usize, cc as usize, ci) * l.weight[(tap * l.cin + ci) * l.cout + co];
                            }
                        }
                    }
                    out.set(r as usize, c as usize, co, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference() {
        let l = random_layer(1, LayerKind::Conv3x3, 3, 5);
        let x = random_grid(2, 6, 7, 3);
        let y = l.forward(&x).unwrap();
        let r = reference_conv(&l, &x);
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_matches_matrix_multiply() {
        let l = random_layer(3, LayerKind::Linear, 4, 3);
        let x = random_grid(4, 3, 5, 4);
        let y = l.forward(&x).unwrap();
        for cell in 0..15 {
            for co in 0..3 {
                let e: f64 = l.bias[co] + (0..4).map(|ci| x.cell(cell)[ci] * l.weight[ci * 3 + co]).sum::<f64>();
                assert!((y.cell(cell)[co] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_error() {
        let l = Layer::zeros(LayerKind::Conv3x3, 2, 2);
        assert!(matches!(l.forward(&FeatureGrid::zeros(3, 3, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn rows_agree_bitwise_with_grid_forward() {
        for kind in [LayerKind::Conv3x3, LayerKind::Linear] {
            let l = random_layer(5, kind, 3, 4);
            let x = relu(&random_grid(6, 5, 6, 3));
            let y = relu(&l.forward(&x).unwrap());
            let block = RowBlock { layer: &l, relu: true };
            let mut patch = vec![0.0; l.fan_in()];
            let mut o = vec![0.0; 4];
            for cell in 0..30 {
                l.patch(&x, cell, &mut patch);
                block.row(&l.weight, &patch, &mut o);
                assert_eq!(o.as_slice(), y.cell(cell));
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for kind in [LayerKind::Conv3x3, LayerKind::Linear] {
            let l = random_layer(7, kind, 2, 3);
            let x = random_grid(8, 4, 5, 2);
            let probe = random_grid(9, 4, 5, 3);
            let f = |l: &Layer, x: &FeatureGrid| -> f64 {
                l.forward(x).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let mut g = LayerGrad::zeros_for(&l);
            let dx = l.backward(&x, &probe, &mut g, true).unwrap();
            let eps = 1e-5;
            for i in (0..l.weight.len()).step_by(5) {
                let (mut p, mut m) = (l.clone(), l.clone());
                p.weight[i] += eps;
                m.weight[i] -= eps;
                let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * eps);
                assert!((fd - g.weight[i]).abs() < 1e-7);
            }
            for i in 0..3 {
                let (mut p, mut m) = (l.clone(), l.clone());
                p.bias[i] += eps;
                m.bias[i] -= eps;
                assert!(((f(&p, &x) - f(&m, &x)) / (2.0 * eps) - g.bias[i]).abs() < 1e-7);
            }
            for i in (0..x.data().len()).step_by(3) {
                let (mut p, mut m) = (x.clone(), x.clone());
                p.data_mut()[i] += eps;
                m.data_mut()[i] -= eps;
                assert!(((f(&l, &p) - f(&l, &m)) / (2.0 * eps) - dx.data()[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn maxpool_forward_and_backward() {
        let x = FeatureGrid::new(2, 4, 1, vec![1.0, 5.0, -1.0, -2.0, 3.0, 2.0, -3.0, -0.5]).unwrap();
        let y = maxpool2(&x);
        assert_eq!(y.data(), &[5.0, -0.5]);
        let dy = FeatureGrid::new(1, 2, 1, vec![2.0, 3.0]).unwrap();
        let dx = maxpool2_backward(&x, &dy);
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn row_block_vjp_matches_finite_differences() {
        let l = random_layer(10, LayerKind::Conv3x3, 2, 3);
        let block = RowBlock { layer: &l, relu: true };
        let mut r = RngStream::new(11);
        let x: Vec<f64> = (0..18 * 6).map(|_| r.normal()).collect();
        let go: Vec<f64> = (0..3 * 6).map(|_| r.normal()).collect();
        let f = |w: &[f64]| {
            let mut o = vec![0.0; 18];
            block.apply(w, &x, &mut o);
            o.iter().zip(&go).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut gw = vec![0.0; l.weight.len()];
        block.weight_vjp(&l.weight, &x, &go, &mut gw);
        for i in (0..l.weight.len()).step_by(4) {
            let (mut p, mut m) = (l.weight.clone(), l.weight.clone());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            assert!(((f(&p) - f(&m)) / 2e-6 - gw[i]).abs() < 1e-6);
        }
    }
}
