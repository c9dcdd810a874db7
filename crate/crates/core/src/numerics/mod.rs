//! Dense BEV grids, poses, norms and divergences shared by every stage.

mod rng;
mod warp;

use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use rng::{rng_uniform, RngStream};
pub use warp::{bilinear_warp, WarpPlan};

/// Dense `height × width × channels` tensor, row-major with channels minor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{height}x{width}x{channels} grid needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn zeros_like(other: &FeatureGrid) -> Self {
        Self::zeros(other.height, other.width, other.channels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.shape() == other.shape()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// Channel vector of one cell.
    #[inline]
    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.data[cell * self.channels..(cell + 1) * self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, cell: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[cell * c..(cell + 1) * c]
    }

    pub fn scaled(&self, factor: f64) -> FeatureGrid {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes the grid as three little-endian u32 shape fields followed by f32 values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for dim in [self.height, self.width, self.channels] {
            let dim = u32::try_from(dim).map_err(|_| Error::invalid("grid dimension exceeds u32"))?;
            w.write_all(&dim.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::Format("grid shape overflows".into()))?;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        FeatureGrid::new(dims[0], dims[1], dims[2], data)
    }
}

/// Planar rigid pose; yaw is kept in (−π, π].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// Maps a point from this pose's local frame into the world frame.
    pub fn to_world(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * lx - s * ly + self.x, s * lx + c * ly + self.y)
    }

    /// Maps a world point into this pose's local frame.
    pub fn to_local(&self, wx: f64, wy: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (wx - self.x, wy - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Wraps an angle into (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    if !a.is_finite() {
        return a;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

pub fn frobenius_norm(g: &FeatureGrid) -> f64 {
    sum_squares(g.data()).sqrt()
}

pub fn sum_squares(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Log-softmax over a flat slice.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// `D_KL(softmax(p) ‖ softmax(q))` in nats, softmax taken over all elements jointly.
pub fn kl_divergence(p: &FeatureGrid, q: &FeatureGrid) -> Result<f64> {
    if !p.same_shape(q) {
        return Err(Error::shape(format!(
            "kl_divergence: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    if p.data().is_empty() {
        return Ok(0.0);
    }
    let lp = log_softmax(p.data());
    let lq = log_softmax(q.data());
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frobenius_zero_and_pythagorean() {
        assert_eq!(frobenius_norm(&FeatureGrid::zeros(2, 2, 1)), 0.0);
        let g = FeatureGrid::new(1, 2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(frobenius_norm(&g), 5.0);
    }

    #[test]
    fn frobenius_matches_reference_loop() {
        let mut rng = RngStream::new(11);
        let data: Vec<f64> = (0..32).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let g = FeatureGrid::new(4, 4, 2, data).unwrap();
        let mut acc = 0.0;
        for r in 0..4 {
            for c in 0..4 {
                for ch in 0..2 {
                    acc += g.get(r, c, ch) * g.get(r, c, ch);
                }
            }
        }
        assert!((frobenius_norm(&g) - acc.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn frobenius_is_absolutely_homogeneous() {
        let mut rng = RngStream::new(3);
        let g = FeatureGrid::new(3, 3, 2, (0..18).map(|_| rng.normal()).collect()).unwrap();
        for a in [-3.5, -1.0, 0.0, 0.25, 7.0] {
            let lhs = frobenius_norm(&g.scaled(a));
            let rhs = a.abs() * frobenius_norm(&g);
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }
    }

    #[test]
    fn kl_identical_is_zero() {
        let g = FeatureGrid::new(2, 2, 2, vec![0.1, -3.0, 2.0, 0.0, 5.0, 1.0, 1.0, -1.0]).unwrap();
        assert_eq!(kl_divergence(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn kl_two_point_arithmetic() {
        // softmax([0,0]) = [.5,.5]; softmax([0, ln 3]) = [.25,.75]
        let p = FeatureGrid::new(1, 2, 1, vec![0.0, 0.0]).unwrap();
        let q = FeatureGrid::new(1, 2, 1, vec![0.0, 3f64.ln()]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = kl_divergence(&p, &q).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.1438).abs() < 1e-4);
    }

    fn kl_reference(p: &[f64], q: &[f64]) -> f64 {
        let zp: f64 = p.iter().map(|v| v.exp()).sum();
        let zq: f64 = q.iter().map(|v| v.exp()).sum();
        let mut acc = 0.0;
        for (a, b) in p.iter().zip(q) {
            let pa = a.exp() / zp;
            let qb = b.exp() / zq;
            acc += pa * (pa / qb).ln();
        }
        acc
    }

    #[test]
    fn kl_vanishes_with_perturbation() {
        let mut rng = RngStream::new(5);
        let base: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
        let dir: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
        let p = FeatureGrid::new(2, 3, 4, base.clone()).unwrap();
        let mut prev = f64::INFINITY;
        for eps in [1.0, 0.1, 0.01, 0.001] {
            let qd: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + eps * d).collect();
            let q = FeatureGrid::new(2, 3, 4, qd.clone()).unwrap();
            let got = kl_divergence(&p, &q).unwrap();
            assert!(got >= 0.0);
            assert!((got - kl_reference(&base, &qd)).abs() < 1e-12);
            assert!(got < prev);
            prev = got;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn kl_rejects_shape_mismatch() {
        let p = FeatureGrid::zeros(2, 2, 1);
        let q = FeatureGrid::zeros(2, 1, 2);
        assert!(matches!(kl_divergence(&p, &q), Err(Error::Shape(_))));
    }

    #[test]
    fn yaw_wraps_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert!((normalize_angle(3.0 * PI + 0.5) - (-PI + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn grid_serialization_layout() {
        let g = FeatureGrid::new(1, 2, 2, vec![1.0, -2.0, 0.5, 3.25]).unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..12], &[1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[12..16], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 12 + 16);
        let back = FeatureGrid::read_from(&buf[..]).unwrap();
        assert_eq!(back, g);
        assert!(FeatureGrid::read_from(&buf[..20]).is_err());
    }
}
