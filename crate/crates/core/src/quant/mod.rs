//! Affine quantization primitives: max-min initialization, quantize/dequantize,
//! fake quantization, scale grid search, learnable rounding and size accounting.

mod adaround;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::ModelParams;

pub use adaround::{
    adaround_objective, adaround_optimize, nearest_mask, rectified_sigmoid, rounded_weights, soft_quantized_weights,
    AdaRoundConfig, AdaRoundOutcome, BlockApply, RoundingVars,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// Element `i` belongs to group `i % channels` (channels-minor layouts).
    PerChannel { channels: usize },
}

impl Granularity {
    pub fn groups(self) -> usize {
        match self {
            Granularity::PerTensor => 1,
            Granularity::PerChannel { channels } => channels,
        }
    }

    #[inline]
    pub fn group_of(self, index: usize) -> usize {
        match self {
            Granularity::PerTensor => 0,
            Granularity::PerChannel { channels } => index % channels,
        }
    }
}

/// Unsigned affine quantizer over `[0, 2^bits − 1]`. Widths of 32 bits and above
/// are treated as full precision by [`fake_quant`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: Vec<f64>,
    pub zero_point: Vec<i64>,
    pub bits: u32,
    pub q_min: i64,
    pub q_max: i64,
    pub granularity: Granularity,
}

impl QuantParams {
    pub fn new(scale: Vec<f64>, zero_point: Vec<i64>, bits: u32, granularity: Granularity) -> Result<Self> {
        check_bits(bits)?;
        let q_max = q_max_for(bits);
        let groups = granularity.groups();
        if groups == 0 || scale.len() != groups || zero_point.len() != groups {
            return Err(Error::shape(format!(
                "{groups} groups need as many scales and zero points, got {} and {}",
                scale.len(),
                zero_point.len()
            )));
        }
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("scales must be finite and positive"));
        }
        if zero_point.iter().any(|z| !(0..=q_max).contains(z)) {
            return Err(Error::invalid("zero point outside the integer range"));
        }
        Ok(Self {
            scale,
            zero_point,
            bits,
            q_min: 0,
            q_max,
            granularity,
        })
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits >= 32
    }

    pub fn groups(&self) -> usize {
        self.scale.len()
    }

    #[inline]
    fn group(&self, i: usize) -> (f64, i64) {
        let g = self.granularity.group_of(i);
        (self.scale[g], self.zero_point[g])
    }

    /// Same quantizer with every group's scale replaced and zero points recomputed
    /// from the given per-group data minima.
    pub fn with_scales(&self, scales: &[f64], group_min: &[f64]) -> QuantParams {
        let zero_point = scales
            .iter()
            .zip(group_min)
            .map(|(&s, &m)| zero_point_for(m, s, self.bits))
            .collect();
        QuantParams {
            scale: scales.to_vec(),
            zero_point,
            ..self.clone()
        }
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 0 || bits > 32 {
        return Err(Error::invalid(format!("unsupported bit width {bits}")));
    }
    Ok(())
}

fn q_max_for(bits: u32) -> i64 {
    ((1u64 << bits) - 1) as i64
}

#[inline]
fn clamp_q(v: f64, q_min: i64, q_max: i64) -> i64 {
    v.clamp(q_min as f64, q_max as f64) as i64
}

/// `clamp(round(−min/s), 0, 2^b − 1)`.
pub fn zero_point_for(group_min: f64, scale: f64, bits: u32) -> i64 {
    clamp_q((-group_min / scale).round_ties_even(), 0, q_max_for(bits))
}

/// Per-group `(min, max)` of the data. Empty groups report `(0, 0)`.
pub fn group_ranges(x: &[f64], granularity: Granularity) -> Vec<(f64, f64)> {
    let n = granularity.groups();
    let mut r = vec![(f64::INFINITY, f64::NEG_INFINITY); n];
    for (i, &v) in x.iter().enumerate() {
        let g = &mut r[granularity.group_of(i)];
        g.0 = g.0.min(v);
        g.1 = g.1.max(v);
    }
    for g in &mut r {
        if g.0 > g.1 {
            *g = (0.0, 0.0);
        }
    }
    r
}

/// Data minimum of each group after widening the range to contain zero.
pub fn group_minima(x: &[f64], granularity: Granularity) -> Vec<f64> {
    group_ranges(x, granularity).into_iter().map(|(lo, _)| lo.min(0.0)).collect()
}

/// Max-min initialization. The observed range is widened to contain zero so that
/// zero is exactly representable; a constant group falls back to `s = 1`.
pub fn init_maxmin(x: &[f64], bits: u32, granularity: Granularity) -> Result<QuantParams> {
    if x.is_empty() {
        return Err(Error::Empty("init_maxmin input"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("init_maxmin input contains non-finite values"));
    }
    if let Granularity::PerChannel { channels } = granularity {
        if channels == 0 || x.len() % channels != 0 {
            return Err(Error::shape(format!("{} values do not split into {channels} channels", x.len())));
        }
    }
    check_bits(bits)?;
    let levels = q_max_for(bits) as f64;
    let mut scale = Vec::new();
    let mut zero_point = Vec::new();
    for (lo, hi) in group_ranges(x, granularity) {
        if lo == hi {
            scale.push(1.0);
            zero_point.push(zero_point_for(lo, 1.0, bits));
            continue;
        }
        let (lo, hi) = (lo.min(0.0), hi.max(0.0));
        let s = (hi - lo) / levels;
        scale.push(s);
        zero_point.push(zero_point_for(lo, s, bits));
    }
    QuantParams::new(scale, zero_point, bits, granularity)
}

pub fn quantize(x: &[f64], qp: &QuantParams) -> Vec<i64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let (s, z) = qp.group(i);
            clamp_q((v / s).round_ties_even() + z as f64, qp.q_min, qp.q_max)
        })
        .collect()
}

pub fn dequantize(xi: &[i64], qp: &QuantParams) -> Vec<f64> {
    xi.iter()
        .enumerate()
        .map(|(i, &q)| {
            let (s, z) = qp.group(i);
            s * (q - z) as f64
        })
        .collect()
}

#[inline]
fn fake_quant_scalar(v: f64, s: f64, z: i64, q_min: i64, q_max: i64) -> f64 {
    let q = clamp_q((v / s).round_ties_even() + z as f64, q_min, q_max);
    s * (q - z) as f64
}

/// `dequantize(quantize(x))`, or `x` unchanged for passthrough widths.
pub fn fake_quant(x: &[f64], qp: &QuantParams) -> Vec<f64> {
    let mut out = x.to_vec();
    fake_quant_in_place(&mut out, qp);
    out
}

pub fn fake_quant_in_place(x: &mut [f64], qp: &QuantParams) {
    if qp.is_passthrough() {
        return;
    }
    for (i, v) in x.iter_mut().enumerate() {
        let (s, z) = qp.group(i);
        *v = fake_quant_scalar(*v, s, z, qp.q_min, qp.q_max);
    }
}

/// Candidate multipliers `α + (β − α)·t/(T − 1)`, `t = 0..T`; a single candidate is `α`.
pub fn scale_multipliers(alpha: f64, beta: f64, t: usize) -> Vec<f64> {
    if t <= 1 {
        return vec![alpha];
    }
    (0..t)
        .map(|i| alpha + (beta - alpha) * i as f64 / (t - 1) as f64)
        .collect()
}

/// Per-group squared fake-quantization error at scale `s`, zero point re-derived from `group_min`.
fn group_error(x: &[f64], granularity: Granularity, group: usize, s: f64, group_min: f64, bits: u32) -> f64 {
    let z = zero_point_for(group_min, s, bits);
    let q_max = q_max_for(bits);
    let step = granularity.groups();
    let mut err = 0.0;
    let mut i = group;
    while i < x.len() {
        let d = x[i] - fake_quant_scalar(x[i], s, z, 0, q_max);
        err += d * d;
        i += step;
    }
    err
}

/// Grid search over `s_t ∈ [α·s₀, β·s₀]` minimizing `‖x − fake_quant(x; s_t)‖²`
/// independently per group. Ties go to the smaller scale.
pub fn scale_search(x: &[f64], qp0: &QuantParams, alpha: f64, beta: f64, t: usize) -> Result<QuantParams> {
    if !(alpha > 0.0 && alpha <= beta) || t == 0 {
        return Err(Error::invalid("scale_search needs 0 < alpha <= beta and T >= 1"));
    }
    if qp0.is_passthrough() {
        return Ok(qp0.clone());
    }
    let mins = group_minima(x, qp0.granularity);
    let mults = scale_multipliers(alpha, beta, t);
    let mut scales = Vec::with_capacity(qp0.groups());
    for g in 0..qp0.groups() {
        let mut best = (f64::INFINITY, qp0.scale[g] * mults[0]);
        for &m in &mults {
            let s = qp0.scale[g] * m;
            let e = group_error(x, qp0.granularity, g, s, mins[g], qp0.bits);
            if e < best.0 {
                best = (e, s);
            }
        }
        scales.push(best.1);
    }
    Ok(qp0.with_scales(&scales, &mins))
}

/// Serialized bytes of one tensor: `ceil(count·b/8)` payload plus 8 bytes
/// (f32 scale, i32 zero point) per quantization group.
pub fn tensor_size_bytes(count: usize, bits: u32, groups: usize) -> usize {
    (count * bits as usize).div_ceil(8) + 8 * groups
}

/// Model footprint at a uniform bit width: weights are per-output-channel groups,
/// each bias vector is one group.
pub fn model_size_bytes(params: &ModelParams, bits: u32) -> usize {
    params
        .layers()
        .iter()
        .map(|l| tensor_size_bytes(l.weight.len(), bits, l.cout) + tensor_size_bytes(l.bias.len(), bits, 1))
        .sum()
}
