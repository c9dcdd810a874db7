use log::warn;
use serde::{Deserialize, Serialize};

use super::QuantParams;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// A weighted block evaluated on a batch of flattened input rows.
pub trait BlockApply {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    /// Writes `rows × out_dim` outputs for `rows × in_dim` inputs.
    fn apply(&self, weight: &[f64], input: &[f64], out: &mut [f64]);
    /// Accumulates `∂⟨grad_out, apply(weight, input)⟩/∂weight` into `grad_w`.
    fn weight_vjp(&self, weight: &[f64], input: &[f64], grad_out: &[f64], grad_w: &mut [f64]);
}

/// `h(v) = clamp(1.2·σ(v) − 0.1, 0, 1)`.
#[inline]
pub fn rectified_sigmoid(v: f64) -> f64 {
    (1.2 / (1.0 + (-v).exp()) - 0.1).clamp(0.0, 1.0)
}

#[inline]
fn rectified_sigmoid_grad(v: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-v).exp());
    let raw = 1.2 * sig - 0.1;
    if raw > 0.0 && raw < 1.0 {
        1.2 * sig * (1.0 - sig)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundingVars {
    pub v: Vec<f64>,
}

impl RoundingVars {
    /// Starts from the fractional part of `W/s`, i.e. `h(v) = W/s − floor(W/s)`.
    pub fn from_weights(w: &[f64], qp: &QuantParams) -> Self {
        let v = w
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let (s, _) = qp.group(i);
                let frac = x / s - (x / s).floor();
                let p = ((frac + 0.1) / 1.2).clamp(1e-9, 1.0 - 1e-9);
                (p / (1.0 - p)).ln()
            })
            .collect();
        Self { v }
    }

    /// Hard rounding: `true` rounds up.
    pub fn from_mask(mask: &[bool]) -> Self {
        Self {
            v: mask.iter().map(|&up| if up { 10.0 } else { -10.0 }).collect(),
        }
    }

    pub fn h(&self) -> Vec<f64> {
        self.v.iter().map(|&v| rectified_sigmoid(v)).collect()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.v.iter().map(|&v| rectified_sigmoid(v) >= 0.5).collect()
    }
}

/// `s·(clamp(floor(W/s) + h + z) − z)` for soft rounding offsets `h`.
pub fn soft_quantized_weights(w: &[f64], qp: &QuantParams, h: &[f64]) -> Vec<f64> {
    if qp.is_passthrough() {
        return w.to_vec();
    }
    w.iter()
        .zip(h)
        .enumerate()
        .map(|(i, (&x, &hi))| {
            let (s, z) = qp.group(i);
            let q = ((x / s).floor() + hi + z as f64).clamp(qp.q_min as f64, qp.q_max as f64);
            s * (q - z as f64)
        })
        .collect()
}

/// Hard-rounded weights for a rounding mask; round-to-nearest masks reproduce `fake_quant`.
pub fn rounded_weights(w: &[f64], qp: &QuantParams, mask: &[bool]) -> Vec<f64> {
    let h: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    soft_quantized_weights(w, qp, &h)
}

/// Mask selecting round-to-nearest (ties to even).
pub fn nearest_mask(w: &[f64], qp: &QuantParams) -> Vec<bool> {
    w.iter()
        .enumerate()
        .map(|(i, &x)| {
            let (s, _) = qp.group(i);
            (x / s).round_ties_even() > (x / s).floor()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaRoundConfig {
    pub iters: usize,
    pub lr: f64,
    pub beta_hi: f64,
    pub beta_lo: f64,
    pub lambda_reg: f64,
    /// Rows per optimization step.
    pub batch_rows: usize,
    /// Fraction of iterations run without the rounding regularizer.
    pub warmup: f64,
}

impl Default for AdaRoundConfig {
    fn default() -> Self {
        Self {
            iters: 5000,
            lr: 0.01,
            beta_hi: 20.0,
            beta_lo: 2.0,
            lambda_reg: 0.01,
            batch_rows: 1024,
            warmup: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdaRoundOutcome {
    pub vars: RoundingVars,
    /// Entries whose `h` was still in (0.01, 0.99) before the final snap.
    pub unconverged: usize,
    /// Mean squared row error with the final hard rounding.
    pub final_loss: f64,
}

/// Mean-over-rows reconstruction error plus `λ·Σ(1 − |2h − 1|^β)`, and its gradient in `v`.
#[allow(clippy::too_many_arguments)]
pub fn adaround_objective(
    w: &[f64],
    qp: &QuantParams,
    vars: &RoundingVars,
    inputs: &[f64],
    fp_out: &[f64],
    block: &dyn BlockApply,
    beta: f64,
    lambda_reg: f64,
) -> (f64, Vec<f64>) {
    let rows = inputs.len() / block.in_dim();
    let h = vars.h();
    let wq = soft_quantized_weights(w, qp, &h);
    let mut out = vec![0.0; rows * block.out_dim()];
    block.apply(&wq, inputs, &mut out);
    let inv = 1.0 / rows.max(1) as f64;
    let mut loss = 0.0;
    let mut g_out = vec![0.0; out.len()];
    for ((o, t), g) in out.iter().zip(fp_out).zip(g_out.iter_mut()) {
        let d = o - t;
        loss += d * d * inv;
        *g = 2.0 * d * inv;
    }
    let mut g_w = vec![0.0; w.len()];
    block.weight_vjp(&wq, inputs, &g_out, &mut g_w);
    let mut grad = vec![0.0; w.len()];
    for i in 0..w.len() {
        let (s, z) = qp.group(i);
        let raw = (w[i] / s).floor() + h[i] + z as f64;
        let inside = raw > qp.q_min as f64 && raw < qp.q_max as f64;
        let dh = if inside { g_w[i] * s } else { 0.0 };
        let u = 2.0 * h[i] - 1.0;
        let reg_dh = if lambda_reg > 0.0 {
            loss += lambda_reg * (1.0 - u.abs().powf(beta));
            -lambda_reg * beta * u.abs().powf(beta - 1.0) * u.signum() * 2.0
        } else {
            0.0
        };
        grad[i] = (dh + reg_dh) * rectified_sigmoid_grad(vars.v[i]);
    }
    (loss, grad)
}

/// Learns per-weight rounding directions against the block's full-precision outputs.
pub fn adaround_optimize(
    w: &[f64],
    qp: &QuantParams,
    inputs: &[f64],
    fp_out: &[f64],
    block: &dyn BlockApply,
    cfg: &AdaRoundConfig,
    rng: &mut RngStream,
) -> Result<AdaRoundOutcome> {
    let (din, dout) = (block.in_dim(), block.out_dim());
    if din == 0 || inputs.len() % din != 0 || fp_out.len() != inputs.len() / din * dout {
        return Err(Error::shape("adaround inputs and outputs disagree on row count"));
    }
    let rows = inputs.len() / din;
    let mut vars = RoundingVars::from_weights(w, qp);
    if qp.is_passthrough() || rows == 0 {
        let mask = nearest_mask(w, qp);
        return Ok(AdaRoundOutcome {
            vars: RoundingVars::from_mask(&mask),
            unconverged: 0,
            final_loss: 0.0,
        });
    }

    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; w.len()];
    let mut v2 = vec![0.0; w.len()];
    let warm = (cfg.warmup * cfg.iters as f64).round() as usize;
    let batch = cfg.batch_rows.clamp(1, rows);
    let mut bin = vec![0.0; batch * din];
    let mut bout = vec![0.0; batch * dout];
    for it in 0..cfg.iters {
        let (beta, lambda) = if it < warm {
            (cfg.beta_hi, 0.0)
        } else {
            let span = (cfg.iters - warm).max(1) as f64;
            let t = (it - warm) as f64 / span;
            (cfg.beta_hi + (cfg.beta_lo - cfg.beta_hi) * t, cfg.lambda_reg)
        };
        let (xin, xout): (&[f64], &[f64]) = if batch == rows {
            (inputs, fp_out)
        } else {
            for b in 0..batch {
                let r = rng.below(rows);
                bin[b * din..(b + 1) * din].copy_from_slice(&inputs[r * din..(r + 1) * din]);
                bout[b * dout..(b + 1) * dout].copy_from_slice(&fp_out[r * dout..(r + 1) * dout]);
            }
            (&bin, &bout)
        };
        let (loss, grad) = adaround_objective(w, qp, &vars, xin, xout, block, beta, lambda);
        if !loss.is_finite() {
            return Err(Error::invalid(format!("adaround objective became non-finite at iteration {it}")));
        }
        let t = (it + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v2[i] = b2 * v2[i] + (1.0 - b2) * grad[i] * grad[i];
            vars.v[i] -= cfg.lr * (m[i] / c1) / ((v2[i] / c2).sqrt() + eps);
        }
    }

    let unconverged = vars.h().iter().filter(|&&h| h > 0.01 && h < 0.99).count();
    if unconverged > 0 {
        warn!("adaround: {unconverged} of {} rounding variables did not converge", w.len());
    }
    let vars = RoundingVars::from_mask(&vars.mask());
    let wq = soft_quantized_weights(w, qp, &vars.h());
    let mut out = vec![0.0; rows * dout];
    block.apply(&wq, inputs, &mut out);
    let final_loss = out.iter().zip(fp_out).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / rows as f64;
    Ok(AdaRoundOutcome {
        vars,
        unconverged,
        final_loss,
    })
}
