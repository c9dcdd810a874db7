use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::engine::{self, backward, ModelGrads, Overlay, Transport};
use super::model::{BlockId, ModelConfig, ModelParams};
use super::{default_recall_points, eval_ap, frame_inputs, AgentInput, PoseNoise};
use crate::error::{Error, Result};
use crate::numerics::{FeatureGrid, RngStream};
use crate::scene::{targets_at, Scenario, Targets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
    /// Weight of the offset regression term.
    pub lambda_offset: f64,
    /// Share of samples held out for model selection.
    pub val_fraction: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub pose_noise: PoseNoise,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            batch: 4,
            seed: 0,
            lambda_offset: 0.1,
            val_fraction: 0.1,
            clip_norm: Some(5.0),
            pose_noise: PoseNoise::NONE,
        }
    }
}

/// One supervised example: agent inputs for a frame plus ego-frame targets.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub inputs: Vec<AgentInput>,
    pub ego_id: u32,
    pub targets: Targets,
    pub meters_per_cell: f64,
}

/// Identifies a frame and ego within a scenario list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub scenario: usize,
    pub frame: usize,
    pub ego_id: u32,
}

impl TrainSample {
    pub fn build(scenarios: &[Scenario], r: SampleRef, noise: PoseNoise, root: &RngStream) -> Result<Self> {
        let s = scenarios
            .get(r.scenario)
            .ok_or_else(|| Error::invalid(format!("scenario {} out of range", r.scenario)))?;
        let present = s.agent_ids();
        let inputs = frame_inputs(s, r.frame, r.ego_id, &present, noise, &data_stream(s, root))?;
        let targets = targets_at(s, r.frame, &s.agent(r.ego_id)?.pose)?;
        Ok(Self {
            inputs,
            ego_id: r.ego_id,
            targets,
            meters_per_cell: s.roi.meters_per_cell,
        })
    }
}

/// Observation noise is a property of the dataset, keyed by the scenario seed.
fn data_stream(s: &Scenario, root: &RngStream) -> RngStream {
    root.derive(s.seed)
}

/// Every frame of every scenario once, with a seeded random ego.
pub fn build_samples(scenarios: &[Scenario], seed: u64) -> Vec<SampleRef> {
    let rng = RngStream::new(seed).derive(0xE60);
    let mut out = Vec::new();
    for (si, s) in scenarios.iter().enumerate() {
        if s.agents.is_empty() {
            continue;
        }
        for f in 0..s.frames.len() {
            let mut r = rng.derive(si as u64).derive(f as u64);
            let ego = s.agents[r.below(s.agents.len())].id;
            out.push(SampleRef {
                scenario: si,
                frame: f,
                ego_id: ego,
            });
        }
    }
    out
}

/// Mean per-cell BCE on the score plus `λ·Σ_pos ‖offset − target‖² / max(n_pos, 1)`.
/// Returns the loss and its gradient w.r.t. the raw head output.
pub fn detection_loss(det: &FeatureGrid, t: &Targets, lambda_offset: f64) -> Result<(f64, FeatureGrid)> {
    if det.channels() != 3 || det.cells() != t.occupancy.cells() {
        return Err(Error::shape("detection and target grids disagree"));
    }
    let n = det.cells() as f64;
    let npos = t.occupancy.data().iter().filter(|&&y| y > 0.5).count().max(1) as f64;
    let mut grad = FeatureGrid::zeros_like(det);
    let mut loss = 0.0;
    for cell in 0..det.cells() {
        let d = det.cell(cell);
        let y = t.occupancy.data()[cell];
        let s = d[0];
        loss += (s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()) / n;
        let g = grad.cell_mut(cell);
        g[0] = (1.0 / (1.0 + (-s).exp()) - y) / n;
        if y > 0.5 {
            let off = t.offsets.cell(cell);
            for k in 0..2 {
                let e = d[1 + k] - off[k];
                loss += lambda_offset * e * e / npos;
                g[1 + k] = 2.0 * lambda_offset * e / npos;
            }
        }
    }
    Ok((loss, grad))
}

fn transport_for(params: &ModelParams) -> Transport<'static> {
    if params.has_block(BlockId::Compress) {
        Transport::Compressed
    } else {
        Transport::Lossless
    }
}

/// Mean loss and gradient over a batch.
pub fn loss_and_grad(params: &ModelParams, batch: &[&TrainSample], lambda_offset: f64) -> Result<(f64, ModelGrads)> {
    let mut grads = ModelGrads::zeros_for(params);
    let mut total = 0.0;
    for s in batch {
        let trace = engine::run(params, &s.inputs, s.ego_id, s.meters_per_cell, None, transport_for(params))?;
        let (loss, d_det) = detection_loss(trace.det.as_grid(), &s.targets, lambda_offset)?;
        total += loss;
        backward(params, &trace, &d_det, &mut grads, None)?;
    }
    let inv = 1.0 / batch.len().max(1) as f64;
    grads.scale(inv);
    Ok((total * inv, grads))
}

pub fn mean_loss(params: &ModelParams, samples: &[TrainSample], lambda_offset: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let trace = engine::run(params, &s.inputs, s.ego_id, s.meters_per_cell, None, transport_for(params))?;
        total += detection_loss(trace.det.as_grid(), &s.targets, lambda_offset)?.0;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Training and validation samples drawn from a scenario list.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<TrainSample>,
    pub held_out: Vec<TrainSample>,
}

impl Dataset {
    /// Deterministic in `seed`: sample order, egos, observation noise and the split.
    pub fn build(scenarios: &[Scenario], seed: u64, val_fraction: f64, noise: PoseNoise) -> Result<Self> {
        if scenarios.is_empty() {
            return Err(Error::Empty("training scenarios"));
        }
        let mut refs = build_samples(scenarios, seed);
        RngStream::new(seed).derive(1).shuffle(&mut refs);
        let n_val = if refs.len() >= 2 {
            ((val_fraction * refs.len() as f64).ceil() as usize).clamp(1, refs.len() - 1)
        } else {
            0
        };
        let data_root = RngStream::new(seed).derive(0xDA7A);
        let mut samples: Vec<TrainSample> = refs
            .iter()
            .map(|r| TrainSample::build(scenarios, *r, noise, &data_root))
            .collect::<Result<_>>()?;
        let train = samples.split_off(n_val);
        Ok(Self { train, held_out: samples })
    }

    /// Held-out samples, or the training samples when nothing was held out.
    pub fn val(&self) -> &[TrainSample] {
        if self.held_out.is_empty() {
            &self.train
        } else {
            &self.held_out
        }
    }
}

/// Every frame of every scenario with a seeded random ego, for evaluation.
pub fn eval_samples(scenarios: &[Scenario], seed: u64, noise: PoseNoise) -> Result<Vec<TrainSample>> {
    let root = RngStream::new(seed).derive(0xE7A1);
    build_samples(scenarios, seed)
        .into_iter()
        .map(|r| TrainSample::build(scenarios, r, noise, &root))
        .collect()
}

/// Cell-AP over `samples` at the default recall points.
pub fn model_ap(params: &ModelParams, overlay: Option<&Overlay>, samples: &[TrainSample], transport: Transport<'_>) -> Result<f64> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        preds.push(engine::run(params, &s.inputs, s.ego_id, s.meters_per_cell, overlay, transport)?.det);
        labels.push(s.targets.occupancy.clone());
    }
    eval_ap(&preds, &labels, &default_recall_points())
}

/// SGD with momentum and optional global-norm clipping.
#[derive(Clone, Debug)]
pub(crate) struct Momentum {
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub(crate) fn new(params: &ModelParams) -> Self {
        Self {
            velocity: params.layers().iter().map(|l| vec![0.0; l.param_count()]).collect(),
        }
    }

    pub(crate) fn step(&mut self, params: &mut ModelParams, grads: &ModelGrads, lr: f64, momentum: f64, clip_norm: Option<f64>) {
        let norm = grads.flat().iter().map(|g| g * g).sum::<f64>().sqrt();
        let clip = match clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for ((layer, g), v) in params.layers_mut().iter_mut().zip(&grads.layers).zip(&mut self.velocity) {
            let nw = layer.weight.len();
            for (i, p) in layer.weight.iter_mut().chain(layer.bias.iter_mut()).enumerate() {
                let gi = if i < nw { g.weight[i] } else { g.bias[i - nw] } * clip;
                v[i] = momentum * v[i] + gi;
                *p -= lr * v[i];
            }
        }
    }
}

/// Mini-batch SGD with momentum on the detection loss; returns the parameters
/// with the lowest validation loss seen (the initialization included).
pub fn fit_fp(scenarios: &[Scenario], cfg: &TrainConfig) -> Result<ModelParams> {
    let init = ModelParams::init(cfg.model.clone(), cfg.seed)?;
    fit_from(init, scenarios, cfg)
}

pub fn fit_from(init: ModelParams, scenarios: &[Scenario], cfg: &TrainConfig) -> Result<ModelParams> {
    if scenarios.is_empty() {
        return Err(Error::Empty("training scenarios"));
    }
    if cfg.epochs == 0 {
        return Ok(init);
    }
    let root = RngStream::new(cfg.seed);
    let data = Dataset::build(scenarios, cfg.seed, cfg.val_fraction, cfg.pose_noise)?;
    let (train, val) = (&data.train[..], data.val());
    let mut params = init;
    let mut best = (mean_loss(&params, val, cfg.lambda_offset)?, params.clone());
    info!("fit: {} train / {} val samples, initial val loss {:.5}", train.len(), val.len(), best.0);
    let mut opt = Momentum::new(&params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = cfg.batch.max(1);
    for epoch in 0..cfg.epochs {
        root.derive(2).derive(epoch as u64).shuffle(&mut order);
        for (step, chunk) in order.chunks(batch).enumerate() {
            let b: Vec<&TrainSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = loss_and_grad(&params, &b, cfg.lambda_offset)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("loss {loss}"),
                });
            }
            opt.step(&mut params, &grads, cfg.lr, cfg.momentum, cfg.clip_norm);
            if !params.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: "non-finite parameters".into(),
                });
            }
        }
        let vl = mean_loss(&params, val, cfg.lambda_offset)?;
        debug!("fit: epoch {epoch} val loss {vl:.5}");
        if vl < best.0 {
            best = (vl, params.clone());
        }
    }
    info!("fit: best val loss {:.5}", best.0);
    let mut out = best.1;
    out.round_to_f32();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::gen_scenario_with;
    use crate::scene::{Roi, ScenarioParams};

    fn tiny_scenarios(n: usize) -> Vec<Scenario> {
        let p = ScenarioParams {
            roi: Roi {
                width_m: 8.0,
                height_m: 8.0,
                meters_per_cell: 0.5,
            },
            fov_radius: 5.0,
            half_extent_range: (0.6, 1.2),
            agent_spread_m: 2.0,
            min_agent_separation_m: 1.0,
            ..Default::default()
        };
        (0..n).map(|i| gen_scenario_with(&p, 100 + i as u64, 2, 3, 2, 100.0).unwrap()).collect()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                channels: 4,
                hidden: 3,
                compress_ratio: None,
            },
            epochs: 1,
            batch: 2,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let p = fit_fp(&tiny_scenarios(2), &cfg).unwrap();
        assert_eq!(p, ModelParams::init(cfg.model.clone(), cfg.seed).unwrap());
    }

    #[test]
    fn empty_scenarios_rejected() {
        assert!(matches!(fit_fp(&[], &tiny_cfg()), Err(Error::Empty(_))));
    }

    #[test]
    fn training_is_reproducible() {
        let s = tiny_scenarios(3);
        assert_eq!(fit_fp(&s, &tiny_cfg()).unwrap(), fit_fp(&s, &tiny_cfg()).unwrap());
    }

    #[test]
    fn detection_loss_gradient_matches_finite_differences() {
        let s = tiny_scenarios(1);
        let sample = TrainSample::build(&s, SampleRef { scenario: 0, frame: 0, ego_id: 0 }, PoseNoise::NONE, &RngStream::new(1)).unwrap();
        let mut r = RngStream::new(2);
        let det = FeatureGrid::new(16, 16, 3, (0..768).map(|_| r.normal()).collect()).unwrap();
        let (_, g) = detection_loss(&det, &sample.targets, 0.3).unwrap();
        for i in (0..768).step_by(37) {
            let (mut p, mut m) = (det.clone(), det.clone());
            p.data_mut()[i] += 1e-6;
            m.data_mut()[i] -= 1e-6;
            let fd = (detection_loss(&p, &sample.targets, 0.3).unwrap().0 - detection_loss(&m, &sample.targets, 0.3).unwrap().0) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-7);
        }
    }
}
