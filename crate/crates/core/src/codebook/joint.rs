use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::{assign, Codebook};
use crate::error::{Error, Result};
use crate::pipeline::engine::{self, backward, encode_with, CodebookBackward, FrozenMessage, SentTrace};
use crate::pipeline::{detection_loss, Dataset, ModelGrads, ModelParams, Momentum, PoseNoise, TrainSample, Transport};
use crate::scene::Scenario;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight of the reconstruction term `Σ_remote ‖F − F̂‖²`.
    pub lambda_rec: f64,
    pub lambda_offset: f64,
    pub batch: usize,
    pub seed: u64,
    pub n_r: usize,
    pub val_fraction: f64,
    pub clip_norm: Option<f64>,
    pub pose_noise: PoseNoise,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.01,
            momentum: 0.9,
            lambda_rec: 1e-4,
            lambda_offset: 0.1,
            batch: 4,
            seed: 0,
            n_r: 1,
            val_fraction: 0.1,
            clip_norm: Some(5.0),
            pose_noise: PoseNoise::NONE,
        }
    }
}

#[derive(Clone, Debug)]
pub struct JointOutcome {
    pub params: ModelParams,
    pub codebook: Codebook,
    /// Mean joint loss on the selection set before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Joint loss of one sample and, when `grads` is given, its gradients
/// w.r.t. the model parameters and the codes (`n_L × dim`, accumulated).
pub fn joint_loss_and_grad(
    params: &ModelParams,
    cb: &Codebook,
    sample: &TrainSample,
    transport: Transport<'_>,
    lambda_rec: f64,
    lambda_offset: f64,
    grads: Option<(&mut ModelGrads, &mut Vec<f64>)>,
) -> Result<f64> {
    if !matches!(transport, Transport::Codebook { .. } | Transport::Frozen { .. }) {
        return Err(Error::invalid("joint training needs a codebook transport"));
    }
    let trace = engine::run(params, &sample.inputs, sample.ego_id, sample.meters_per_cell, None, transport)?;
    let (mut loss, d_det) = detection_loss(trace.det.as_grid(), &sample.targets, lambda_offset)?;
    for a in &trace.agents {
        if let SentTrace::Codebook { recon, .. } = &a.sent {
            loss += lambda_rec * a.feature.data().iter().zip(recon.data()).map(|(f, r)| (f - r) * (f - r)).sum::<f64>();
        }
    }
    if let Some((g, code_grad)) = grads {
        if code_grad.len() != cb.codes().len() {
            return Err(Error::shape("code gradient buffer"));
        }
        let hook = CodebookBackward {
            lambda_rec,
            code_grad: Some(code_grad),
            alpha: cb.alpha(),
        };
        backward(params, &trace, &d_det, g, Some(hook))?;
    }
    Ok(loss)
}

/// Assignments of every remote agent under the current parameters, anchored at
/// their current features.
pub fn freeze(params: &ModelParams, cb: &Codebook, sample: &TrainSample, n_r: usize) -> Result<Vec<FrozenMessage>> {
    let mut out = Vec::new();
    for a in sample.inputs.iter().filter(|a| a.id != sample.ego_id) {
        let enc = encode_with(params, None, a.modality, &a.obs)?;
        let payload = assign(&enc.feature, cb, n_r)?;
        out.push(FrozenMessage {
            agent_id: a.id,
            payload,
            anchor: enc.feature,
        });
    }
    Ok(out)
}

pub fn mean_joint_loss(params: &ModelParams, cb: &Codebook, samples: &[TrainSample], n_r: usize, lambda_rec: f64, lambda_offset: f64) -> Result<f64> {
    let t = Transport::Codebook { codebook: cb, n_r };
    let mut total = 0.0;
    for s in samples {
        total += joint_loss_and_grad(params, cb, s, t, lambda_rec, lambda_offset, None)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Fine-tunes the model and the codes together through the codebook channel.
/// Rank weights stay fixed; a zero code 0 stays pinned. Returns the best pair on
/// the held-out samples, the starting point included.
pub fn train_joint(init: ModelParams, cb: Codebook, scenarios: &[Scenario], cfg: &JointConfig) -> Result<JointOutcome> {
    if cfg.n_r == 0 || cfg.n_r > cb.n_r() {
        return Err(Error::invalid(format!("n_R = {} with a codebook of {} ranks", cfg.n_r, cb.n_r())));
    }
    let data = Dataset::build(scenarios, cfg.seed, cfg.val_fraction, cfg.pose_noise)?;
    let (train, val) = (&data.train[..], data.val());
    let pinned = cb.n_r() > 1 && cb.code(0).iter().all(|&v| v == 0.0);
    let dim = cb.dim();

    let mut params = init;
    let mut codebook = cb;
    let initial_loss = mean_joint_loss(&params, &codebook, val, cfg.n_r, cfg.lambda_rec, cfg.lambda_offset)?;
    let mut best = (initial_loss, params.clone(), codebook.clone());
    info!("joint: {} train / {} val samples, initial loss {initial_loss:.5}", train.len(), val.len());

    let root = crate::numerics::RngStream::new(cfg.seed).derive(0x101);
    let mut opt = Momentum::new(&params);
    let mut code_velocity = vec![0.0; codebook.codes().len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        root.derive(epoch as u64).shuffle(&mut order);
        for (step, chunk) in order.chunks(cfg.batch.max(1)).enumerate() {
            let mut grads = ModelGrads::zeros_for(&params);
            let mut code_grad = vec![0.0; codebook.codes().len()];
            let t = Transport::Codebook {
                codebook: &codebook,
                n_r: cfg.n_r,
            };
            let mut loss = 0.0;
            for &i in chunk {
                loss += joint_loss_and_grad(&params, &codebook, &train[i], t, cfg.lambda_rec, cfg.lambda_offset, Some((&mut grads, &mut code_grad)))?;
            }
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("joint loss {loss}"),
                });
            }
            let inv = 1.0 / chunk.len() as f64;
            grads.scale(inv);
            code_grad.iter_mut().for_each(|g| *g *= inv);
            if pinned {
                code_grad[..dim].iter_mut().for_each(|g| *g = 0.0);
            }
            opt.step(&mut params, &grads, cfg.lr, cfg.momentum, cfg.clip_norm);

            let norm = code_grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let clip = match cfg.clip_norm {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            let mut codes = codebook.codes().to_vec();
            for ((c, v), g) in codes.iter_mut().zip(&mut code_velocity).zip(&code_grad) {
                *v = cfg.momentum * *v + g * clip;
                *c -= cfg.lr * *v;
            }
            codebook = Codebook::new(codebook.n_l(), dim, codes, codebook.alpha().to_vec())?.with_final_loss(codebook.final_loss());
            if !params.is_finite() || codebook.codes().iter().any(|c| !c.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: "non-finite parameters".into(),
                });
            }
        }
        let vl = mean_joint_loss(&params, &codebook, val, cfg.n_r, cfg.lambda_rec, cfg.lambda_offset)?;
        debug!("joint: epoch {epoch} loss {vl:.5}");
        if vl < best.0 {
            best = (vl, params.clone(), codebook.clone());
        }
    }
    let (final_loss, mut params, codebook) = best;
    params.round_to_f32();
    info!("joint: best loss {final_loss:.5}");
    Ok(JointOutcome {
        params,
        codebook,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::pipeline::{ModelConfig, SampleRef};
    use crate::scene::{gen_scenario_with, Roi, ScenarioParams};

    fn setup() -> (Vec<Scenario>, ModelParams, Codebook) {
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
        let s: Vec<Scenario> = (0..2).map(|i| gen_scenario_with(&p, 40 + i, 3, 3, 2, 100.0).unwrap()).collect();
        let params = ModelParams::init(
            ModelConfig {
                channels: 4,
                hidden: 3,
                compress_ratio: None,
            },
            9,
        )
        .unwrap();
        let mut r = RngStream::new(3);
        let codes: Vec<f64> = (0..8 * 4).map(|_| r.normal().abs() * 0.3).collect();
        let cb = Codebook::new(8, 4, codes, vec![1.0]).unwrap();
        (s, params, cb)
    }

    #[test]
    fn frozen_gradients_match_finite_differences() {
        let (s, params, cb) = setup();
        let sample = TrainSample::build(&s, SampleRef { scenario: 0, frame: 1, ego_id: 0 }, PoseNoise::NONE, &RngStream::new(4)).unwrap();
        let frozen = freeze(&params, &cb, &sample, 1).unwrap();
        let lam = 0.05;
        let loss_at = |p: &ModelParams, c: &Codebook| {
            let t = Transport::Frozen { codebook: c, messages: &frozen };
            joint_loss_and_grad(p, c, &sample, t, lam, 0.1, None).unwrap()
        };
        let mut g = ModelGrads::zeros_for(&params);
        let mut cg = vec![0.0; cb.codes().len()];
        let t = Transport::Frozen { codebook: &cb, messages: &frozen };
        joint_loss_and_grad(&params, &cb, &sample, t, lam, 0.1, Some((&mut g, &mut cg))).unwrap();

        let eps = 1e-5;
        for li in 0..params.layers().len() {
            for wi in (0..params.layers()[li].weight.len()).step_by(13) {
                let (mut p, mut m) = (params.clone(), params.clone());
                p.layers_mut()[li].weight[wi] += eps;
                m.layers_mut()[li].weight[wi] -= eps;
                let fd = (loss_at(&p, &cb) - loss_at(&m, &cb)) / (2.0 * eps);
                let an = g.layers[li].weight[wi];
                assert!((fd - an).abs() <= 1e-5 + 1e-3 * an.abs(), "layer {li} w {wi}: fd {fd} analytic {an}");
            }
        }
        // Codebook::new rounds to f32, so perturb codes through an f64 copy of the loss.
        let codes = cb.codes().to_vec();
        for ci in 0..codes.len() {
            let shift = |d: f64| {
                let mut c = codes.clone();
                c[ci] += d;
                c
            };
            let exact = |c: Vec<f64>| {
                let mut cb2 = cb.clone();
                cb2.set_codes_unrounded(c);
                loss_at(&params, &cb2)
            };
            let fd = (exact(shift(eps)) - exact(shift(-eps))) / (2.0 * eps);
            assert!((fd - cg[ci]).abs() <= 1e-5 + 1e-3 * cg[ci].abs(), "code {ci}: fd {fd} analytic {}", cg[ci]);
        }
    }

    #[test]
    fn joint_training_lowers_loss() {
        let (s, params, cb) = setup();
        let cfg = JointConfig {
            epochs: 2,
            lr: 0.02,
            batch: 2,
            seed: 3,
            ..Default::default()
        };
        let out = train_joint(params, cb, &s, &cfg).unwrap();
        assert!(out.final_loss <= out.initial_loss);
        assert!(out.params.is_finite());
    }

    #[test]
    fn rejects_excess_ranks() {
        let (s, params, cb) = setup();
        let cfg = JointConfig { n_r: 2, ..Default::default() };
        assert!(matches!(train_joint(params, cb, &s, &cfg), Err(Error::InvalidArgument(_))));
    }
}
