use super::layers::{relu_backward, relu_in_place, LayerGrad};
use super::model::{BlockId, ModelParams};
use super::DetectionGrid;
use crate::codebook::{assign, reconstruct, Codebook, MessagePayload};
use crate::error::{Error, Result};
use crate::numerics::{FeatureGrid, Pose2D, WarpPlan};
use crate::quant::{fake_quant_in_place, QuantParams};
use crate::scene::Modality;

const SLOTS: usize = 9;

/// Substitute weights and input-activation quantizers, per block.
#[derive(Clone, Debug, Default)]
pub struct Overlay {
    weights: Vec<Option<Vec<f64>>>,
    acts: Vec<Option<QuantParams>>,
}

impl Overlay {
    pub fn new() -> Self {
        Self {
            weights: vec![None; SLOTS],
            acts: vec![None; SLOTS],
        }
    }

    pub fn set_weight(&mut self, id: BlockId, w: Vec<f64>) {
        self.weights[id.index()] = Some(w);
    }

    pub fn set_act(&mut self, id: BlockId, qp: QuantParams) {
        self.acts[id.index()] = Some(qp);
    }

    pub fn clear_block(&mut self, id: BlockId) {
        self.weights[id.index()] = None;
        self.acts[id.index()] = None;
    }

    pub fn weight(&self, id: BlockId) -> Option<&[f64]> {
        self.weights.get(id.index()).and_then(|w| w.as_deref())
    }

    pub fn act(&self, id: BlockId) -> Option<&QuantParams> {
        self.acts.get(id.index()).and_then(|a| a.as_ref())
    }

    pub fn is_empty(&self) -> bool {
        self.weights.iter().all(Option::is_none) && self.acts.iter().all(Option::is_none)
    }
}

/// How remote features reach the ego agent.
#[derive(Clone, Copy, Debug)]
pub enum Transport<'a> {
    Lossless,
    /// The model's own `C → C/r → C` bottleneck.
    Compressed,
    Codebook { codebook: &'a Codebook, n_r: usize },
    /// Codebook transport with assignments frozen per sender: the receiver sees
    /// `reconstruct(payload) + (F − anchor)`, whose exact gradient is the
    /// straight-through one.
    Frozen { codebook: &'a Codebook, messages: &'a [FrozenMessage] },
}

#[derive(Clone, Debug)]
pub struct FrozenMessage {
    pub agent_id: u32,
    pub payload: MessagePayload,
    pub anchor: FeatureGrid,
}

/// One agent's contribution to a forward pass.
#[derive(Clone, Debug)]
pub struct AgentInput {
    pub id: u32,
    pub modality: Modality,
    pub obs: FeatureGrid,
    /// Pose used to warp this agent's feature into the ego frame.
    pub pose: Pose2D,
}

#[derive(Clone, Debug)]
pub enum SentTrace {
    Local,
    Raw,
    Compressed { zc: FeatureGrid, zd: FeatureGrid },
    Codebook { payload: MessagePayload, recon: FeatureGrid },
}

#[derive(Clone, Debug)]
pub struct AgentTrace {
    pub id: u32,
    pub modality: Modality,
    pub is_ego: bool,
    pub obs: FeatureGrid,
    pub z0: FeatureGrid,
    pub a0: FeatureGrid,
    pub z1: FeatureGrid,
    pub feature: FeatureGrid,
    pub sent: SentTrace,
    pub received: FeatureGrid,
    pub plan: Option<WarpPlan>,
    pub warped: FeatureGrid,
    pub score: FeatureGrid,
}

/// Every intermediate of one forward pass, agents sorted by id.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub agents: Vec<AgentTrace>,
    /// Softmax fusion weights, `agents × cells`.
    pub weights: Vec<f64>,
    pub fused: FeatureGrid,
    pub z_post: FeatureGrid,
    pub hidden: FeatureGrid,
    pub det: DetectionGrid,
}

/// Applies one block (input quantizer, weighted layer, optional ReLU) and
/// returns `(pre_activation, output)`.
pub fn apply_block(params: &ModelParams, overlay: Option<&Overlay>, id: BlockId, x: &FeatureGrid) -> Result<(FeatureGrid, FeatureGrid)> {
    let layer = params.layer(id);
    let weight = overlay.and_then(|o| o.weight(id)).unwrap_or(&layer.weight);
    let z = match overlay.and_then(|o| o.act(id)) {
        Some(qp) => {
            let mut xq = x.clone();
            fake_quant_in_place(xq.data_mut(), qp);
            layer.forward_with(weight, &xq)?
        }
        None => layer.forward_with(weight, x)?,
    };
    let mut a = z.clone();
    if id.has_relu() {
        relu_in_place(&mut a);
    }
    Ok((z, a))
}

pub struct EncoderTrace {
    pub z0: FeatureGrid,
    pub a0: FeatureGrid,
    pub z1: FeatureGrid,
    pub feature: FeatureGrid,
}

pub fn encode_with(params: &ModelParams, overlay: Option<&Overlay>, modality: Modality, obs: &FeatureGrid) -> Result<EncoderTrace> {
    let (z0, a0) = apply_block(params, overlay, BlockId::Encoder { modality, unit: 0 }, obs)?;
    let (z1, feature) = apply_block(params, overlay, BlockId::Encoder { modality, unit: 1 }, &a0)?;
    Ok(EncoderTrace { z0, a0, z1, feature })
}

/// Per-agent scores, softmax weights (`agents × cells`) and the fused feature.
pub fn fuse_with(params: &ModelParams, overlay: Option<&Overlay>, warped: &[&FeatureGrid]) -> Result<(Vec<FeatureGrid>, Vec<f64>, FeatureGrid)> {
    let first = *warped.first().ok_or(Error::Empty("fusion needs at least one feature"))?;
    if warped.iter().any(|g| !g.same_shape(first)) {
        return Err(Error::shape("fused features must share one shape"));
    }
    let id = BlockId::FusionScore;
    let act = overlay.and_then(|o| o.act(id));
    let layer = params.layer(id);
    let weight = overlay.and_then(|o| o.weight(id)).unwrap_or(&layer.weight);
    let mut inputs = Vec::with_capacity(warped.len());
    let mut scores = Vec::with_capacity(warped.len());
    for g in warped {
        let x = match act {
            Some(qp) => {
                let mut xq = (*g).clone();
                fake_quant_in_place(xq.data_mut(), qp);
                std::borrow::Cow::Owned(xq)
            }
            None => std::borrow::Cow::Borrowed(*g),
        };
        scores.push(layer.forward_with(weight, &x)?);
        inputs.push(x);
    }
    let cells = first.cells();
    let n = warped.len();
    let mut weights = vec![0.0; n * cells];
    let mut fused = FeatureGrid::zeros_like(first);
    for cell in 0..cells {
        let max = scores.iter().map(|s| s.data()[cell]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..n {
            let e = (scores[j].data()[cell] - max).exp();
            weights[j * cells + cell] = e;
            total += e;
        }
        let out = fused.cell_mut(cell);
        for j in 0..n {
            let w = weights[j * cells + cell] / total;
            weights[j * cells + cell] = w;
            for (o, v) in out.iter_mut().zip(inputs[j].cell(cell)) {
                *o += w * v;
            }
        }
    }
    Ok((scores, weights, fused))
}

pub fn post_and_head(params: &ModelParams, overlay: Option<&Overlay>, fused: &FeatureGrid) -> Result<(FeatureGrid, FeatureGrid, DetectionGrid)> {
    let (z_post, hidden) = apply_block(params, overlay, BlockId::FusionPost, fused)?;
    let det = head_with(params, overlay, &hidden)?;
    Ok((z_post, hidden, det))
}

pub fn head_with(params: &ModelParams, overlay: Option<&Overlay>, hidden: &FeatureGrid) -> Result<DetectionGrid> {
    let (z, _) = apply_block(params, overlay, BlockId::Head, hidden)?;
    DetectionGrid::from_grid(z)
}

fn send(params: &ModelParams, transport: Transport<'_>, agent_id: u32, f: &FeatureGrid) -> Result<(SentTrace, FeatureGrid)> {
    match transport {
        Transport::Lossless => Ok((SentTrace::Raw, f.clone())),
        Transport::Compressed => {
            if !params.has_block(BlockId::Compress) {
                return Err(Error::invalid("compressed transport needs a model with a compressor"));
            }
            let (zc, _) = apply_block(params, None, BlockId::Compress, f)?;
            let (zd, out) = apply_block(params, None, BlockId::Decompress, &zc)?;
            Ok((SentTrace::Compressed { zc, zd }, out))
        }
        Transport::Codebook { codebook, n_r } => {
            let payload = assign(f, codebook, n_r)?;
            let recon = reconstruct(&payload, codebook)?;
            let out = recon.clone();
            Ok((SentTrace::Codebook { payload, recon }, out))
        }
        Transport::Frozen { codebook, messages } => {
            let m = messages
                .iter()
                .find(|m| m.agent_id == agent_id)
                .ok_or_else(|| Error::invalid(format!("no frozen message for agent {agent_id}")))?;
            if !m.anchor.same_shape(f) {
                return Err(Error::shape("frozen anchor does not match the feature"));
            }
            let recon = reconstruct(&m.payload, codebook)?;
            let mut out = recon.clone();
            for ((o, v), a) in out.data_mut().iter_mut().zip(f.data()).zip(m.anchor.data()) {
                *o += v - a;
            }
            Ok((SentTrace::Codebook { payload: m.payload.clone(), recon }, out))
        }
    }
}

/// Full cooperative forward pass in the ego frame.
pub fn run(
    params: &ModelParams,
    inputs: &[AgentInput],
    ego_id: u32,
    meters_per_cell: f64,
    overlay: Option<&Overlay>,
    transport: Transport<'_>,
) -> Result<ForwardTrace> {
    let ego = inputs
        .iter()
        .find(|a| a.id == ego_id)
        .ok_or_else(|| Error::invalid(format!("ego {ego_id} is not among the present agents")))?;
    let ego_pose = ego.pose;
    let mut order: Vec<&AgentInput> = inputs.iter().collect();
    order.sort_by_key(|a| a.id);
    if order.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::invalid("duplicate agent id"));
    }
    let mut agents = Vec::with_capacity(order.len());
    for a in order {
        let enc = encode_with(params, overlay, a.modality, &a.obs)?;
        let is_ego = a.id == ego_id;
        let (sent, received) = if is_ego {
            (SentTrace::Local, enc.feature.clone())
        } else {
            send(params, transport, a.id, &enc.feature)?
        };
        let (plan, warped) = if is_ego || a.pose == ego_pose {
            (None, received.clone())
        } else {
            let plan = WarpPlan::new(received.height(), received.width(), &a.pose, &ego_pose, meters_per_cell);
            let w = plan.apply(&received);
            (Some(plan), w)
        };
        agents.push(AgentTrace {
            id: a.id,
            modality: a.modality,
            is_ego,
            obs: a.obs.clone(),
            z0: enc.z0,
            a0: enc.a0,
            z1: enc.z1,
            feature: enc.feature,
            sent,
            received,
            plan,
            warped,
            score: FeatureGrid::zeros(0, 0, 1),
        });
    }
    let warped: Vec<&FeatureGrid> = agents.iter().map(|a| &a.warped).collect();
    let (scores, weights, fused) = fuse_with(params, overlay, &warped)?;
    for (a, s) in agents.iter_mut().zip(scores) {
        a.score = s;
    }
    let (z_post, hidden, det) = post_and_head(params, overlay, &fused)?;
    Ok(ForwardTrace {
        agents,
        weights,
        fused,
        z_post,
        hidden,
        det,
    })
}

/// Parameter gradients, one entry per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrad>,
}

impl ModelGrads {
    pub fn zeros_for(params: &ModelParams) -> Self {
        Self {
            layers: params.layers().iter().map(LayerGrad::zeros_for).collect(),
        }
    }

    pub fn scale(&mut self, f: f64) {
        for g in &mut self.layers {
            for v in g.weight.iter_mut().chain(g.bias.iter_mut()) {
                *v *= f;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weight.iter().chain(&g.bias).copied())
            .collect()
    }
}

/// Codebook-side terms of backpropagation through a codebook transport.
pub struct CodebookBackward<'a> {
    /// Weight of `Σ‖F − F̂‖²` over transmitted features.
    pub lambda_rec: f64,
    /// Receives `∂L/∂codes`, `n_L × dim`, when present.
    pub code_grad: Option<&'a mut Vec<f64>>,
    pub alpha: &'a [f64],
}

/// Backpropagates `d_det` (gradient w.r.t. the raw head output) through a full-precision trace.
/// Codebook transports use the straight-through rule for the encoder.
pub fn backward(params: &ModelParams, trace: &ForwardTrace, d_det: &FeatureGrid, grads: &mut ModelGrads, mut cb: Option<CodebookBackward<'_>>) -> Result<()> {
    if !d_det.same_shape(trace.det.as_grid()) {
        return Err(Error::shape("detection gradient shape"));
    }
    let mut d_hidden = params
        .layer(BlockId::Head)
        .backward(&trace.hidden, d_det, &mut grads.layers[BlockId::Head.index()], true)
        .expect("input gradient requested");
    relu_backward(&trace.z_post, &mut d_hidden);
    let d_fused = params
        .layer(BlockId::FusionPost)
        .backward(&trace.fused, &d_hidden, &mut grads.layers[BlockId::FusionPost.index()], true)
        .expect("input gradient requested");

    let n = trace.agents.len();
    let cells = trace.fused.cells();
    let score_layer = params.layer(BlockId::FusionScore);
    let mut d_scores: Vec<FeatureGrid> = (0..n).map(|_| FeatureGrid::zeros(trace.fused.height(), trace.fused.width(), 1)).collect();
    let mut d_warped: Vec<FeatureGrid> = (0..n).map(|_| FeatureGrid::zeros_like(&trace.fused)).collect();
    let mut dw = vec![0.0; n];
    for cell in 0..cells {
        let dm = d_fused.cell(cell);
        let mut mean = 0.0;
        for j in 0..n {
            let w = trace.weights[j * cells + cell];
            let x = trace.agents[j].warped.cell(cell);
            dw[j] = dm.iter().zip(x).map(|(a, b)| a * b).sum();
            mean += w * dw[j];
            for (d, g) in d_warped[j].cell_mut(cell).iter_mut().zip(dm) {
                *d += w * g;
            }
        }
        for j in 0..n {
            let w = trace.weights[j * cells + cell];
            d_scores[j].data_mut()[cell] = w * (dw[j] - mean);
        }
    }
    for (j, a) in trace.agents.iter().enumerate() {
        let dx = score_layer
            .backward(&a.warped, &d_scores[j], &mut grads.layers[BlockId::FusionScore.index()], true)
            .expect("input gradient requested");
        for (d, v) in d_warped[j].data_mut().iter_mut().zip(dx.data()) {
            *d += v;
        }
    }

    for (j, a) in trace.agents.iter().enumerate() {
        let d_received = match &a.plan {
            Some(plan) => plan.adjoint(&d_warped[j]),
            None => std::mem::replace(&mut d_warped[j], FeatureGrid::zeros(0, 0, 0)),
        };
        let mut d_feature = match &a.sent {
            SentTrace::Local | SentTrace::Raw => d_received,
            SentTrace::Compressed { zc, zd } => {
                let mut g = d_received;
                relu_backward(zd, &mut g);
                let dzc = params
                    .layer(BlockId::Decompress)
                    .backward(zc, &g, &mut grads.layers[BlockId::Decompress.index()], true)
                    .expect("input gradient requested");
                params
                    .layer(BlockId::Compress)
                    .backward(&a.feature, &dzc, &mut grads.layers[BlockId::Compress.index()], true)
                    .expect("input gradient requested")
            }
            SentTrace::Codebook { payload, recon } => {
                let mut g = d_received;
                if let Some(cb) = cb.as_mut() {
                    let dim = a.feature.channels();
                    for cell in 0..cells {
                        let f = a.feature.cell(cell);
                        let fh = recon.cell(cell);
                        let gc = g.cell_mut(cell);
                        let mut total = vec![0.0; dim];
                        for k in 0..dim {
                            let diff = 2.0 * cb.lambda_rec * (f[k] - fh[k]);
                            total[k] = gc[k] - diff;
                            gc[k] += diff;
                        }
                        if let Some(code_grad) = cb.code_grad.as_deref_mut() {
                            for (r, &idx) in payload.indices_at(cell).iter().enumerate() {
                                let dst = &mut code_grad[idx as usize * dim..(idx as usize + 1) * dim];
                                for (d, t) in dst.iter_mut().zip(&total) {
                                    *d += cb.alpha[r] * t;
                                }
                            }
                        }
                    }
                }
                g
            }
        };
        relu_backward(&a.z1, &mut d_feature);
        let enc1 = BlockId::Encoder { modality: a.modality, unit: 1 };
        let mut d_a0 = params
            .layer(enc1)
            .backward(&a.a0, &d_feature, &mut grads.layers[enc1.index()], true)
            .expect("input gradient requested");
        relu_backward(&a.z0, &mut d_a0);
        let enc0 = BlockId::Encoder { modality: a.modality, unit: 0 };
        params.layer(enc0).backward(&a.obs, &d_a0, &mut grads.layers[enc0.index()], false);
    }
    Ok(())
}
