//! Block-wise post-training calibration: calibration-set sampling, per-block
//! quantizer initialization, scale refinement, learned rounding, and the
//! fusion-stage alignment terms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kl_divergence, FeatureGrid, RngStream};
use crate::pipeline::engine::{self, apply_block, fuse_with, head_with, post_and_head};
use crate::pipeline::layers::RowBlock;
use crate::pipeline::model::{read_u16, read_u32, read_vec};
use crate::pipeline::{agent_input, AgentInput, BlockId, BlockTag, DetectionGrid, ModelParams, Overlay, PoseNoise, Transport};
use crate::quant::{
    adaround_optimize, fake_quant, fake_quant_in_place, init_maxmin, model_size_bytes, nearest_mask, rounded_weights,
    scale_multipliers, scale_search, AdaRoundConfig, BlockApply, Granularity, QuantParams,
};
use crate::scene::Scenario;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyTag {
    Sync,
    /// Remote agents contribute their previous frame.
    Stale1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibSample {
    pub scenario: usize,
    pub frame: usize,
    pub ego_id: u32,
    /// Sorted; always contains the ego.
    pub present: Vec<u32>,
    pub pose_noise: PoseNoise,
    /// Keys this sample's observation and pose-error streams.
    pub noise_key: u64,
    pub latency: LatencyTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibConfig {
    /// Share of all training frames used for calibration.
    pub fraction: f64,
    pub w_bits: u32,
    pub a_bits: u32,
    /// AdaRound optimization steps per block.
    pub steps: usize,
    pub adaround_lr: f64,
    pub adaround_reg: f64,
    pub adaround_batch_rows: usize,
    pub scale_alpha: f64,
    pub scale_beta: f64,
    pub scale_grid: usize,
    pub lambda_hetero: f64,
    pub lambda_spatial: f64,
    pub use_scale_search: bool,
    pub use_adaround: bool,
    /// Leave the fusion blocks at full precision.
    pub skip_fusion: bool,
    /// Rows sampled per block for the reconstruction objective.
    pub max_rows: usize,
    pub pose_noise: PoseNoise,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            fraction: 0.005,
            w_bits: 8,
            a_bits: 8,
            steps: 5000,
            adaround_lr: 0.01,
            adaround_reg: 0.01,
            adaround_batch_rows: 512,
            scale_alpha: 0.5,
            scale_beta: 1.2,
            scale_grid: 100,
            lambda_hetero: 1.0,
            lambda_spatial: 0.1,
            use_scale_search: true,
            use_adaround: true,
            skip_fusion: false,
            max_rows: 4096,
            pose_noise: PoseNoise::NONE,
            seed: 0,
        }
    }
}

impl CalibConfig {
    /// Plain max-min quantization with every refinement disabled.
    pub fn maxmin(w_bits: u32, a_bits: u32) -> Self {
        Self {
            w_bits,
            a_bits,
            use_scale_search: false,
            use_adaround: false,
            lambda_hetero: 0.0,
            lambda_spatial: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::invalid(format!("calibration fraction {} outside (0, 1]", self.fraction)));
        }
        if self.steps == 0 || self.scale_grid == 0 || self.max_rows == 0 || self.adaround_batch_rows == 0 {
            return Err(Error::invalid("calibration counts must be at least 1"));
        }
        if !(self.lambda_hetero >= 0.0 && self.lambda_spatial >= 0.0 && self.adaround_reg >= 0.0) {
            return Err(Error::invalid("calibration weights must be non-negative"));
        }
        if !(self.scale_alpha > 0.0 && self.scale_alpha <= self.scale_beta) {
            return Err(Error::invalid("scale search needs 0 < alpha <= beta"));
        }
        for b in [self.w_bits, self.a_bits] {
            if b == 0 || b > 32 {
                return Err(Error::invalid(format!("unsupported bit width {b}")));
            }
        }
        Ok(())
    }

    fn adaround(&self) -> AdaRoundConfig {
        AdaRoundConfig {
            iters: self.steps,
            lr: self.adaround_lr,
            lambda_reg: self.adaround_reg,
            batch_rows: self.adaround_batch_rows,
            ..Default::default()
        }
    }
}

/// Samples `⌈fraction·total_frames⌉` distinct frames. Each gets a random ego,
/// every other agent joins independently with probability 1/2, and a latency
/// pattern is drawn uniformly.
pub fn build_calib_set(scenarios: &[Scenario], cfg: &CalibConfig) -> Result<Vec<CalibSample>> {
    if scenarios.is_empty() {
        return Err(Error::Empty("calibration scenarios"));
    }
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(Error::invalid(format!("calibration fraction {} outside (0, 1]", cfg.fraction)));
    }
    let mut frames: Vec<(usize, usize)> = scenarios
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.agents.is_empty())
        .flat_map(|(si, s)| (0..s.frames.len()).map(move |f| (si, f)))
        .collect();
    let total = frames.len();
    let n = (cfg.fraction * total as f64 - 1e-9).ceil().max(0.0) as usize;
    if n == 0 {
        return Err(Error::invalid(format!("fraction {} of {total} frames selects no sample", cfg.fraction)));
    }
    let mut rng = RngStream::new(cfg.seed).derive(0xCA15);
    rng.shuffle(&mut frames);
    let mut out = Vec::with_capacity(n);
    for (k, &(si, frame)) in frames.iter().take(n).enumerate() {
        let s = &scenarios[si];
        let ego_id = s.agents[rng.below(s.agents.len())].id;
        let mut present: Vec<u32> = s.agents.iter().map(|a| a.id).filter(|&id| id == ego_id || rng.bernoulli(0.5)).collect();
        present.sort_unstable();
        let latency = if rng.bernoulli(0.5) { LatencyTag::Stale1 } else { LatencyTag::Sync };
        out.push(CalibSample {
            scenario: si,
            frame,
            ego_id,
            present,
            pose_noise: cfg.pose_noise,
            noise_key: k as u64,
            latency,
        });
    }
    Ok(out)
}

/// Materialized agent inputs for one calibration sample.
#[derive(Clone, Debug)]
pub struct CalibInput {
    pub inputs: Vec<AgentInput>,
    pub ego_id: u32,
    pub meters_per_cell: f64,
}

pub fn prepare_inputs(scenarios: &[Scenario], samples: &[CalibSample], seed: u64) -> Result<Vec<CalibInput>> {
    let root = RngStream::new(seed).derive(0xCA1B);
    samples
        .iter()
        .map(|cs| {
            let s = scenarios
                .get(cs.scenario)
                .ok_or_else(|| Error::invalid(format!("scenario {} out of range", cs.scenario)))?;
            if !cs.present.contains(&cs.ego_id) {
                return Err(Error::invalid("calibration sample without its ego"));
            }
            let data = root.derive(cs.noise_key);
            let remote_frame = match cs.latency {
                LatencyTag::Sync => cs.frame,
                LatencyTag::Stale1 => cs.frame.saturating_sub(1),
            };
            let inputs = cs
                .present
                .iter()
                .map(|&id| {
                    let is_ego = id == cs.ego_id;
                    let f = if is_ego { cs.frame } else { remote_frame };
                    agent_input(s, id, f, is_ego, cs.pose_noise, &data)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CalibInput {
                inputs,
                ego_id: cs.ego_id,
                meters_per_cell: s.roi.meters_per_cell,
            })
        })
        .collect()
}

/// `D_KL(softmax(h_fp) ‖ softmax(h_int))` over the whole fused feature.
pub fn hetero_loss(h_fp: &FeatureGrid, h_int: &FeatureGrid) -> Result<f64> {
    kl_divergence(h_fp, h_int)
}

/// Sum of squared differences over score and offset channels of every cell.
pub fn spatial_loss(b_fp: &DetectionGrid, b_int: &DetectionGrid) -> Result<f64> {
    let (a, b) = (b_fp.as_grid(), b_int.as_grid());
    if !a.same_shape(b) {
        return Err(Error::shape("spatial_loss: detection grids differ in shape"));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Quantizers and rounding of one calibrated block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockQuant {
    pub block: BlockId,
    pub weight_qp: QuantParams,
    /// Per-weight rounding direction, `true` = up.
    pub rounding: Vec<bool>,
    /// Quantizer applied to the block input.
    pub act_qp: QuantParams,
}

/// Full-precision weights plus the calibrated quantization of each block.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    params: ModelParams,
    w_bits: u32,
    a_bits: u32,
    blocks: Vec<BlockQuant>,
}

impl QuantizedModel {
    pub fn new(params: ModelParams, w_bits: u32, a_bits: u32) -> Self {
        Self {
            params,
            w_bits,
            a_bits,
            blocks: Vec::new(),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn w_bits(&self) -> u32 {
        self.w_bits
    }

    pub fn a_bits(&self) -> u32 {
        self.a_bits
    }

    pub fn blocks(&self) -> &[BlockQuant] {
        &self.blocks
    }

    pub fn block(&self, id: BlockId) -> Option<&BlockQuant> {
        self.blocks.iter().find(|b| b.block == id)
    }

    /// Adds or replaces a block's quantization.
    pub fn set_block(&mut self, bq: BlockQuant) -> Result<()> {
        let layer = self.params.layer(bq.block);
        if bq.rounding.len() != layer.weight.len() {
            return Err(Error::shape(format!("rounding mask for {} has {} entries", bq.block, bq.rounding.len())));
        }
        let mut bq = bq;
        for qp in [&mut bq.weight_qp, &mut bq.act_qp] {
            for s in &mut qp.scale {
                *s = *s as f32 as f64;
            }
        }
        self.blocks.retain(|b| b.block != bq.block);
        self.blocks.push(bq);
        self.blocks.sort_by_key(|b| b.block.index());
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        BlockId::CALIBRATED.iter().all(|&id| self.block(id).is_some())
    }

    /// Dequantized weights of a calibrated block.
    pub fn quantized_weights(&self, id: BlockId) -> Option<Vec<f64>> {
        let b = self.block(id)?;
        Some(effective_weights(&self.params.layer(id).weight, &b.weight_qp, &b.rounding))
    }

    /// Fake-quantization overlay for every calibrated block.
    pub fn overlay(&self) -> Overlay {
        let mut o = Overlay::new();
        for b in &self.blocks {
            o.set_weight(b.block, effective_weights(&self.params.layer(b.block).weight, &b.weight_qp, &b.rounding));
            o.set_act(b.block, b.act_qp.clone());
        }
        o
    }

    /// Weights at `w_bits`; biases are counted at the same width.
    pub fn size_bytes(&self) -> usize {
        model_size_bytes(&self.params, self.w_bits)
    }

    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.params.write_container(&mut w, meta, Some(&self.encode_section()))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(QuantizedModel, serde_json::Value)> {
        let (params, meta, quant) = ModelParams::read_container(BufReader::new(File::open(path)?))?;
        let quant = quant.ok_or_else(|| Error::Format("model file has no quantization section".into()))?;
        Ok((Self::decode_section(params, &quant)?, meta))
    }

    /// Layout: w_bits u8, a_bits u8, block count u16, then per block the
    /// name, weight quantizer, input quantizer and bit-packed rounding mask.
    fn encode_section(&self) -> Vec<u8> {
        let mut out = vec![self.w_bits as u8, self.a_bits as u8];
        out.extend_from_slice(&(self.blocks.len() as u16).to_le_bytes());
        for b in &self.blocks {
            let name = b.block.name();
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
            write_qp(&mut out, &b.weight_qp);
            write_qp(&mut out, &b.act_qp);
            out.extend_from_slice(&(b.rounding.len() as u32).to_le_bytes());
            let mut packed = vec![0u8; b.rounding.len().div_ceil(8)];
            for (i, _) in b.rounding.iter().enumerate().filter(|(_, &up)| up) {
                packed[i / 8] |= 1 << (i % 8);
            }
            out.extend_from_slice(&packed);
        }
        out
    }

    fn decode_section(params: ModelParams, bytes: &[u8]) -> Result<QuantizedModel> {
        let mut r = bytes;
        let bits = read_vec(&mut r, 2)?;
        let mut qm = QuantizedModel::new(params, bits[0] as u32, bits[1] as u32);
        let n = read_u16(&mut r)? as usize;
        for _ in 0..n {
            let len = read_vec(&mut r, 1)?[0] as usize;
            let name = String::from_utf8(read_vec(&mut r, len)?).map_err(|_| Error::Format("block name".into()))?;
            let block = BlockId::parse(&name).ok_or_else(|| Error::Format(format!("unknown block {name}")))?;
            let weight_qp = read_qp(&mut r)?;
            let act_qp = read_qp(&mut r)?;
            let count = read_u32(&mut r)? as usize;
            let packed = read_vec(&mut r, count.div_ceil(8))?;
            let rounding = (0..count).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
            qm.set_block(BlockQuant {
                block,
                weight_qp,
                rounding,
                act_qp,
            })?;
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in quantization section", r.len())));
        }
        Ok(qm)
    }
}

fn write_qp(out: &mut Vec<u8>, qp: &QuantParams) {
    match qp.granularity {
        Granularity::PerTensor => {
            out.push(0);
            out.extend_from_slice(&0u32.to_le_bytes());
        }
        Granularity::PerChannel { channels } => {
            out.push(1);
            out.extend_from_slice(&(channels as u32).to_le_bytes());
        }
    }
    out.push(qp.bits as u8);
    for s in &qp.scale {
        out.extend_from_slice(&(*s as f32).to_le_bytes());
    }
    for z in &qp.zero_point {
        out.extend_from_slice(&(*z as u32).to_le_bytes());
    }
}

fn read_qp(r: &mut &[u8]) -> Result<QuantParams> {
    let flag = read_vec(r, 1)?[0];
    let channels = read_u32(r)? as usize;
    let granularity = match flag {
        0 => Granularity::PerTensor,
        1 => Granularity::PerChannel { channels },
        f => return Err(Error::Format(format!("unknown granularity flag {f}"))),
    };
    let bits = read_vec(r, 1)?[0] as u32;
    let groups = granularity.groups();
    let scale = (0..groups)
        .map(|_| read_vec(r, 4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect::<Result<Vec<_>>>()?;
    let zero_point = (0..groups)
        .map(|_| read_u32(r).map(i64::from))
        .collect::<Result<Vec<_>>>()?;
    QuantParams::new(scale, zero_point, bits, granularity).map_err(|e| Error::Format(format!("quantizer: {e}")))
}

fn effective_weights(w: &[f64], qp: &QuantParams, rounding: &[bool]) -> Vec<f64> {
    if qp.is_passthrough() {
        w.to_vec()
    } else {
        rounded_weights(w, qp, rounding)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upstream {
    Fp,
    Quantized,
}

/// Block inputs from the requested pathway and full-precision reference outputs.
/// `sample_of[k]` is the calibration sample grid `k` came from.
#[derive(Clone, Debug)]
pub struct BlockIo {
    pub inputs: Vec<FeatureGrid>,
    pub fp_outputs: Vec<FeatureGrid>,
    pub sample_of: Vec<usize>,
}

/// Full-precision tensors downstream of the fusion blocks, per sample.
struct FpRefs {
    fused: FeatureGrid,
    hidden: FeatureGrid,
    det: DetectionGrid,
}

fn run_ideal(params: &ModelParams, overlay: Option<&Overlay>, c: &CalibInput) -> Result<engine::ForwardTrace> {
    engine::run(params, &c.inputs, c.ego_id, c.meters_per_cell, overlay, Transport::Lossless)
}

/// `(inputs, outputs)` of `block` in one trace.
fn block_tensors(trace: &engine::ForwardTrace, block: BlockId) -> Vec<(FeatureGrid, FeatureGrid)> {
    match block {
        BlockId::Encoder { modality, unit } => trace
            .agents
            .iter()
            .filter(|a| a.modality == modality)
            .map(|a| if unit == 0 { (a.obs.clone(), a.a0.clone()) } else { (a.a0.clone(), a.feature.clone()) })
            .collect(),
        BlockId::FusionScore => trace.agents.iter().map(|a| (a.warped.clone(), a.score.clone())).collect(),
        BlockId::FusionPost => vec![(trace.fused.clone(), trace.hidden.clone())],
        BlockId::Head => vec![(trace.hidden.clone(), trace.det.as_grid().clone())],
        BlockId::Compress | BlockId::Decompress => Vec::new(),
    }
}

fn collect(params: &ModelParams, prefix: Option<&Overlay>, data: &[CalibInput], block: BlockId) -> Result<(BlockIo, Vec<FpRefs>)> {
    let mut io = BlockIo {
        inputs: Vec::new(),
        fp_outputs: Vec::new(),
        sample_of: Vec::new(),
    };
    let mut refs = Vec::with_capacity(data.len());
    for (k, c) in data.iter().enumerate() {
        let fp = run_ideal(params, None, c)?;
        let fp_pairs = block_tensors(&fp, block);
        let inputs: Vec<FeatureGrid> = match prefix {
            Some(o) => block_tensors(&run_ideal(params, Some(o), c)?, block).into_iter().map(|p| p.0).collect(),
            None => fp_pairs.iter().map(|p| p.0.clone()).collect(),
        };
        for (x, (_, y)) in inputs.into_iter().zip(fp_pairs) {
            io.inputs.push(x);
            io.fp_outputs.push(y);
            io.sample_of.push(k);
        }
        refs.push(FpRefs {
            fused: fp.fused,
            hidden: fp.hidden,
            det: fp.det,
        });
    }
    Ok((io, refs))
}

/// Inputs for `block` from the requested upstream and full-precision outputs.
/// A quantized upstream requires every earlier calibrated block to be present in `qm`.
pub fn collect_block_io(qm: &QuantizedModel, data: &[CalibInput], block: BlockId, upstream: Upstream) -> Result<BlockIo> {
    let prefix = match upstream {
        Upstream::Fp => None,
        Upstream::Quantized => {
            if let Some(b) = upstream_of(block).into_iter().find(|&b| qm.block(b).is_none()) {
                return Err(Error::Uncalibrated(b.to_string()));
            }
            Some(qm.overlay())
        }
    };
    Ok(collect(qm.params(), prefix.as_ref(), data, block)?.0)
}

/// Calibrated blocks whose outputs feed `block`.
fn upstream_of(block: BlockId) -> Vec<BlockId> {
    let enc = |unit_max: u8| {
        crate::scene::Modality::ALL
            .iter()
            .flat_map(move |&m| (0..unit_max).map(move |u| BlockId::Encoder { modality: m, unit: u }))
            .collect::<Vec<_>>()
    };
    match block {
        BlockId::Encoder { modality, unit } => (0..unit).map(|u| BlockId::Encoder { modality, unit: u }).collect(),
        BlockId::FusionScore => enc(2),
        BlockId::FusionPost => [enc(2), vec![BlockId::FusionScore]].concat(),
        BlockId::Head => [enc(2), vec![BlockId::FusionScore, BlockId::FusionPost]].concat(),
        BlockId::Compress | BlockId::Decompress => Vec::new(),
    }
}

/// Per-block diagnostics from [`calibrate_with_report`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: String,
    /// Block objective with max-min quantizers and nearest rounding.
    pub initial_objective: f64,
    pub final_objective: f64,
    pub unconverged: usize,
    pub rows: usize,
}

/// Reconstruction problem of one block on sampled rows, plus the fusion
/// alignment context when the block is fusion-tagged.
struct BlockProblem<'a> {
    id: BlockId,
    params: &'a ModelParams,
    rows: Vec<f64>,
    targets: Vec<f64>,
    act_min: f64,
    fusion: Option<FusionCtx<'a>>,
    lambda_hetero: f64,
    lambda_spatial: f64,
}

struct FusionCtx<'a> {
    /// Quantized-pathway inputs of the block, grouped by sample.
    inputs: Vec<Vec<&'a FeatureGrid>>,
    refs: &'a [FpRefs],
}

impl BlockProblem<'_> {
    fn row_block(&self) -> RowBlock<'_> {
        RowBlock {
            layer: self.params.layer(self.id),
            relu: self.id.has_relu(),
        }
    }

    fn quantized_rows(&self, act: &QuantParams) -> Vec<f64> {
        let mut x = self.rows.clone();
        fake_quant_in_place(&mut x, act);
        x
    }

    fn row_error(&self, w: &[f64], xq: &[f64]) -> f64 {
        let rb = self.row_block();
        let n = xq.len() / rb.in_dim();
        let mut out = vec![0.0; n * rb.out_dim()];
        rb.apply(w, xq, &mut out);
        out.iter().zip(&self.targets).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n.max(1) as f64
    }

    fn objective(&self, w: &[f64], act: &QuantParams) -> Result<f64> {
        let mut obj = self.row_error(w, &self.quantized_rows(act));
        if let Some(ctx) = &self.fusion {
            if self.lambda_hetero > 0.0 || self.lambda_spatial > 0.0 {
                let mut o = Overlay::new();
                o.set_weight(self.id, w.to_vec());
                o.set_act(self.id, act.clone());
                let (mut kl, mut sp) = (0.0, 0.0);
                for (inputs, r) in ctx.inputs.iter().zip(ctx.refs) {
                    let (feat_fp, feat_q, det) = match self.id {
                        BlockId::FusionScore => {
                            let (_, _, fused) = fuse_with(self.params, Some(&o), inputs)?;
                            let det = if self.lambda_spatial > 0.0 { Some(post_and_head(self.params, None, &fused)?.2) } else { None };
                            (&r.fused, fused, det)
                        }
                        _ => {
                            let (_, hidden) = apply_block(self.params, Some(&o), self.id, inputs[0])?;
                            let det = if self.lambda_spatial > 0.0 { Some(head_with(self.params, None, &hidden)?) } else { None };
                            (&r.hidden, hidden, det)
                        }
                    };
                    if self.lambda_hetero > 0.0 {
                        kl += hetero_loss(feat_fp, &feat_q)?;
                    }
                    if let Some(d) = det {
                        sp += spatial_loss(&r.det, &d)? / d.cells() as f64;
                    }
                }
                let n = ctx.refs.len().max(1) as f64;
                obj += self.lambda_hetero * kl / n + self.lambda_spatial * sp / n;
            }
        }
        if !obj.is_finite() {
            return Err(Error::NonFiniteObjective { block: self.id.to_string() });
        }
        Ok(obj)
    }

    /// Activation quantizer with scale `s`, zero point from the observed minimum.
    fn act_with_scale(&self, base: &QuantParams, s: f64) -> QuantParams {
        base.with_scales(&[s], &[self.act_min])
    }
}

/// Lowest-objective candidate; earlier candidates win ties.
fn pick<T: Clone>(cands: &[T], mut f: impl FnMut(&T) -> Result<f64>) -> Result<(T, f64)> {
    let mut best: Option<(T, f64)> = None;
    for c in cands {
        let v = f(c)?;
        if best.as_ref().map_or(true, |b| v < b.1) {
            best = Some((c.clone(), v));
        }
    }
    best.ok_or(Error::Empty("candidate list"))
}

pub fn calibrate(fp: &ModelParams, scenarios: &[Scenario], samples: &[CalibSample], cfg: &CalibConfig) -> Result<QuantizedModel> {
    Ok(calibrate_with_report(fp, scenarios, samples, cfg)?.0)
}

/// Calibrates each block in topological order against full-precision outputs,
/// feeding it inputs from the already-quantized prefix.
pub fn calibrate_with_report(fp: &ModelParams, scenarios: &[Scenario], samples: &[CalibSample], cfg: &CalibConfig) -> Result<(QuantizedModel, Vec<BlockReport>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("calibration samples"));
    }
    let data = prepare_inputs(scenarios, samples, cfg.seed)?;
    calibrate_inputs(fp, &data, cfg)
}

/// [`calibrate_with_report`] on already materialized inputs.
pub fn calibrate_inputs(fp: &ModelParams, data: &[CalibInput], cfg: &CalibConfig) -> Result<(QuantizedModel, Vec<BlockReport>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("calibration samples"));
    }
    let mut qm = QuantizedModel::new(fp.clone(), cfg.w_bits, cfg.a_bits);
    let mut reports = Vec::new();
    let root = RngStream::new(cfg.seed).derive(0xB10C);
    for &id in BlockId::CALIBRATED.iter() {
        if cfg.skip_fusion && id.tag() == BlockTag::Fusion {
            continue;
        }
        let prefix = if qm.blocks().is_empty() { None } else { Some(qm.overlay()) };
        let (io, refs) = collect(fp, prefix.as_ref(), data, id)?;
        if io.inputs.is_empty() {
            return Err(Error::invalid(format!("no calibration inputs reach block {id}")));
        }
        let (bq, report) = calibrate_block(fp, id, &io, &refs, cfg, &mut root.derive(id.index() as u64))?;
        debug!(
            "calibrate {id}: objective {:.4e} -> {:.4e} on {} rows",
            report.initial_objective, report.final_objective, report.rows
        );
        qm.set_block(bq)?;
        reports.push(report);
    }
    info!("calibrated {} blocks at W{}/A{}", reports.len(), cfg.w_bits, cfg.a_bits);
    Ok((qm, reports))
}

fn calibrate_block(params: &ModelParams, id: BlockId, io: &BlockIo, refs: &[FpRefs], cfg: &CalibConfig, rng: &mut RngStream) -> Result<(BlockQuant, BlockReport)> {
    let layer = params.layer(id);
    let (fan_in, cout) = (layer.fan_in(), layer.cout);

    // Activation range over every quantized-pathway input value.
    let mut act_values = Vec::with_capacity(io.inputs.iter().map(|g| g.data().len()).sum());
    for g in &io.inputs {
        act_values.extend_from_slice(g.data());
    }
    let act0 = init_maxmin(&act_values, cfg.a_bits, Granularity::PerTensor)?;
    let act_min = act_values.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    drop(act_values);

    let total: usize = io.inputs.iter().map(|g| g.cells()).sum();
    let n_rows = total.min(cfg.max_rows);
    let mut picks: Vec<usize> = (0..total).collect();
    if n_rows < total {
        rng.shuffle(&mut picks);
        picks.truncate(n_rows);
        picks.sort_unstable();
    }
    let mut rows = vec![0.0; n_rows * fan_in];
    let mut targets = vec![0.0; n_rows * cout];
    let (mut g, mut base) = (0, 0);
    for (r, &p) in picks.iter().enumerate() {
        while p >= base + io.inputs[g].cells() {
            base += io.inputs[g].cells();
            g += 1;
        }
        let cell = p - base;
        layer.patch(&io.inputs[g], cell, &mut rows[r * fan_in..(r + 1) * fan_in]);
        targets[r * cout..(r + 1) * cout].copy_from_slice(io.fp_outputs[g].cell(cell));
    }

    let fusion = (id.tag() == BlockTag::Fusion).then(|| {
        let mut inputs: Vec<Vec<&FeatureGrid>> = vec![Vec::new(); refs.len()];
        for (x, &k) in io.inputs.iter().zip(&io.sample_of) {
            inputs[k].push(x);
        }
        FusionCtx { inputs, refs }
    });
    let prob = BlockProblem {
        id,
        params,
        rows,
        targets,
        act_min,
        fusion,
        lambda_hetero: cfg.lambda_hetero,
        lambda_spatial: cfg.lambda_spatial,
    };

    let w = &layer.weight;
    let mut w_qp = init_maxmin(w, cfg.w_bits, Granularity::PerChannel { channels: cout })?;
    let mut act = act0;
    let mut rounding = nearest_mask(w, &w_qp);
    let initial_objective = prob.objective(&effective_weights(w, &w_qp, &rounding), &act)?;
    let mut current = initial_objective;
    let mults = scale_multipliers(cfg.scale_alpha, cfg.scale_beta, cfg.scale_grid);

    if cfg.use_scale_search && !w_qp.is_passthrough() {
        // Weight scales: the per-channel tensor-error optimum and uniform
        // multiples of the max-min scales, judged on the block objective.
        let mins = crate::quant::group_minima(w, w_qp.granularity);
        let mut cands = vec![w_qp.clone(), scale_search(w, &w_qp, cfg.scale_alpha, cfg.scale_beta, cfg.scale_grid)?];
        for &m in &mults {
            let scales: Vec<f64> = w_qp.scale.iter().map(|s| s * m).collect();
            cands.push(w_qp.with_scales(&scales, &mins));
        }
        let (best, v) = pick(&cands, |qp| prob.objective(&fake_quant(w, qp), &act))?;
        w_qp = best;
        current = v;
        rounding = nearest_mask(w, &w_qp);
    }
    if cfg.use_scale_search && !act.is_passthrough() {
        let wq = effective_weights(w, &w_qp, &rounding);
        let (a, v) = search_act(&prob, &act, &mults, &wq)?;
        act = a;
        current = v;
    }

    let mut unconverged = 0;
    if cfg.use_adaround && !w_qp.is_passthrough() {
        let xq = prob.quantized_rows(&act);
        let rb = prob.row_block();
        let out = adaround_optimize(w, &w_qp, &xq, &prob.targets, &rb, &cfg.adaround(), rng)
            .map_err(|_| Error::NonFiniteObjective { block: id.to_string() })?;
        unconverged = out.unconverged;
        let mask = out.vars.mask();
        let v = prob.objective(&rounded_weights(w, &w_qp, &mask), &act)?;
        if v < current {
            rounding = mask;
            current = v;
        }
    }
    if cfg.use_scale_search && !act.is_passthrough() {
        let wq = effective_weights(w, &w_qp, &rounding);
        let (a, v) = search_act(&prob, &act, &mults, &wq)?;
        act = a;
        current = v;
    }

    let report = BlockReport {
        block: id.to_string(),
        initial_objective,
        final_objective: current,
        unconverged,
        rows: n_rows,
    };
    Ok((
        BlockQuant {
            block: id,
            weight_qp: w_qp,
            rounding,
            act_qp: act,
        },
        report,
    ))
}

/// Activation scale candidates `m_t·s` plus the current scale itself.
fn search_act(prob: &BlockProblem<'_>, act: &QuantParams, mults: &[f64], wq: &[f64]) -> Result<(QuantParams, f64)> {
    let s0 = act.scale[0];
    let mut cands = vec![act.clone()];
    cands.extend(mults.iter().map(|m| prob.act_with_scale(act, s0 * m)));
    pick(&cands, |a| prob.objective(wq, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ModelConfig;
    use crate::scene::{gen_scenario, gen_scenario_with, Roi, ScenarioParams};

    fn tiny() -> (Vec<Scenario>, ModelParams) {
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
        let s: Vec<Scenario> = (0..3).map(|i| gen_scenario_with(&p, 60 + i, 3, 3, 3, 100.0).unwrap()).collect();
        let m = ModelParams::init(
            ModelConfig {
                channels: 4,
                hidden: 3,
                compress_ratio: None,
            },
            1,
        )
        .unwrap();
        (s, m)
    }

    fn quick(w: u32, a: u32) -> CalibConfig {
        CalibConfig {
            fraction: 1.0,
            w_bits: w,
            a_bits: a,
            steps: 60,
            scale_grid: 5,
            max_rows: 256,
            adaround_batch_rows: 64,
            ..Default::default()
        }
    }

    #[test]
    fn calib_set_size_is_ceiling() {
        let s: Vec<Scenario> = (0..20).map(|i| gen_scenario(i, 1, 1, 100, 100.0).unwrap()).collect();
        let cfg = CalibConfig {
            fraction: 0.005,
            ..Default::default()
        };
        assert_eq!(build_calib_set(&s, &cfg).unwrap().len(), 10);
    }

    #[test]
    fn single_agent_full_fraction() {
        let s = vec![gen_scenario(3, 1, 2, 4, 100.0).unwrap()];
        let cfg = CalibConfig {
            fraction: 1.0,
            ..Default::default()
        };
        let set = build_calib_set(&s, &cfg).unwrap();
        assert_eq!(set.len(), 4);
        let mut frames: Vec<usize> = set.iter().map(|c| c.frame).collect();
        frames.sort_unstable();
        assert_eq!(frames, vec![0, 1, 2, 3]);
        assert!(set.iter().all(|c| c.present == vec![0]));
    }

    #[test]
    fn empty_scenarios_rejected() {
        assert!(matches!(build_calib_set(&[], &CalibConfig::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn alignment_losses_basic_values() {
        let mut r = RngStream::new(4);
        let h = FeatureGrid::new(3, 3, 2, (0..18).map(|_| r.normal()).collect()).unwrap();
        assert_eq!(hetero_loss(&h, &h).unwrap(), 0.0);
        let shifted = FeatureGrid::new(3, 3, 2, h.data().iter().map(|v| v + 2.5).collect()).unwrap();
        assert!(hetero_loss(&h, &shifted).unwrap().abs() < 1e-12);
        let a = DetectionGrid::zeros(2, 2);
        let mut g = a.as_grid().clone();
        g.set(1, 0, 0, 1.0);
        let b = DetectionGrid::from_grid(g).unwrap();
        assert_eq!(spatial_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(spatial_loss(&a, &b).unwrap(), 1.0);
        assert!(spatial_loss(&a, &DetectionGrid::zeros(3, 2)).is_err());
    }

    #[test]
    fn full_precision_bits_reproduce_fp_forward() {
        let (s, m) = tiny();
        let set = build_calib_set(&s, &quick(32, 32)).unwrap();
        let qm = calibrate(&m, &s, &set, &quick(32, 32)).unwrap();
        assert!(qm.is_complete());
        let data = prepare_inputs(&s, &set, 0).unwrap();
        let o = qm.overlay();
        for c in &data {
            assert_eq!(run_ideal(&m, Some(&o), c).unwrap().det, run_ideal(&m, None, c).unwrap().det);
        }
    }

    #[test]
    fn selection_never_regresses_and_is_deterministic() {
        let (s, m) = tiny();
        let cfg = quick(4, 8);
        let set = build_calib_set(&s, &cfg).unwrap();
        let (a, rep) = calibrate_with_report(&m, &s, &set, &cfg).unwrap();
        for r in &rep {
            assert!(r.final_objective <= r.initial_objective, "{r:?}");
        }
        let (b, _) = calibrate_with_report(&m, &s, &set, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quantized_upstream_requires_calibrated_prefix() {
        let (s, m) = tiny();
        let set = build_calib_set(&s, &quick(8, 8)).unwrap();
        let data = prepare_inputs(&s, &set, 0).unwrap();
        let qm = QuantizedModel::new(m, 8, 8);
        assert!(matches!(collect_block_io(&qm, &data, BlockId::FusionPost, Upstream::Quantized), Err(Error::Uncalibrated(_))));
        let first = BlockId::CALIBRATED[0];
        let q = collect_block_io(&qm, &data, first, Upstream::Quantized).unwrap();
        let f = collect_block_io(&qm, &data, first, Upstream::Fp).unwrap();
        assert_eq!(q.inputs, f.inputs);
    }

    #[test]
    fn container_round_trip() {
        for (w, a) in [(4, 8), (32, 32)] {
            container_round_trip_at(w, a);
        }
    }

    fn container_round_trip_at(w_bits: u32, a_bits: u32) {
        let (s, m) = tiny();
        let cfg = quick(w_bits, a_bits);
        let set = build_calib_set(&s, &cfg).unwrap();
        let qm = calibrate(&m, &s, &set, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.qv2x");
        qm.save(&path, &serde_json::json!({"k": 1})).unwrap();
        let (back, meta) = QuantizedModel::load(&path).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(back.blocks(), qm.blocks());
        assert_eq!(back.overlay().weight(BlockId::Head), qm.overlay().weight(BlockId::Head));
    }
}
