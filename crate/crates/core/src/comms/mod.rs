//! Message sizes, the channel latency model and a frame-by-frame system simulator
//! in which remote features arrive late.

pub mod wire;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::codebook::{assign, Codebook};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::pipeline::engine::{self, encode_with, FrozenMessage};
use crate::pipeline::{agent_input, default_recall_points, eval_ap, BlockId, DetectionGrid, ModelParams, Overlay, PoseNoise, Transport};
use crate::scene::{targets_at, Scenario};

pub use wire::{bits_per_index, pack_indices, payload_bytes, unpack_indices, WireError, WireHeader, WireMessage, HEADER_BYTES};

/// `h·w·c·bits/8`, rounded up to whole bytes.
pub fn raw_feature_bytes(h: usize, w: usize, c: usize, bits_per_value: usize) -> usize {
    (h * w * c * bits_per_value).div_ceil(8)
}

/// Size of a feature after a `C → C/ratio` channel bottleneck.
pub fn compressed_feature_bytes(h: usize, w: usize, c: usize, ratio: usize, bits_per_value: usize) -> usize {
    raw_feature_bytes(h, w, c.div_ceil(ratio.max(1)), bits_per_value)
}

/// Payload bytes plus the fixed header.
pub fn codebook_message_bytes(h: usize, w: usize, n_l: usize, n_r: usize) -> usize {
    payload_bytes(h, w, n_r, n_l) + HEADER_BYTES
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelModel {
    pub rate_mbps: f64,
    pub jitter_lo_ms: f64,
    pub jitter_hi_ms: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            rate_mbps: 27.0,
            jitter_lo_ms: 0.0,
            jitter_hi_ms: 200.0,
        }
    }
}

impl ChannelModel {
    /// Instant delivery.
    pub const IDEAL: ChannelModel = ChannelModel {
        rate_mbps: f64::INFINITY,
        jitter_lo_ms: 0.0,
        jitter_hi_ms: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_mbps > 0.0) {
            return Err(Error::invalid(format!("channel rate must be positive, got {}", self.rate_mbps)));
        }
        if !(self.jitter_lo_ms >= 0.0 && self.jitter_lo_ms <= self.jitter_hi_ms) {
            return Err(Error::invalid(format!("jitter range ({}, {})", self.jitter_lo_ms, self.jitter_hi_ms)));
        }
        Ok(())
    }
}

/// `size·8 / rate + U(lo, hi)` in milliseconds.
pub fn sample_comm_latency(size_bytes: usize, channel: &ChannelModel, rng: &mut RngStream) -> f64 {
    let transfer = size_bytes as f64 * 8.0 / (channel.rate_mbps * 1000.0);
    let jitter = if channel.jitter_hi_ms > channel.jitter_lo_ms {
        rng.uniform(channel.jitter_lo_ms, channel.jitter_hi_ms)
    } else {
        channel.jitter_lo_ms
    };
    transfer + jitter
}

/// Model-side latency of one link: encoding at the sender plus fusion at the receiver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyProfile {
    pub t_local_ms: f64,
    pub t_fus_ms: f64,
}

impl LatencyProfile {
    pub const ZERO: LatencyProfile = LatencyProfile { t_local_ms: 0.0, t_fus_ms: 0.0 };

    /// 59.5 ms of full-precision model time, split evenly.
    pub fn fp32() -> Self {
        Self {
            t_local_ms: 29.75,
            t_fus_ms: 29.75,
        }
    }

    /// 27.1 ms of INT8 model time, split evenly.
    pub fn int8() -> Self {
        Self {
            t_local_ms: 13.55,
            t_fus_ms: 13.55,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_local_ms >= 0.0 && self.t_fus_ms >= 0.0) {
            return Err(Error::invalid("latency components must be non-negative"));
        }
        Ok(())
    }
}

/// Latency of one message on one link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkLatency {
    pub frame: usize,
    pub link: u32,
    pub t_local: f64,
    pub t_comm: f64,
    pub t_fus: f64,
    pub t_sys: f64,
}

impl LinkLatency {
    pub fn new(frame: usize, link: u32, t_local: f64, t_comm: f64, t_fus: f64) -> Self {
        Self {
            frame,
            link,
            t_local,
            t_comm,
            t_fus,
            t_sys: t_local + t_comm + t_fus,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyBreakdown {
    pub rows: Vec<LinkLatency>,
}

impl LatencyBreakdown {
    pub fn mean_t_sys(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.t_sys).sum::<f64>() / self.rows.len() as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "frame,link,t_local,t_comm,t_fus,t_sys")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{}", r.frame, r.link, r.t_local, r.t_comm, r.t_fus, r.t_sys)?;
        }
        Ok(())
    }
}

/// Model used by every agent: parameters and an optional quantization overlay.
#[derive(Clone, Copy, Debug)]
pub struct SystemModel<'a> {
    pub params: &'a ModelParams,
    pub overlay: Option<&'a Overlay>,
}

#[derive(Clone, Copy, Debug)]
pub enum SystemTransport<'a> {
    RawFp32,
    /// The model's channel bottleneck; requires a model trained with one.
    CompressedFp32,
    Codebook { codebook: &'a Codebook, n_r: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub channel: ChannelModel,
    pub latency: LatencyProfile,
    pub pose_noise: PoseNoise,
    /// Constant delay added to every link.
    pub extra_latency_ms: f64,
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            channel: ChannelModel::default(),
            latency: LatencyProfile::fp32(),
            pose_noise: PoseNoise::NONE,
            extra_latency_ms: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SystemRun {
    pub detections: Vec<DetectionGrid>,
    pub latency: LatencyBreakdown,
    /// Remote contributions actually fused, summed over frames.
    pub delivered: usize,
}

/// Per-link stream; sensing noise reuses the dataset streams so a lossless,
/// zero-latency run reproduces `pipeline::forward` exactly.
fn latency_stream(seed: u64, frame: usize, link: u32) -> RngStream {
    RngStream::new(seed).derive(0x1A7E).derive(frame as u64).derive(link as u64)
}

/// Runs every frame of `scenario` from `ego_id`'s point of view. A remote agent
/// contributes its newest frame `j` with `ts_j + T_sys ≤ ts_t`; frames with no
/// such message are fused without that agent.
pub fn simulate_system(scenario: &Scenario, ego_id: u32, model: SystemModel<'_>, transport: SystemTransport<'_>, cfg: &SystemConfig, data_root: &RngStream) -> Result<SystemRun> {
    cfg.channel.validate()?;
    cfg.latency.validate()?;
    if !(cfg.extra_latency_ms >= 0.0) {
        return Err(Error::invalid("extra latency must be non-negative"));
    }
    scenario.agent(ego_id)?;
    let (h, w) = (scenario.roi.grid_height(), scenario.roi.grid_width());
    let c = model.params.config().channels;
    let size = match transport {
        SystemTransport::RawFp32 => raw_feature_bytes(h, w, c, 32),
        SystemTransport::CompressedFp32 => {
            let ratio = model
                .params
                .config()
                .compress_ratio
                .filter(|_| model.params.has_block(BlockId::Compress))
                .ok_or_else(|| Error::invalid("compressed transport needs a model with a compressor"))?;
            compressed_feature_bytes(h, w, c, ratio, 32)
        }
        SystemTransport::Codebook { codebook, n_r } => {
            if codebook.dim() != c {
                return Err(Error::shape("codebook dimension differs from the feature channels"));
            }
            codebook_message_bytes(h, w, codebook.n_l(), n_r)
        }
    };

    let remotes: Vec<u32> = scenario.agent_ids().into_iter().filter(|&id| id != ego_id).collect();
    let n_frames = scenario.frames.len();
    let mut latency = LatencyBreakdown::default();
    // arrival[k][j]: time at which agent k's frame-j message is usable.
    let mut arrival = vec![vec![0.0; n_frames]; remotes.len()];
    for j in 0..n_frames {
        let ts = scenario.frames[j].timestamp_ms as f64;
        for (k, &id) in remotes.iter().enumerate() {
            let t_comm = sample_comm_latency(size, &cfg.channel, &mut latency_stream(cfg.seed, j, id)) + cfg.extra_latency_ms;
            let row = LinkLatency::new(j, id, cfg.latency.t_local_ms, t_comm, cfg.latency.t_fus_ms);
            arrival[k][j] = ts + row.t_sys;
            latency.rows.push(row);
        }
    }

    let mut detections = Vec::with_capacity(n_frames);
    let mut delivered = 0;
    for t in 0..n_frames {
        let now = scenario.frames[t].timestamp_ms as f64;
        let mut inputs = vec![agent_input(scenario, ego_id, t, true, cfg.pose_noise, data_root)?];
        let mut sent_at = Vec::new();
        for (k, &id) in remotes.iter().enumerate() {
            if let Some(j) = (0..=t).rev().find(|&j| arrival[k][j] <= now) {
                inputs.push(agent_input(scenario, id, j, false, cfg.pose_noise, data_root)?);
                sent_at.push(scenario.frames[j].timestamp_ms.max(0.0) as u64);
                delivered += 1;
            }
        }
        let mpc = scenario.roi.meters_per_cell;
        let trace = match transport {
            SystemTransport::RawFp32 => engine::run(model.params, &inputs, ego_id, mpc, model.overlay, Transport::Lossless)?,
            SystemTransport::CompressedFp32 => engine::run(model.params, &inputs, ego_id, mpc, model.overlay, Transport::Compressed)?,
            SystemTransport::Codebook { codebook, n_r } => {
                let mut messages = Vec::new();
                for (a, &stamp) in inputs[1..].iter().zip(&sent_at) {
                    let feature = encode_with(model.params, model.overlay, a.modality, &a.obs)?.feature;
                    let payload = assign(&feature, codebook, n_r)?;
                    let pose = [a.pose.x as f32, a.pose.y as f32, a.pose.yaw as f32];
                    let bytes = WireMessage::encode(a.id, stamp, pose, &payload, codebook)?.to_bytes();
                    let received = WireMessage::from_bytes(&bytes)?.decode(codebook)?;
                    messages.push(FrozenMessage {
                        agent_id: a.id,
                        payload: received,
                        anchor: feature,
                    });
                }
                let t = Transport::Frozen { codebook, messages: &messages };
                engine::run(model.params, &inputs, ego_id, mpc, model.overlay, t)?
            }
        };
        detections.push(trace.det);
    }
    Ok(SystemRun {
        detections,
        latency,
        delivered,
    })
}

#[derive(Clone, Debug)]
pub struct SystemEval {
    pub ap: f64,
    pub mean_t_sys: f64,
    pub delivered: usize,
    pub latency: LatencyBreakdown,
}

/// Simulates every scenario from a seeded random ego and scores all frames
/// against that ego's labels. Sensing noise follows `pipeline::eval_samples`.
pub fn evaluate_system(scenarios: &[Scenario], model: SystemModel<'_>, transport: SystemTransport<'_>, cfg: &SystemConfig, seed: u64) -> Result<SystemEval> {
    let data_root = RngStream::new(seed).derive(0xE7A1);
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut latency = LatencyBreakdown::default();
    let mut delivered = 0;
    for (i, s) in scenarios.iter().enumerate() {
        let ids = s.agent_ids();
        let ego = ids[RngStream::new(seed).derive(0xE60).derive(i as u64).below(ids.len())];
        let run = simulate_system(s, ego, model, transport, cfg, &data_root.derive(s.seed))?;
        let pose = s.agent(ego)?.pose;
        for t in 0..s.frames.len() {
            labels.push(targets_at(s, t, &pose)?.occupancy);
        }
        preds.extend(run.detections);
        latency.rows.extend(run.latency.rows);
        delivered += run.delivered;
    }
    Ok(SystemEval {
        ap: eval_ap(&preds, &labels, &default_recall_points())?,
        mean_t_sys: latency.mean_t_sys(),
        delivered,
        latency,
    })
}
