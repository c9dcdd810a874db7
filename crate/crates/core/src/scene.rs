//! Synthetic timed driving scenes, per-agent noisy occupancy observations and
//! ground-truth grids.
//!
//! World coordinates put the region of interest at `[0, width_m] × [0, height_m]`.
//! Every agent observes an ROI-sized grid centred on itself and rotated by its yaw.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{normalize_angle, FeatureGrid, Pose2D, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Dense,
    Sparse,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Dense, Modality::Sparse];

    pub fn index(self) -> usize {
        match self {
            Modality::Dense => 0,
            Modality::Sparse => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Modality> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Dense => "dense",
            Modality::Sparse => "sparse",
        }
    }
}

/// Axis-aligned square object moving at constant velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub x: f64,
    pub y: f64,
    pub half_extent: f64,
    pub velocity_x: f64,
    pub velocity_y: f64,
}

impl SceneObject {
    pub fn contains(&self, wx: f64, wy: f64) -> bool {
        (wx - self.x).abs() <= self.half_extent && (wy - self.y).abs() <= self.half_extent
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub id: u32,
    pub pose: Pose2D,
    pub fov_radius: f64,
    pub sensor_noise_sigma: f64,
    pub modality_tag: Modality,
    pub dropout_prob: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub width_m: f64,
    pub height_m: f64,
    pub meters_per_cell: f64,
}

impl Default for Roi {
    fn default() -> Self {
        Self {
            width_m: 48.0,
            height_m: 48.0,
            meters_per_cell: 0.5,
        }
    }
}

impl Roi {
    pub fn grid_height(&self) -> usize {
        (self.height_m / self.meters_per_cell).round() as usize
    }

    pub fn grid_width(&self) -> usize {
        (self.width_m / self.meters_per_cell).round() as usize
    }

    pub fn center_pose(&self) -> Pose2D {
        Pose2D::new(self.width_m / 2.0, self.height_m / 2.0, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub timestamp_ms: f64,
    pub objects: Vec<SceneObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub roi: Roi,
    pub agents: Vec<AgentConfig>,
    pub frames: Vec<Frame>,
}

/// Per-modality sensor characteristics used by [`gen_scenario`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorProfile {
    pub noise_sigma: f64,
    pub dropout_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams {
    pub roi: Roi,
    pub fov_radius: f64,
    pub dense: SensorProfile,
    pub sparse: SensorProfile,
    pub half_extent_range: (f64, f64),
    pub speed_range: (f64, f64),
    /// Agents are placed within this distance of the ROI centre.
    pub agent_spread_m: f64,
    pub min_agent_separation_m: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            roi: Roi::default(),
            fov_radius: 16.0,
            dense: SensorProfile {
                noise_sigma: 0.05,
                dropout_prob: 0.05,
            },
            sparse: SensorProfile {
                noise_sigma: 0.15,
                dropout_prob: 0.3,
            },
            half_extent_range: (1.0, 2.0),
            speed_range: (2.0, 8.0),
            agent_spread_m: 12.0,
            min_agent_separation_m: 6.0,
        }
    }
}

impl Scenario {
    /// Builds a scenario by propagating frame-0 objects at constant velocity.
    pub fn from_initial(
        seed: u64,
        roi: Roi,
        agents: Vec<AgentConfig>,
        initial: Vec<SceneObject>,
        n_frames: usize,
        frame_dt_ms: f64,
    ) -> Result<Self> {
        if n_frames == 0 {
            return Err(Error::invalid("n_frames must be at least 1"));
        }
        if !(frame_dt_ms > 0.0) {
            return Err(Error::invalid("frame_dt_ms must be positive"));
        }
        let frames = (0..n_frames)
            .map(|k| {
                let t_ms = k as f64 * frame_dt_ms;
                let dt = t_ms / 1000.0;
                Frame {
                    timestamp_ms: t_ms,
                    objects: initial
                        .iter()
                        .map(|o| SceneObject {
                            x: o.x + o.velocity_x * dt,
                            y: o.y + o.velocity_y * dt,
                            ..*o
                        })
                        .collect(),
                }
            })
            .collect();
        Ok(Self {
            seed,
            roi,
            agents,
            frames,
        })
    }

    pub fn agent(&self, id: u32) -> Result<&AgentConfig> {
        self.agents
            .iter()
            .find(|a| a.id == id)
            .ok_or_else(|| Error::invalid(format!("no agent with id {id}")))
    }

    pub fn frame(&self, idx: usize) -> Result<&Frame> {
        self.frames
            .get(idx)
            .ok_or_else(|| Error::invalid(format!("frame {idx} out of range ({} frames)", self.frames.len())))
    }

    pub fn agent_ids(&self) -> Vec<u32> {
        self.agents.iter().map(|a| a.id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid("scenario has no frames"));
        }
        if self
            .frames
            .windows(2)
            .any(|w| !(w[1].timestamp_ms > w[0].timestamp_ms))
        {
            return Err(Error::invalid("timestamps must be strictly increasing"));
        }
        for a in &self.agents {
            if !(a.fov_radius > 0.0) || !(0.0..=1.0).contains(&a.dropout_prob) {
                return Err(Error::invalid(format!("agent {} has invalid sensor settings", a.id)));
            }
        }
        for o in &self.frames[0].objects {
            if !(o.half_extent > 0.0)
                || o.x < 0.0
                || o.y < 0.0
                || o.x > self.roi.width_m
                || o.y > self.roi.height_m
            {
                return Err(Error::invalid("frame-0 object outside ROI or degenerate"));
            }
        }
        Ok(())
    }
}

/// Generates a deterministic scenario on the default 48 m × 48 m ROI.
pub fn gen_scenario(seed: u64, n_agents: usize, n_objects: usize, n_frames: usize, frame_dt_ms: f64) -> Result<Scenario> {
    gen_scenario_with(&ScenarioParams::default(), seed, n_agents, n_objects, n_frames, frame_dt_ms)
}

pub fn gen_scenario_with(
    p: &ScenarioParams,
    seed: u64,
    n_agents: usize,
    n_objects: usize,
    n_frames: usize,
    frame_dt_ms: f64,
) -> Result<Scenario> {
    if n_agents == 0 {
        return Err(Error::invalid("n_agents must be at least 1"));
    }
    let root = RngStream::new(seed);
    let mut rng = root.derive(1);
    let (cx, cy) = (p.roi.width_m / 2.0, p.roi.height_m / 2.0);

    let mut agents: Vec<AgentConfig> = Vec::with_capacity(n_agents);
    let mut attempts = 0;
    while agents.len() < n_agents {
        attempts += 1;
        let x = cx + rng.uniform(-p.agent_spread_m, p.agent_spread_m);
        let y = cy + rng.uniform(-p.agent_spread_m, p.agent_spread_m);
        let yaw = rng.uniform(-PI, PI);
        let separated = agents
            .iter()
            .all(|a| (a.pose.x - x).hypot(a.pose.y - y) >= p.min_agent_separation_m);
        if !separated && attempts < 10_000 {
            continue;
        }
        let id = agents.len() as u32;
        let modality = if id % 2 == 0 { Modality::Dense } else { Modality::Sparse };
        let profile = match modality {
            Modality::Dense => p.dense,
            Modality::Sparse => p.sparse,
        };
        agents.push(AgentConfig {
            id,
            pose: Pose2D::new(x, y, yaw),
            fov_radius: p.fov_radius,
            sensor_noise_sigma: profile.noise_sigma,
            modality_tag: modality,
            dropout_prob: profile.dropout_prob,
        });
    }

    let mut rng = root.derive(2);
    let objects = (0..n_objects)
        .map(|_| {
            let he = rng.uniform(p.half_extent_range.0, p.half_extent_range.1);
            let x = rng.uniform(he, p.roi.width_m - he);
            let y = rng.uniform(he, p.roi.height_m - he);
            let speed = rng.uniform(p.speed_range.0, p.speed_range.1);
            let heading = rng.uniform(-PI, PI);
            SceneObject {
                x,
                y,
                half_extent: he,
                velocity_x: speed * heading.cos(),
                velocity_y: speed * heading.sin(),
            }
        })
        .collect();
    Scenario::from_initial(seed, p.roi, agents, objects, n_frames, frame_dt_ms)
}

/// Local coordinates (metres) of a cell centre in a grid centred on its agent.
#[inline]
pub fn cell_center(row: usize, col: usize, height: usize, width: usize, mpc: f64) -> (f64, f64) {
    (
        (col as f64 - (width as f64 - 1.0) / 2.0) * mpc,
        (row as f64 - (height as f64 - 1.0) / 2.0) * mpc,
    )
}

/// Binary footprint of `objects` on a grid centred at `pose`.
pub fn rasterize(objects: &[SceneObject], pose: &Pose2D, height: usize, width: usize, mpc: f64) -> FeatureGrid {
    let mut g = FeatureGrid::zeros(height, width, 1);
    for row in 0..height {
        for col in 0..width {
            let (lx, ly) = cell_center(row, col, height, width, mpc);
            let (wx, wy) = pose.to_world(lx, ly);
            if objects.iter().any(|o| o.contains(wx, wy)) {
                g.set(row, col, 0, 1.0);
            }
        }
    }
    g
}

/// Noisy occupancy observation of one agent at one frame, in the agent's frame.
pub fn observe(scenario: &Scenario, agent_id: u32, frame_idx: usize, rng: &mut RngStream) -> Result<FeatureGrid> {
    let agent = scenario.agent(agent_id)?;
    let frame = scenario.frame(frame_idx)?;
    let (h, w, mpc) = (
        scenario.roi.grid_height(),
        scenario.roi.grid_width(),
        scenario.roi.meters_per_cell,
    );
    let mut g = FeatureGrid::zeros(h, w, 1);
    let r2 = agent.fov_radius * agent.fov_radius;
    for row in 0..h {
        for col in 0..w {
            let (lx, ly) = cell_center(row, col, h, w, mpc);
            if lx * lx + ly * ly > r2 {
                continue;
            }
            let (wx, wy) = agent.pose.to_world(lx, ly);
            let occupied = frame.objects.iter().any(|o| o.contains(wx, wy));
            let dropped = rng.unit() < agent.dropout_prob;
            let noise = rng.normal();
            let base = if occupied && !dropped { 1.0 } else { 0.0 };
            g.set(row, col, 0, base + agent.sensor_noise_sigma * noise);
        }
    }
    Ok(g)
}

/// Single-channel occupancy ground truth in the ROI frame.
pub fn label_grid(scenario: &Scenario, frame_idx: usize) -> Result<FeatureGrid> {
    let frame = scenario.frame(frame_idx)?;
    let roi = &scenario.roi;
    Ok(rasterize(
        &frame.objects,
        &roi.center_pose(),
        roi.grid_height(),
        roi.grid_width(),
        roi.meters_per_cell,
    ))
}

/// Dense detection targets in the frame of `pose`.
#[derive(Clone, Debug)]
pub struct Targets {
    /// 1 inside any object footprint.
    pub occupancy: FeatureGrid,
    /// Per cell, offset (in cells, local axes) from the cell centre to the
    /// nearest covering object's centre; zero on negative cells.
    pub offsets: FeatureGrid,
}

pub fn targets_at(scenario: &Scenario, frame_idx: usize, pose: &Pose2D) -> Result<Targets> {
    let frame = scenario.frame(frame_idx)?;
    let (h, w, mpc) = (
        scenario.roi.grid_height(),
        scenario.roi.grid_width(),
        scenario.roi.meters_per_cell,
    );
    let mut occupancy = FeatureGrid::zeros(h, w, 1);
    let mut offsets = FeatureGrid::zeros(h, w, 2);
    let local_centers: Vec<(f64, f64)> = frame.objects.iter().map(|o| pose.to_local(o.x, o.y)).collect();
    for row in 0..h {
        for col in 0..w {
            let (lx, ly) = cell_center(row, col, h, w, mpc);
            let (wx, wy) = pose.to_world(lx, ly);
            let mut best: Option<(f64, (f64, f64))> = None;
            for (o, &(ox, oy)) in frame.objects.iter().zip(&local_centers) {
                if o.contains(wx, wy) {
                    let d = (ox - lx).hypot(oy - ly);
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, ((ox - lx) / mpc, (oy - ly) / mpc)));
                    }
                }
            }
            if let Some((_, (dx, dy))) = best {
                occupancy.set(row, col, 0, 1.0);
                offsets.set(row, col, 0, dx);
                offsets.set(row, col, 1, dy);
            }
        }
    }
    Ok(Targets { occupancy, offsets })
}

/// Adds independent Gaussian noise to x, y and yaw.
pub fn perturb_pose(pose: &Pose2D, sigma_trans_m: f64, sigma_rot_rad: f64, rng: &mut RngStream) -> Pose2D {
    let nx = rng.normal();
    let ny = rng.normal();
    let nyaw = rng.normal();
    Pose2D {
        x: pose.x + sigma_trans_m * nx,
        y: pose.y + sigma_trans_m * ny,
        yaw: normalize_angle(pose.yaw + sigma_rot_rad * nyaw),
    }
}
