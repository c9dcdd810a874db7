//! Toy cooperative-perception model: per-modality encoders, spatial warp into the
//! ego frame, softmax fusion, detection head, training and cell-level AP.

pub mod engine;
pub mod layers;
pub(crate) mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{FeatureGrid, RngStream};
use crate::scene::{observe, perturb_pose, Scenario};

pub use engine::{AgentInput, ForwardTrace, ModelGrads, Overlay, Transport};
pub use layers::{Layer, LayerKind};
pub use model::{BlockId, BlockSpec, BlockTag, ModelConfig, ModelParams, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub(crate) use model::{read_u16, read_vec};
pub(crate) use train::Momentum;
pub use train::{
    build_samples, detection_loss, eval_samples, fit_from, fit_fp, loss_and_grad, mean_loss, model_ap, Dataset, SampleRef, TrainConfig,
    TrainSample,
};

/// Per-cell detection output: channel 0 is the score logit, channels 1 and 2 the
/// offset from the cell centre to the object centre in cells.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionGrid {
    grid: FeatureGrid,
}

impl DetectionGrid {
    pub fn from_grid(grid: FeatureGrid) -> Result<Self> {
        if grid.channels() != 3 {
            return Err(Error::shape(format!("detection grid needs 3 channels, got {}", grid.channels())));
        }
        Ok(Self { grid })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            grid: FeatureGrid::zeros(height, width, 3),
        }
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn cells(&self) -> usize {
        self.grid.cells()
    }

    pub fn score(&self, cell: usize) -> f64 {
        self.grid.cell(cell)[0]
    }

    pub fn offset(&self, cell: usize) -> (f64, f64) {
        let c = self.grid.cell(cell);
        (c[1], c[2])
    }

    pub fn scores(&self) -> Vec<f64> {
        (0..self.cells()).map(|c| self.score(c)).collect()
    }

    pub fn as_grid(&self) -> &FeatureGrid {
        &self.grid
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseNoise {
    pub trans_m: f64,
    pub rot_rad: f64,
}

impl PoseNoise {
    pub const NONE: PoseNoise = PoseNoise { trans_m: 0.0, rot_rad: 0.0 };

    pub fn is_zero(&self) -> bool {
        self.trans_m == 0.0 && self.rot_rad == 0.0
    }
}

const OBS_STREAM: u64 = 0x0B5E;
const POSE_STREAM: u64 = 0x9053;

/// Observation noise stream of one agent at one frame.
pub fn observation_stream(root: &RngStream, frame_idx: usize, agent_id: u32) -> RngStream {
    root.derive(OBS_STREAM).derive(frame_idx as u64).derive(agent_id as u64)
}

/// Pose-error stream of one agent at one frame.
pub fn pose_stream(root: &RngStream, frame_idx: usize, agent_id: u32) -> RngStream {
    root.derive(POSE_STREAM).derive(frame_idx as u64).derive(agent_id as u64)
}

/// Observation of `agent_id` at `frame_idx` with the pose it would report. The ego
/// agent defines the reference frame and never receives pose error.
pub fn agent_input(scenario: &Scenario, agent_id: u32, frame_idx: usize, is_ego: bool, noise: PoseNoise, root: &RngStream) -> Result<AgentInput> {
    let agent = scenario.agent(agent_id)?;
    let obs = observe(scenario, agent_id, frame_idx, &mut observation_stream(root, frame_idx, agent_id))?;
    let pose = if is_ego || noise.is_zero() {
        agent.pose
    } else {
        perturb_pose(&agent.pose, noise.trans_m, noise.rot_rad, &mut pose_stream(root, frame_idx, agent_id))
    };
    Ok(AgentInput {
        id: agent_id,
        modality: agent.modality_tag,
        obs,
        pose,
    })
}

/// Synchronous inputs for every present agent at one frame.
pub fn frame_inputs(scenario: &Scenario, frame_idx: usize, ego_id: u32, present: &[u32], noise: PoseNoise, root: &RngStream) -> Result<Vec<AgentInput>> {
    if !present.contains(&ego_id) {
        return Err(Error::invalid(format!("ego {ego_id} must be present")));
    }
    present
        .iter()
        .map(|&id| agent_input(scenario, id, frame_idx, id == ego_id, noise, root))
        .collect()
}

pub fn encode(obs: &FeatureGrid, params: &ModelParams, modality: crate::scene::Modality) -> Result<FeatureGrid> {
    Ok(engine::encode_with(params, None, modality, obs)?.feature)
}

/// Softmax-weighted fusion of ego-frame features followed by the fusion convolution.
pub fn fuse(features: &[FeatureGrid], params: &ModelParams) -> Result<FeatureGrid> {
    let refs: Vec<&FeatureGrid> = features.iter().collect();
    let (_, _, fused) = engine::fuse_with(params, None, &refs)?;
    Ok(engine::apply_block(params, None, BlockId::FusionPost, &fused)?.1)
}

pub fn head(h: &FeatureGrid, params: &ModelParams) -> Result<DetectionGrid> {
    engine::head_with(params, None, h)
}

/// Full-precision cooperative detection for one frame.
pub fn forward(
    scenario: &Scenario,
    frame_idx: usize,
    ego_id: u32,
    params: &ModelParams,
    present: &[u32],
    noise: PoseNoise,
    rng: &RngStream,
) -> Result<DetectionGrid> {
    let inputs = frame_inputs(scenario, frame_idx, ego_id, present, noise, rng)?;
    Ok(engine::run(params, &inputs, ego_id, scenario.roi.meters_per_cell, None, Transport::Lossless)?.det)
}

/// Evenly spaced recall points `0, 0.01, …, 1`.
pub fn default_recall_points() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// Cell-level average precision: every cell is a binary decision ranked by its
/// score. With recall points, returns the mean interpolated precision at those
/// points; with an empty list, the all-point area under the PR curve. Zero when
/// there are no positive cells.
pub fn eval_ap(preds: &[DetectionGrid], labels: &[FeatureGrid], recall_points: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions vs {} labels", preds.len(), labels.len())));
    }
    let mut ranked = Vec::new();
    for (p, l) in preds.iter().zip(labels) {
        if l.cells() != p.cells() || l.channels() != 1 {
            return Err(Error::shape("label grid must be single-channel and match its prediction"));
        }
        for cell in 0..p.cells() {
            ranked.push((p.score(cell), l.data()[cell] > 0.5));
        }
    }
    ap_from_scores(ranked, recall_points)
}

/// AP over `(score, is_positive)` pairs; tied scores enter the curve together.
pub fn ap_from_scores(mut ranked: Vec<(f64, bool)>, recall_points: &[f64]) -> Result<f64> {
    if ranked.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::invalid("NaN detection score"));
    }
    let positives = ranked.iter().filter(|r| r.1).count();
    if positives == 0 {
        return Ok(0.0);
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < ranked.len() {
        let s = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == s {
            tp += ranked[i].1 as usize;
            seen += 1;
            i += 1;
        }
        curve.push((tp as f64 / positives as f64, tp as f64 / seen as f64));
    }
    if recall_points.is_empty() {
        let mut ap = 0.0;
        let mut prev = 0.0;
        for &(r, p) in &curve {
            ap += (r - prev) * p;
            prev = r;
        }
        return Ok(ap);
    }
    // Suffix maxima give the interpolated precision at each curve point.
    let mut best = vec![0.0; curve.len()];
    let mut m: f64 = 0.0;
    for k in (0..curve.len()).rev() {
        m = m.max(curve[k].1);
        best[k] = m;
    }
    let total: f64 = recall_points
        .iter()
        .map(|&r| {
            let k = curve.partition_point(|c| c.0 < r - 1e-12);
            if k < curve.len() {
                best[k]
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / recall_points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Pose2D;
    use crate::scene::{gen_scenario, Modality};

    fn small_config() -> ModelConfig {
        ModelConfig {
            channels: 4,
            hidden: 3,
            compress_ratio: None,
        }
    }

    fn random_grid(seed: u64, h: usize, w: usize, c: usize) -> FeatureGrid {
        let mut r = RngStream::new(seed);
        FeatureGrid::new(h, w, c, (0..h * w * c).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn zero_observation_gives_zero_feature() {
        let p = ModelParams::init(small_config(), 1).unwrap();
        let f = encode(&FeatureGrid::zeros(6, 6, 1), &p, Modality::Dense).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert_eq!(f.channels(), 4);
    }

    #[test]
    fn modalities_use_distinct_weights() {
        let p = ModelParams::init(small_config(), 2).unwrap();
        let obs = random_grid(3, 6, 6, 1);
        assert_ne!(encode(&obs, &p, Modality::Dense).unwrap(), encode(&obs, &p, Modality::Sparse).unwrap());
        assert!(matches!(encode(&random_grid(3, 6, 6, 2), &p, Modality::Dense), Err(Error::Shape(_))));
    }

    #[test]
    fn singleton_and_symmetric_fusion() {
        let p = ModelParams::init(small_config(), 4).unwrap();
        let f = relu_grid(random_grid(5, 5, 5, 4));
        let post = |g: &FeatureGrid| engine::apply_block(&p, None, BlockId::FusionPost, g).unwrap().1;
        assert_eq!(fuse(std::slice::from_ref(&f), &p).unwrap(), post(&f));
        let (_, _, m) = engine::fuse_with(&p, None, &[&f, &f]).unwrap();
        for (a, b) in m.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(fuse(&[], &p), Err(Error::Empty(_))));
    }

    fn relu_grid(mut g: FeatureGrid) -> FeatureGrid {
        layers::relu_in_place(&mut g);
        g
    }

    #[test]
    fn two_feature_fusion_matches_reference() {
        let p = ModelParams::init(small_config(), 6).unwrap();
        let a = relu_grid(random_grid(7, 4, 4, 4));
        let b = relu_grid(random_grid(8, 4, 4, 4));
        let (_, _, m) = engine::fuse_with(&p, None, &[&a, &b]).unwrap();
        let l = p.layer(BlockId::FusionScore);
        for cell in 0..16 {
            let sa: f64 = l.bias[0] + (0..4).map(|k| a.cell(cell)[k] * l.weight[k]).sum::<f64>();
            let sb: f64 = l.bias[0] + (0..4).map(|k| b.cell(cell)[k] * l.weight[k]).sum::<f64>();
            let wa = 1.0 / (1.0 + (sb - sa).exp());
            for k in 0..4 {
                let e = wa * a.cell(cell)[k] + (1.0 - wa) * b.cell(cell)[k];
                assert!((m.cell(cell)[k] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_zero_and_identity_like() {
        let mut p = ModelParams::zeros(small_config()).unwrap();
        let d = head(&random_grid(9, 3, 3, 4), &p).unwrap();
        assert!(d.as_grid().data().iter().all(|&v| v == 0.0));
        let l = p.layer_mut(BlockId::Head);
        l.weight[0] = 1.0; // channel 0 -> score
        l.weight[3 + 1] = 2.0; // channel 1 -> dx
        l.weight[6 + 2] = -1.0; // channel 2 -> dy
        let mut h = FeatureGrid::zeros(1, 1, 4);
        h.data_mut().copy_from_slice(&[0.5, 1.5, 2.0, 9.0]);
        let d = head(&h, &p).unwrap();
        assert_eq!(d.as_grid().data(), &[0.5, 3.0, -2.0]);
    }

    #[test]
    fn ego_only_forward_matches_single_agent_chain() {
        let s = gen_scenario(3, 3, 8, 2, 100.0).unwrap();
        let p = ModelParams::init(ModelConfig::default(), 3).unwrap();
        let root = RngStream::new(11);
        let det = forward(&s, 1, 0, &p, &[0], PoseNoise::NONE, &root).unwrap();
        let input = agent_input(&s, 0, 1, true, PoseNoise::NONE, &root).unwrap();
        let f = encode(&input.obs, &p, input.modality).unwrap();
        let h = fuse(&[f], &p).unwrap();
        assert_eq!(det, head(&h, &p).unwrap());
    }

    #[test]
    fn identical_colocated_agents_fuse_to_shared_feature() {
        let p = ModelParams::init(small_config(), 12).unwrap();
        let obs = random_grid(13, 8, 8, 1);
        let mk = |id| AgentInput {
            id,
            modality: Modality::Dense,
            obs: obs.clone(),
            pose: Pose2D::new(1.0, 2.0, 0.3),
        };
        let t = engine::run(&p, &[mk(0), mk(1)], 0, 0.5, None, Transport::Lossless).unwrap();
        let f = encode(&obs, &p, Modality::Dense).unwrap();
        for (a, b) in t.fused.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_agent_forward_is_composition_of_ops() {
        let s = gen_scenario(4, 2, 10, 1, 100.0).unwrap();
        let p = ModelParams::init(ModelConfig::default(), 5).unwrap();
        let root = RngStream::new(1);
        let noise = PoseNoise { trans_m: 0.2, rot_rad: 0.01 };
        let det = forward(&s, 0, 1, &p, &[0, 1], noise, &root).unwrap();
        let ego = agent_input(&s, 1, 0, true, noise, &root).unwrap();
        let other = agent_input(&s, 0, 0, false, noise, &root).unwrap();
        let fe = encode(&ego.obs, &p, ego.modality).unwrap();
        let fo = encode(&other.obs, &p, other.modality).unwrap();
        let fo = crate::numerics::bilinear_warp(&fo, &other.pose, &ego.pose, 0.5);
        let h = fuse(&[fo, fe], &p).unwrap();
        assert_eq!(det, head(&h, &p).unwrap());
    }

    #[test]
    fn ap_perfect_and_degenerate() {
        let mut g = FeatureGrid::zeros(2, 2, 3);
        let mut l = FeatureGrid::zeros(2, 2, 1);
        for (cell, pos) in [(0, true), (1, false), (2, true), (3, false)] {
            g.cell_mut(cell)[0] = if pos { f64::INFINITY } else { f64::NEG_INFINITY };
            l.data_mut()[cell] = pos as u8 as f64;
        }
        let d = DetectionGrid::from_grid(g).unwrap();
        assert_eq!(eval_ap(&[d.clone()], &[l], &default_recall_points()).unwrap(), 1.0);
        assert_eq!(eval_ap(&[d], &[FeatureGrid::zeros(2, 2, 1)], &[]).unwrap(), 0.0);
    }

    #[test]
    fn ap_of_random_scores_is_positive_rate() {
        let mut r = RngStream::new(21);
        let ranked: Vec<(f64, bool)> = (0..200_000).map(|i| (r.unit(), i % 2 == 0)).collect();
        let ap = ap_from_scores(ranked.clone(), &default_recall_points()).unwrap();
        assert!((ap - 0.5).abs() < 0.05, "ap {ap}");
        let all_point = ap_from_scores(ranked, &[]).unwrap();
        assert!((all_point - 0.5).abs() < 0.05, "ap {all_point}");
    }

    #[test]
    fn ap_invariant_to_monotone_transform() {
        let mut r = RngStream::new(22);
        let ranked: Vec<(f64, bool)> = (0..2000).map(|_| (r.normal(), r.bernoulli(0.2))).collect();
        let t: Vec<(f64, bool)> = ranked.iter().map(|&(s, y)| ((3.0 * s).exp() + 1.0, y)).collect();
        for pts in [default_recall_points(), vec![]] {
            assert_eq!(ap_from_scores(ranked.clone(), &pts).unwrap(), ap_from_scores(t.clone(), &pts).unwrap());
        }
    }
}
