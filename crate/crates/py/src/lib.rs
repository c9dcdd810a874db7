//! Python bindings for `qv2x-core`.
//!
//! Configs cross the boundary as JSON strings with the same keys as the Rust
//! structs; omitted keys take their defaults.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use qv2x_core::calib::{build_calib_set, calibrate as core_calibrate, CalibConfig};
use qv2x_core::codebook::{assign, reconstruct, MessagePayload};
use qv2x_core::comms::{self, wire::WireMessage, ChannelModel};
use qv2x_core::pipeline::{eval_samples, fit_fp, model_ap, ModelConfig, PoseNoise, TrainConfig, Transport};
use qv2x_core::quant::{self, Granularity};
use qv2x_core::scene;

fn py_err(e: qv2x_core::Error) -> PyErr {
    match e {
        qv2x_core::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("bad config: {e}"))),
    }
}

fn meta() -> serde_json::Value {
    serde_json::json!({ "tool": "qv2x-py", "version": env!("CARGO_PKG_VERSION") })
}

fn noise(sigma: f64) -> PoseNoise {
    PoseNoise { trans_m: sigma, rot_rad: 0.0 }
}

fn collect(scenarios: &[PyRef<'_, Scenario>]) -> Vec<scene::Scenario> {
    scenarios.iter().map(|s| s.inner.clone()).collect()
}

#[pyclass(module = "qv2x")]
pub struct FeatureGrid {
    inner: qv2x_core::FeatureGrid,
}

#[pymethods]
impl FeatureGrid {
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        let inner = qv2x_core::FeatureGrid::new(height, width, channels, data).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        let mut out = Vec::new();
        self.inner.write_to(&mut out).map_err(py_err)?;
        Ok(out)
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        let inner = qv2x_core::FeatureGrid::read_from(bytes).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        let (h, w, c) = self.inner.shape();
        format!("FeatureGrid({h}x{w}x{c})")
    }
}

#[pyclass(module = "qv2x")]
pub struct Scenario {
    inner: scene::Scenario,
}

#[pymethods]
impl Scenario {
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn n_frames(&self) -> usize {
        self.inner.frames.len()
    }

    fn agent_ids(&self) -> Vec<u32> {
        self.inner.agent_ids()
    }

    fn label_grid(&self, frame: usize) -> PyResult<FeatureGrid> {
        let inner = scene::label_grid(&self.inner, frame).map_err(py_err)?;
        Ok(FeatureGrid { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        let inner: scene::Scenario = serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }
}

#[pyfunction]
#[pyo3(signature = (seed, n_agents=3, n_objects=8, n_frames=10, frame_dt_ms=100.0))]
fn gen_scenario(seed: u64, n_agents: usize, n_objects: usize, n_frames: usize, frame_dt_ms: f64) -> PyResult<Scenario> {
    let inner = scene::gen_scenario(seed, n_agents, n_objects, n_frames, frame_dt_ms).map_err(py_err)?;
    Ok(Scenario { inner })
}

#[pyclass(module = "qv2x")]
pub struct QuantParams {
    inner: quant::QuantParams,
}

#[pymethods]
impl QuantParams {
    #[getter]
    fn scale(&self) -> Vec<f64> {
        self.inner.scale.clone()
    }

    #[getter]
    fn zero_point(&self) -> Vec<i64> {
        self.inner.zero_point.clone()
    }

    #[getter]
    fn bits(&self) -> u32 {
        self.inner.bits
    }

    fn fake_quant(&self, values: Vec<f64>) -> Vec<f64> {
        quant::fake_quant(&values, &self.inner)
    }

    fn quantize(&self, values: Vec<f64>) -> Vec<i64> {
        quant::quantize(&values, &self.inner)
    }

    fn dequantize(&self, codes: Vec<i64>) -> Vec<f64> {
        quant::dequantize(&codes, &self.inner)
    }

    /// Grid search of scale multipliers in `[alpha, beta]` minimizing the fake-quant error.
    #[pyo3(signature = (values, alpha=0.5, beta=1.2, t=100))]
    fn search(&self, values: Vec<f64>, alpha: f64, beta: f64, t: usize) -> PyResult<QuantParams> {
        let inner = quant::scale_search(&values, &self.inner, alpha, beta, t).map_err(py_err)?;
        Ok(QuantParams { inner })
    }
}

/// Max-min quantizer; `channels` selects per-channel groups over a channels-minor layout.
#[pyfunction]
#[pyo3(signature = (values, bits, channels=None))]
fn init_maxmin(values: Vec<f64>, bits: u32, channels: Option<usize>) -> PyResult<QuantParams> {
    let g = match channels {
        Some(channels) => Granularity::PerChannel { channels },
        None => Granularity::PerTensor,
    };
    let inner = quant::init_maxmin(&values, bits, g).map_err(py_err)?;
    Ok(QuantParams { inner })
}

#[pyclass(module = "qv2x")]
pub struct Model {
    inner: qv2x_core::pipeline::ModelParams,
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (seed, config_json=None))]
    fn init(seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = parse_json(config_json)?;
        let inner = qv2x_core::pipeline::ModelParams::init(cfg, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = qv2x_core::pipeline::ModelParams::load(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, &meta()).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn size_bytes(&self, bits: u32) -> usize {
        quant::model_size_bytes(&self.inner, bits)
    }

    /// Cell-AP over every agent of every frame of `scenarios`.
    #[pyo3(signature = (scenarios, seed, pose_noise=0.0))]
    fn ap(&self, scenarios: Vec<PyRef<'_, Scenario>>, seed: u64, pose_noise: f64) -> PyResult<f64> {
        let samples = eval_samples(&collect(&scenarios), seed, noise(pose_noise)).map_err(py_err)?;
        model_ap(&self.inner, None, &samples, Transport::Lossless).map_err(py_err)
    }
}

/// Full-precision training; `config_json` holds `TrainConfig` keys.
#[pyfunction]
#[pyo3(signature = (scenarios, config_json=None))]
fn train_fp(py: Python<'_>, scenarios: Vec<PyRef<'_, Scenario>>, config_json: Option<&str>) -> PyResult<Model> {
    let cfg: TrainConfig = parse_json(config_json)?;
    let scenarios = collect(&scenarios);
    let inner = py.detach(|| fit_fp(&scenarios, &cfg)).map_err(py_err)?;
    Ok(Model { inner })
}

#[pyclass(module = "qv2x")]
pub struct QuantizedModel {
    inner: qv2x_core::calib::QuantizedModel,
}

#[pymethods]
impl QuantizedModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = qv2x_core::calib::QuantizedModel::load(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, &meta()).map_err(py_err)
    }

    #[getter]
    fn w_bits(&self) -> u32 {
        self.inner.w_bits()
    }

    #[getter]
    fn a_bits(&self) -> u32 {
        self.inner.a_bits()
    }

    #[getter]
    fn size_bytes(&self) -> usize {
        self.inner.size_bytes()
    }

    fn block_names(&self) -> Vec<String> {
        self.inner.blocks().iter().map(|b| b.block.name()).collect()
    }

    #[pyo3(signature = (scenarios, seed, pose_noise=0.0))]
    fn ap(&self, scenarios: Vec<PyRef<'_, Scenario>>, seed: u64, pose_noise: f64) -> PyResult<f64> {
        let samples = eval_samples(&collect(&scenarios), seed, noise(pose_noise)).map_err(py_err)?;
        let overlay = self.inner.overlay();
        model_ap(self.inner.params(), Some(&overlay), &samples, Transport::Lossless).map_err(py_err)
    }
}

/// Post-training quantization of `model`; `config_json` holds `CalibConfig` keys.
#[pyfunction]
#[pyo3(signature = (model, scenarios, config_json=None))]
fn calibrate(py: Python<'_>, model: &Model, scenarios: Vec<PyRef<'_, Scenario>>, config_json: Option<&str>) -> PyResult<QuantizedModel> {
    let cfg: CalibConfig = parse_json(config_json)?;
    let scenarios = collect(&scenarios);
    let inner = py
        .detach(|| {
            let set = build_calib_set(&scenarios, &cfg)?;
            core_calibrate(&model.inner, &scenarios, &set, &cfg)
        })
        .map_err(py_err)?;
    Ok(QuantizedModel { inner })
}

#[pyclass(module = "qv2x")]
pub struct Codebook {
    inner: qv2x_core::codebook::Codebook,
}

#[pymethods]
impl Codebook {
    /// `codes` is `n_l × dim` row-major; `alpha` holds the per-rank weights.
    #[new]
    fn new(n_l: usize, dim: usize, codes: Vec<f64>, alpha: Vec<f64>) -> PyResult<Self> {
        let inner = qv2x_core::codebook::Codebook::new(n_l, dim, codes, alpha).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = qv2x_core::codebook::Codebook::load(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, &meta()).map_err(py_err)
    }

    #[getter]
    fn n_l(&self) -> usize {
        self.inner.n_l()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_r(&self) -> usize {
        self.inner.n_r()
    }

    #[getter]
    fn version_hash(&self) -> u64 {
        self.inner.version_hash()
    }

    /// Greedy residual assignment; returns `h·w·n_r` indices, rank minor.
    fn assign(&self, grid: &FeatureGrid, n_r: usize) -> PyResult<Vec<u32>> {
        Ok(assign(&grid.inner, &self.inner, n_r).map_err(py_err)?.indices)
    }

    fn reconstruct(&self, indices: Vec<u32>, height: usize, width: usize, n_r: usize) -> PyResult<FeatureGrid> {
        let msg = MessagePayload::new(height, width, n_r, indices).map_err(py_err)?;
        let inner = reconstruct(&msg, &self.inner).map_err(py_err)?;
        Ok(FeatureGrid { inner })
    }

    /// Serializes a wire message carrying `indices`.
    fn encode_message(
        &self,
        sender_id: u32,
        timestamp_ms: u64,
        pose: [f32; 3],
        indices: Vec<u32>,
        height: usize,
        width: usize,
        n_r: usize,
    ) -> PyResult<Vec<u8>> {
        let msg = MessagePayload::new(height, width, n_r, indices).map_err(py_err)?;
        let wire = WireMessage::encode(sender_id, timestamp_ms, pose, &msg, &self.inner).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(wire.to_bytes())
    }

    /// Parses a wire message; returns `(sender_id, timestamp_ms, pose, indices, height, width, n_r)`.
    #[allow(clippy::type_complexity)]
    fn decode_message(&self, bytes: &[u8]) -> PyResult<(u32, u64, [f32; 3], Vec<u32>, usize, usize, usize)> {
        let err = |e: comms::WireError| PyValueError::new_err(e.to_string());
        let wire = WireMessage::from_bytes(bytes).map_err(err)?;
        let msg = wire.decode(&self.inner).map_err(err)?;
        let h = &wire.header;
        Ok((h.sender_id, h.frame_timestamp_ms, h.pose, msg.indices, msg.height, msg.width, msg.n_r))
    }
}

#[pyfunction]
#[pyo3(signature = (h, w, c, bits_per_value=32))]
fn raw_feature_bytes(h: usize, w: usize, c: usize, bits_per_value: usize) -> usize {
    comms::raw_feature_bytes(h, w, c, bits_per_value)
}

#[pyfunction]
#[pyo3(signature = (h, w, c, ratio, bits_per_value=32))]
fn compressed_feature_bytes(h: usize, w: usize, c: usize, ratio: usize, bits_per_value: usize) -> usize {
    comms::compressed_feature_bytes(h, w, c, ratio, bits_per_value)
}

#[pyfunction]
fn codebook_message_bytes(h: usize, w: usize, n_l: usize, n_r: usize) -> usize {
    comms::codebook_message_bytes(h, w, n_l, n_r)
}

/// `n` seeded draws of the transmission latency in milliseconds.
#[pyfunction]
#[pyo3(signature = (size_bytes, seed, n=1, rate_mbps=27.0, jitter_lo_ms=0.0, jitter_hi_ms=200.0))]
fn comm_latency(size_bytes: usize, seed: u64, n: usize, rate_mbps: f64, jitter_lo_ms: f64, jitter_hi_ms: f64) -> PyResult<Vec<f64>> {
    let channel = ChannelModel {
        rate_mbps,
        jitter_lo_ms,
        jitter_hi_ms,
    };
    channel.validate().map_err(py_err)?;
    let mut rng = qv2x_core::RngStream::new(seed);
    Ok((0..n).map(|_| comms::sample_comm_latency(size_bytes, &channel, &mut rng)).collect())
}

#[pymodule]
fn qv2x(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<FeatureGrid>()?;
    m.add_class::<Scenario>()?;
    m.add_class::<QuantParams>()?;
    m.add_class::<Model>()?;
    m.add_class::<QuantizedModel>()?;
    m.add_class::<Codebook>()?;
    m.add_function(wrap_pyfunction!(gen_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(init_maxmin, m)?)?;
    m.add_function(wrap_pyfunction!(train_fp, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(raw_feature_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(compressed_feature_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(codebook_message_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(comm_latency, m)?)?;
    Ok(())
}
