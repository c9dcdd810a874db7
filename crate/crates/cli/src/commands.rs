//! The seven pipeline commands. Artifacts live in one output directory and
//! carry the config hash, seed and tool version of the run that wrote them.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use qv2x_core::calib::{build_calib_set, calibrate_with_report, CalibConfig, QuantizedModel};
use qv2x_core::codebook::{remote_features, train_joint, train_stage1_with, Codebook};
use qv2x_core::comms::{
    codebook_message_bytes, compressed_feature_bytes, evaluate_system, raw_feature_bytes, ChannelModel, LatencyProfile, SystemConfig,
    SystemModel, SystemTransport,
};
use qv2x_core::pipeline::{agent_input, eval_samples, fit_fp, model_ap, Dataset, ModelParams, Overlay, PoseNoise, Transport};
use qv2x_core::quant::model_size_bytes;
use qv2x_core::scene::{gen_scenario_with, label_grid, Scenario};
use qv2x_core::RngStream;

use crate::config::{ModelSource, RunConfig};
use crate::error::CliError;
use crate::svg::{chart, Series, Style};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const SCENARIOS: &str = "scenarios.json";
pub const MODEL_FP: &str = "model_fp.bin";
pub const MODEL_FP_COMPRESSED: &str = "model_fp_compressed.bin";
pub const CODEBOOK: &str = "codebook.bin";
pub const MODEL_JOINT: &str = "model_joint.bin";
pub const MODEL_QUANT: &str = "model_quant.bin";
pub const CALIB_REPORT: &str = "calibration_report.csv";
pub const METRICS_IDEAL: &str = "metrics_ideal.csv";
pub const METRICS_SYSTEM: &str = "metrics_system.csv";
pub const SUMMARY: &str = "summary.md";

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ScenarioFile {
    meta: Value,
    train: Vec<Scenario>,
    eval: Vec<Scenario>,
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&out)?;
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn meta(&self, stage: &str, stage_hash: &str) -> Value {
        json!({
            "tool": "qv2x",
            "version": VERSION,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "stage": stage,
            "stage_hash": stage_hash,
            "config": self.cfg,
        })
    }

    /// First line of every CSV and Markdown output.
    fn stamp(&self) -> String {
        format!("# qv2x {VERSION} config_hash={} seed={}", self.cfg.hash(), self.cfg.seed)
    }

    fn require(&self, name: &str, producer: &'static str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if !p.exists() {
            return Err(CliError::MissingArtifact { path: p, producer });
        }
        Ok(p)
    }

    fn check_meta(path: &Path, meta: &Value, stage: &str, expected: &str) -> Result<(), CliError> {
        let mismatch = |detail: String| CliError::Mismatch {
            path: path.to_path_buf(),
            detail,
        };
        if meta["version"].as_str() != Some(VERSION) {
            return Err(mismatch(format!("written by qv2x {}, this is {VERSION}", meta["version"])));
        }
        if meta["stage"].as_str() != Some(stage) {
            return Err(mismatch(format!("expected a `{stage}` artifact, found `{}`", meta["stage"])));
        }
        if meta["stage_hash"].as_str() != Some(expected) {
            return Err(mismatch(format!(
                "its inputs hash to {}, the current config implies {expected}; re-run the producing command",
                meta["stage_hash"]
            )));
        }
        Ok(())
    }

    fn malformed(path: &Path, e: qv2x_core::Error) -> CliError {
        match e {
            qv2x_core::Error::Io(e) => CliError::Io(e),
            e => CliError::Malformed {
                path: path.to_path_buf(),
                detail: e.to_string(),
            },
        }
    }

    fn load_scenarios(&self) -> Result<(Vec<Scenario>, Vec<Scenario>), CliError> {
        let p = self.require(SCENARIOS, "gen")?;
        let f: ScenarioFile = serde_json::from_slice(&fs::read(&p)?).map_err(|e| CliError::Malformed {
            path: p.clone(),
            detail: e.to_string(),
        })?;
        Self::check_meta(&p, &f.meta, "gen", &self.cfg.scenes_hash())?;
        Ok((f.train, f.eval))
    }

    fn load_model(&self, name: &str, producer: &'static str, stage_hash: &str) -> Result<ModelParams, CliError> {
        let p = self.require(name, producer)?;
        let (m, meta) = ModelParams::load(&p).map_err(|e| Self::malformed(&p, e))?;
        Self::check_meta(&p, &meta, producer, stage_hash)?;
        Ok(m)
    }

    fn load_codebook(&self) -> Result<Codebook, CliError> {
        let p = self.require(CODEBOOK, "codebook")?;
        let (cb, meta) = Codebook::load(&p).map_err(|e| Self::malformed(&p, e))?;
        Self::check_meta(&p, &meta, "codebook", &self.cfg.codebook_hash())?;
        Ok(cb)
    }

    fn load_quant(&self) -> Result<QuantizedModel, CliError> {
        let p = self.require(MODEL_QUANT, "calibrate")?;
        let (q, meta) = QuantizedModel::load(&p).map_err(|e| Self::malformed(&p, e))?;
        Self::check_meta(&p, &meta, "calibrate", &self.cfg.calib_hash())?;
        Ok(q)
    }

    /// The model `calibrate` starts from.
    fn calibration_source(&self) -> Result<ModelParams, CliError> {
        match self.cfg.calibration.source {
            ModelSource::Fp => self.load_model(MODEL_FP, "train", &self.cfg.train_hash()),
            ModelSource::Joint => self.load_model(MODEL_JOINT, "codebook", &self.cfg.codebook_hash()),
        }
    }

    fn csv_writer(&self, name: &str) -> Result<csv::Writer<BufWriter<File>>, CliError> {
        let mut f = BufWriter::new(File::create(self.path(name))?);
        writeln!(f, "{}", self.stamp())?;
        Ok(csv::Writer::from_writer(f))
    }
}

/// `gen`: seeded train/eval scenarios plus FeatureGrid fixtures of the first eval frame.
pub fn gen(ctx: &Ctx) -> Result<(), CliError> {
    let s = &ctx.cfg.scenes;
    let make = |split: u64, n: usize| -> Result<Vec<Scenario>, CliError> {
        (0..n)
            .map(|i| {
                Ok(gen_scenario_with(
                    &s.params,
                    ctx.cfg.scenario_seed(split, i),
                    s.agents,
                    s.objects,
                    s.frames,
                    s.frame_dt_ms,
                )?)
            })
            .collect()
    };
    let file = ScenarioFile {
        meta: ctx.meta("gen", &ctx.cfg.scenes_hash()),
        train: make(0x7A11, s.train_scenarios)?,
        eval: make(0xE7A1, s.eval_scenarios)?,
    };
    fs::write(ctx.path(SCENARIOS), serde_json::to_vec_pretty(&file).map_err(qv2x_core::Error::from)?)?;

    let fixtures = ctx.path("fixtures");
    fs::create_dir_all(&fixtures)?;
    let sc = &file.eval[0];
    let root = RngStream::new(ctx.cfg.seed).derive(0xE7A1).derive(sc.seed);
    for id in sc.agent_ids() {
        let input = agent_input(sc, id, 0, true, PoseNoise::NONE, &root)?;
        input.obs.write_to(BufWriter::new(File::create(fixtures.join(format!("eval0_frame0_agent{id}.grid")))?))?;
    }
    label_grid(sc, 0)?.write_to(BufWriter::new(File::create(fixtures.join("eval0_frame0_labels.grid"))?))?;
    info!("wrote {} train and {} eval scenarios", file.train.len(), file.eval.len());
    Ok(())
}

/// `train`: full-precision pretraining, plus the bottleneck model when configured.
pub fn train(ctx: &Ctx) -> Result<(), CliError> {
    let (train, _) = ctx.load_scenarios()?;
    let meta = ctx.meta("train", &ctx.cfg.train_hash());
    let fp = fit_fp(&train, &ctx.cfg.train_config(false))?;
    fp.save(&ctx.path(MODEL_FP), &meta)?;
    info!("full-precision model: {} parameters", fp.param_count());
    if ctx.cfg.train.compressed_ratio.is_some() {
        let m = fit_fp(&train, &ctx.cfg.train_config(true))?;
        m.save(&ctx.path(MODEL_FP_COMPRESSED), &meta)?;
        info!("bottleneck model: {} parameters", m.param_count());
    }
    Ok(())
}

/// `codebook`: stage-1 fit on transmitted features, then joint training with the model.
pub fn codebook(ctx: &Ctx) -> Result<(), CliError> {
    let (train, _) = ctx.load_scenarios()?;
    let fp = ctx.load_model(MODEL_FP, "train", &ctx.cfg.train_hash())?;
    let data = Dataset::build(&train, ctx.cfg.seed, ctx.cfg.train.val_fraction, ctx.cfg.train.pose_noise)?;
    let feats = remote_features(&fp, None, &data.train)?;
    let stage1 = train_stage1_with(&feats, &ctx.cfg.stage1_config())?;
    info!("stage 1: loss {:.4e} -> {:.4e}", stage1.history[0], stage1.history.last().copied().unwrap_or(f64::NAN));
    let joint = train_joint(fp, stage1.codebook, &train, &ctx.cfg.joint_config())?;
    info!("joint training: loss {:.4e} -> {:.4e}", joint.initial_loss, joint.final_loss);
    let meta = ctx.meta("codebook", &ctx.cfg.codebook_hash());
    joint.codebook.save(&ctx.path(CODEBOOK), &meta)?;
    joint.params.save(&ctx.path(MODEL_JOINT), &meta)?;
    Ok(())
}

/// `calibrate`: block-wise post-training quantization of the configured source model.
pub fn calibrate(ctx: &Ctx) -> Result<(), CliError> {
    let (train, _) = ctx.load_scenarios()?;
    let src = ctx.calibration_source()?;
    let cfg = ctx.cfg.calib_config();
    let set = build_calib_set(&train, &cfg)?;
    let (q, report) = calibrate_with_report(&src, &train, &set, &cfg)?;
    q.save(&ctx.path(MODEL_QUANT), &ctx.meta("calibrate", &ctx.cfg.calib_hash()))?;
    let mut w = ctx.csv_writer(CALIB_REPORT)?;
    w.write_record(["block", "initial_objective", "final_objective", "unconverged", "rows"])?;
    for r in &report {
        w.write_record([
            r.block.clone(),
            r.initial_objective.to_string(),
            r.final_objective.to_string(),
            r.unconverged.to_string(),
            r.rows.to_string(),
        ])?;
    }
    w.flush()?;
    info!("calibrated {} blocks from {} samples", report.len(), set.len());
    Ok(())
}

fn maxmin_config(cfg: &RunConfig) -> CalibConfig {
    CalibConfig {
        fraction: cfg.calibration.fraction,
        pose_noise: cfg.calibration.pose_noise,
        seed: cfg.seed,
        ..CalibConfig::maxmin(cfg.calibration.w_bits, cfg.calibration.a_bits)
    }
}

/// `eval-ideal`: lossless, zero-latency cell-AP across the pose-noise sweep.
pub fn eval_ideal(ctx: &Ctx) -> Result<(), CliError> {
    let (train, eval) = ctx.load_scenarios()?;
    let fp = ctx.load_model(MODEL_FP, "train", &ctx.cfg.train_hash())?;
    let q = ctx.load_quant()?;
    let q_overlay = q.overlay();
    let mut models: Vec<(&str, &ModelParams, Option<Overlay>, u32, u32)> = vec![
        ("fp", &fp, None, 32, 32),
        ("quant", q.params(), Some(q_overlay), q.w_bits(), q.a_bits()),
    ];
    let maxmin;
    if ctx.cfg.eval.include_maxmin {
        let cfg = maxmin_config(&ctx.cfg);
        let set = build_calib_set(&train, &cfg)?;
        maxmin = calibrate_with_report(q.params(), &train, &set, &cfg)?.0;
        models.push(("maxmin", maxmin.params(), Some(maxmin.overlay()), cfg.w_bits, cfg.a_bits));
    }
    let mut w = ctx.csv_writer(METRICS_IDEAL)?;
    w.write_record(["model", "w_bits", "a_bits", "pose_noise_m", "ap", "size_bytes"])?;
    for &sigma in &ctx.cfg.eval.pose_noise_sweep {
        let noise = PoseNoise {
            trans_m: sigma,
            rot_rad: ctx.cfg.eval.rot_noise_rad,
        };
        let samples = eval_samples(&eval, ctx.cfg.seed, noise)?;
        for (name, params, overlay, wb, ab) in &models {
            let ap = model_ap(params, overlay.as_ref(), &samples, Transport::Lossless)?;
            info!("{name} at sigma {sigma}: AP {ap:.4}");
            w.write_record([
                name.to_string(),
                wb.to_string(),
                ab.to_string(),
                sigma.to_string(),
                ap.to_string(),
                model_size_bytes(params, *wb).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `eval-system`: frame-by-frame simulation with channel and model latency.
pub fn eval_system(ctx: &Ctx) -> Result<(), CliError> {
    let (_, eval) = ctx.load_scenarios()?;
    let cfg = &ctx.cfg;
    let fp = ctx.load_model(MODEL_FP, "train", &cfg.train_hash())?;
    let compressed = match cfg.train.compressed_ratio {
        Some(_) => Some(ctx.load_model(MODEL_FP_COMPRESSED, "train", &cfg.train_hash())?),
        None => None,
    };
    let q = ctx.load_quant()?;
    let cb = ctx.load_codebook()?;
    let overlay = q.overlay();
    let n_r = cfg.codebook.n_r;

    let (h, w_cells) = (cfg.scenes.params.roi.grid_height(), cfg.scenes.params.roi.grid_width());
    let c = cfg.model.channels;
    let mut systems: Vec<(&str, SystemModel, SystemTransport, LatencyProfile, usize)> = vec![(
        "fp_raw",
        SystemModel { params: &fp, overlay: None },
        SystemTransport::RawFp32,
        cfg.system.latency_fp32,
        raw_feature_bytes(h, w_cells, c, 32),
    )];
    if let (Some(m), Some(ratio)) = (&compressed, cfg.train.compressed_ratio) {
        systems.push((
            "fp_compressed",
            SystemModel { params: m, overlay: None },
            SystemTransport::CompressedFp32,
            cfg.system.latency_fp32,
            compressed_feature_bytes(h, w_cells, c, ratio, 32),
        ));
    }
    systems.push((
        "quant_codebook",
        SystemModel {
            params: q.params(),
            overlay: Some(&overlay),
        },
        SystemTransport::Codebook { codebook: &cb, n_r },
        cfg.system.latency_int8,
        codebook_message_bytes(h, w_cells, cb.n_l(), n_r),
    ));

    let ideal = SystemConfig {
        channel: ChannelModel::IDEAL,
        latency: LatencyProfile::ZERO,
        extra_latency_ms: 0.0,
        ..cfg.system_config(LatencyProfile::ZERO)
    };
    let mut w = ctx.csv_writer(METRICS_SYSTEM)?;
    w.write_record(["system", "message_bytes", "mean_t_sys_ms", "ap_system", "ap_ideal", "ap_gap", "delivered"])?;
    for (name, model, transport, latency, bytes) in systems {
        let real = evaluate_system(&eval, model, transport, &cfg.system_config(latency), cfg.seed)?;
        let best = evaluate_system(&eval, model, transport, &ideal, cfg.seed)?;
        info!("{name}: T_sys {:.1} ms, AP {:.4} (ideal {:.4})", real.mean_t_sys, real.ap, best.ap);
        w.write_record([
            name.to_string(),
            bytes.to_string(),
            real.mean_t_sys.to_string(),
            real.ap.to_string(),
            best.ap.to_string(),
            (real.ap - best.ap).to_string(),
            real.delivered.to_string(),
        ])?;
        let mut f = BufWriter::new(File::create(ctx.path(&format!("latency_{name}.csv")))?);
        writeln!(f, "{}", ctx.stamp())?;
        real.latency.write_csv(&mut f)?;
        f.flush()?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<csv::StringRecord>, CliError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(r.records().collect::<Result<_, _>>()?)
}

fn num(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<f64, CliError> {
    rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| CliError::Malformed {
        path: path.to_path_buf(),
        detail: format!("column {i} of {:?} is not a number", rec),
    })
}

/// `report`: Markdown summary and SVG charts from the metric CSVs.
pub fn report(ctx: &Ctx) -> Result<(), CliError> {
    let ideal_path = ctx.require(METRICS_IDEAL, "eval-ideal")?;
    let system_path = ctx.require(METRICS_SYSTEM, "eval-system")?;
    let fp = ctx.load_model(MODEL_FP, "train", &ctx.cfg.train_hash())?;
    let ideal = read_rows(&ideal_path)?;
    let system = read_rows(&system_path)?;

    let mut md = String::new();
    md.push_str(&format!("<!-- {} -->\n# qv2x run summary\n\n", ctx.stamp().trim_start_matches("# ")));
    md.push_str("## Ideal cell-AP\n\n| model | W/A | pose noise (m) | AP | size (bytes) |\n|---|---|---|---|---|\n");
    let mut by_model: Vec<Series> = Vec::new();
    for r in &ideal {
        let (sigma, ap) = (num(r, 3, &ideal_path)?, num(r, 4, &ideal_path)?);
        md.push_str(&format!("| {} | {}/{} | {sigma} | {ap:.4} | {} |\n", &r[0], &r[1], &r[2], &r[5]));
        let label = format!("{} W{}/A{}", &r[0], &r[1], &r[2]);
        match by_model.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((sigma, ap)),
            None => by_model.push(Series {
                label,
                points: vec![(sigma, ap)],
            }),
        }
    }
    md.push_str("\n## System-level evaluation\n\n| system | message bytes | mean T_sys (ms) | AP | ideal AP | gap |\n|---|---|---|---|---|---|\n");
    let mut latency_points = Vec::new();
    for r in &system {
        let (t, ap, best) = (num(r, 2, &system_path)?, num(r, 3, &system_path)?, num(r, 4, &system_path)?);
        md.push_str(&format!("| {} | {} | {t:.1} | {ap:.4} | {best:.4} | {:+.4} |\n", &r[0], &r[1], ap - best));
        latency_points.push(Series {
            label: r[0].to_string(),
            points: vec![(t, ap)],
        });
    }
    let sizes: Vec<(f64, f64)> = [4u32, 8, 16, 32].iter().map(|&b| (b as f64, model_size_bytes(&fp, b) as f64)).collect();
    md.push_str("\n## Model size by bit width\n\n| bits | bytes |\n|---|---|\n");
    for (b, s) in &sizes {
        md.push_str(&format!("| {b} | {s} |\n"));
    }
    fs::write(ctx.path(SUMMARY), md)?;

    let comment = format!("<!-- {} -->\n", ctx.stamp().trim_start_matches("# "));
    let write_svg = |name: &str, body: String| fs::write(ctx.path(name), comment.clone() + &body);
    write_svg(
        "ap_vs_pose_noise.svg",
        chart("Cell-AP vs pose noise", "translation error (m)", "cell-AP", &by_model, Style::Lines),
    )?;
    write_svg(
        "ap_vs_latency.svg",
        chart("Cell-AP vs system latency", "mean T_sys (ms)", "cell-AP", &latency_points, Style::Markers),
    )?;
    write_svg(
        "size_vs_bits.svg",
        chart(
            "Model size vs bit width",
            "bits",
            "bytes",
            &[Series {
                label: "base model".into(),
                points: sizes,
            }],
            Style::Lines,
        ),
    )?;
    Ok(())
}
