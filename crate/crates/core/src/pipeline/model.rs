use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::{Layer, LayerKind};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::scene::Modality;

pub const MODEL_MAGIC: &[u8; 4] = b"QV2X";
pub const MODEL_FORMAT_VERSION: u16 = 1;
const FLAG_QUANT: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel count `C` of the shared BEV feature.
    pub channels: usize,
    /// Width of the first encoder layer.
    pub hidden: usize,
    /// When set, the model carries a `C → C/ratio → C` bottleneck for transmitted features.
    pub compress_ratio: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            hidden: 8,
            compress_ratio: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockTag {
    Encoder,
    Fusion,
    Head,
    Transport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockId {
    Encoder { modality: Modality, unit: u8 },
    FusionScore,
    FusionPost,
    Head,
    Compress,
    Decompress,
}

impl BlockId {
    /// The quantizable inference blocks in topological order.
    pub const CALIBRATED: [BlockId; 7] = [
        BlockId::Encoder { modality: Modality::Dense, unit: 0 },
        BlockId::Encoder { modality: Modality::Dense, unit: 1 },
        BlockId::Encoder { modality: Modality::Sparse, unit: 0 },
        BlockId::Encoder { modality: Modality::Sparse, unit: 1 },
        BlockId::FusionScore,
        BlockId::FusionPost,
        BlockId::Head,
    ];

    pub fn index(self) -> usize {
        match self {
            BlockId::Encoder { modality, unit } => modality.index() * 2 + unit as usize,
            BlockId::FusionScore => 4,
            BlockId::FusionPost => 5,
            BlockId::Head => 6,
            BlockId::Compress => 7,
            BlockId::Decompress => 8,
        }
    }

    pub fn from_index(i: usize) -> Option<BlockId> {
        match i {
            0..=3 => Some(BlockId::Encoder {
                modality: Modality::from_index(i / 2)?,
                unit: (i % 2) as u8,
            }),
            4 => Some(BlockId::FusionScore),
            5 => Some(BlockId::FusionPost),
            6 => Some(BlockId::Head),
            7 => Some(BlockId::Compress),
            8 => Some(BlockId::Decompress),
            _ => None,
        }
    }

    pub fn tag(self) -> BlockTag {
        match self {
            BlockId::Encoder { .. } => BlockTag::Encoder,
            BlockId::FusionScore | BlockId::FusionPost => BlockTag::Fusion,
            BlockId::Head => BlockTag::Head,
            BlockId::Compress | BlockId::Decompress => BlockTag::Transport,
        }
    }

    /// Whether a ReLU follows the weighted layer.
    pub fn has_relu(self) -> bool {
        !matches!(self, BlockId::FusionScore | BlockId::Head | BlockId::Compress)
    }

    pub fn name(self) -> String {
        self.to_string()
    }

    pub fn parse(name: &str) -> Option<BlockId> {
        (0..9).filter_map(BlockId::from_index).find(|b| b.name() == name)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::Encoder { modality, unit } => write!(f, "encoder.{}.{}", modality.as_str(), unit),
            BlockId::FusionScore => f.write_str("fusion.score"),
            BlockId::FusionPost => f.write_str("fusion.post"),
            BlockId::Head => f.write_str("head"),
            BlockId::Compress => f.write_str("transport.compress"),
            BlockId::Decompress => f.write_str("transport.decompress"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub id: BlockId,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub relu: bool,
    pub tag: BlockTag,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if let Some(r) = self.compress_ratio {
            if r == 0 || self.channels % r != 0 {
                return Err(Error::invalid(format!(
                    "compress ratio {r} must divide the channel count {}",
                    self.channels
                )));
            }
        }
        Ok(())
    }

    pub fn block_specs(&self) -> Vec<BlockSpec> {
        let (c, h) = (self.channels, self.hidden);
        let mut ids: Vec<BlockId> = BlockId::CALIBRATED.to_vec();
        if self.compress_ratio.is_some() {
            ids.extend([BlockId::Compress, BlockId::Decompress]);
        }
        ids.into_iter()
            .map(|id| {
                let (kind, cin, cout) = match id {
                    BlockId::Encoder { unit: 0, .. } => (LayerKind::Conv3x3, 1, h),
                    BlockId::Encoder { .. } => (LayerKind::Conv3x3, h, c),
                    BlockId::FusionScore => (LayerKind::Linear, c, 1),
                    BlockId::FusionPost => (LayerKind::Conv3x3, c, c),
                    BlockId::Head => (LayerKind::Linear, c, 3),
                    BlockId::Compress => (LayerKind::Linear, c, c / self.compress_ratio.unwrap_or(1)),
                    BlockId::Decompress => (LayerKind::Linear, c / self.compress_ratio.unwrap_or(1), c),
                };
                BlockSpec {
                    id,
                    kind,
                    in_channels: cin,
                    out_channels: cout,
                    relu: id.has_relu(),
                    tag: id.tag(),
                }
            })
            .collect()
    }
}

/// All weights of the cooperative model, one layer per block in [`ModelConfig::block_specs`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(seed).derive(0x1417);
        let layers = config
            .block_specs()
            .iter()
            .map(|s| Layer::he_init(s.kind, s.in_channels, s.out_channels, &mut root.derive(s.id.index() as u64)))
            .collect();
        let mut p = Self { config, layers };
        p.round_to_f32();
        Ok(p)
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .block_specs()
            .iter()
            .map(|s| Layer::zeros(s.kind, s.in_channels, s.out_channels))
            .collect();
        Ok(Self { config, layers })
    }

    pub fn from_layers(config: ModelConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let specs = config.block_specs();
        if specs.len() != layers.len() {
            return Err(Error::shape(format!("{} blocks expected, got {}", specs.len(), layers.len())));
        }
        for (s, l) in specs.iter().zip(&layers) {
            if (s.kind, s.in_channels, s.out_channels) != (l.kind, l.cin, l.cout)
                || l.weight.len() != l.kind.taps() * l.cin * l.cout
                || l.bias.len() != l.cout
            {
                return Err(Error::shape(format!("layer for block {} does not match its spec", s.id)));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn has_block(&self, id: BlockId) -> bool {
        id.index() < self.layers.len()
    }

    pub fn layer(&self, id: BlockId) -> &Layer {
        &self.layers[id.index()]
    }

    pub fn layer_mut(&mut self, id: BlockId) -> &mut Layer {
        &mut self.layers[id.index()]
    }

    pub fn block_ids(&self) -> Vec<BlockId> {
        (0..self.layers.len()).filter_map(BlockId::from_index).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Parameters of the per-modality encoders.
    pub fn backbone_param_count(&self) -> usize {
        self.block_ids()
            .into_iter()
            .filter(|b| b.tag() == BlockTag::Encoder)
            .map(|b| self.layer(b).param_count())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Rounds every value to the nearest `f32`, the precision of the file format.
    pub fn round_to_f32(&mut self) {
        for l in &mut self.layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Writes the container; `meta` is stored verbatim as JSON and `quant` as an opaque trailing section.
    pub fn write_container<W: Write>(&self, mut w: W, meta: &serde_json::Value, quant: Option<&[u8]>) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(if quant.is_some() { FLAG_QUANT } else { 0 }).to_le_bytes())?;
        let header = serde_json::to_vec(&serde_json::json!({ "model": self.config, "meta": meta }))?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for (id, l) in self.block_ids().into_iter().zip(&self.layers) {
            let name = id.name();
            w.write_all(&[name.len() as u8])?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[match l.kind {
                LayerKind::Conv3x3 => 0u8,
                LayerKind::Linear => 1,
            }])?;
            w.write_all(&(l.cin as u32).to_le_bytes())?;
            w.write_all(&(l.cout as u32).to_le_bytes())?;
        }
        for l in &self.layers {
            for v in l.weight.iter().chain(&l.bias) {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        if let Some(q) = quant {
            w.write_all(&(q.len() as u32).to_le_bytes())?;
            w.write_all(q)?;
        }
        Ok(())
    }

    pub fn read_container<R: Read>(mut r: R) -> Result<(ModelParams, serde_json::Value, Option<Vec<u8>>)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("missing magic".into()))?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("not a QV2X model file".into()));
        }
        let version = read_u16(&mut r)?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: MODEL_FORMAT_VERSION,
                found: version,
            });
        }
        let flags = read_u16(&mut r)?;
        let hlen = read_u32(&mut r)? as usize;
        let header: serde_json::Value = serde_json::from_slice(&read_vec(&mut r, hlen)?)?;
        let config: ModelConfig = serde_json::from_value(header["model"].clone())?;
        let meta = header.get("meta").cloned().unwrap_or(serde_json::Value::Null);
        let n = read_u32(&mut r)? as usize;
        let specs = config.block_specs();
        if n != specs.len() {
            return Err(Error::Format(format!("block table has {n} entries, config implies {}", specs.len())));
        }
        for s in &specs {
            let len = read_vec(&mut r, 1)?[0] as usize;
            let name = String::from_utf8(read_vec(&mut r, len)?).map_err(|_| Error::Format("block name".into()))?;
            let kind = read_vec(&mut r, 1)?[0];
            let cin = read_u32(&mut r)? as usize;
            let cout = read_u32(&mut r)? as usize;
            let want_kind = if s.kind == LayerKind::Conv3x3 { 0 } else { 1 };
            if name != s.id.name() || kind != want_kind || cin != s.in_channels || cout != s.out_channels {
                return Err(Error::Format(format!("block table entry {name} does not match {}", s.id)));
            }
        }
        let mut layers = Vec::with_capacity(n);
        for s in &specs {
            let mut l = Layer::zeros(s.kind, s.in_channels, s.out_channels);
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                let mut b = [0u8; 4];
                r.read_exact(&mut b).map_err(|_| Error::Format("truncated weights".into()))?;
                *v = f32::from_le_bytes(b) as f64;
            }
            layers.push(l);
        }
        let quant = if flags & FLAG_QUANT != 0 {
            let len = read_u32(&mut r)? as usize;
            Some(read_vec(&mut r, len)?)
        } else {
            None
        };
        Ok((ModelParams::from_layers(config, layers)?, meta, quant))
    }

    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        let mut buf = Vec::new();
        self.write_container(&mut buf, meta, None)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ModelParams, serde_json::Value)> {
        let bytes = std::fs::read(path)?;
        let (p, meta, _) = Self::read_container(bytes.as_slice())?;
        Ok((p, meta))
    }
}

pub(crate) fn read_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut v = vec![0u8; n];
    r.read_exact(&mut v).map_err(|_| Error::Format("unexpected end of file".into()))?;
    Ok(v)
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let b = read_vec(r, 2)?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let b = read_vec(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_index_round_trip() {
        for i in 0..9 {
            let b = BlockId::from_index(i).unwrap();
            assert_eq!(b.index(), i);
            assert_eq!(BlockId::parse(&b.name()), Some(b));
        }
        assert_eq!(BlockId::from_index(9), None);
    }

    #[test]
    fn default_shapes() {
        let p = ModelParams::init(ModelConfig::default(), 1).unwrap();
        assert_eq!(p.layers().len(), 7);
        assert_eq!(p.layer(BlockId::Encoder { modality: Modality::Dense, unit: 0 }).weight.len(), 9 * 8);
        assert_eq!(p.layer(BlockId::FusionPost).weight.len(), 9 * 16 * 16);
        assert_eq!(p.layer(BlockId::Head).cout, 3);
        let c = ModelParams::init(
            ModelConfig {
                compress_ratio: Some(16),
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert_eq!(c.layer(BlockId::Compress).cout, 1);
        assert!(ModelConfig { compress_ratio: Some(5), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn container_round_trip_and_version_check() {
        let p = ModelParams::init(ModelConfig::default(), 7).unwrap();
        let meta = serde_json::json!({"seed": 7});
        let mut buf = Vec::new();
        p.write_container(&mut buf, &meta, Some(b"xyz")).unwrap();
        let (q, m, quant) = ModelParams::read_container(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(m, meta);
        assert_eq!(quant.as_deref(), Some(&b"xyz"[..]));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            ModelParams::read_container(bad.as_slice()),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        assert!(matches!(ModelParams::read_container(&buf[..buf.len() / 2]), Err(Error::Format(_))));
    }
}
