//! Shared codebook for inter-agent messages: greedy residual assignment,
//! weighted multi-code reconstruction, and two-stage training.

mod joint;
mod stage1;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::FeatureGrid;
use crate::pipeline::{read_u16, read_vec};

pub use joint::{freeze, joint_loss_and_grad, mean_joint_loss, train_joint, JointConfig, JointOutcome};
pub use stage1::{remote_features, train_stage1, train_stage1_with, Stage1Config, Stage1Result};

pub const CODEBOOK_MAGIC: &[u8; 6] = b"QV2XCB";
pub const CODEBOOK_FORMAT_VERSION: u16 = 1;

/// `n_L` codes of dimension `C` plus one global combination weight per rank.
/// Values are stored at `f32` precision so the content hash is stable across
/// save and load.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    n_l: usize,
    dim: usize,
    codes: Vec<f64>,
    alpha: Vec<f64>,
    version_hash: u64,
    final_loss: f64,
}

impl Codebook {
    pub fn new(n_l: usize, dim: usize, codes: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        if n_l < 2 || n_l > u16::MAX as usize {
            return Err(Error::invalid(format!("codebook needs 2..=65535 codes, got {n_l}")));
        }
        if dim == 0 || codes.len() != n_l * dim {
            return Err(Error::shape(format!("{n_l} codes of dim {dim} need {} values, got {}", n_l * dim, codes.len())));
        }
        if alpha.is_empty() || alpha.len() > u8::MAX as usize {
            return Err(Error::invalid("codebook needs 1..=255 rank weights"));
        }
        if codes.iter().chain(&alpha).any(|v| !v.is_finite()) {
            return Err(Error::invalid("codebook values must be finite"));
        }
        let codes: Vec<f64> = codes.iter().map(|&v| v as f32 as f64).collect();
        let alpha: Vec<f64> = alpha.iter().map(|&v| v as f32 as f64).collect();
        let version_hash = content_hash(n_l, dim, &codes, &alpha);
        Ok(Self {
            n_l,
            dim,
            codes,
            alpha,
            version_hash,
            final_loss: f64::NAN,
        })
    }

    pub fn n_l(&self) -> usize {
        self.n_l
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Largest `n_R` this codebook supports.
    pub fn n_r(&self) -> usize {
        self.alpha.len()
    }

    pub fn codes(&self) -> &[f64] {
        &self.codes
    }

    pub fn code(&self, l: usize) -> &[f64] {
        &self.codes[l * self.dim..(l + 1) * self.dim]
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn version_hash(&self) -> u64 {
        self.version_hash
    }

    /// Mean squared reconstruction error per vector at the end of stage-1 training.
    pub fn final_loss(&self) -> f64 {
        self.final_loss
    }

    pub(crate) fn with_final_loss(mut self, loss: f64) -> Self {
        self.final_loss = loss;
        self
    }

    #[cfg(test)]
    pub(crate) fn set_codes_unrounded(&mut self, codes: Vec<f64>) {
        self.codes = codes;
    }

    pub fn write_to<W: Write>(&self, mut w: W, meta: &serde_json::Value) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&CODEBOOK_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_l as u16).to_le_bytes())?;
        w.write_all(&(self.dim as u16).to_le_bytes())?;
        w.write_all(&[self.alpha.len() as u8])?;
        for v in self.alpha.iter().chain(&self.codes) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.write_all(&self.version_hash.to_le_bytes())?;
        let meta = serde_json::to_vec(&serde_json::json!({ "final_loss": self.final_loss, "meta": meta }))?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<(Codebook, serde_json::Value)> {
        let magic = read_vec(&mut r, 6)?;
        if magic != CODEBOOK_MAGIC {
            return Err(Error::Format("not a QV2XCB codebook file".into()));
        }
        let version = read_u16(&mut r)?;
        if version != CODEBOOK_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CODEBOOK_FORMAT_VERSION,
                found: version,
            });
        }
        let n_l = read_u16(&mut r)? as usize;
        let dim = read_u16(&mut r)? as usize;
        let n_r = read_vec(&mut r, 1)?[0] as usize;
        let raw = read_vec(&mut r, 4 * (n_r + n_l * dim))?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let stored = u64::from_le_bytes(read_vec(&mut r, 8)?.try_into().expect("8 bytes"));
        let cb = Codebook::new(n_l, dim, vals[n_r..].to_vec(), vals[..n_r].to_vec())?;
        if cb.version_hash != stored {
            return Err(Error::Format(format!(
                "codebook hash {stored:016x} does not match its content ({:016x})",
                cb.version_hash
            )));
        }
        let len = u32::from_le_bytes(read_vec(&mut r, 4)?.try_into().expect("4 bytes")) as usize;
        let extra: serde_json::Value = serde_json::from_slice(&read_vec(&mut r, len)?)?;
        let final_loss = extra["final_loss"].as_f64().unwrap_or(f64::NAN);
        Ok((cb.with_final_loss(final_loss), extra["meta"].clone()))
    }

    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, meta)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Codebook, serde_json::Value)> {
        Self::read_from(std::fs::read(path)?.as_slice())
    }
}

fn content_hash(n_l: usize, dim: usize, codes: &[f64], alpha: &[f64]) -> u64 {
    let mut h = Sha256::new();
    h.update((n_l as u32).to_le_bytes());
    h.update((dim as u32).to_le_bytes());
    h.update((alpha.len() as u32).to_le_bytes());
    for v in alpha.iter().chain(codes) {
        h.update((*v as f32).to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Code indices for every cell, `n_R` per cell, row-major with rank minor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessagePayload {
    pub height: usize,
    pub width: usize,
    pub n_r: usize,
    pub indices: Vec<u32>,
}

impl MessagePayload {
    pub fn new(height: usize, width: usize, n_r: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != height * width * n_r {
            return Err(Error::shape(format!(
                "{height}x{width}x{n_r} payload needs {} indices, got {}",
                height * width * n_r,
                indices.len()
            )));
        }
        Ok(Self {
            height,
            width,
            n_r,
            indices,
        })
    }

    pub fn indices_at(&self, cell: usize) -> &[u32] {
        &self.indices[cell * self.n_r..(cell + 1) * self.n_r]
    }
}

/// Index of the code minimizing `‖residual − a·d_ℓ‖²`; ties go to the smaller index.
#[inline]
pub(crate) fn nearest(cb: &Codebook, residual: &[f64], a: f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for l in 0..cb.n_l {
        let code = cb.code(l);
        let mut d = 0.0;
        for (r, c) in residual.iter().zip(code) {
            let e = r - a * c;
            d += e * e;
        }
        if d < best.1 {
            best = (l, d);
        }
    }
    best
}

/// Greedy residual assignment of every cell of `f`.
pub fn assign(f: &FeatureGrid, cb: &Codebook, n_r: usize) -> Result<MessagePayload> {
    if f.channels() != cb.dim {
        return Err(Error::shape(format!("feature has {} channels, codebook dim is {}", f.channels(), cb.dim)));
    }
    if n_r == 0 || n_r > cb.n_r() {
        return Err(Error::invalid(format!("n_R = {n_r} not supported by a codebook with {} ranks", cb.n_r())));
    }
    let mut indices = Vec::with_capacity(f.cells() * n_r);
    let mut residual = vec![0.0; cb.dim];
    for cell in 0..f.cells() {
        residual.copy_from_slice(f.cell(cell));
        for r in 0..n_r {
            let a = cb.alpha[r];
            let (l, _) = nearest(cb, &residual, a);
            indices.push(l as u32);
            if r + 1 < n_r {
                for (x, c) in residual.iter_mut().zip(cb.code(l)) {
                    *x -= a * c;
                }
            }
        }
    }
    MessagePayload::new(f.height(), f.width(), n_r, indices)
}

/// `F̂[h, w] = Σ_r α_r · d_{index_r}`.
pub fn reconstruct(msg: &MessagePayload, cb: &Codebook) -> Result<FeatureGrid> {
    if msg.n_r > cb.n_r() {
        return Err(Error::invalid(format!("payload uses {} ranks, codebook has {}", msg.n_r, cb.n_r())));
    }
    let mut out = FeatureGrid::zeros(msg.height, msg.width, cb.dim);
    for cell in 0..msg.height * msg.width {
        let dst = out.cell_mut(cell);
        for (r, &idx) in msg.indices_at(cell).iter().enumerate() {
            let idx = idx as usize;
            if idx >= cb.n_l {
                return Err(Error::invalid(format!("code index {idx} out of range for {} codes", cb.n_l)));
            }
            for (d, c) in dst.iter_mut().zip(cb.code(idx)) {
                *d += cb.alpha[r] * c;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random_cb(seed: u64, n_l: usize, dim: usize, n_r: usize) -> Codebook {
        let mut r = RngStream::new(seed);
        let codes = (0..n_l * dim).map(|_| r.normal()).collect();
        let alpha = (0..n_r).map(|k| 1.0 / (k + 1) as f64).collect();
        Codebook::new(n_l, dim, codes, alpha).unwrap()
    }

    #[test]
    fn exact_match_is_selected() {
        let cb = random_cb(1, 8, 4, 1);
        let f = FeatureGrid::new(1, 1, 4, cb.code(5).to_vec()).unwrap();
        let m = assign(&f, &cb, 1).unwrap();
        assert_eq!(m.indices, vec![5]);
        assert_eq!(reconstruct(&m, &cb).unwrap(), f);
    }

    #[test]
    fn two_code_distance_case() {
        let cb = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 1.0], vec![1.0]).unwrap();
        let f = FeatureGrid::new(1, 1, 2, vec![0.9, 0.9]).unwrap();
        assert_eq!(assign(&f, &cb, 1).unwrap().indices, vec![1]);
    }

    #[test]
    fn ties_prefer_smaller_index() {
        let cb = Codebook::new(3, 1, vec![1.0, -1.0, 1.0], vec![1.0]).unwrap();
        let f = FeatureGrid::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(assign(&f, &cb, 1).unwrap().indices, vec![0, 0]);
    }

    #[test]
    fn reconstruct_cases() {
        let cb = random_cb(2, 6, 3, 2);
        let m = MessagePayload::new(1, 2, 2, vec![1, 4, 0, 5]).unwrap();
        let g = reconstruct(&m, &cb).unwrap();
        for k in 0..3 {
            let e0 = cb.alpha()[0] * cb.code(1)[k] + cb.alpha()[1] * cb.code(4)[k];
            assert_eq!(g.cell(0)[k], e0);
        }
        let zero = Codebook::new(6, 3, cb.codes().to_vec(), vec![0.0, 0.0]).unwrap();
        assert!(reconstruct(&m, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        let bad = MessagePayload::new(1, 1, 1, vec![6]).unwrap();
        assert!(reconstruct(&bad, &cb).is_err());
    }

    #[test]
    fn dim_mismatch_is_error() {
        let cb = random_cb(3, 4, 3, 1);
        assert!(matches!(assign(&FeatureGrid::zeros(2, 2, 2), &cb, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn hash_tracks_content_and_file_round_trip() {
        let cb = random_cb(4, 8, 4, 2);
        let mut codes = cb.codes().to_vec();
        codes[3] += 0.5;
        let other = Codebook::new(8, 4, codes, cb.alpha().to_vec()).unwrap();
        assert_ne!(cb.version_hash(), other.version_hash());
        let alpha_changed = Codebook::new(8, 4, cb.codes().to_vec(), vec![1.0, 0.25]).unwrap();
        assert_ne!(cb.version_hash(), alpha_changed.version_hash());

        let mut buf = Vec::new();
        cb.write_to(&mut buf, &serde_json::json!({"k": 1})).unwrap();
        let (back, meta) = Codebook::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.codes(), cb.codes());
        assert_eq!(back.version_hash(), cb.version_hash());
        assert_eq!(meta["k"], 1);
        let mut tampered = buf.clone();
        tampered[20] ^= 1;
        assert!(Codebook::read_from(tampered.as_slice()).is_err());
    }
}
