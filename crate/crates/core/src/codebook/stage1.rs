use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{nearest, Codebook};
use crate::error::{Error, Result};
use crate::numerics::{FeatureGrid, RngStream};
use crate::pipeline::engine::encode_with;
use crate::pipeline::{ModelParams, Overlay, TrainSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub n_l: usize,
    pub n_r: usize,
    /// Full alternating sweeps.
    pub iters: usize,
    pub seed: u64,
    /// Training vectors are subsampled to at most this many.
    pub max_vectors: usize,
    /// Standard deviation of the noise added to reseeded codes.
    pub jitter: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            n_l: 128,
            n_r: 1,
            iters: 20,
            seed: 0,
            max_vectors: 20_000,
            jitter: 1e-3,
        }
    }
}

/// Encoded features of every non-ego agent, as they would be transmitted.
pub fn remote_features(params: &ModelParams, overlay: Option<&Overlay>, samples: &[TrainSample]) -> Result<Vec<FeatureGrid>> {
    let mut out = Vec::new();
    for s in samples {
        for a in s.inputs.iter().filter(|a| a.id != s.ego_id) {
            out.push(encode_with(params, overlay, a.modality, &a.obs)?.feature);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Stage1Result {
    pub codebook: Codebook,
    /// Mean squared error per vector after each sweep's assignment step, plus a final entry.
    pub history: Vec<f64>,
}

pub fn train_stage1(features: &[FeatureGrid], n_l: usize, n_r: usize, iters: usize, seed: u64) -> Result<Codebook> {
    let cfg = Stage1Config {
        n_l,
        n_r,
        iters,
        seed,
        ..Default::default()
    };
    Ok(train_stage1_with(features, &cfg)?.codebook)
}

fn gather(features: &[FeatureGrid], cfg: &Stage1Config, rng: &mut RngStream) -> Result<(usize, Vec<f64>)> {
    let dim = features.first().ok_or(Error::Empty("codebook training features"))?.channels();
    if dim == 0 || features.iter().any(|f| f.channels() != dim) {
        return Err(Error::shape("codebook training features must share a channel count"));
    }
    let total: usize = features.iter().map(|f| f.cells()).sum();
    let mut all: Vec<usize> = (0..total).collect();
    if total > cfg.max_vectors {
        rng.shuffle(&mut all);
        all.truncate(cfg.max_vectors);
        all.sort_unstable();
    }
    let mut data = Vec::with_capacity(all.len() * dim);
    let (mut grid, mut offset) = (0, 0);
    for i in all {
        while i >= offset + features[grid].cells() {
            offset += features[grid].cells();
            grid += 1;
        }
        data.extend_from_slice(features[grid].cell(i - offset));
    }
    Ok((dim, data))
}

/// Alternating minimization: greedy assignment, least-squares codes and
/// non-negative least-squares rank weights. With `n_R > 1` code 0 stays the zero
/// vector and `α₁` is free; with `n_R = 1`, `α₁ = 1` and the loop is Lloyd's algorithm.
pub fn train_stage1_with(features: &[FeatureGrid], cfg: &Stage1Config) -> Result<Stage1Result> {
    if cfg.n_l < 2 || cfg.n_r == 0 {
        return Err(Error::invalid("stage 1 needs n_L >= 2 and n_R >= 1"));
    }
    let mut rng = RngStream::new(cfg.seed).derive(0xC0DE);
    let (dim, data) = gather(features, cfg, &mut rng)?;
    let n = data.len() / dim;
    if n < cfg.n_l {
        return Err(Error::invalid(format!("{n} feature vectors cannot train {} codes", cfg.n_l)));
    }
    let vec_at = |i: usize| &data[i * dim..(i + 1) * dim];

    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let pinned = cfg.n_r > 1;
    let mut codes = vec![0.0; cfg.n_l * dim];
    for l in 0..cfg.n_l {
        if pinned && l == 0 {
            continue;
        }
        codes[l * dim..(l + 1) * dim].copy_from_slice(vec_at(order[l]));
    }
    let mut alpha: Vec<f64> = (0..cfg.n_r).map(|r| 0.5f64.powi(r as i32)).collect();

    let mut history = Vec::with_capacity(cfg.iters + 1);
    let mut assignment = vec![0u32; n * cfg.n_r];
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for sweep in 0..cfg.iters {
        let cb = Codebook::new(cfg.n_l, dim, codes.clone(), alpha.clone())?;
        let loss = assign_all(&cb, &data, dim, cfg.n_r, &mut assignment);
        history.push(loss / n as f64);
        debug!("stage1 sweep {sweep}: loss {:.6e}", loss / n as f64);
        if best.as_ref().map_or(true, |b| loss < b.0) {
            best = Some((loss, cb.codes().to_vec(), cb.alpha().to_vec()));
        }
        let mut counts = vec![0usize; cfg.n_l];
        for &a in &assignment {
            counts[a as usize] += 1;
        }
        // Work from the f32-rounded values the assignment actually used.
        codes = cb.codes().to_vec();
        alpha = cb.alpha().to_vec();
        if cfg.n_r == 1 {
            lloyd_update(&data, dim, &assignment, &counts, &mut codes, loss);
        } else {
            ls_codes(&data, dim, cfg.n_r, &assignment, &counts, &alpha, &mut codes);
            alpha = nnls_alpha(&data, dim, cfg.n_r, &assignment, &codes);
        }
        reseed_dead(&counts, pinned, &data, dim, cfg.jitter, &mut rng, &mut codes);
    }
    let mut cb = Codebook::new(cfg.n_l, dim, codes, alpha)?;
    cb = dedup(cb, pinned, &data, dim, cfg.jitter, &mut rng)?;
    let mut loss = assign_all(&cb, &data, dim, cfg.n_r, &mut assignment);
    if cfg.n_r > 1 {
        if let Some((bl, bc, ba)) = best {
            if bl < loss {
                cb = Codebook::new(cfg.n_l, dim, bc, ba)?;
                loss = bl;
            }
        }
    }
    history.push(loss / n as f64);
    Ok(Stage1Result {
        codebook: cb.with_final_loss(loss / n as f64),
        history,
    })
}

/// Assigns every vector and returns the total squared reconstruction error,
/// summed in vector order.
fn assign_all(cb: &Codebook, data: &[f64], dim: usize, n_r: usize, out: &mut [u32]) -> f64 {
    let mut total = 0.0;
    let mut residual = vec![0.0; dim];
    for (i, x) in data.chunks(dim).enumerate() {
        residual.copy_from_slice(x);
        let mut err = 0.0;
        for r in 0..n_r {
            let a = cb.alpha()[r];
            let (l, d) = nearest(cb, &residual, a);
            out[i * n_r + r] = l as u32;
            for (v, c) in residual.iter_mut().zip(cb.code(l)) {
                *v -= a * c;
            }
            err = d;
        }
        total += err;
    }
    total
}

/// Cluster means; the update is kept only if it does not raise the loss under
/// the current assignment.
fn lloyd_update(data: &[f64], dim: usize, assignment: &[u32], counts: &[usize], codes: &mut [f64], loss: f64) {
    let mut sums = vec![0.0; codes.len()];
    for (x, &a) in data.chunks(dim).zip(assignment) {
        let dst = &mut sums[a as usize * dim..(a as usize + 1) * dim];
        for (s, v) in dst.iter_mut().zip(x) {
            *s += v;
        }
    }
    let mut next = codes.to_vec();
    for (l, &c) in counts.iter().enumerate() {
        if c > 0 {
            for k in 0..dim {
                next[l * dim + k] = (sums[l * dim + k] / c as f64) as f32 as f64;
            }
        }
    }
    let mut after = 0.0;
    for (x, &a) in data.chunks(dim).zip(assignment) {
        let code = &next[a as usize * dim..(a as usize + 1) * dim];
        after += x.iter().zip(code).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    if after <= loss {
        codes.copy_from_slice(&next);
    }
}

fn solve_symmetric(a: DMatrix<f64>, b: DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(&b));
    }
    a.svd(true, true).solve(&b, 1e-12).ok()
}

/// Least-squares codes for fixed assignments and rank weights; code 0 stays zero
/// and unused codes are left untouched.
fn ls_codes(data: &[f64], dim: usize, n_r: usize, assignment: &[u32], counts: &[usize], alpha: &[f64], codes: &mut [f64]) {
    let n_l = counts.len();
    let free: Vec<usize> = (1..n_l).filter(|&l| counts[l] > 0).collect();
    if free.is_empty() {
        return;
    }
    let mut slot = vec![usize::MAX; n_l];
    for (k, &l) in free.iter().enumerate() {
        slot[l] = k;
    }
    let m = free.len();
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut b = DMatrix::<f64>::zeros(m, dim);
    let mut pairs: Vec<(usize, f64)> = Vec::with_capacity(n_r);
    for (i, x) in data.chunks(dim).enumerate() {
        pairs.clear();
        for (r, &l) in assignment[i * n_r..(i + 1) * n_r].iter().enumerate() {
            let s = slot[l as usize];
            if s == usize::MAX {
                continue;
            }
            match pairs.iter_mut().find(|p| p.0 == s) {
                Some(p) => p.1 += alpha[r],
                None => pairs.push((s, alpha[r])),
            }
        }
        for &(p, cp) in &pairs {
            for k in 0..dim {
                b[(p, k)] += cp * x[k];
            }
            for &(q, cq) in &pairs {
                a[(p, q)] += cp * cq;
            }
        }
    }
    if let Some(sol) = solve_symmetric(a, b) {
        if sol.iter().all(|v| v.is_finite()) {
            for (k, &l) in free.iter().enumerate() {
                for d in 0..dim {
                    codes[l * dim + d] = sol[(k, d)];
                }
            }
        }
    }
}

/// Non-negative least squares for the rank weights by active-set enumeration.
fn nnls_alpha(data: &[f64], dim: usize, n_r: usize, assignment: &[u32], codes: &[f64]) -> Vec<f64> {
    let mut g = DMatrix::<f64>::zeros(n_r, n_r);
    let mut h = DVector::<f64>::zeros(n_r);
    let mut xx = 0.0;
    for (i, x) in data.chunks(dim).enumerate() {
        let idx = &assignment[i * n_r..(i + 1) * n_r];
        for r in 0..n_r {
            let cr = &codes[idx[r] as usize * dim..(idx[r] as usize + 1) * dim];
            h[r] += cr.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            for s in 0..n_r {
                let cs = &codes[idx[s] as usize * dim..(idx[s] as usize + 1) * dim];
                g[(r, s)] += cr.iter().zip(cs).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        xx += x.iter().map(|v| v * v).sum::<f64>();
    }
    let objective = |a: &[f64]| {
        let av = DVector::from_column_slice(a);
        xx - 2.0 * h.dot(&av) + (av.transpose() * &g * &av)[(0, 0)]
    };
    let mut best = (objective(&vec![0.0; n_r]), vec![0.0; n_r]);
    for mask in 1u32..(1 << n_r) {
        let active: Vec<usize> = (0..n_r).filter(|r| mask & (1 << r) != 0).collect();
        let k = active.len();
        let ga = DMatrix::from_fn(k, k, |i, j| g[(active[i], active[j])]);
        let ha = DMatrix::from_fn(k, 1, |i, _| h[active[i]]);
        let Some(sol) = solve_symmetric(ga, ha) else { continue };
        if sol.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            continue;
        }
        let mut a = vec![0.0; n_r];
        for (i, &r) in active.iter().enumerate() {
            a[r] = sol[(i, 0)];
        }
        let o = objective(&a);
        if o < best.0 {
            best = (o, a);
        }
    }
    best.1
}

fn reseed_dead(counts: &[usize], pinned: bool, data: &[f64], dim: usize, jitter: f64, rng: &mut RngStream, codes: &mut [f64]) {
    let n = data.len() / dim;
    for (l, &c) in counts.iter().enumerate() {
        if c > 0 || (pinned && l == 0) {
            continue;
        }
        let src = rng.below(n);
        for k in 0..dim {
            codes[l * dim + k] = data[src * dim + k] + jitter * rng.normal();
        }
    }
}

/// Reseeds any code identical to an earlier one. Ties resolve to the earlier code,
/// so a duplicate is never selected and replacing it cannot raise the loss.
fn dedup(cb: Codebook, pinned: bool, data: &[f64], dim: usize, jitter: f64, rng: &mut RngStream) -> Result<Codebook> {
    let n_l = cb.n_l();
    let mut codes = cb.codes().to_vec();
    let n = data.len() / dim;
    for _ in 0..8 {
        let mut changed = false;
        for j in 1..n_l {
            if pinned && j == 0 {
                continue;
            }
            let dup = (0..j).any(|i| codes[i * dim..(i + 1) * dim] == codes[j * dim..(j + 1) * dim]);
            if dup {
                let src = rng.below(n);
                for k in 0..dim {
                    codes[j * dim + k] = data[src * dim + k] + jitter * (1.0 + rng.normal().abs());
                }
                changed = true;
            }
        }
        let next = Codebook::new(n_l, dim, codes.clone(), cb.alpha().to_vec())?;
        codes = next.codes().to_vec();
        if !changed {
            return Ok(next);
        }
    }
    Codebook::new(n_l, dim, codes, cb.alpha().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{assign, reconstruct};

    fn grid_of(vectors: &[Vec<f64>]) -> FeatureGrid {
        let dim = vectors[0].len();
        FeatureGrid::new(1, vectors.len(), dim, vectors.concat()).unwrap()
    }

    #[test]
    fn exact_capacity_fit() {
        let mut r = RngStream::new(1);
        let vs: Vec<Vec<f64>> = (0..8).map(|_| (0..4).map(|_| r.normal()).collect()).collect();
        let cb = train_stage1(&[grid_of(&vs)], 8, 1, 5, 3).unwrap();
        assert!(cb.final_loss() < 1e-10, "loss {}", cb.final_loss());
    }

    #[test]
    fn two_clusters_converge_to_means() {
        let mut r = RngStream::new(2);
        let mut vs = Vec::new();
        for k in 0..200 {
            let c = if k % 2 == 0 { [5.0, 5.0] } else { [-5.0, 0.0] };
            vs.push(vec![c[0] + 0.3 * r.normal(), c[1] + 0.3 * r.normal()]);
        }
        let cb = train_stage1(&[grid_of(&vs)], 2, 1, 20, 4).unwrap();
        // Independent Lloyd fixed point: per-cluster means by the known split.
        for parity in 0..2 {
            let members: Vec<&Vec<f64>> = vs.iter().enumerate().filter(|(i, _)| i % 2 == parity).map(|(_, v)| v).collect();
            let mean: Vec<f64> = (0..2).map(|k| members.iter().map(|v| v[k]).sum::<f64>() / members.len() as f64).collect();
            let hit = (0..2).any(|l| cb.code(l).iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-6));
            assert!(hit, "mean {mean:?} not among codes {:?}", cb.codes());
        }
    }

    #[test]
    fn stage1_loss_non_increasing() {
        let mut r = RngStream::new(5);
        let data: Vec<f64> = (0..3000).map(|_| r.normal().max(0.0)).collect();
        let f = FeatureGrid::new(25, 40, 3, data).unwrap();
        let cfg = Stage1Config {
            n_l: 16,
            n_r: 1,
            iters: 20,
            seed: 6,
            ..Default::default()
        };
        let res = train_stage1_with(&[f], &cfg).unwrap();
        for w in res.history.windows(2) {
            assert!(w[1] <= w[0], "{:?}", res.history);
        }
    }

    #[test]
    fn multi_rank_weights_are_non_negative_and_help() {
        let mut r = RngStream::new(7);
        let data: Vec<f64> = (0..4000).map(|_| r.normal()).collect();
        let f = FeatureGrid::new(50, 20, 4, data).unwrap();
        let one = train_stage1(&[f.clone()], 16, 1, 10, 8).unwrap();
        let two = train_stage1(&[f.clone()], 16, 2, 10, 8).unwrap();
        assert!(two.alpha().iter().all(|&a| a >= 0.0));
        assert!(two.code(0).iter().all(|&v| v == 0.0));
        let err = |cb: &Codebook, n_r| {
            let g = reconstruct(&assign(&f, cb, n_r).unwrap(), cb).unwrap();
            g.data().iter().zip(f.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        assert!(err(&two, 2) <= err(&two, 1));
        assert!(err(&two, 2) < err(&one, 1));
    }

    #[test]
    fn too_few_vectors_is_error() {
        let f = FeatureGrid::zeros(1, 3, 2);
        assert!(matches!(train_stage1(&[f], 4, 1, 3, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn codes_are_distinct_after_training() {
        let f = FeatureGrid::new(1, 6, 1, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let cb = train_stage1(&[f], 4, 1, 4, 9).unwrap();
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(cb.code(i), cb.code(j));
            }
        }
    }
}
