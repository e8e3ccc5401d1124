//! One- and two-dimensional loss slices `f(α, β) = L(θ + ασ + βη)`.

use llab_autodiff::ParamVector;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::hessian::HessianReport;
use crate::model::{evaluate, Model};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DirectionKind {
    /// Gaussian, rescaled filter by filter to the norms of the reference weights.
    Random { seed: u64 },
    /// Unit eigenvector of the given 1-based rank.
    Eigen { index: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub vector: ParamVector,
    pub kind: DirectionKind,
    pub norm: f64,
    /// Filters whose reference weights were all zero.
    pub dead_filters: usize,
}

/// Row-major filters of a weight segment: one per output channel.
fn filters(model: &Model, seg: usize) -> (usize, usize) {
    let shape = &model.layout().segments()[seg].shape;
    (shape[0], shape[1..].iter().product())
}

fn gaussian(params: &ParamVector, seed: u64, index: u64) -> Vec<f64> {
    let mut r = rng::substream("direction", seed, index);
    (0..params.len()).map(|_| r.sample(StandardNormal)).collect()
}

/// Filter-normalizes `raw` against `params`, optionally removing its
/// component along `other` inside each filter first. Bias entries are zeroed.
fn normalize_filters(model: &Model, params: &ParamVector, raw: &mut [f64], other: Option<&[f64]>) -> usize {
    let mut dead = 0;
    let mut keep = vec![false; raw.len()];
    for seg in model.weight_segments() {
        let (rows, cols) = filters(model, seg);
        let off = model.layout().segments()[seg].offset;
        let theta = params.segment(seg);
        for f in 0..rows {
            let r = off + f * cols..off + (f + 1) * cols;
            let t_norm = theta[f * cols..(f + 1) * cols].iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let d = &mut raw[r.clone()];
            if let Some(o) = other {
                let o = &o[r.clone()];
                let oo: f64 = o.iter().map(|x| x * x).sum();
                if oo > 0.0 {
                    let c = d.iter().zip(o).map(|(a, b)| a * b).sum::<f64>() / oo;
                    d.iter_mut().zip(o).for_each(|(a, b)| *a -= c * b);
                }
            }
            let d_norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if t_norm == 0.0 || d_norm == 0.0 {
                d.iter_mut().for_each(|x| *x = 0.0);
                if t_norm == 0.0 {
                    dead += 1;
                }
                continue;
            }
            d.iter_mut().for_each(|x| *x *= t_norm / d_norm);
            keep[r].iter_mut().for_each(|k| *k = true);
        }
    }
    for (x, k) in raw.iter_mut().zip(keep) {
        if !k {
            *x = 0.0;
        }
    }
    if dead > 0 {
        log::warn!("{} dead filters: their direction slices are zero", dead);
    }
    dead
}

fn finish(params: &ParamVector, v: Vec<f64>, kind: DirectionKind, dead: usize) -> Result<Direction> {
    let vector = params.with_values(v.iter().map(|&x| x as f32).collect())?;
    let norm = vector.norm();
    Ok(Direction { vector, kind, norm, dead_filters: dead })
}

/// A filter-normalized random direction.
pub fn random_direction(model: &Model, params: &ParamVector, seed: u64) -> Result<Direction> {
    let mut d = gaussian(params, seed, 0);
    let dead = normalize_filters(model, params, &mut d, None);
    finish(params, d, DirectionKind::Random { seed }, dead)
}

/// A pair of filter-normalized random directions, the second orthogonalized
/// against the first inside every filter, so `σᵀη = 0`.
pub fn random_pair(model: &Model, params: &ParamVector, seed: u64) -> Result<(Direction, Direction)> {
    let sigma = random_direction(model, params, seed)?;
    let s: Vec<f64> = sigma.vector.values().iter().map(|&x| x as f64).collect();
    let mut e = gaussian(params, seed, 1);
    let dead = normalize_filters(model, params, &mut e, Some(&s));
    let eta = finish(params, e, DirectionKind::Random { seed }, dead)?;
    Ok((sigma, eta))
}

pub fn eigen_direction(report: &HessianReport, index: usize) -> Result<Direction> {
    let v = report.eigenvector(index)?.clone();
    let norm = v.norm();
    Ok(Direction { vector: v, kind: DirectionKind::Eigen { index }, norm, dead_filters: 0 })
}

/// `ν_min + i·(ν_max − ν_min)/(N − 1)` for `i = 0..N`.
pub fn steps(nu_min: f64, nu_max: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::config(format!("a scan needs at least 2 steps, got {}", n)));
    }
    if !(nu_min < nu_max) {
        return Err(Error::config(format!("empty step range [{}, {}]", nu_min, nu_max)));
    }
    let range = nu_max - nu_min;
    Ok((0..n).map(|i| nu_min + (i as f64 * range) / (n - 1) as f64).collect())
}

/// `θ + ασ + βη`, computed in f64 per entry.
pub fn perturbed(params: &ParamVector, sigma: &ParamVector, alpha: f64, eta: Option<(&ParamVector, f64)>) -> ParamVector {
    let s = sigma.values();
    let values = params
        .values()
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut v = t as f64 + alpha * s[i] as f64;
            if let Some((e, beta)) = eta {
                v += beta * e.values()[i] as f64;
            }
            v as f32
        })
        .collect();
    params.with_values(values).expect("same layout")
}

pub fn params_hash(params: &ParamVector) -> String {
    let mut h = Sha256::new();
    for v in params.values() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `losses[i][j]` at `(alphas[i], betas[j])`; `None` marks a non-finite cell.
    pub losses: Vec<Vec<Option<f64>>>,
    pub sigma: DirectionKind,
    pub eta: Option<DirectionKind>,
    pub theta_hash: String,
}

impl LandscapeGrid {
    pub fn flagged(&self) -> usize {
        self.losses.iter().flatten().filter(|l| l.is_none()).count()
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("alpha,beta,loss\n");
        for (i, a) in self.alphas.iter().enumerate() {
            for (j, b) in self.betas.iter().enumerate() {
                match self.losses[i][j] {
                    Some(l) => s.push_str(&format!("{},{},{}\n", a, b, l)),
                    None => s.push_str(&format!("{},{},nan\n", a, b)),
                }
            }
        }
        s
    }

    /// The `β = 0` column (the only one for a 1D scan).
    pub fn profile(&self) -> Vec<Option<f64>> {
        let j = self.betas.iter().position(|&b| b == 0.0).unwrap_or(0);
        self.losses.iter().map(|row| row[j]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRange {
    pub nu_min: f64,
    pub nu_max: f64,
    pub steps: usize,
}

impl ScanRange {
    pub const DEFAULT_1D: ScanRange = ScanRange { nu_min: -1.0, nu_max: 1.0, steps: 41 };
    pub const DEFAULT_2D: ScanRange = ScanRange { nu_min: -1.0, nu_max: 1.0, steps: 21 };
}

/// Evaluates the loss on `split` over the grid. With `eta = None` the scan is
/// one-dimensional with `β = 0`.
pub fn scan(
    model: &Model,
    params: &ParamVector,
    split: &Split,
    sigma: &Direction,
    eta: Option<&Direction>,
    range: ScanRange,
    batch_size: usize,
) -> Result<LandscapeGrid> {
    if split.is_empty() {
        return Err(Error::config("cannot scan on an empty split"));
    }
    for d in std::iter::once(sigma).chain(eta) {
        if !d.vector.same_layout(params) {
            return Err(Error::config("direction layout does not match the parameters"));
        }
    }
    let alphas = steps(range.nu_min, range.nu_max, range.steps)?;
    let betas = match eta {
        Some(_) => alphas.clone(),
        None => vec![0.0],
    };
    let cells: Vec<(usize, usize)> = (0..alphas.len()).flat_map(|i| (0..betas.len()).map(move |j| (i, j))).collect();
    let values = cells
        .par_iter()
        .map(|&(i, j)| {
            let p = perturbed(params, &sigma.vector, alphas[i], eta.map(|e| (&e.vector, betas[j])));
            match evaluate(model, &p, split, batch_size) {
                Ok(l) if l.is_finite() => Ok(Some(l)),
                Ok(_) | Err(Error::Numeric(_)) => Ok(None),
                Err(Error::Autodiff(llab_autodiff::AdError::NonFinite { .. })) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut losses = vec![vec![None; betas.len()]; alphas.len()];
    for (&(i, j), v) in cells.iter().zip(values) {
        losses[i][j] = v;
    }
    let grid = LandscapeGrid {
        alphas,
        betas,
        losses,
        sigma: sigma.kind,
        eta: eta.map(|e| e.kind),
        theta_hash: params_hash(params),
    };
    if grid.flagged() > 0 {
        log::warn!("{} landscape cells produced non-finite losses", grid.flagged());
    }
    Ok(grid)
}
