//! Linear CKA between the output representations of trained instances.

use llab_autodiff::ParamVector;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt_split, NoiseSpec};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng;

pub const DEFAULT_SAMPLES: usize = 10;

/// Model outputs on `m` shared samples, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub sample_ids: Vec<usize>,
    pub noise: Option<NoiseSpec>,
}

impl OutputMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!("{} values do not fill a {}×{} matrix", data.len(), rows, cols)));
        }
        Ok(OutputMatrix { rows, cols, data, sample_ids: (0..rows).collect(), noise: None })
    }
}

/// Doubly centered Gram matrix `H X Xᵀ H`, row-major `m × m`.
fn centered_gram(x: &OutputMatrix) -> Vec<f64> {
    let m = x.rows;
    let d = x.cols;
    let mut k = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let v: f64 = (0..d).map(|c| x.data[i * d + c] * x.data[j * d + c]).sum();
            k[i * m + j] = v;
            k[j * m + i] = v;
        }
    }
    let row_means: Vec<f64> = (0..m).map(|i| k[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64).collect();
    let total = row_means.iter().sum::<f64>() / m as f64;
    for i in 0..m {
        for j in 0..m {
            k[i * m + j] += total - row_means[i] - row_means[j];
        }
    }
    k
}

fn gram_scale(x: &OutputMatrix) -> f64 {
    x.data.iter().map(|v| v * v).sum::<f64>()
}

fn check_pair(x: &OutputMatrix, y: &OutputMatrix) -> Result<()> {
    if x.rows != y.rows {
        return Err(Error::config(format!("sample counts differ: {} vs {}", x.rows, y.rows)));
    }
    if x.rows < 2 {
        return Err(Error::config(format!("cov needs at least 2 samples, got {}", x.rows)));
    }
    Ok(())
}

/// `tr(XXᵀ H YYᵀ H) / (m − 1)²`.
pub fn cov(x: &OutputMatrix, y: &OutputMatrix) -> Result<f64> {
    check_pair(x, y)?;
    Ok(cov_centered(&centered_gram(x), &centered_gram(y), x.rows))
}

fn cov_centered(kx: &[f64], ky: &[f64], m: usize) -> f64 {
    let s: f64 = kx.iter().zip(ky).map(|(a, b)| a * b).sum();
    s / ((m - 1) * (m - 1)) as f64
}

/// `cov(F, F′) / √(cov(F, F) cov(F′, F′))`; `None` when either side has
/// constant outputs.
pub fn cka(x: &OutputMatrix, y: &OutputMatrix) -> Result<Option<f64>> {
    check_pair(x, y)?;
    let (kx, ky) = (centered_gram(x), centered_gram(y));
    let m = x.rows;
    let sxx = cov_centered(&kx, &kx, m);
    let syy = cov_centered(&ky, &ky, m);
    // Centering a constant matrix leaves only rounding noise, relative to the
    // raw Gram energy.
    let tiny = |s: f64, raw: f64| s <= 1e-24 * (raw * raw) / ((m - 1) * (m - 1)) as f64 || s == 0.0;
    if tiny(sxx, gram_scale(x)) || tiny(syy, gram_scale(y)) {
        return Ok(None);
    }
    Ok(Some(cov_centered(&kx, &ky, m) / (sxx * syy).sqrt()))
}

/// Sorted ids of `m` samples drawn without replacement from `n`.
pub fn sample_ids(n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m < 2 || m > n {
        return Err(Error::config(format!("cannot pick {} samples from a split of {}", m, n)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream("cka-samples", seed));
    let mut ids = idx[..m].to_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Outputs of `model` on the chosen samples, optionally corrupted first.
pub fn output_matrix(
    model: &Model,
    params: &ParamVector,
    split: &Split,
    ids: &[usize],
    noise: Option<&NoiseSpec>,
) -> Result<OutputMatrix> {
    let mut batch = split.select(ids);
    if let Some(n) = noise {
        batch = corrupt_split(&batch, n)?;
    }
    let out = model.predict(params, &batch.inputs)?;
    Ok(OutputMatrix {
        rows: ids.len(),
        cols: model.output_dim(),
        data: out.data().iter().map(|&v| v as f64).collect(),
        sample_ids: ids.to_vec(),
        noise: noise.cloned(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub m: usize,
    pub noise: Option<NoiseSpec>,
    pub pairwise: Vec<Vec<Option<f64>>>,
    /// Mean of the defined entries of the strict upper triangle.
    pub mean_offdiag: Option<f64>,
}

pub fn cka_matrix(outputs: &[OutputMatrix]) -> Result<CkaMatrix> {
    if outputs.len() < 2 {
        return Err(Error::config(format!("CKA needs at least 2 models, got {}", outputs.len())));
    }
    let n = outputs.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let vals = pairs.par_iter().map(|&(i, j)| cka(&outputs[i], &outputs[j])).collect::<Result<Vec<_>>>()?;
    let mut pairwise = vec![vec![None; n]; n];
    let (mut sum, mut count) = (0.0, 0usize);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        pairwise[i][j] = v;
        pairwise[j][i] = v;
        if i != j {
            if let Some(v) = v {
                sum += v;
                count += 1;
            }
        }
    }
    Ok(CkaMatrix {
        m: outputs[0].rows,
        noise: outputs[0].noise.clone(),
        pairwise,
        mean_offdiag: (count > 0).then(|| sum / count as f64),
    })
}

/// Pairwise CKA of `models` on `m` seeded test samples.
pub fn cka_grid(
    models: &[(&Model, &ParamVector)],
    split: &Split,
    m: usize,
    noise: Option<&NoiseSpec>,
    seed: u64,
) -> Result<CkaMatrix> {
    if models.len() < 2 {
        return Err(Error::config(format!("CKA needs at least 2 models, got {}", models.len())));
    }
    let ids = sample_ids(split.len(), m, seed)?;
    let outputs = models
        .par_iter()
        .map(|(model, params)| output_matrix(model, params, split, &ids, noise))
        .collect::<Result<Vec<_>>>()?;
    cka_matrix(&outputs)
}
