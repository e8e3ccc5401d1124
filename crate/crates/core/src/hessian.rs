//! Curvature of the loss at a point: top eigenpairs by deflated power
//! iteration, Hutchinson trace estimation, and an explicit Hessian for small
//! parameter counts.

use llab_autodiff::{hvp, Objective, ParamVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{BatchObjective, Model};
use crate::rng;

pub const MAX_EIGENPAIRS: usize = 10;
pub const DENSE_LIMIT: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianConfig {
    pub k: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub probes: usize,
    pub seed: u64,
    /// Evaluation batch drawn from the test split.
    pub batch_size: usize,
}

impl Default for HessianConfig {
    fn default() -> Self {
        HessianConfig { k: 2, tol: 1e-4, max_iters: 100, probes: 100, seed: 0, batch_size: 256 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Eigenpairs {
    pub values: Vec<f64>,
    pub vectors: Vec<ParamVector>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub trace: f64,
    pub stderr: f64,
    pub probes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub eigenvalues: Vec<f64>,
    #[serde(skip)]
    pub eigenvectors: Vec<ParamVector>,
    pub trace: f64,
    pub stderr: f64,
    pub k: usize,
    pub probes: usize,
    pub batch_seed: u64,
    pub batch_size: usize,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
}

impl HessianReport {
    /// Eigenvector by 1-based rank.
    pub fn eigenvector(&self, index: usize) -> Result<&ParamVector> {
        if index == 0 || index > self.eigenvectors.len() {
            return Err(Error::config(format!(
                "eigenvector {} requested, report holds {}",
                index,
                self.eigenvectors.len()
            )));
        }
        Ok(&self.eigenvectors[index - 1])
    }
}

fn projected_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        for (x, y) in v.iter_mut().zip(b) {
            *x -= d * y;
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn to_f64(p: &ParamVector) -> Vec<f64> {
    p.values().iter().map(|&x| x as f64).collect()
}

fn apply<O: Objective + ?Sized>(obj: &O, params: &ParamVector, v: &[f64]) -> Result<Vec<f64>> {
    let dir = params.with_values(v.iter().map(|&x| x as f32).collect())?;
    let hv = hvp(obj, params, &dir)?;
    if hv.values().iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite Hessian-vector product".into()));
    }
    Ok(to_f64(&hv))
}

fn rayleigh<O: Objective + ?Sized>(obj: &O, params: &ParamVector, v: &[f64]) -> Result<f64> {
    let hv = apply(obj, params, v)?;
    Ok(v.iter().zip(&hv).map(|(a, b)| a * b).sum())
}

/// Flips the sign so that the largest-magnitude entry is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Power iteration on `v ↦ Hv` with Gram-Schmidt deflation against the pairs
/// already found. Stops when the Rayleigh quotient changes by less than
/// `tol` relative, or after `max_iters`.
pub fn top_eigenpairs<O: Objective + ?Sized>(
    obj: &O,
    params: &ParamVector,
    k: usize,
    tol: f64,
    max_iters: usize,
    seed: u64,
) -> Result<Eigenpairs> {
    if k == 0 || k > MAX_EIGENPAIRS {
        return Err(Error::config(format!("k must be in 1..={}, got {}", MAX_EIGENPAIRS, k)));
    }
    let n = params.len();
    if k > n {
        return Err(Error::config(format!("k = {} exceeds the parameter count {}", k, n)));
    }
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut out = Eigenpairs { values: vec![], vectors: vec![], iterations: vec![], converged: vec![] };
    for pair in 0..k {
        let mut r = rng::substream("hessian-power", seed, pair as u64);
        let mut v: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        projected_out(&mut v, &found);
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let mut prev: Option<f64> = None;
        let mut converged = false;
        let mut iters = 0;
        while iters < max_iters {
            iters += 1;
            let mut hv = apply(obj, params, &v)?;
            projected_out(&mut hv, &found);
            let lambda: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
            let nh = norm(&hv);
            if nh == 0.0 {
                converged = true;
                break;
            }
            v = hv.into_iter().map(|x| x / nh).collect();
            if let Some(p) = prev {
                if (lambda - p).abs() < tol * p.abs().max(1e-12) {
                    converged = true;
                    break;
                }
            }
            prev = Some(lambda);
        }
        if !converged {
            log::warn!("eigenpair {} did not converge within {} iterations", pair + 1, max_iters);
        }
        projected_out(&mut v, &found);
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        fix_sign(&mut v);
        let lambda = rayleigh(obj, params, &v)?;
        out.values.push(lambda);
        out.vectors.push(params.with_values(v.iter().map(|&x| x as f32).collect())?);
        out.iterations.push(iters);
        out.converged.push(converged);
        found.push(v);
    }
    Ok(out)
}

/// Mean of `zᵀHz` over Rademacher probes, each drawn from its own substream.
pub fn hutchinson_trace<O: Objective + ?Sized>(
    obj: &O,
    params: &ParamVector,
    probes: usize,
    seed: u64,
) -> Result<TraceEstimate> {
    if probes == 0 {
        return Err(Error::config("probes must be at least 1"));
    }
    let n = params.len();
    let samples = (0..probes)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::substream("hutchinson", seed, p as u64);
            let z: Vec<f64> = (0..n).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
            rayleigh(obj, params, &z)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = samples.iter().sum::<f64>() / probes as f64;
    let stderr = if probes > 1 {
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (probes - 1) as f64;
        (var / probes as f64).sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate { trace: mean, stderr, probes })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseHessian {
    pub n: usize,
    /// Row-major, symmetrized.
    pub data: Vec<f64>,
    pub max_asymmetry: f64,
}

impl DenseHessian {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }
}

/// Explicit Hessian, column `i` being `H eᵢ`.
pub fn dense_hessian<O: Objective + ?Sized>(obj: &O, params: &ParamVector) -> Result<DenseHessian> {
    let n = params.len();
    if n > DENSE_LIMIT {
        return Err(Error::config(format!("dense Hessian refused for {} parameters (limit {})", n, DENSE_LIMIT)));
    }
    let cols = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            apply(obj, params, &e)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = vec![0.0; n * n];
    let mut max_asymmetry = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let a = cols[j][i];
            let b = cols[i][j];
            max_asymmetry = max_asymmetry.max((a - b).abs());
            data[i * n + j] = 0.5 * (a + b);
        }
    }
    Ok(DenseHessian { n, data, max_asymmetry })
}

/// Seeded subset of `split` of at most `size` samples, in ascending order.
pub fn evaluation_batch(split: &Split, size: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..split.len()).collect();
    idx.shuffle(&mut rng::stream("hessian-batch", seed));
    idx.truncate(size.min(split.len()));
    idx.sort_unstable();
    split.select(&idx)
}

/// Eigenpairs and trace of `model` on the seeded evaluation batch.
pub fn analyze(model: &Model, params: &ParamVector, test: &Split, config: &HessianConfig) -> Result<HessianReport> {
    let batch = evaluation_batch(test, config.batch_size, config.seed);
    let obj = BatchObjective { model, batch: &batch };
    let eig = top_eigenpairs(&obj, params, config.k, config.tol, config.max_iters, config.seed)?;
    let tr = hutchinson_trace(&obj, params, config.probes, config.seed)?;
    Ok(HessianReport {
        eigenvalues: eig.values,
        eigenvectors: eig.vectors,
        trace: tr.trace,
        stderr: tr.stderr,
        k: config.k,
        probes: config.probes,
        batch_seed: config.seed,
        batch_size: batch.len(),
        iterations: eig.iterations,
        converged: eig.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use llab_autodiff::{Layout, Tape, Tensor, Var};
    use std::sync::Arc;

    /// `Σ aᵢ θᵢ²`, a diagonal quadratic with Hessian `2·diag(a)`.
    struct Diag {
        layout: Arc<Layout>,
        a: Vec<f32>,
    }

    impl Objective for Diag {
        fn layout(&self) -> &Arc<Layout> {
            &self.layout
        }

        fn record(&self, tape: &mut Tape, params: &[Var]) -> llab_autodiff::Result<Var> {
            let a = tape.constant(Tensor::vector(self.a.clone()))?;
            let sq = tape.mul(params[0], params[0])?;
            tape.dot(sq, a)
        }
    }

    fn diag(a: Vec<f32>) -> (Diag, ParamVector) {
        let layout = Arc::new(Layout::new([("theta", vec![a.len()])]));
        let p = ParamVector::from_values(layout.clone(), vec![0.1; a.len()]).unwrap();
        (Diag { layout, a }, p)
    }

    #[test]
    fn quadratic_eigenpairs() {
        let (obj, p) = diag(vec![2.0, 1.0]);
        let e = top_eigenpairs(&obj, &p, 2, 1e-6, 100, 0).unwrap();
        assert!((e.values[0] - 4.0).abs() < 1e-5);
        assert!((e.values[1] - 2.0).abs() < 1e-5);
        assert!((e.vectors[0].values()[0] - 1.0).abs() < 1e-5);
        assert!((e.vectors[1].values()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn identity_quadratic_trace_is_exact() {
        let (obj, p) = diag(vec![1.0; 7]);
        let t = hutchinson_trace(&obj, &p, 20, 3).unwrap();
        assert_eq!(t.trace, 14.0);
        assert_eq!(t.stderr, 0.0);
    }

    #[test]
    fn dense_hessian_of_quadratic() {
        let (obj, p) = diag(vec![2.0, 1.0, 0.5]);
        let h = dense_hessian(&obj, &p).unwrap();
        assert_eq!(h.data, vec![4.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(h.max_asymmetry, 0.0);
        assert_eq!(h.trace(), 7.0);
    }

    #[test]
    fn guards() {
        let (obj, p) = diag(vec![1.0; 600]);
        assert!(dense_hessian(&obj, &p).is_err());
        assert!(top_eigenpairs(&obj, &p, 0, 1e-4, 10, 0).is_err());
        assert!(top_eigenpairs(&obj, &p, 11, 1e-4, 10, 0).is_err());
        assert!(hutchinson_trace(&obj, &p, 0, 0).is_err());
    }

    #[test]
    fn sign_convention() {
        let mut v = vec![0.1, -0.9, 0.3];
        fix_sign(&mut v);
        assert_eq!(v, vec![-0.1, 0.9, -0.3]);
    }
}
