//! Bezier-curve mode connectivity between trained instances.

use std::sync::Arc;

use llab_autodiff::{AdError, Layout, Objective, ParamVector, Tape, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{evaluate, Model};
use crate::rng;
use crate::train::Optimizer;

pub const DEFAULT_POINTS: usize = 60;

#[derive(Clone, Debug, PartialEq)]
pub struct BezierCurve {
    /// `θ₀ … θ_k`; the first and last are the compared endpoints.
    pub anchors: Vec<ParamVector>,
    pub epochs: usize,
}

impl BezierCurve {
    pub fn new(anchors: Vec<ParamVector>) -> Result<Self> {
        if anchors.len() < 2 {
            return Err(Error::config("a curve needs at least two anchors"));
        }
        if anchors.iter().any(|a| !a.same_layout(&anchors[0])) {
            return Err(Error::config("curve anchors have different layouts"));
        }
        Ok(BezierCurve { anchors, epochs: 0 })
    }

    /// Anchors on the segment `θ′ + (j/k)(θ″ − θ′)`.
    pub fn linear(a: &ParamVector, b: &ParamVector, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("a curve needs k >= 1"));
        }
        if !a.same_layout(b) {
            return Err(Error::config("endpoints have different layouts"));
        }
        let mut anchors = vec![a.clone()];
        for j in 1..k {
            let f = j as f64 / k as f64;
            let v = a.values().iter().zip(b.values()).map(|(&x, &y)| (x as f64 + f * (y as f64 - x as f64)) as f32);
            anchors.push(a.with_values(v.collect())?);
        }
        anchors.push(b.clone());
        Ok(BezierCurve { anchors, epochs: 0 })
    }

    pub fn k(&self) -> usize {
        self.anchors.len() - 1
    }

    /// The same curve traversed from the other end.
    pub fn reversed(&self) -> BezierCurve {
        let mut anchors = self.anchors.clone();
        anchors.reverse();
        BezierCurve { anchors, epochs: self.epochs }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Bernstein weights `C(k, j)(1 − t)^(k−j) t^j`.
pub fn bernstein(k: usize, t: f64) -> Vec<f64> {
    (0..=k).map(|j| binomial(k, j) * (1.0 - t).powi((k - j) as i32) * t.powi(j as i32)).collect()
}

pub fn curve_point(curve: &BezierCurve, t: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(format!("curve parameter t = {} outside [0, 1]", t)));
    }
    let w = bernstein(curve.k(), t);
    let n = curve.anchors[0].len();
    let values = (0..n)
        .map(|i| curve.anchors.iter().zip(&w).map(|(a, wj)| wj * a.values()[i] as f64).sum::<f64>() as f32)
        .collect();
    Ok(curve.anchors[0].with_values(values)?)
}

/// A loss that can be minimized along a curve in minibatches.
pub trait CurveLoss: Sync {
    fn layout(&self) -> &Arc<Layout>;

    fn batches(&self, epoch: usize) -> usize;

    /// Records the loss of minibatch `batch` of `epoch` at the given leaves.
    fn record(&self, tape: &mut Tape, params: &[Var], epoch: usize, batch: usize) -> llab_autodiff::Result<Var>;

    /// Full evaluation loss.
    fn eval(&self, params: &ParamVector) -> Result<f64>;
}

/// Any objective as a single full-batch curve loss.
pub struct FullBatch<'a, O: Objective + ?Sized>(pub &'a O);

impl<O: Objective + ?Sized> CurveLoss for FullBatch<'_, O> {
    fn layout(&self) -> &Arc<Layout> {
        self.0.layout()
    }

    fn batches(&self, _epoch: usize) -> usize {
        1
    }

    fn record(&self, tape: &mut Tape, params: &[Var], _epoch: usize, _batch: usize) -> llab_autodiff::Result<Var> {
        self.0.record(tape, params)
    }

    fn eval(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.0.value(params)?)
    }
}

/// Task loss of a model: shuffled minibatches of `train`, evaluation on `eval`.
pub struct ModelLoss<'a> {
    pub model: &'a Model,
    pub train: &'a Split,
    pub eval: &'a Split,
    pub batch_size: usize,
    pub seed: u64,
}

impl ModelLoss<'_> {
    fn batch(&self, epoch: usize, batch: usize) -> Split {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng::substream("bend-shuffle", self.seed, epoch as u64));
        let bs = self.batch_size.max(1);
        let end = ((batch + 1) * bs).min(order.len());
        self.train.select(&order[batch * bs..end])
    }
}

impl CurveLoss for ModelLoss<'_> {
    fn layout(&self) -> &Arc<Layout> {
        self.model.layout()
    }

    fn batches(&self, _epoch: usize) -> usize {
        self.train.len().div_ceil(self.batch_size.max(1))
    }

    fn record(&self, tape: &mut Tape, params: &[Var], epoch: usize, batch: usize) -> llab_autodiff::Result<Var> {
        let b = self.batch(epoch, batch);
        let obj = crate::model::BatchObjective { model: self.model, batch: &b };
        obj.record(tape, params)
    }

    fn eval(&self, params: &ParamVector) -> Result<f64> {
        evaluate(self.model, params, self.eval, self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BendConfig {
    pub k: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for BendConfig {
    fn default() -> Self {
        BendConfig { k: 2, epochs: 30, learning_rate: 1e-3, optimizer: Optimizer::Adam, seed: 0 }
    }
}

/// Builds the linear-interpolation curve and trains its interior anchors on
/// the expected loss along the curve, one uniform `t` per step.
pub fn train_bends<L: CurveLoss + ?Sized>(
    a: &ParamVector,
    b: &ParamVector,
    loss: &L,
    config: &BendConfig,
) -> Result<BezierCurve> {
    if a.layout().as_ref() != loss.layout().as_ref() {
        return Err(Error::config("endpoints do not match the loss layout"));
    }
    let mut curve = BezierCurve::linear(a, b, config.k)?;
    let k = config.k;
    if k < 2 || config.epochs == 0 {
        curve.epochs = config.epochs;
        return Ok(curve);
    }
    let n = a.len();
    let interior = k - 1;
    let mut m = vec![0.0f64; interior * n];
    let mut v = vec![0.0f64; interior * n];
    let mut t_step = 0i32;
    let mut tr = rng::stream("bend-t", config.seed);
    for epoch in 0..config.epochs {
        for batch in 0..loss.batches(epoch) {
            let t: f64 = tr.random_range(0.0..1.0);
            let point = curve_point(&curve, t)?;
            let mut tape = Tape::new();
            let vars = llab_autodiff::record_params(&mut tape, &point)?;
            let l = loss.record(&mut tape, &vars, epoch, batch)?;
            let grads = match tape.gradient(l, &vars) {
                Ok(g) => g,
                Err(e @ AdError::NonFinite { .. }) => {
                    return Err(Error::Numeric(format!("bend training diverged at epoch {}: {}", epoch, e)))
                }
                Err(e) => return Err(e.into()),
            };
            let g = ParamVector::flatten(a.layout().clone(), &grads)?;
            let w = bernstein(k, t);
            t_step += 1;
            for j in 1..k {
                let anchor = curve.anchors[j].values_mut();
                let base = (j - 1) * n;
                for i in 0..n {
                    let gi = w[j] * g.values()[i] as f64;
                    let update = match config.optimizer {
                        Optimizer::Sgd => config.learning_rate * gi,
                        Optimizer::Adam => {
                            m[base + i] = 0.9 * m[base + i] + 0.1 * gi;
                            v[base + i] = 0.999 * v[base + i] + 0.001 * gi * gi;
                            let mh = m[base + i] / (1.0 - 0.9f64.powi(t_step));
                            let vh = v[base + i] / (1.0 - 0.999f64.powi(t_step));
                            config.learning_rate * mh / (vh.sqrt() + 1e-8)
                        }
                    };
                    anchor[i] = (anchor[i] as f64 - update) as f32;
                }
                if anchor.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!("bend training diverged at epoch {}", epoch)));
                }
            }
        }
    }
    curve.epochs = config.epochs;
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    BetterMinima,
    Barrier,
    WellConnected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeConnectivityReport {
    pub t_values: Vec<f64>,
    pub curve_losses: Vec<f64>,
    pub d_values: Vec<f64>,
    pub mc: f64,
    pub t_star: f64,
    pub classification: Connectivity,
    pub endpoint_losses: [f64; 2],
    pub epsilon: f64,
}

impl ModeConnectivityReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("t,loss,d\n");
        for ((t, l), d) in self.t_values.iter().zip(&self.curve_losses).zip(&self.d_values) {
            s.push_str(&format!("{},{},{}\n", t, l, d));
        }
        s
    }
}

/// `tᵢ = i/(m − 1)`.
pub fn sample_grid(m: usize) -> Result<Vec<f64>> {
    if m <= 2 {
        return Err(Error::config(format!("mode connectivity needs m > 2 samples, got {}", m)));
    }
    Ok((0..m).map(|i| i as f64 / (m - 1) as f64).collect())
}

/// Default threshold `0.05 · ½(L(θ′) + L(θ″))`.
pub fn default_epsilon(endpoint_losses: [f64; 2]) -> f64 {
    0.05 * 0.5 * (endpoint_losses[0] + endpoint_losses[1])
}

/// Deviation statistics from precomputed losses. `d(t) = ½(L′ + L″) − L(t)`
/// and `mc = d(t*)` with `t*` the first maximizer of `|d|`.
pub fn from_losses(
    endpoint_losses: [f64; 2],
    t_values: Vec<f64>,
    curve_losses: Vec<f64>,
    epsilon: Option<f64>,
) -> Result<ModeConnectivityReport> {
    if t_values.len() != curve_losses.len() || t_values.is_empty() {
        return Err(Error::config("t values and curve losses must be non-empty and the same length"));
    }
    let avg = 0.5 * (endpoint_losses[0] + endpoint_losses[1]);
    let d_values: Vec<f64> = curve_losses.iter().map(|l| avg - l).collect();
    let mut star = 0;
    for (i, d) in d_values.iter().enumerate() {
        if d.abs() > d_values[star].abs() {
            star = i;
        }
    }
    let mc = d_values[star];
    let epsilon = epsilon.unwrap_or_else(|| default_epsilon(endpoint_losses));
    let classification = if mc > epsilon {
        Connectivity::BetterMinima
    } else if mc < -epsilon {
        Connectivity::Barrier
    } else {
        Connectivity::WellConnected
    };
    Ok(ModeConnectivityReport {
        t_star: t_values[star],
        t_values,
        curve_losses,
        d_values,
        mc,
        classification,
        endpoint_losses,
        epsilon,
    })
}

/// Losses at `tᵢ = i/(m − 1)` along the curve.
pub fn curve_losses<L: CurveLoss + ?Sized>(curve: &BezierCurve, loss: &L, m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let ts = sample_grid(m)?;
    let losses = ts
        .par_iter()
        .map(|&t| loss.eval(&curve_point(curve, t)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok((ts, losses))
}

pub fn mode_connectivity<L: CurveLoss + ?Sized>(
    curve: &BezierCurve,
    loss: &L,
    m: usize,
    epsilon: Option<f64>,
) -> Result<ModeConnectivityReport> {
    let (ts, losses) = curve_losses(curve, loss, m)?;
    let endpoints = [loss.eval(&curve.anchors[0])?, loss.eval(curve.anchors.last().unwrap())?];
    from_losses(endpoints, ts, losses, epsilon)
}

/// The sub-arc statistic of one pair of sampled configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMc {
    pub t_a: f64,
    pub t_b: f64,
    pub mc: f64,
}

/// Over every pair `a < b` of sampled points, `mc` of the sub-arc between
/// them: endpoint average `½(L_a + L_b)` against the samples in `[t_a, t_b]`.
/// Returns the pair whose `mc` has the largest magnitude, sign kept.
pub fn max_mc_of_samples(t_values: &[f64], losses: &[f64]) -> Result<PairMc> {
    if t_values.len() != losses.len() || t_values.len() < 2 {
        return Err(Error::config("need at least two sampled configurations"));
    }
    let mut best = PairMc { t_a: t_values[0], t_b: t_values[1], mc: 0.0 };
    let mut best_abs = -1.0;
    for a in 0..losses.len() {
        for b in a + 1..losses.len() {
            let avg = 0.5 * (losses[a] + losses[b]);
            let mut mc = 0.0f64;
            for l in &losses[a..=b] {
                let d = avg - l;
                if d.abs() > mc.abs() {
                    mc = d;
                }
            }
            if mc.abs() > best_abs {
                best_abs = mc.abs();
                best = PairMc { t_a: t_values[a], t_b: t_values[b], mc };
            }
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePairReport {
    pub models: (usize, usize),
    pub report: ModeConnectivityReport,
    pub max_pair: PairMc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxMcReport {
    pub max_mc: f64,
    pub pairs: Vec<CurvePairReport>,
}

/// Trains one curve per pair of instances, samples `m` points on each, and
/// reports the strongest sub-arc deviation across all of them.
pub fn max_mc<L: CurveLoss + ?Sized>(
    models: &[ParamVector],
    loss: &L,
    config: &BendConfig,
    m: usize,
) -> Result<MaxMcReport> {
    if models.len() < 2 {
        return Err(Error::config(format!("max mc needs at least 2 models, got {}", models.len())));
    }
    let mut pairs = Vec::new();
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            let curve = train_bends(&models[i], &models[j], loss, config)?;
            let report = mode_connectivity(&curve, loss, m, None)?;
            let max_pair = max_mc_of_samples(&report.t_values, &report.curve_losses)?;
            pairs.push(CurvePairReport { models: (i, j), report, max_pair });
        }
    }
    let max_mc = pairs
        .iter()
        .map(|p| p.max_pair.mc)
        .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
    Ok(MaxMcReport { max_mc, pairs })
}
