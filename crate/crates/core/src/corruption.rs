//! Input noise, single-bit upsets in quantized weight codes, Hessian-weighted
//! bit ranking, and robustness sweeps over those stressors.

use std::collections::HashSet;

use llab_autodiff::{ParamVector, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::hessian::HessianReport;
use crate::model::{evaluate, Model};
use crate::quant::{QuantizedParams, StoredSegment};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    /// Additive `N(0, σ²)` per pixel, `σ` as a fraction of the `[0, 1]` range.
    Gaussian { sigma: f64 },
    /// Each pixel independently, with probability `p`, becomes 0 or 1.
    SaltPepper { p: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::Gaussian { sigma }, seed }
    }

    /// Gaussian noise of intensity `percent`% of the input range.
    pub fn gaussian_percent(percent: f64, seed: u64) -> Self {
        Self::gaussian(percent / 100.0, seed)
    }

    pub fn salt_pepper(p: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::SaltPepper { p }, seed }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            NoiseKind::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::Range(format!("noise sigma must be non-negative, got {}", sigma)))
            }
            NoiseKind::SaltPepper { p } if !(0.0..=1.0).contains(&p) => {
                Err(Error::Range(format!("salt-and-pepper probability must be in [0, 1], got {}", p)))
            }
            _ => Ok(()),
        }
    }
}

pub fn corrupt_tensor(x: &Tensor, spec: &NoiseSpec) -> Result<Tensor> {
    spec.validate()?;
    let mut r = rng::stream("noise", spec.seed);
    let data = match spec.kind {
        NoiseKind::Gaussian { sigma } if sigma == 0.0 => x.data().to_vec(),
        NoiseKind::Gaussian { sigma } => {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Range(e.to_string()))?;
            x.data().iter().map(|&v| (v as f64 + normal.sample(&mut r)).clamp(0.0, 1.0) as f32).collect()
        }
        NoiseKind::SaltPepper { p } => x
            .data()
            .iter()
            .map(|&v| {
                if r.random_bool(p) {
                    if r.random_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
            .collect(),
    };
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

/// Corrupts the inputs of a split; targets are untouched.
pub fn corrupt_split(split: &Split, spec: &NoiseSpec) -> Result<Split> {
    Ok(split.with_inputs(corrupt_tensor(&split.inputs, spec)?))
}

/// Alias matching the dataset-level operation.
pub fn corrupt_inputs(split: &Split, spec: &NoiseSpec) -> Result<Split> {
    corrupt_split(split, spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRanking {
    /// `H′ = Σᵢ λᵢ (vᵢ·θ) vᵢ`, one score per parameter.
    pub scores: Vec<f64>,
    /// Parameters by descending `|H′|`, then descending `|θ|`, then index.
    pub order: Vec<usize>,
    pub k: usize,
}

/// Scores the effective (dequantized) parameters of `model` using the top
/// `k` eigenpairs of `hessian`.
pub fn sensitivity_scores(
    model: &Model,
    params: &ParamVector,
    hessian: &HessianReport,
    k: usize,
) -> Result<SensitivityRanking> {
    if k == 0 || k > hessian.eigenvectors.len() {
        return Err(Error::config(format!(
            "sensitivity needs {} eigenpairs, report holds {}",
            k,
            hessian.eigenvectors.len()
        )));
    }
    let theta = match model.quantization() {
        Some(q) => q.apply(params),
        None => params.clone(),
    };
    let t: Vec<f64> = theta.values().iter().map(|&x| x as f64).collect();
    let mut scores = vec![0.0f64; t.len()];
    for i in 0..k {
        let v = hessian.eigenvectors[i].values();
        if v.len() != t.len() {
            return Err(Error::config("eigenvector length does not match the parameters"));
        }
        let proj: f64 = v.iter().zip(&t).map(|(a, b)| *a as f64 * b).sum();
        let c = hessian.eigenvalues[i] * proj;
        for (s, a) in scores.iter_mut().zip(v) {
            *s += c * *a as f64;
        }
    }
    let mut order: Vec<usize> = (0..t.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .abs()
            .total_cmp(&scores[a].abs())
            .then(t[b].abs().total_cmp(&t[a].abs()))
            .then(a.cmp(&b))
    });
    Ok(SensitivityRanking { scores, order, k })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum RankingMethod {
    Fkeras { k_eigs: usize },
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    /// `(flat parameter index, bit position)`, bit 0 being the LSB.
    pub targets: Vec<(usize, u32)>,
    pub method: RankingMethod,
    pub seed: u64,
}

/// Flat indices that fault plans may target: quantized weights, restricted
/// to the encoder when the model has one.
pub fn eligible_parameters(model: &Model) -> Vec<usize> {
    let Some(q) = model.quantization() else {
        return Vec::new();
    };
    let mut segs = model.encoder_segments();
    segs.retain(|&s| q.spec(s).is_some());
    segs.sort_unstable();
    segs.iter().flat_map(|&s| model.layout().segments()[s].range()).collect()
}

fn bits_of(model: &Model, index: usize) -> Option<u32> {
    let (seg, _) = model.layout().locate(index)?;
    model.quantization()?.spec(seg).map(|s| s.bits())
}

/// The first `n_bits` bits in ranking order, MSB to LSB within each
/// eligible parameter.
pub fn fkeras_plan(model: &Model, ranking: &SensitivityRanking, n_bits: usize) -> Result<FaultPlan> {
    let eligible: HashSet<usize> = eligible_parameters(model).into_iter().collect();
    if eligible.is_empty() {
        return Err(Error::Plan("model has no quantized parameters to target".into()));
    }
    let mut targets = Vec::with_capacity(n_bits);
    'outer: for &p in ranking.order.iter().filter(|p| eligible.contains(p)) {
        let b = bits_of(model, p).expect("eligible parameters are quantized");
        for bit in (0..b).rev() {
            if targets.len() == n_bits {
                break 'outer;
            }
            targets.push((p, bit));
        }
    }
    if targets.len() < n_bits {
        return Err(Error::Plan(format!("only {} bits available, {} requested", targets.len(), n_bits)));
    }
    Ok(FaultPlan { targets, method: RankingMethod::Fkeras { k_eigs: ranking.k }, seed: 0 })
}

/// `n_bits` distinct bits drawn uniformly from the eligible parameters.
pub fn random_plan(model: &Model, n_bits: usize, seed: u64) -> Result<FaultPlan> {
    let eligible = eligible_parameters(model);
    let slots: Vec<(usize, u32)> = eligible
        .iter()
        .flat_map(|&p| (0..bits_of(model, p).expect("quantized")).map(move |b| (p, b)))
        .collect();
    if n_bits > slots.len() {
        return Err(Error::Plan(format!("only {} bits available, {} requested", slots.len(), n_bits)));
    }
    let mut r = rng::stream("random-flips", seed);
    let picks = rand::seq::index::sample(&mut r, slots.len(), n_bits);
    Ok(FaultPlan { targets: picks.iter().map(|i| slots[i]).collect(), method: RankingMethod::Random, seed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub index: usize,
    pub bit: u32,
    pub old_code: i32,
    pub new_code: i32,
    pub delta: f64,
}

/// Flips `bit` of a `bits`-wide two's-complement code.
pub fn flip_code(code: i32, bit: u32, bits: u32) -> i32 {
    let mask = (1u32 << bits) - 1;
    let u = (code as u32 & mask) ^ (1u32 << bit);
    let shift = 32 - bits;
    ((u << shift) as i32) >> shift
}

/// Applies every target of `plan` to a copy of `qp`.
pub fn flip_bits(qp: &QuantizedParams, plan: &FaultPlan) -> Result<(QuantizedParams, Vec<FlipRecord>)> {
    let layout = qp.layout().clone();
    let mut seen = HashSet::new();
    let mut out = qp.clone();
    let mut records = Vec::with_capacity(plan.targets.len());
    for &(index, bit) in &plan.targets {
        if !seen.insert((index, bit)) {
            return Err(Error::Plan(format!("duplicate target ({}, {})", index, bit)));
        }
        let (seg, local) = layout
            .locate(index)
            .ok_or_else(|| Error::Plan(format!("parameter index {} out of range", index)))?;
        let StoredSegment::Quantized(q) = &mut out.segments_mut()[seg] else {
            return Err(Error::Plan(format!("segment {} is not quantized", layout.segments()[seg].name)));
        };
        let spec = q.spec();
        if bit >= spec.bits() {
            return Err(Error::Plan(format!("bit {} outside a {}-bit code", bit, spec.bits())));
        }
        let old = q.codes()[local] as i32;
        let new = flip_code(old, bit, spec.bits());
        q.codes_mut()[local] = new as i16;
        let delta = (new - old) as f64 * spec.scale() as f64;
        records.push(FlipRecord { index, bit, old_code: old, new_code: new, delta });
    }
    Ok((out, records))
}

/// Test loss of a quantized model after applying `plan`.
pub fn loss_after_flips(model: &Model, qp: &QuantizedParams, plan: &FaultPlan, split: &Split, batch: usize) -> Result<f64> {
    let (flipped, _) = flip_bits(qp, plan)?;
    evaluate(model, &flipped.to_params(), split, batch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stressor {
    /// Gaussian input noise, intensities in percent of the input range.
    Gaussian { percents: Vec<f64> },
    SaltPepper { probabilities: Vec<f64> },
    /// Cumulative top-ranked flips, counts of bits.
    FkerasFlips { counts: Vec<usize>, k_eigs: usize },
    RandomFlips { counts: Vec<usize> },
}

impl Stressor {
    pub fn label(&self) -> &'static str {
        match self {
            Stressor::Gaussian { .. } => "gaussian",
            Stressor::SaltPepper { .. } => "salt_pepper",
            Stressor::FkerasFlips { .. } => "fkeras",
            Stressor::RandomFlips { .. } => "random_flips",
        }
    }

    fn levels(&self) -> Vec<f64> {
        match self {
            Stressor::Gaussian { percents } => percents.clone(),
            Stressor::SaltPepper { probabilities } => probabilities.clone(),
            Stressor::FkerasFlips { counts, .. } | Stressor::RandomFlips { counts } => {
                counts.iter().map(|&c| c as f64).collect()
            }
        }
    }
}

/// One trained instance entering a sweep.
pub struct SweepEntry<'a> {
    pub bits: u32,
    pub variant: String,
    pub seed: u64,
    pub model: &'a Model,
    pub params: &'a ParamVector,
    pub hessian: Option<&'a HessianReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub bit_width: u32,
    pub variant: String,
    pub stressor_param: f64,
    pub mean_loss: f64,
    pub std_loss: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub stressor: Stressor,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessCurve {
    pub fn csv(&self) -> String {
        let mut s = String::from("bit_width,variant,stressor_param,mean_loss,std_loss,n_seeds\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.bit_width, r.variant, r.stressor_param, r.mean_loss, r.std_loss, r.n_seeds
            ));
        }
        s
    }
}

fn stressed_loss(entry: &SweepEntry, stressor: &Stressor, level: f64, test: &Split, batch: usize, seed: u64) -> Result<f64> {
    let noise_seed = seed ^ entry.seed.rotate_left(17);
    match stressor {
        Stressor::Gaussian { .. } => {
            let s = corrupt_split(test, &NoiseSpec::gaussian_percent(level, noise_seed))?;
            evaluate(entry.model, entry.params, &s, batch)
        }
        Stressor::SaltPepper { .. } => {
            let s = corrupt_split(test, &NoiseSpec::salt_pepper(level, noise_seed))?;
            evaluate(entry.model, entry.params, &s, batch)
        }
        Stressor::FkerasFlips { k_eigs, .. } => {
            let n = level as usize;
            if n == 0 {
                return evaluate(entry.model, entry.params, test, batch);
            }
            let quant = entry.model.quantization().ok_or_else(|| Error::Plan("bit flips need a quantized model".into()))?;
            let h = entry.hessian.ok_or_else(|| Error::config("ranked flips need a Hessian report"))?;
            let ranking = sensitivity_scores(entry.model, entry.params, h, (*k_eigs).min(h.eigenvectors.len()))?;
            let plan = fkeras_plan(entry.model, &ranking, n)?;
            loss_after_flips(entry.model, &QuantizedParams::new(entry.params, quant), &plan, test, batch)
        }
        Stressor::RandomFlips { .. } => {
            let n = level as usize;
            if n == 0 {
                return evaluate(entry.model, entry.params, test, batch);
            }
            let quant = entry.model.quantization().ok_or_else(|| Error::Plan("bit flips need a quantized model".into()))?;
            let plan = random_plan(entry.model, n, noise_seed)?;
            loss_after_flips(entry.model, &QuantizedParams::new(entry.params, quant), &plan, test, batch)
        }
    }
}

/// Mean and standard deviation over seeds of the stressed test loss, per
/// `(bit width, variant, level)`. Rows are ordered by bit width, variant
/// (first appearance) and level.
pub fn robustness_sweep(
    entries: &[SweepEntry],
    stressor: &Stressor,
    test: &Split,
    batch: usize,
    seed: u64,
) -> Result<RobustnessCurve> {
    let levels = stressor.levels();
    let cells: Vec<(usize, usize)> = (0..entries.len()).flat_map(|e| (0..levels.len()).map(move |l| (e, l))).collect();
    let losses = cells
        .par_iter()
        .map(|&(e, l)| stressed_loss(&entries[e], stressor, levels[l], test, batch, seed))
        .collect::<Result<Vec<f64>>>()?;
    let mut groups: Vec<(u32, String)> = Vec::new();
    for e in entries {
        if !groups.iter().any(|(b, v)| *b == e.bits && *v == e.variant) {
            groups.push((e.bits, e.variant.clone()));
        }
    }
    groups.sort_by_key(|(b, _)| *b);
    let mut rows = Vec::new();
    for (bits, variant) in groups {
        for (l, &level) in levels.iter().enumerate() {
            let vals: Vec<f64> = cells
                .iter()
                .zip(&losses)
                .filter(|((e, ll), _)| *ll == l && entries[*e].bits == bits && entries[*e].variant == variant)
                .map(|(_, &v)| v)
                .collect();
            let (mean, std) = mean_std(&vals);
            rows.push(RobustnessRow {
                bit_width: bits,
                variant: variant.clone(),
                stressor_param: level,
                mean_loss: mean,
                std_loss: std,
                n_seeds: vals.len(),
            });
        }
    }
    Ok(RobustnessCurve { stressor: stressor.clone(), rows })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
