//! Seeded quantization-aware training with optional penalties.

use llab_autodiff::{ParamVector, Tape};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::model::{self, Model, ECON_S, FUSION_S};
use crate::quant::{Quantization, MAX_BITS, MIN_BITS};
use crate::regularize::{self, Projections};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    Jacobian,
    Orthogonal,
}

impl Regularizer {
    pub const ALL: [Regularizer; 3] = [Regularizer::None, Regularizer::Jacobian, Regularizer::Orthogonal];

    pub fn label(self) -> &'static str {
        match self {
            Regularizer::None => "baseline",
            Regularizer::Jacobian => "jacobian",
            Regularizer::Orthogonal => "orthogonal",
        }
    }

    pub fn parse(s: &str) -> Option<Regularizer> {
        match s {
            "baseline" | "none" => Some(Regularizer::None),
            "jacobian" => Some(Regularizer::Jacobian),
            "orthogonal" => Some(Regularizer::Orthogonal),
            _ => None,
        }
    }

    /// Registered penalty weight for a benchmark model.
    pub fn default_delta(self, model: &str) -> f64 {
        match (self, model) {
            (Regularizer::None, _) => 0.0,
            (Regularizer::Jacobian, ECON_S) => 0.1,
            (Regularizer::Orthogonal, ECON_S) => 1e-5,
            (_, FUSION_S) => 1e-6,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub regularizer: Regularizer,
    pub delta: f64,
    /// Weight bit width; `None` trains in float.
    pub bits: Option<u32>,
    pub seed: u64,
    /// Random projections per step for the Jacobian penalty.
    pub nproj: usize,
}

impl TrainConfig {
    pub fn new(model: &str, regularizer: Regularizer, bits: Option<u32>, seed: u64) -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            regularizer,
            delta: regularizer.default_delta(model),
            bits,
            seed,
            nproj: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::config(format!("delta must be a finite non-negative number, got {}", self.delta)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.nproj == 0 {
            return Err(Error::config("nproj must be at least 1"));
        }
        if let Some(b) = self.bits {
            if !(MIN_BITS..=MAX_BITS).contains(&b) {
                return Err(Error::Range(format!("bit width {} outside [{}, {}]", b, MIN_BITS, MAX_BITS)));
            }
        }
        Ok(())
    }

    fn penalty_active(&self) -> bool {
        self.regularizer != Regularizer::None && self.delta > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    /// Graph with the frozen quantization of the final epoch boundary.
    pub model: Model,
    /// Latent float parameters; the effective weights are their fake-quantized values.
    pub params: ParamVector,
    pub history: Vec<EpochRecord>,
    pub config: TrainConfig,
    pub dataset: DatasetSpec,
}

impl TrainedModel {
    pub fn quantization(&self) -> Option<&Quantization> {
        self.model.quantization()
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,test_loss,penalty\n");
        for r in &self.history {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.test_loss, r.penalty));
        }
        s
    }
}

enum State {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

struct Stepper {
    lr: f64,
    state: State,
}

impl Stepper {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(opt: Optimizer, lr: f64, n: usize) -> Self {
        let state = match opt {
            Optimizer::Sgd => State::Sgd,
            Optimizer::Adam => State::Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 },
        };
        Stepper { lr, state }
    }

    fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        match &mut self.state {
            State::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p = (*p as f64 - self.lr * *g as f64) as f32;
                }
            }
            State::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - Self::BETA1.powi(*t);
                let c2 = 1.0 - Self::BETA2.powi(*t);
                for i in 0..params.len() {
                    let g = grad[i] as f64;
                    m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g;
                    v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g * g;
                    let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                    params[i] = (params[i] as f64 - update) as f32;
                }
            }
        }
    }
}

/// One training objective evaluation: `(task loss, penalty, ∇ total)`.
fn step_gradient(
    model: &Model,
    params: &ParamVector,
    batch: &Split,
    config: &TrainConfig,
    step: u64,
) -> Result<(f64, f64, ParamVector)> {
    let mut rec = model::forward(model, params, batch)?;
    let task = rec.loss() as f64;
    if !config.penalty_active() {
        return Ok((task, 0.0, rec.gradient()?));
    }
    let tape: &mut Tape = &mut rec.rec.tape;
    let pen = match config.regularizer {
        Regularizer::Jacobian => {
            let mode = Projections::Random { nproj: config.nproj };
            let (proj, factor) =
                regularize::projection_set(mode, batch.len(), model.output_dim(), config.seed, step)?;
            regularize::record_jacobian(tape, rec.input, rec.output, proj, factor)?
        }
        Regularizer::Orthogonal => regularize::record_orthogonal(tape, model, &rec.rec.params)?,
        Regularizer::None => unreachable!(),
    };
    let weighted = tape.scale(pen, config.delta as f32)?;
    let total = tape.add(rec.rec.loss, weighted)?;
    let penalty = tape.value(pen).item() as f64;
    let grads = tape.gradient(total, &rec.rec.params)?;
    Ok((task, penalty, ParamVector::flatten(model.layout().clone(), &grads)?))
}

fn calibrated(model: &Model, params: &ParamVector, bits: Option<u32>) -> Result<Model> {
    match bits {
        Some(b) => Ok(model.with_quantization(Some(Quantization::calibrate(model, params, b)?))),
        None => Ok(model.with_quantization(None)),
    }
}

/// Trains `init` on `data.train`. Scales are calibrated before the first
/// epoch and at every epoch boundary; the returned model carries the last
/// calibration.
pub fn train(model: &Model, init: ParamVector, data: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let mut params = init;
    let mut current = calibrated(model, &params, config.bits)?;
    let mut stepper = Stepper::new(config.optimizer, config.learning_rate, params.len());
    let mut history = Vec::with_capacity(config.epochs);
    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    let snapshot = |m: &Model, p: &ParamVector, h: &Vec<EpochRecord>| TrainedModel {
        model: m.clone(),
        params: p.clone(),
        history: h.clone(),
        config: config.clone(),
        dataset: data.spec,
    };
    for epoch in 0..config.epochs {
        let last_good = (current.clone(), params.clone());
        let diverged = |reason: String, h: &Vec<EpochRecord>| Error::Diverged {
            epoch,
            reason,
            last_good: Box::new(snapshot(&last_good.0, &last_good.1, h)),
        };
        order.sort_unstable();
        order.shuffle(&mut rng::substream("shuffle", config.seed, epoch as u64));
        let mut pen_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = data.train.select(chunk);
            let (task, pen, grad) = match step_gradient(&current, &params, &batch, config, step) {
                Ok(v) => v,
                Err(Error::Autodiff(e @ llab_autodiff::AdError::NonFinite { .. })) => {
                    return Err(diverged(e.to_string(), &history))
                }
                Err(Error::Numeric(m)) => return Err(diverged(m, &history)),
                Err(e) => return Err(e),
            };
            if !task.is_finite() || !pen.is_finite() || grad.values().iter().any(|g| !g.is_finite()) {
                return Err(diverged(format!("non-finite loss at step {}", step), &history));
            }
            stepper.step(params.values_mut(), grad.values());
            if params.values().iter().any(|p| !p.is_finite()) {
                return Err(diverged(format!("non-finite parameters after step {}", step), &history));
            }
            pen_sum += pen;
            batches += 1;
            step += 1;
        }
        current = calibrated(model, &params, config.bits)?;
        let eval = |split: &Split| model::evaluate(&current, &params, split, config.batch_size);
        let (train_loss, test_loss) = match (eval(&data.train), eval(&data.test)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(Error::Numeric(m)), _) | (_, Err(Error::Numeric(m))) => return Err(diverged(m, &history)),
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let penalty = if config.penalty_active() { pen_sum / batches as f64 } else { 0.0 };
        log::debug!("epoch {} train {:.6e} test {:.6e} penalty {:.6e}", epoch, train_loss, test_loss, penalty);
        history.push(EpochRecord { epoch, train_loss, test_loss, penalty });
    }
    Ok(snapshot(&current, &params, &history))
}
