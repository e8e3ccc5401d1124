//! Experiment configuration read from a TOML file.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected so typos surface as configuration errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use llab_core::data::Task;
use llab_core::model::{ModelSpec, ECON_S};
use llab_core::quant::{MAX_BITS, MIN_BITS};
use llab_core::train::{Optimizer, Regularizer, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const OUT_ENV: &str = "LLAB_OUT";
pub const DEFAULT_OUT: &str = "llab-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: String,
    pub bits: Vec<u32>,
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    /// Penalty weight per variant; absent variants use the registered default.
    pub delta: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub train: TrainSection,
    pub hessian: HessianSection,
    pub landscape: LandscapeSection,
    pub cka: CkaSection,
    pub modeconn: ModeconnSection,
    pub corruption: CorruptionSection,
    pub metrics: MetricsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub nproj: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HessianSection {
    pub k: usize,
    pub probes: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeSection {
    pub nu_min: f64,
    pub nu_max: f64,
    pub steps: usize,
    pub two_d: bool,
    pub steps_2d: usize,
    pub seed: u64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CkaSection {
    pub samples: usize,
    /// Extra sample counts reported alongside the main matrix.
    pub sample_sweep: Vec<usize>,
    /// Gaussian input-noise levels (absolute σ) for noisy CKA matrices.
    pub noise_sigmas: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeconnSection {
    pub bends: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub points: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSection {
    pub gaussian_percents: Vec<f64>,
    pub salt_pepper: Vec<f64>,
    pub fkeras_counts: Vec<usize>,
    pub random_counts: Vec<usize>,
    pub k_eigs: usize,
    pub seed: u64,
    pub batch_size: usize,
}

/// Which analyses `sweep` runs after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub hessian: bool,
    pub landscape: bool,
    pub cka: bool,
    pub modeconn: bool,
    pub corruption: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ECON_S.into(),
            bits: (MIN_BITS..=MAX_BITS).collect(),
            variants: Regularizer::ALL.iter().map(|r| r.label().to_string()).collect(),
            seeds: vec![0, 1, 2],
            delta: BTreeMap::new(),
            out: None,
            data: DataSection::default(),
            train: TrainSection::default(),
            hessian: HessianSection::default(),
            landscape: LandscapeSection::default(),
            cka: CkaSection::default(),
            modeconn: ModeconnSection::default(),
            corruption: CorruptionSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { size: 1000, seed: 0 }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { epochs: 100, batch_size: 32, learning_rate: 1e-3, optimizer: Optimizer::Adam, nproj: 1 }
    }
}

impl Default for HessianSection {
    fn default() -> Self {
        HessianSection { k: 4, probes: 100, tol: 1e-4, max_iters: 100, batch_size: 256, seed: 0 }
    }
}

impl Default for LandscapeSection {
    fn default() -> Self {
        LandscapeSection { nu_min: -1.0, nu_max: 1.0, steps: 41, two_d: false, steps_2d: 21, seed: 0, batch_size: 256 }
    }
}

impl Default for CkaSection {
    fn default() -> Self {
        CkaSection { samples: llab_core::cka::DEFAULT_SAMPLES, sample_sweep: Vec::new(), noise_sigmas: Vec::new(), seed: 0 }
    }
}

impl Default for ModeconnSection {
    fn default() -> Self {
        ModeconnSection {
            bends: 2,
            epochs: 30,
            learning_rate: 1e-3,
            points: llab_core::modeconn::DEFAULT_POINTS,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl Default for CorruptionSection {
    fn default() -> Self {
        CorruptionSection {
            gaussian_percents: vec![0.0, 5.0, 10.0, 20.0, 30.0],
            salt_pepper: vec![0.0, 0.01, 0.05, 0.1, 0.2],
            fkeras_counts: vec![0, 1, 2, 5, 10],
            random_counts: vec![0, 1, 2, 5, 10],
            k_eigs: 4,
            seed: 0,
            batch_size: 256,
        }
    }
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { hessian: true, landscape: true, cka: true, modeconn: true, corruption: true }
    }
}

/// Command-line narrowing of the configured grid.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub bits: Option<Vec<u32>>,
    pub variants: Option<Vec<String>>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
}

/// One cell of the training grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Run {
    pub bits: u32,
    pub variant: Regularizer,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(b) = &o.bits {
            self.bits = b.clone();
        }
        if let Some(v) = &o.variants {
            self.variants = v.clone();
        }
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if ModelSpec::registered(&self.model).is_none() {
            return Err(CliError::config(format!(
                "unknown model '{}', registered: {}",
                self.model,
                ModelSpec::registered_names().join(", ")
            )));
        }
        if self.bits.is_empty() || self.variants.is_empty() || self.seeds.is_empty() {
            return Err(CliError::config("bits, variants and seeds must be non-empty"));
        }
        for &b in &self.bits {
            if !(MIN_BITS..=MAX_BITS).contains(&b) {
                return Err(CliError::config(format!("bit width {} outside [{}, {}]", b, MIN_BITS, MAX_BITS)));
            }
        }
        for v in self.variants.iter().chain(self.delta.keys()) {
            if Regularizer::parse(v).is_none() {
                return Err(CliError::config(format!("unknown variant '{}'", v)));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.seeds.iter().all(|s| seen.insert(*s)) {
            return Err(CliError::config("seeds must be distinct"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.bits.iter().all(|b| seen.insert(*b)) {
            return Err(CliError::config("bit widths must be distinct"));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.variants.iter().all(|v| seen.insert(variant(v).unwrap())) {
            return Err(CliError::config("variants must be distinct"));
        }
        for (b, v) in self.delta.iter() {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(CliError::config(format!("delta for {} must be finite and non-negative", b)));
            }
        }
        let mut probe = TrainConfig::new(&self.model, Regularizer::None, Some(self.bits[0]), 0);
        self.fill_train(&mut probe);
        probe.validate()?;
        if self.hessian.k == 0 || self.hessian.probes == 0 {
            return Err(CliError::config("hessian.k and hessian.probes must be positive"));
        }
        if self.cka.samples < 2 || self.cka.sample_sweep.iter().any(|&m| m < 2) {
            return Err(CliError::config("CKA needs at least 2 samples"));
        }
        if self.modeconn.points < 3 || self.modeconn.bends == 0 {
            return Err(CliError::config("modeconn needs at least 3 points and 1 bend"));
        }
        Ok(())
    }

    fn fill_train(&self, c: &mut TrainConfig) {
        c.epochs = self.train.epochs;
        c.batch_size = self.train.batch_size;
        c.learning_rate = self.train.learning_rate;
        c.optimizer = self.train.optimizer;
        c.nproj = self.train.nproj;
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec::registered(&self.model).expect("validated model")
    }

    pub fn task(&self) -> Task {
        task_for(&self.spec())
    }

    /// Every `(bits, variant, seed)` in grid order.
    pub fn runs(&self) -> Vec<Run> {
        let mut out = Vec::new();
        for v in &self.variants {
            for &b in &self.bits {
                for &s in &self.seeds {
                    out.push(Run { bits: b, variant: variant(v).unwrap(), seed: s });
                }
            }
        }
        out
    }

    pub fn variant_list(&self) -> Vec<Regularizer> {
        self.variants.iter().map(|v| variant(v).unwrap()).collect()
    }

    pub fn train_config(&self, run: &Run) -> TrainConfig {
        let mut c = TrainConfig::new(&self.model, run.variant, Some(run.bits), run.seed);
        self.fill_train(&mut c);
        let key = self.delta.keys().find(|k| variant(k) == Some(run.variant));
        if let Some(k) = key {
            c.delta = self.delta[k];
        }
        c
    }

    /// Flag, then config file, then `LLAB_OUT`, then the built-in default.
    pub fn out_dir(&self) -> PathBuf {
        if let Some(o) = &self.out {
            return o.clone();
        }
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(DEFAULT_OUT),
        }
    }

    /// Hash of the effective configuration, output location excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Reduced grid for smoke runs: three bit widths, small data, few epochs.
    pub fn quick(mut self) -> Self {
        self.bits = vec![4, 8, 12];
        self.data.size = self.data.size.min(300);
        self.train.epochs = self.train.epochs.min(10);
        self.hessian.probes = self.hessian.probes.min(20);
        self.hessian.k = self.hessian.k.min(2);
        self.landscape.steps = self.landscape.steps.min(21);
        self.modeconn.epochs = self.modeconn.epochs.min(5);
        self.modeconn.points = self.modeconn.points.min(20);
        self
    }
}

pub fn variant(s: &str) -> Option<Regularizer> {
    Regularizer::parse(s)
}

/// Vector-output models reconstruct their input; the others regress.
pub fn task_for(spec: &ModelSpec) -> Task {
    let numel: usize = spec.input_shape.iter().product();
    if spec.output_dim == numel {
        Task::Autoencode
    } else {
        Task::Regress
    }
}
