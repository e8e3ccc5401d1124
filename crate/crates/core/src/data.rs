//! Seeded synthetic datasets for the two surrogate tasks.
//!
//! Sample `i` is drawn from its own substream, so a dataset of size `n` is a
//! prefix-stable function of `(task, seed)`.
//!
//! * autoencode: an 8×8 image with `K ~ U{1..4}` deposits. Each deposit lands
//!   on a uniform pixel with energy `U(0.1, 1)`; the image is then divided by
//!   its total energy. The target is the input.
//! * regress: a 16×16 plane wave
//!   `0.5 + 0.5·a·sin(2π·m·(j·cos φ + i·sin φ)/16 + ψ)` with amplitude
//!   `a ~ U(0, 1)`, mode `m ~ U{1, 2}`, direction `φ ~ U(0, 2π)` and phase
//!   `ψ ~ U(0, 2π)`, drawn in that order. The target is `a`.

use std::f64::consts::PI;

use llab_autodiff::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const AUTOENCODE_SIDE: usize = 8;
pub const REGRESS_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Autoencode,
    Regress,
}

impl Task {
    pub fn label(self) -> &'static str {
        match self {
            Task::Autoencode => "autoencode",
            Task::Regress => "regress",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "autoencode" => Some(Task::Autoencode),
            "regress" => Some(Task::Regress),
            _ => None,
        }
    }

    fn stream_label(self) -> &'static str {
        match self {
            Task::Autoencode => "data-autoencode",
            Task::Regress => "data-regress",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task: Task,
    pub size: usize,
    pub seed: u64,
}

/// Inputs and targets of one subset, sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Split {
    pub fn new(inputs: Tensor, targets: Tensor) -> Self {
        assert_eq!(inputs.shape().first(), targets.shape().first(), "split sample counts differ");
        Split { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, start: usize, end: usize) -> Split {
        Split { inputs: self.inputs.slice_rows(start, end), targets: self.targets.slice_rows(start, end) }
    }

    pub fn select(&self, rows: &[usize]) -> Split {
        Split { inputs: self.inputs.select_rows(rows), targets: self.targets.select_rows(rows) }
    }

    /// Same targets, replaced inputs.
    pub fn with_inputs(&self, inputs: Tensor) -> Split {
        Split::new(inputs, self.targets.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn test_size(size: usize) -> usize {
        (size / 5).max(1)
    }
}

/// Pixels and target of autoencode sample `index`.
pub fn autoencode_sample(seed: u64, index: u64) -> Vec<f32> {
    let mut r = rng::substream(Task::Autoencode.stream_label(), seed, index);
    let n = AUTOENCODE_SIDE * AUTOENCODE_SIDE;
    let mut img = vec![0.0f64; n];
    let k = r.random_range(1..=4usize);
    for _ in 0..k {
        let p = r.random_range(0..n);
        img[p] += r.random_range(0.1..1.0f64);
    }
    let total: f64 = img.iter().sum();
    img.into_iter().map(|v| (v / total) as f32).collect()
}

/// Pixels and amplitude of regress sample `index`.
pub fn regress_sample(seed: u64, index: u64) -> (Vec<f32>, f32) {
    let mut r = rng::substream(Task::Regress.stream_label(), seed, index);
    let a: f64 = r.random_range(0.0..1.0);
    let m = r.random_range(1..=2u32) as f64;
    let phi: f64 = r.random_range(0.0..2.0 * PI);
    let psi: f64 = r.random_range(0.0..2.0 * PI);
    (regress_image(a, m, phi, psi), a as f32)
}

/// Deterministic plane wave; `a = 0` yields the flat image `0.5`.
pub fn regress_image(a: f64, m: f64, phi: f64, psi: f64) -> Vec<f32> {
    let side = REGRESS_SIDE;
    let (s, c) = phi.sin_cos();
    let mut img = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let u = j as f64 * c + i as f64 * s;
            let v = 0.5 + 0.5 * a * (2.0 * PI * m * u / side as f64 + psi).sin();
            img.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    img
}

fn build_split(task: Task, seed: u64, indices: std::ops::Range<usize>) -> Result<Split> {
    let n = indices.len();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for i in indices {
        match task {
            Task::Autoencode => {
                let img = autoencode_sample(seed, i as u64);
                ys.extend_from_slice(&img);
                xs.extend(img);
            }
            Task::Regress => {
                let (img, a) = regress_sample(seed, i as u64);
                xs.extend(img);
                ys.push(a);
            }
        }
    }
    let (inputs, targets) = match task {
        Task::Autoencode => (
            Tensor::new(vec![n, 1, AUTOENCODE_SIDE, AUTOENCODE_SIDE], xs)?,
            Tensor::new(vec![n, AUTOENCODE_SIDE * AUTOENCODE_SIDE], ys)?,
        ),
        Task::Regress => (Tensor::new(vec![n, 1, REGRESS_SIDE, REGRESS_SIDE], xs)?, Tensor::new(vec![n, 1], ys)?),
    };
    Ok(Split::new(inputs, targets))
}

/// The last `max(1, size/5)` samples form the test split.
pub fn generate_dataset(task: Task, size: usize, seed: u64) -> Result<Dataset> {
    if size < 2 {
        return Err(Error::config(format!("dataset size must be at least 2, got {}", size)));
    }
    let n_test = Dataset::test_size(size);
    let n_train = size - n_test;
    Ok(Dataset {
        spec: DatasetSpec { task, size, seed },
        train: build_split(task, seed, 0..n_train)?,
        test: build_split(task, seed, n_train..size)?,
    })
}

impl DatasetSpec {
    pub fn generate(&self) -> Result<Dataset> {
        generate_dataset(self.task, self.size, self.seed)
    }
}
