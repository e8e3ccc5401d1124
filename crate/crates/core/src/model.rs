//! Sequential model specifications, the two registered surrogate benchmarks,
//! and forward evaluation with or without a tape.

use std::sync::Arc;

use llab_autodiff::kernels::{self, ConvGeom};
use llab_autodiff::{Layout, Objective, ParamVector, Recording, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::quant::Quantization;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, pad: usize },
    Dense { inputs: usize, outputs: usize, bias: bool },
    Relu,
    Sigmoid,
    Flatten,
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs, bias: true }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, pad: usize) -> Self {
        LayerSpec::Conv2d { in_channels, out_channels, kernel, pad }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape: `[c, h, w]` for images, `[d]` for vectors.
    pub input_shape: Vec<usize>,
    pub output_dim: usize,
    /// Number of leading layers forming the deployed encoder, when the model
    /// has one. Fault injection is restricted to those layers.
    pub encoder_layers: Option<usize>,
}

pub const ECON_S: &str = "econ-s";
pub const FUSION_S: &str = "fusion-s";

impl ModelSpec {
    /// Autoencoder surrogate on 8×8 sensor images.
    pub fn econ_s() -> Self {
        ModelSpec {
            name: ECON_S.into(),
            layers: vec![
                LayerSpec::conv(1, 4, 3, 0),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(144, 16),
                LayerSpec::dense(16, 64),
            ],
            input_shape: vec![1, 8, 8],
            output_dim: 64,
            encoder_layers: Some(4),
        }
    }

    /// CNN amplitude regressor surrogate on 16×16 camera frames.
    pub fn fusion_s() -> Self {
        ModelSpec {
            name: FUSION_S.into(),
            layers: vec![
                LayerSpec::conv(1, 4, 3, 1),
                LayerSpec::Relu,
                LayerSpec::conv(4, 8, 3, 1),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(2048, 1),
            ],
            input_shape: vec![1, 16, 16],
            output_dim: 1,
            encoder_layers: None,
        }
    }

    /// Fully connected network with `activation` between dense layers.
    pub fn mlp(name: &str, sizes: &[usize], activation: LayerSpec) -> Self {
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            if i > 0 {
                layers.push(activation.clone());
            }
            layers.push(LayerSpec::dense(w[0], w[1]));
        }
        ModelSpec {
            name: name.into(),
            layers,
            input_shape: vec![sizes[0]],
            output_dim: *sizes.last().unwrap(),
            encoder_layers: None,
        }
    }

    pub fn registered(name: &str) -> Option<Self> {
        match name {
            ECON_S => Some(Self::econ_s()),
            FUSION_S => Some(Self::fusion_s()),
            _ => None,
        }
    }

    pub fn registered_names() -> &'static [&'static str] {
        &[ECON_S, FUSION_S]
    }

    /// Per-sample output shape after every layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (layer, cur.as_slice()) {
                (LayerSpec::Conv2d { in_channels, out_channels, kernel, pad }, [c, h, w]) => {
                    if c != in_channels || h + 2 * pad < *kernel || w + 2 * pad < *kernel || *kernel == 0 {
                        return Err(Error::config(format!("layer {}: conv does not fit input {:?}", i, cur)));
                    }
                    vec![*out_channels, h + 2 * pad + 1 - kernel, w + 2 * pad + 1 - kernel]
                }
                (LayerSpec::Dense { inputs, outputs, .. }, [d]) => {
                    if d != inputs {
                        return Err(Error::config(format!("layer {}: dense expects {} inputs, got {}", i, inputs, d)));
                    }
                    vec![*outputs]
                }
                (LayerSpec::Relu | LayerSpec::Sigmoid, _) => cur.clone(),
                (LayerSpec::Flatten, _) => vec![cur.iter().product()],
                _ => return Err(Error::config(format!("layer {}: {:?} cannot consume shape {:?}", i, layer, cur))),
            };
            out.push(cur.clone());
        }
        if cur != [self.output_dim] {
            return Err(Error::config(format!("model output {:?} is not [{}]", cur, self.output_dim)));
        }
        Ok(out)
    }

    pub fn layout(&self) -> Result<Layout> {
        self.shapes()?;
        let mut segs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                    segs.push((format!("l{}.conv.weight", i), vec![*out_channels, *in_channels, *kernel, *kernel]));
                    segs.push((format!("l{}.conv.bias", i), vec![*out_channels]));
                }
                LayerSpec::Dense { inputs, outputs, bias } => {
                    segs.push((format!("l{}.dense.weight", i), vec![*outputs, *inputs]));
                    if *bias {
                        segs.push((format!("l{}.dense.bias", i), vec![*outputs]));
                    }
                }
                _ => {}
            }
        }
        Ok(Layout::new(segs))
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layout()?.len())
    }
}

/// Which parameter segments a layer owns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerParams {
    weight: usize,
    bias: Option<usize>,
}

/// An instantiated model graph: spec, parameter layout, and optional frozen
/// quantization of its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layout: Arc<Layout>,
    layer_params: Vec<Option<LayerParams>>,
    quant: Option<Quantization>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let layout = Arc::new(spec.layout()?);
        let mut next = 0;
        let layer_params = spec
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv2d { .. } | LayerSpec::Dense { bias: true, .. } => {
                    let p = LayerParams { weight: next, bias: Some(next + 1) };
                    next += 2;
                    Some(p)
                }
                LayerSpec::Dense { bias: false, .. } => {
                    let p = LayerParams { weight: next, bias: None };
                    next += 1;
                    Some(p)
                }
                _ => None,
            })
            .collect();
        Ok(Model { spec, layout, layer_params, quant: None })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn quantization(&self) -> Option<&Quantization> {
        self.quant.as_ref()
    }

    pub fn with_quantization(&self, quant: Option<Quantization>) -> Model {
        Model { quant, ..self.clone() }
    }

    /// Segment indices of dense and conv weight tensors, in layer order.
    pub fn weight_segments(&self) -> Vec<usize> {
        self.layer_params.iter().flatten().map(|p| p.weight).collect()
    }

    pub fn bias_segments(&self) -> Vec<usize> {
        self.layer_params.iter().flatten().filter_map(|p| p.bias).collect()
    }

    /// Segments belonging to the deployed encoder (every segment when the
    /// model has no encoder split).
    pub fn encoder_segments(&self) -> Vec<usize> {
        let depth = self.spec.encoder_layers.unwrap_or(self.spec.layers.len());
        self.layer_params
            .iter()
            .take(depth)
            .flatten()
            .flat_map(|p| std::iter::once(p.weight).chain(p.bias))
            .collect()
    }

    /// Batched input shape for `n` samples.
    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        std::iter::once(n).chain(self.spec.input_shape.iter().copied()).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(Error::config(format!(
                "input shape {:?} does not match model input [N, {:?}]",
                shape, self.spec.input_shape
            )));
        }
        Ok(shape[0])
    }

    /// Records the forward pass; returns the `[N, d_out]` output node.
    pub fn record(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var> {
        let n = self.check_input(tape.shape(input))?;
        if params.len() != self.layout.segments().len() {
            return Err(Error::config("parameter leaves do not match the model layout"));
        }
        let mut x = input;
        for (layer, lp) in self.spec.layers.iter().zip(&self.layer_params) {
            x = match layer {
                LayerSpec::Conv2d { pad, .. } => {
                    let lp = lp.expect("conv params");
                    let k = self.weight_var(tape, params, lp.weight)?;
                    let y = tape.conv2d(x, k, *pad)?;
                    let shape = tape.shape(y).to_vec();
                    let b = tape.broadcast_channels(params[lp.bias.expect("conv bias")], shape)?;
                    tape.add(y, b)?
                }
                LayerSpec::Dense { .. } => {
                    let lp = lp.expect("dense params");
                    let w = self.weight_var(tape, params, lp.weight)?;
                    let y = tape.matmul(x, w, false, true)?;
                    match lp.bias {
                        Some(bi) => {
                            let shape = tape.shape(y).to_vec();
                            let b = tape.broadcast_channels(params[bi], shape)?;
                            tape.add(y, b)?
                        }
                        None => y,
                    }
                }
                LayerSpec::Relu => tape.relu(x)?,
                LayerSpec::Sigmoid => tape.sigmoid(x)?,
                LayerSpec::Flatten => tape.flatten(x)?,
            };
        }
        debug_assert_eq!(tape.shape(x), &[n, self.spec.output_dim]);
        Ok(x)
    }

    fn weight_var(&self, tape: &mut Tape, params: &[Var], seg: usize) -> Result<Var> {
        match self.quant.as_ref().and_then(|q| q.spec(seg)) {
            Some(spec) => Ok(tape.fake_quant(params[seg], spec.scale(), spec.bits())?),
            None => Ok(params[seg]),
        }
    }

    fn effective_weight(&self, params: &ParamVector, seg: usize) -> Vec<f32> {
        match self.quant.as_ref().and_then(|q| q.spec(seg)) {
            Some(spec) => kernels::fake_quant(params.segment(seg), spec.scale(), spec.bits()),
            None => params.segment(seg).to_vec(),
        }
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.layout().as_ref() != self.layout.as_ref() {
            return Err(Error::config(format!(
                "parameter vector has {} values, model {} expects {}",
                params.len(),
                self.spec.name,
                self.layout.len()
            )));
        }
        Ok(())
    }

    /// Tape-free forward pass using the same kernels as [`Model::record`].
    pub fn predict(&self, params: &ParamVector, inputs: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        let n = self.check_input(inputs.shape())?;
        let mut shape = inputs.shape().to_vec();
        let mut x = inputs.data().to_vec();
        for (layer, lp) in self.spec.layers.iter().zip(&self.layer_params) {
            match layer {
                LayerSpec::Conv2d { in_channels, out_channels, kernel, pad } => {
                    let lp = lp.expect("conv params");
                    let g = ConvGeom {
                        batch: n,
                        in_ch: *in_channels,
                        out_ch: *out_channels,
                        h: shape[2],
                        w: shape[3],
                        kh: *kernel,
                        kw: *kernel,
                        pad: *pad,
                    };
                    let k = self.effective_weight(params, lp.weight);
                    let y = kernels::conv2d(&x, &k, &g);
                    let s = g.out_h() * g.out_w();
                    let b = kernels::broadcast_channels(params.segment(lp.bias.expect("conv bias")), n, s);
                    x = kernels::add(&y, &b);
                    shape = vec![n, *out_channels, g.out_h(), g.out_w()];
                }
                LayerSpec::Dense { inputs: din, outputs, .. } => {
                    let lp = lp.expect("dense params");
                    let w = self.effective_weight(params, lp.weight);
                    let (y, _) = kernels::matmul(&x, (n, *din), &w, (*outputs, *din), false, true);
                    x = match lp.bias {
                        Some(bi) => kernels::add(&y, &kernels::broadcast_channels(params.segment(bi), n, 1)),
                        None => y,
                    };
                    shape = vec![n, *outputs];
                }
                LayerSpec::Relu => x = kernels::relu(&x),
                LayerSpec::Sigmoid => x = kernels::sigmoid(&x),
                LayerSpec::Flatten => shape = vec![n, shape[1..].iter().product()],
            }
        }
        let out = Tensor::new(shape, x)?;
        if !out.is_finite() {
            return Err(Error::Numeric(format!("model {} produced non-finite outputs", self.spec.name)));
        }
        Ok(out)
    }

    /// Tape-free MSE on one batch.
    pub fn batch_loss(&self, params: &ParamVector, batch: &Split) -> Result<f32> {
        let out = self.predict(params, &batch.inputs)?;
        check_targets(&out, &batch.targets)?;
        let loss = kernels::mse(out.data(), batch.targets.data());
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        Ok(loss)
    }
}

fn check_targets(out: &Tensor, targets: &Tensor) -> Result<()> {
    if out.shape() != targets.shape() {
        return Err(Error::config(format!("targets {:?} do not match outputs {:?}", targets.shape(), out.shape())));
    }
    Ok(())
}

/// He-style uniform fan-in initialization: weights `U(-√(6/fan_in), √(6/fan_in))`,
/// biases zero.
pub fn build_model(spec: ModelSpec, seed: u64) -> Result<(Model, ParamVector)> {
    let model = Model::new(spec)?;
    let mut params = ParamVector::zeros(model.layout.clone());
    let mut rng = rng::stream("init", seed);
    for seg in model.weight_segments() {
        let shape = &model.layout.segments()[seg].shape;
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        for v in params.segment_mut(seg) {
            *v = rng.random_range(-bound..bound) as f32;
        }
    }
    Ok((model, params))
}

/// A forward pass over one batch with its input kept differentiable.
pub struct ModelRecording {
    pub rec: Recording,
    pub input: Var,
    pub output: Var,
}

impl ModelRecording {
    pub fn loss(&self) -> f32 {
        self.rec.loss_value()
    }

    pub fn gradient(&mut self) -> Result<ParamVector> {
        Ok(self.rec.gradient()?)
    }

    pub fn hvp(&mut self, v: &ParamVector) -> Result<ParamVector> {
        Ok(self.rec.hvp(v)?)
    }

    /// `∂(Σₙ vᵀ f(xₙ)) / ∂x`: per sample, the input gradient of `vᵀ f(x)`.
    pub fn input_gradient(&mut self, projection: &[f32]) -> Result<Tensor> {
        let shape = self.rec.tape.shape(self.output).to_vec();
        if projection.len() != shape[1] {
            return Err(Error::config(format!(
                "projection has {} entries, model output has {}",
                projection.len(),
                shape[1]
            )));
        }
        let v = Tensor::new(shape.clone(), projection.repeat(shape[0]))?;
        let tape = &mut self.rec.tape;
        let c = tape.constant(v)?;
        let s = tape.dot(self.output, c)?;
        let g = tape.grad(s, &[self.input])?[0];
        Ok(tape.value(g).clone())
    }
}

/// Records `MSE(model(batch.inputs), batch.targets)` with differentiable inputs.
pub fn forward(model: &Model, params: &ParamVector, batch: &Split) -> Result<ModelRecording> {
    model.check_params(params)?;
    model.check_input(batch.inputs.shape())?;
    let mut tape = Tape::new();
    let vars = llab_autodiff::record_params(&mut tape, params)?;
    let input = tape.leaf(batch.inputs.clone())?;
    let output = model.record(&mut tape, &vars, input)?;
    check_targets(tape.value(output), &batch.targets)?;
    let target = tape.constant(batch.targets.clone())?;
    let loss = tape.mse(output, target)?;
    Ok(ModelRecording { rec: Recording::new(tape, vars, loss, model.layout.clone()), input, output })
}

/// Mean loss over a split, batched in order and weighted by batch size.
pub fn evaluate(model: &Model, params: &ParamVector, split: &Split, batch_size: usize) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    let bs = batch_size.max(1);
    let n = split.len();
    let mut total = 0.0f64;
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        let batch = split.slice(start, end);
        total += model.batch_loss(params, &batch)? as f64 * (end - start) as f64;
        start = end;
    }
    Ok(total / n as f64)
}

/// Task loss of `model` on one fixed batch, as a differentiable objective.
pub struct BatchObjective<'a> {
    pub model: &'a Model,
    pub batch: &'a Split,
}

impl Objective for BatchObjective<'_> {
    fn layout(&self) -> &Arc<Layout> {
        self.model.layout()
    }

    fn record(&self, tape: &mut Tape, params: &[Var]) -> llab_autodiff::Result<Var> {
        let input = tape.constant(self.batch.inputs.clone())?;
        let out = self.model.record(tape, params, input).map_err(to_ad)?;
        let target = tape.constant(self.batch.targets.clone())?;
        tape.mse(out, target)
    }

    fn value(&self, params: &ParamVector) -> llab_autodiff::Result<f64> {
        self.model.batch_loss(params, self.batch).map(|v| v as f64).map_err(to_ad)
    }
}

/// Mean task loss over a whole split, evaluated batch by batch.
pub struct SplitObjective<'a> {
    pub model: &'a Model,
    pub split: &'a Split,
    pub batch_size: usize,
}

impl Objective for SplitObjective<'_> {
    fn layout(&self) -> &Arc<Layout> {
        self.model.layout()
    }

    fn record(&self, tape: &mut Tape, params: &[Var]) -> llab_autodiff::Result<Var> {
        let n = self.split.len();
        let bs = self.batch_size.max(1);
        let mut acc: Option<Var> = None;
        let mut start = 0;
        while start < n {
            let end = (start + bs).min(n);
            let batch = self.split.slice(start, end);
            let input = tape.constant(batch.inputs.clone())?;
            let out = self.model.record(tape, params, input).map_err(to_ad)?;
            let target = tape.constant(batch.targets)?;
            let l = tape.mse(out, target)?;
            let w = tape.scale(l, ((end - start) as f64 / n as f64) as f32)?;
            acc = Some(match acc {
                None => w,
                Some(a) => tape.add(a, w)?,
            });
            start = end;
        }
        acc.ok_or_else(|| llab_autodiff::AdError::Shape { op: "objective", detail: "empty split".into() })
    }

    fn value(&self, params: &ParamVector) -> llab_autodiff::Result<f64> {
        evaluate(self.model, params, self.split, self.batch_size).map_err(to_ad)
    }
}

/// Folds a core error back into the autodiff error space for trait impls.
pub(crate) fn to_ad(e: Error) -> llab_autodiff::AdError {
    match e {
        Error::Autodiff(a) => a,
        Error::Numeric(_) => llab_autodiff::AdError::NonFinite { op: "model", node: usize::MAX },
        other => llab_autodiff::AdError::Shape { op: "model", detail: other.to_string() },
    }
}
