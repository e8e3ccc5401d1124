//! Uniform symmetric integer quantization of weights.
//!
//! A tensor with spec `(b, s)` stores codes in `[-2^(b-1), 2^(b-1) - 1]` and
//! represents `code * s`. Training uses fake quantization with a clipped
//! straight-through gradient; the integer codes are what fault injection flips.

use llab_autodiff::kernels::{self, quantize_code};
use llab_autodiff::{ParamVector, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

pub const MIN_BITS: u32 = 3;
pub const MAX_BITS: u32 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    bits: u32,
    scale: f32,
}

impl QuantSpec {
    pub fn new(bits: u32, scale: f32) -> Result<Self> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(Error::Range(format!("bit width {} outside [{}, {}]", bits, MIN_BITS, MAX_BITS)));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Range(format!("quantization scale must be positive, got {}", scale)));
        }
        Ok(QuantSpec { bits, scale })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn qmax(&self) -> i32 {
        kernels::quant_max(self.bits)
    }

    pub fn qmin(&self) -> i32 {
        kernels::quant_min(self.bits)
    }

    pub fn code(&self, w: f32) -> i32 {
        quantize_code(w, self.scale, self.bits)
    }

    pub fn value(&self, code: i32) -> f32 {
        code as f32 * self.scale
    }
}

/// `s = max|w| / (2^(b-1) - 1)`, or `1` for an all-zero tensor.
pub fn calibrate(weights: &[f32], bits: u32) -> Result<QuantSpec> {
    if weights.is_empty() {
        return Err(Error::config("cannot calibrate an empty tensor"));
    }
    let max = weights.iter().fold(0.0f32, |m, w| m.max(w.abs()));
    if !max.is_finite() {
        return Err(Error::Numeric("non-finite weight during calibration".into()));
    }
    let scale = if max == 0.0 { 1.0 } else { max / kernels::quant_max(bits.clamp(MIN_BITS, MAX_BITS)) as f32 };
    QuantSpec::new(bits, scale)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<i16>,
    spec: QuantSpec,
    shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn from_codes(shape: Vec<usize>, codes: Vec<i16>, spec: QuantSpec) -> Result<Self> {
        if shape.iter().product::<usize>() != codes.len() {
            return Err(Error::config("code count does not match shape"));
        }
        if let Some(c) = codes.iter().find(|&&c| (c as i32) < spec.qmin() || (c as i32) > spec.qmax()) {
            return Err(Error::Range(format!("code {} outside the {}-bit range", c, spec.bits())));
        }
        Ok(QuantizedTensor { codes, spec, shape })
    }

    pub fn codes(&self) -> &[i16] {
        &self.codes
    }

    pub(crate) fn codes_mut(&mut self) -> &mut [i16] {
        &mut self.codes
    }

    pub fn spec(&self) -> QuantSpec {
        self.spec
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn dequantized(&self) -> Vec<f32> {
        self.codes.iter().map(|&c| self.spec.value(c as i32)).collect()
    }
}

pub fn quantize(w: &Tensor, spec: QuantSpec) -> QuantizedTensor {
    let codes = w.data().iter().map(|&v| spec.code(v) as i16).collect();
    QuantizedTensor { codes, spec, shape: w.shape().to_vec() }
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    Tensor::new(q.shape.clone(), q.dequantized()).expect("quantized tensor shape")
}

/// Per-segment quantization state of a model; `None` segments stay in float.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantization {
    specs: Vec<Option<QuantSpec>>,
}

impl Quantization {
    pub fn new(specs: Vec<Option<QuantSpec>>) -> Self {
        Quantization { specs }
    }

    /// Calibrates every weight segment of `model` (biases stay float).
    pub fn calibrate(model: &Model, params: &ParamVector, bits: u32) -> Result<Self> {
        let weights = model.weight_segments();
        let specs = (0..params.layout().segments().len())
            .map(|i| {
                if weights.contains(&i) {
                    calibrate(params.segment(i), bits).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Quantization { specs })
    }

    pub fn specs(&self) -> &[Option<QuantSpec>] {
        &self.specs
    }

    pub fn spec(&self, segment: usize) -> Option<QuantSpec> {
        self.specs.get(segment).copied().flatten()
    }

    /// Bit width shared by the quantized segments, if any.
    pub fn bits(&self) -> Option<u32> {
        self.specs.iter().flatten().map(|s| s.bits()).next()
    }

    /// `params` with every quantized segment snapped to its grid.
    pub fn apply(&self, params: &ParamVector) -> ParamVector {
        let mut out = params.clone();
        for (i, spec) in self.specs.iter().enumerate() {
            if let Some(spec) = spec {
                for v in out.segment_mut(i) {
                    *v = spec.value(spec.code(*v));
                }
            }
        }
        out
    }
}

/// One stored segment of a quantized model.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredSegment {
    Float(Vec<f32>),
    Quantized(QuantizedTensor),
}

/// Parameters as they sit in memory on the target: integer codes for
/// quantized weights, floats elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedParams {
    template: ParamVector,
    segments: Vec<StoredSegment>,
}

impl QuantizedParams {
    pub fn new(params: &ParamVector, quant: &Quantization) -> Self {
        let segments = params
            .layout()
            .segments()
            .iter()
            .enumerate()
            .map(|(i, seg)| match quant.spec(i) {
                Some(spec) => {
                    let t = Tensor::new(seg.shape.clone(), params.segment(i).to_vec()).expect("segment shape");
                    StoredSegment::Quantized(quantize(&t, spec))
                }
                None => StoredSegment::Float(params.segment(i).to_vec()),
            })
            .collect();
        QuantizedParams { template: params.clone(), segments }
    }

    pub fn from_segments(template: ParamVector, segments: Vec<StoredSegment>) -> Result<Self> {
        if segments.len() != template.layout().segments().len() {
            return Err(Error::config("segment count does not match layout"));
        }
        for (seg, stored) in template.layout().segments().iter().zip(&segments) {
            let n = match stored {
                StoredSegment::Float(v) => v.len(),
                StoredSegment::Quantized(q) => q.len(),
            };
            if n != seg.len() {
                return Err(Error::config(format!("segment {} has {} values, expected {}", seg.name, n, seg.len())));
            }
        }
        Ok(QuantizedParams { template, segments })
    }

    pub fn segments(&self) -> &[StoredSegment] {
        &self.segments
    }

    pub(crate) fn segments_mut(&mut self) -> &mut [StoredSegment] {
        &mut self.segments
    }

    pub fn layout(&self) -> &std::sync::Arc<llab_autodiff::Layout> {
        self.template.layout()
    }

    pub fn quantization(&self) -> Quantization {
        Quantization::new(
            self.segments
                .iter()
                .map(|s| match s {
                    StoredSegment::Quantized(q) => Some(q.spec()),
                    StoredSegment::Float(_) => None,
                })
                .collect(),
        )
    }

    /// Effective (dequantized) parameter vector.
    pub fn to_params(&self) -> ParamVector {
        let mut out = self.template.clone();
        for (i, s) in self.segments.iter().enumerate() {
            match s {
                StoredSegment::Float(v) => out.segment_mut(i).copy_from_slice(v),
                StoredSegment::Quantized(q) => out.segment_mut(i).copy_from_slice(&q.dequantized()),
            }
        }
        out
    }
}
