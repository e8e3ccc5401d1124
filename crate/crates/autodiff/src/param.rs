use std::sync::Arc;

use crate::error::{AdError, Result};
use crate::tensor::Tensor;

/// One named tensor inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, contiguous description of how a flat vector splits into tensors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    pub fn new<I, S>(specs: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<usize>)>,
        S: Into<String>,
    {
        let mut offset = 0;
        let segments = specs
            .into_iter()
            .map(|(name, shape)| {
                let seg = Segment { name: name.into(), shape, offset };
                offset += seg.len();
                seg
            })
            .collect();
        Layout { segments, len: offset }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    /// Maps a flat index to `(segment index, offset within segment)`.
    pub fn locate(&self, index: usize) -> Option<(usize, usize)> {
        if index >= self.len {
            return None;
        }
        let seg = self.segments.partition_point(|s| s.offset + s.len() <= index);
        Some((seg, index - self.segments[seg].offset))
    }
}

/// Flat view of every trainable parameter of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f32>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len()];
        ParamVector { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f32>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(AdError::Layout(format!(
                "layout holds {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(ParamVector { layout, values })
    }

    /// Concatenates per-segment tensors in layout order.
    pub fn flatten(layout: Arc<Layout>, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != layout.segments().len() {
            return Err(AdError::Layout(format!(
                "expected {} tensors, got {}",
                layout.segments().len(),
                tensors.len()
            )));
        }
        let mut values = Vec::with_capacity(layout.len());
        for (seg, t) in layout.segments().iter().zip(tensors) {
            if t.shape() != seg.shape.as_slice() {
                return Err(AdError::Layout(format!(
                    "segment {} has shape {:?}, tensor has {:?}",
                    seg.name,
                    seg.shape,
                    t.shape()
                )));
            }
            values.extend_from_slice(t.data());
        }
        Ok(ParamVector { layout, values })
    }

    pub fn unflatten(&self) -> Vec<Tensor> {
        self.layout
            .segments()
            .iter()
            .map(|s| Tensor::new(s.shape.clone(), self.values[s.range()].to_vec()).expect("layout shape"))
            .collect()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, i: usize) -> &[f32] {
        &self.values[self.layout.segments()[i].range()]
    }

    pub fn segment_mut(&mut self, i: usize) -> &mut [f32] {
        let r = self.layout.segments()[i].range();
        &mut self.values[r]
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    fn check(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(AdError::Layout("parameter vectors have different layouts".into()))
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| *a as f64 * *b as f64).sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, a: f64) -> ParamVector {
        let values = self.values.iter().map(|v| (*v as f64 * a) as f32).collect();
        ParamVector { layout: self.layout.clone(), values }
    }

    /// `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        self.check(x)?;
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s = (*s as f64 + a * *v as f64) as f32;
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(ParamVector { layout: self.layout.clone(), values })
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(ParamVector { layout: self.layout.clone(), values })
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f32>) -> Result<ParamVector> {
        ParamVector::from_values(self.layout.clone(), values)
    }
}
