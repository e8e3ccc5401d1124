//! Scalar objectives over a [`ParamVector`] and the derivative products built
//! on them.

use std::sync::Arc;

use crate::error::{AdError, Result};
use crate::param::{Layout, ParamVector};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A scalar function of a parameter vector that can record itself on a tape.
pub trait Objective: Sync {
    fn layout(&self) -> &Arc<Layout>;

    /// Records the loss given one leaf per layout segment.
    fn record(&self, tape: &mut Tape, params: &[Var]) -> Result<Var>;

    /// Loss value without keeping a tape around.
    fn value(&self, params: &ParamVector) -> Result<f64> {
        let rec = forward(self, params)?;
        Ok(rec.loss_value() as f64)
    }
}

/// Adds one leaf per segment of `params`.
pub fn record_params(tape: &mut Tape, params: &ParamVector) -> Result<Vec<Var>> {
    params.unflatten().into_iter().map(|t| tape.leaf(t)).collect()
}

/// A recorded forward pass.
pub struct Recording {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub loss: Var,
    layout: Arc<Layout>,
}

impl Recording {
    pub fn new(tape: Tape, params: Vec<Var>, loss: Var, layout: Arc<Layout>) -> Self {
        Recording { tape, params, loss, layout }
    }

    pub fn loss_value(&self) -> f32 {
        self.tape.value(self.loss).item()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// First-order gradient; the tape cannot be differentiated afterwards.
    pub fn gradient(&mut self) -> Result<ParamVector> {
        let grads = self.tape.gradient(self.loss, &self.params)?;
        ParamVector::flatten(self.layout.clone(), &grads)
    }

    /// Records `∇loss` on the tape and returns the per-segment gradient nodes.
    pub fn grad_nodes(&mut self) -> Result<Vec<Var>> {
        self.tape.grad(self.loss, &self.params)
    }

    /// Hessian-vector product by differentiating `∇loss · v`.
    pub fn hvp(&mut self, v: &ParamVector) -> Result<ParamVector> {
        if *v.layout().as_ref() != *self.layout {
            return Err(AdError::Layout("hvp direction layout differs from parameters".into()));
        }
        let grads = self.grad_nodes()?;
        let mut acc: Option<Var> = None;
        for (g, t) in grads.into_iter().zip(v.unflatten()) {
            let c = self.tape.constant(t)?;
            let d = self.tape.dot(g, c)?;
            acc = Some(match acc {
                None => d,
                Some(a) => self.tape.add(a, d)?,
            });
        }
        let Some(s) = acc else {
            return Ok(ParamVector::zeros(self.layout.clone()));
        };
        let hv = self.tape.grad(s, &self.params)?;
        let values: Vec<Tensor> = hv.iter().map(|h| self.tape.value(*h).clone()).collect();
        ParamVector::flatten(self.layout.clone(), &values)
    }
}

fn check_layout<O: Objective + ?Sized>(obj: &O, params: &ParamVector) -> Result<()> {
    if params.layout().as_ref() != obj.layout().as_ref() {
        return Err(AdError::Layout(format!(
            "objective expects {} parameters, got {}",
            obj.layout().len(),
            params.len()
        )));
    }
    Ok(())
}

pub fn forward<O: Objective + ?Sized>(obj: &O, params: &ParamVector) -> Result<Recording> {
    check_layout(obj, params)?;
    let mut tape = Tape::new();
    let vars = record_params(&mut tape, params)?;
    let loss = obj.record(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(AdError::Shape { op: "objective", detail: format!("loss has shape {:?}", tape.shape(loss)) });
    }
    Ok(Recording::new(tape, vars, loss, obj.layout().clone()))
}

/// Loss and gradient in one pass.
pub fn value_and_gradient<O: Objective + ?Sized>(obj: &O, params: &ParamVector) -> Result<(f32, ParamVector)> {
    let mut rec = forward(obj, params)?;
    let loss = rec.loss_value();
    Ok((loss, rec.gradient()?))
}

/// `H v` where `H` is the Hessian of `obj` at `params`.
pub fn hvp<O: Objective + ?Sized>(obj: &O, params: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
    let mut rec = forward(obj, params)?;
    rec.hvp(v)
}
