//! Jacobian and soft-orthogonality penalties, both recordable on a tape so
//! the trainer can differentiate them with respect to the parameters.

use llab_autodiff::{ParamVector, Tape, Tensor, Var};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{self, Model};
use crate::rng;

/// How the output space is probed when estimating `‖J‖²_F`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Projections {
    /// `nproj` independent random unit vectors per sample, rescaled by `d_out / nproj`.
    Random { nproj: usize },
    /// Every standard basis vector once; exact.
    Basis,
}

/// Projection tensors `[N, d_out]` and the factor applied to their summed
/// squared input gradients.
pub(crate) fn projection_set(
    mode: Projections,
    n: usize,
    d_out: usize,
    seed: u64,
    index: u64,
) -> Result<(Vec<Tensor>, f64)> {
    match mode {
        Projections::Random { nproj } => {
            if nproj == 0 {
                return Err(Error::config("nproj must be at least 1"));
            }
            let mut r = rng::substream("jacobian", seed, index);
            let mut out = Vec::with_capacity(nproj);
            for _ in 0..nproj {
                let mut data = Vec::with_capacity(n * d_out);
                for _ in 0..n {
                    let v: Vec<f64> = (0..d_out).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    data.extend(v.iter().map(|x| (x / norm) as f32));
                }
                out.push(Tensor::new(vec![n, d_out], data)?);
            }
            Ok((out, d_out as f64 / nproj as f64))
        }
        Projections::Basis => {
            let out = (0..d_out)
                .map(|k| {
                    let mut data = vec![0.0f32; n * d_out];
                    for s in 0..n {
                        data[s * d_out + k] = 1.0;
                    }
                    Tensor::new(vec![n, d_out], data)
                })
                .collect::<llab_autodiff::Result<Vec<_>>>()?;
            Ok((out, 1.0))
        }
    }
}

/// Records the batch-averaged Jacobian estimate for an already recorded
/// `output = f(input)`.
pub(crate) fn record_jacobian(
    tape: &mut Tape,
    input: Var,
    output: Var,
    projections: Vec<Tensor>,
    factor: f64,
) -> Result<Var> {
    let n = tape.shape(output)[0];
    let mut acc: Option<Var> = None;
    for v in projections {
        let c = tape.constant(v)?;
        let s = tape.dot(output, c)?;
        let g = tape.grad(s, &[input])?[0];
        let sq = tape.dot(g, g)?;
        acc = Some(match acc {
            None => sq,
            Some(a) => tape.add(a, sq)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::config("no projections"))?;
    Ok(tape.scale(acc, (factor / n as f64) as f32)?)
}

/// Estimate of `mean_x ‖∂f(x)/∂x‖²_F` over `batch`.
pub fn jacobian_penalty(
    model: &Model,
    params: &ParamVector,
    batch: &Split,
    mode: Projections,
    seed: u64,
) -> Result<f64> {
    let mut rec = model::forward(model, params, batch)?;
    let (proj, factor) = projection_set(mode, batch.len(), model.output_dim(), seed, 0)?;
    let p = record_jacobian(&mut rec.rec.tape, rec.input, rec.output, proj, factor)?;
    Ok(rec.rec.tape.value(p).item() as f64)
}

/// Fan-in of a weight segment: everything past the output-channel axis.
fn weight_dims(model: &Model, seg: usize) -> (usize, usize) {
    let shape = &model.layout().segments()[seg].shape;
    (shape[0], shape[1..].iter().product())
}

/// `Σ_layers ‖WᵀW − I‖_F` over every dense and conv weight, with conv
/// kernels viewed as `out_channels × fan_in`. Evaluated in f64.
pub fn orthogonal_penalty(model: &Model, params: &ParamVector) -> Result<f64> {
    if params.layout().as_ref() != model.layout().as_ref() {
        return Err(Error::config("parameter vector does not match the model layout"));
    }
    let mut total = 0.0;
    for seg in model.weight_segments() {
        let (rows, cols) = weight_dims(model, seg);
        let w: Vec<f64> = params.segment(seg).iter().map(|&v| v as f64).collect();
        total += gram_deviation(&w, rows, cols).sqrt();
    }
    Ok(total)
}

/// `‖WᵀW − I‖²_F` for row-major `W` (`rows × cols`), through whichever Gram
/// matrix is smaller: `‖WᵀW‖² = ‖WWᵀ‖²`.
fn gram_deviation(w: &[f64], rows: usize, cols: usize) -> f64 {
    let mut fro2 = 0.0;
    let mut gram2 = 0.0;
    if rows <= cols {
        for i in 0..rows {
            for j in 0..rows {
                let g: f64 = (0..cols).map(|k| w[i * cols + k] * w[j * cols + k]).sum();
                gram2 += g * g;
            }
        }
    } else {
        for i in 0..cols {
            for j in 0..cols {
                let g: f64 = (0..rows).map(|k| w[k * cols + i] * w[k * cols + j]).sum();
                gram2 += g * g;
            }
        }
    }
    for v in w {
        fro2 += v * v;
    }
    (gram2 - 2.0 * fro2 + cols as f64).max(0.0)
}

/// Differentiable form of [`orthogonal_penalty`] over the parameter leaves.
pub(crate) fn record_orthogonal(tape: &mut Tape, model: &Model, params: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for seg in model.weight_segments() {
        let (rows, cols) = weight_dims(model, seg);
        let w = tape.reshape(params[seg], vec![rows, cols])?;
        let g = if rows <= cols { tape.matmul(w, w, false, true)? } else { tape.matmul(w, w, true, false)? };
        let g2 = tape.dot(g, g)?;
        let f2 = tape.dot(w, w)?;
        let f2 = tape.scale(f2, -2.0)?;
        let d = tape.add(g2, f2)?;
        let d = tape.affine(d, 1.0, cols as f32)?;
        // Rounding can push an exactly orthogonal layer slightly below zero,
        // and the root is not differentiable at zero.
        let d = tape.relu(d)?;
        let d = tape.affine(d, 1.0, 1e-12)?;
        let r = tape.sqrt(d)?;
        acc = Some(match acc {
            None => r,
            Some(a) => tape.add(a, r)?,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(tape.constant(Tensor::scalar(0.0))?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, ModelSpec};

    fn linear(din: usize, dout: usize) -> Model {
        Model::new(ModelSpec {
            name: "lin".into(),
            layers: vec![LayerSpec::Dense { inputs: din, outputs: dout, bias: false }],
            input_shape: vec![din],
            output_dim: dout,
            encoder_layers: None,
        })
        .unwrap()
    }

    #[test]
    fn orthogonal_identity_and_scaled_identity() {
        let m = linear(3, 3);
        let eye = ParamVector::from_values(m.layout().clone(), vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(orthogonal_penalty(&m, &eye).unwrap(), 0.0);
        let two = eye.scaled(2.0);
        assert!((orthogonal_penalty(&m, &two).unwrap() - 3.0 * 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn recorded_orthogonal_matches_f64_value() {
        let m = linear(3, 2);
        let p = ParamVector::from_values(m.layout().clone(), vec![0.3, -0.2, 0.9, 1.1, 0.4, -0.5]).unwrap();
        let mut t = Tape::new();
        let vars = llab_autodiff::record_params(&mut t, &p).unwrap();
        let r = record_orthogonal(&mut t, &m, &vars).unwrap();
        let exact = orthogonal_penalty(&m, &p).unwrap();
        assert!((t.value(r).item() as f64 - exact).abs() < 1e-5 * exact.max(1.0));
    }

    #[test]
    fn basis_jacobian_of_linear_model_is_weight_norm() {
        let m = linear(3, 2);
        let p = ParamVector::from_values(m.layout().clone(), vec![1.0, 2.0, 0.5, -1.0, 0.25, 3.0]).unwrap();
        let batch = Split::new(
            Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.9, 0.8, 0.7]).unwrap(),
            Tensor::zeros(vec![2, 2]),
        );
        let j = jacobian_penalty(&m, &p, &batch, Projections::Basis, 0).unwrap();
        let w2: f64 = p.values().iter().map(|v| (*v as f64).powi(2)).sum();
        assert!((j - w2).abs() < 1e-5, "{} vs {}", j, w2);
    }

    #[test]
    fn zero_projections_rejected() {
        assert!(projection_set(Projections::Random { nproj: 0 }, 1, 1, 0, 0).is_err());
    }
}
