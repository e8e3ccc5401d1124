//! Reference implementations used as test oracles. Everything here is written
//! independently of the engine under test: plain f64 loops, no tape.

use std::collections::BinaryHeap;
use std::sync::Arc;

use llab_autodiff::{Layout, Objective, ParamVector, Tape, Tensor, Var};
use llab_core::data::{Dataset, DatasetSpec, Split, Task};
use llab_core::hessian::{analyze, HessianConfig, HessianReport};
use llab_core::model::{build_model, LayerSpec, Model, ModelSpec};
use llab_core::quant::{QuantizedParams, StoredSegment};
use llab_core::train::{train, Regularizer, TrainConfig};
use rand::{Rng, SeedableRng};

/// f64 forward pass of `spec` for one sample, parameters in layout order.
pub fn reference_forward(spec: &ModelSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
    let mut shape = spec.input_shape.clone();
    let mut x = input.to_vec();
    let mut off = 0usize;
    let mut take = |n: usize| {
        let r = off..off + n;
        off += n;
        r
    };
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, pad } => {
                let (h, w) = (shape[1], shape[2]);
                let (oh, ow) = (h + 2 * pad + 1 - kernel, w + 2 * pad + 1 - kernel);
                let kr = take(out_channels * in_channels * kernel * kernel);
                let br = take(out_channels);
                let k = &params[kr];
                let b = &params[br];
                let mut y = vec![0.0; out_channels * oh * ow];
                for o in 0..out_channels {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut acc = b[o];
                            for c in 0..in_channels {
                                for di in 0..kernel {
                                    for dj in 0..kernel {
                                        let (yi, xj) = (i + di, j + dj);
                                        if yi < pad || xj < pad || yi - pad >= h || xj - pad >= w {
                                            continue;
                                        }
                                        acc += k[((o * in_channels + c) * kernel + di) * kernel + dj]
                                            * x[(c * h + yi - pad) * w + xj - pad];
                                    }
                                }
                            }
                            y[(o * oh + i) * ow + j] = acc;
                        }
                    }
                }
                x = y;
                shape = vec![out_channels, oh, ow];
            }
            LayerSpec::Dense { inputs, outputs, bias } => {
                let wr = take(inputs * outputs);
                let w = params[wr].to_vec();
                let b = if bias { params[take(outputs)].to_vec() } else { vec![0.0; outputs] };
                x = (0..outputs).map(|o| b[o] + (0..inputs).map(|i| w[o * inputs + i] * x[i]).sum::<f64>()).collect();
                shape = vec![outputs];
            }
            LayerSpec::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerSpec::Sigmoid => x.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
            LayerSpec::Flatten => shape = vec![x.len()],
        }
    }
    x
}

/// Mean over samples of the per-sample mean squared error.
pub fn reference_loss(spec: &ModelSpec, params: &[f64], inputs: &Tensor, targets: &Tensor) -> f64 {
    let n = inputs.shape()[0];
    let din = inputs.len() / n;
    let dout = targets.len() / n;
    let mut total = 0.0;
    for s in 0..n {
        let x: Vec<f64> = inputs.data()[s * din..(s + 1) * din].iter().map(|&v| v as f64).collect();
        let y = reference_forward(spec, params, &x);
        let t = &targets.data()[s * dout..(s + 1) * dout];
        total += y.iter().zip(t).map(|(a, b)| (a - *b as f64).powi(2)).sum::<f64>() / dout as f64;
    }
    total / n as f64
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Hessian-vector product from gradients.
pub fn fd_hvp(grad: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let up: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let down: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
    grad(&up).iter().zip(grad(&down)).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

/// `max_i |a_i - b_i| / max(max_i |b_i|, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = b.iter().fold(floor, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Cyclic Jacobi eigensolver for a symmetric row-major matrix. Returns
/// eigenvalues sorted by descending magnitude with matching column vectors.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sgn / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| m[b * n + b].abs().total_cmp(&m[a * n + a].abs()));
    let vals = idx.iter().map(|&i| m[i * n + i]).collect();
    let vecs = idx.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (vals, vecs)
}

/// `tr(XXᵀ H YYᵀ H) / (m − 1)²` with every product formed explicitly.
pub fn naive_cov(x: &[f64], dx: usize, y: &[f64], dy: usize, m: usize) -> f64 {
    let gram = |z: &[f64], d: usize| {
        let mut g = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                for c in 0..d {
                    g[i * m + j] += z[i * d + c] * z[j * d + c];
                }
            }
        }
        g
    };
    let h: Vec<f64> = (0..m * m).map(|k| if k / m == k % m { 1.0 } else { 0.0 } - 1.0 / m as f64).collect();
    let mul = |a: &[f64], b: &[f64]| {
        let mut c = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    c[i * m + j] += a[i * m + k] * b[k * m + j];
                }
            }
        }
        c
    };
    let p = mul(&mul(&mul(&gram(x, dx), &h), &gram(y, dy)), &h);
    (0..m).map(|i| p[i * m + i]).sum::<f64>() / ((m - 1) * (m - 1)) as f64
}

/// `‖WᵀW − I‖_F` by explicit double loop over the `cols × cols` product.
pub fn naive_orthogonal(w: &[f64], rows: usize, cols: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..cols {
        for j in 0..cols {
            let g: f64 = (0..rows).map(|k| w[k * cols + i] * w[k * cols + j]).sum();
            let e = g - if i == j { 1.0 } else { 0.0 };
            s += e * e;
        }
    }
    s.sqrt()
}

/// Exact `mean_x ‖∂f/∂x‖²_F` by central differences on the f64 forward.
pub fn jacobian_fro2(spec: &ModelSpec, params: &[f64], inputs: &Tensor, h: f64) -> f64 {
    let n = inputs.shape()[0];
    let din = inputs.len() / n;
    let mut total = 0.0;
    for s in 0..n {
        let x: Vec<f64> = inputs.data()[s * din..(s + 1) * din].iter().map(|&v| v as f64).collect();
        let mut p = x.clone();
        for i in 0..din {
            p[i] = x[i] + h;
            let up = reference_forward(spec, params, &p);
            p[i] = x[i] - h;
            let down = reference_forward(spec, params, &p);
            p[i] = x[i];
            total += up.iter().zip(&down).map(|(a, b)| ((a - b) / (2.0 * h)).powi(2)).sum::<f64>();
        }
    }
    total / n as f64
}

/// Lowest achievable maximum of `f` over 4-connected grid paths between the
/// cells nearest `a` and `b`, on `[lo, hi]²` with `n` points per axis.
pub fn grid_minimax(f: impl Fn(f64, f64) -> f64, lo: f64, hi: f64, n: usize, a: (f64, f64), b: (f64, f64)) -> f64 {
    let coord = |i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
    let cell = |p: (f64, f64)| {
        let idx = |v: f64| (((v - lo) / (hi - lo) * (n - 1) as f64).round() as usize).min(n - 1);
        idx(p.0) * n + idx(p.1)
    };
    let vals: Vec<f64> = (0..n * n).map(|k| f(coord(k / n), coord(k % n))).collect();
    let (start, goal) = (cell(a), cell(b));
    let mut best = vec![f64::INFINITY; n * n];
    best[start] = vals[start];
    #[derive(PartialEq)]
    struct Item(f64, usize);
    impl Eq for Item {}
    impl PartialOrd for Item {
        fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(o))
        }
    }
    impl Ord for Item {
        fn cmp(&self, o: &Self) -> std::cmp::Ordering {
            o.0.total_cmp(&self.0)
        }
    }
    let mut heap = BinaryHeap::new();
    heap.push(Item(vals[start], start));
    while let Some(Item(c, k)) = heap.pop() {
        if k == goal {
            return c;
        }
        if c > best[k] {
            continue;
        }
        let (i, j) = (k / n, k % n);
        let mut nb = Vec::with_capacity(4);
        if i > 0 {
            nb.push(k - n);
        }
        if i + 1 < n {
            nb.push(k + n);
        }
        if j > 0 {
            nb.push(k - 1);
        }
        if j + 1 < n {
            nb.push(k + 1);
        }
        for q in nb {
            let nc = c.max(vals[q]);
            if nc < best[q] {
                best[q] = nc;
                heap.push(Item(nc, q));
            }
        }
    }
    best[goal]
}

/// `θᵀAθ` for a dense symmetric `A`.
pub struct Quadratic {
    pub layout: Arc<Layout>,
    pub a: Vec<f32>,
    pub n: usize,
}

impl Quadratic {
    pub fn new(a: Vec<f32>, n: usize) -> Self {
        Quadratic { layout: Arc::new(Layout::new([("theta", vec![n])])), a, n }
    }

    pub fn params(&self, v: Vec<f32>) -> ParamVector {
        ParamVector::from_values(self.layout.clone(), v).unwrap()
    }
}

impl Objective for Quadratic {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn record(&self, tape: &mut Tape, params: &[Var]) -> llab_autodiff::Result<Var> {
        let theta = tape.reshape(params[0], vec![self.n, 1])?;
        let a = tape.constant(Tensor::new(vec![self.n, self.n], self.a.clone())?)?;
        let at = tape.matmul(a, theta, false, false)?;
        let q = tape.matmul(theta, at, true, false)?;
        tape.sum(q)
    }
}

/// Two minima at `(±1, 0)` joined by the curved valley `y = c(1 − x²)`:
/// `L = s(x² − 1)² + (y − c(1 − x²))²`. The lowest ridge crossing is `s`.
pub struct TwoBasin {
    pub layout: Arc<Layout>,
    pub s: f32,
    pub c: f32,
}

impl TwoBasin {
    pub fn new(s: f32, c: f32) -> Self {
        TwoBasin { layout: Arc::new(Layout::new([("xy", vec![2])])), s, c }
    }

    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        let (s, c) = (self.s as f64, self.c as f64);
        s * (x * x - 1.0).powi(2) + (y - c * (1.0 - x * x)).powi(2)
    }

    pub fn point(&self, x: f32, y: f32) -> ParamVector {
        ParamVector::from_values(self.layout.clone(), vec![x, y]).unwrap()
    }
}

impl Objective for TwoBasin {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn record(&self, tape: &mut Tape, params: &[Var]) -> llab_autodiff::Result<Var> {
        let ex = tape.constant(Tensor::vector(vec![1.0, 0.0]))?;
        let ey = tape.constant(Tensor::vector(vec![0.0, 1.0]))?;
        let x = tape.dot(params[0], ex)?;
        let y = tape.dot(params[0], ey)?;
        let x2 = tape.mul(x, x)?;
        let a = tape.affine(x2, 1.0, -1.0)?;
        let a2 = tape.mul(a, a)?;
        let first = tape.scale(a2, self.s)?;
        let valley = tape.affine(x2, -self.c, self.c)?;
        let r = tape.sub(y, valley)?;
        let r2 = tape.mul(r, r)?;
        tape.add(first, r2)
    }
}

/// Float parameters of a model as f64.
pub fn as_f64(p: &ParamVector) -> Vec<f64> {
    p.values().iter().map(|&v| v as f64).collect()
}

/// Parameter vector of `model` from f64 values.
pub fn from_f64(model: &Model, v: &[f64]) -> ParamVector {
    ParamVector::from_values(model.layout().clone(), v.iter().map(|&x| x as f32).collect()).unwrap()
}

/// A trained 2-2-2 sigmoid MLP (12 parameters) with quantized weights, the
/// split it is judged on and its top-4 Hessian eigenpairs.
pub struct FlipToy {
    pub model: Model,
    pub params: ParamVector,
    pub test: Split,
    pub hessian: HessianReport,
}

fn teacher_split(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Split {
    let x: Vec<f32> = (0..2 * n).map(|_| r.random_range(-1.0..1.0)).collect();
    let y: Vec<f32> = x
        .chunks(2)
        .flat_map(|p| [(2.0 * p[0]).sin() + 0.5 * p[1], 2.0 * p[0] * p[1]])
        .collect();
    Split::new(Tensor::new(vec![n, 2], x).unwrap(), Tensor::new(vec![n, 2], y).unwrap())
}

pub fn flip_toy(seed: u64, bits: u32) -> FlipToy {
    let spec = ModelSpec::mlp("toy", &[2, 2, 2], LayerSpec::Sigmoid);
    let (m, p) = build_model(spec, seed).unwrap();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let data = Dataset {
        spec: DatasetSpec { task: Task::Regress, size: 96, seed },
        train: teacher_split(&mut r, 64),
        test: teacher_split(&mut r, 32),
    };
    let mut cfg = TrainConfig::new(m.name(), Regularizer::None, Some(bits), seed);
    cfg.epochs = 60;
    cfg.batch_size = 16;
    cfg.learning_rate = 0.02;
    let t = train(&m, p, &data, &cfg).unwrap();
    let hc = HessianConfig { k: 4, tol: 1e-6, max_iters: 500, probes: 1, seed, batch_size: 256 };
    let hessian = analyze(&t.model, &t.params, &data.test, &hc).unwrap();
    FlipToy { model: t.model, params: t.params, test: data.test, hessian }
}

/// Loss increase of every single-bit flip of every quantized parameter,
/// computed with the f64 reference forward. Sorted most damaging first.
pub fn exhaustive_single_flips(spec: &ModelSpec, qp: &QuantizedParams, split: &Split) -> Vec<((usize, u32), f64)> {
    let mut theta: Vec<f64> = Vec::with_capacity(qp.layout().len());
    let mut slots = Vec::new();
    for (seg, stored) in qp.layout().segments().iter().zip(qp.segments()) {
        match stored {
            StoredSegment::Float(v) => theta.extend(v.iter().map(|&x| x as f64)),
            StoredSegment::Quantized(q) => {
                let s = q.spec();
                for (j, &c) in q.codes().iter().enumerate() {
                    theta.push(c as f64 * s.scale() as f64);
                    slots.push((seg.offset + j, c as i64, s.bits(), s.scale() as f64));
                }
            }
        }
    }
    let clean = reference_loss(spec, &theta, &split.inputs, &split.targets);
    let mut out = Vec::new();
    for &(idx, code, bits, scale) in &slots {
        for bit in 0..bits {
            // Two's complement on `bits` bits, then sign-extend.
            let modulus = 1i64 << bits;
            let u = code.rem_euclid(modulus) ^ (1 << bit);
            let flipped = if u >= modulus / 2 { u - modulus } else { u };
            let mut t = theta.clone();
            t[idx] = flipped as f64 * scale;
            out.push(((idx, bit), reference_loss(spec, &t, &split.inputs, &split.targets) - clean));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}
