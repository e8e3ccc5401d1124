//! Numeric kernels shared by the tape and by tape-free evaluation.
//!
//! Storage is `f32`; every reduction accumulates in `f64` and rounds once.

/// Largest code of a signed `bits`-wide integer grid.
pub fn quant_max(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// Smallest code of a signed `bits`-wide integer grid.
pub fn quant_min(bits: u32) -> i32 {
    -(1i32 << (bits - 1))
}

/// `clamp(round_half_even(w / scale))` on the signed `bits` grid.
pub fn quantize_code(w: f32, scale: f32, bits: u32) -> i32 {
    let q = (w / scale).round_ties_even();
    let lo = quant_min(bits) as f32;
    let hi = quant_max(bits) as f32;
    q.clamp(lo, hi) as i32
}

pub fn fake_quant(w: &[f32], scale: f32, bits: u32) -> Vec<f32> {
    w.iter().map(|&v| quantize_code(v, scale, bits) as f32 * scale).collect()
}

/// Clipped straight-through mask: 1 where `|w / scale| <= qmax`.
pub fn ste_mask(w: &[f32], scale: f32, bits: u32) -> Vec<f32> {
    let hi = quant_max(bits) as f32;
    w.iter().map(|&v| if (v / scale).abs() <= hi { 1.0 } else { 0.0 }).collect()
}

pub fn sum(x: &[f32]) -> f32 {
    x.iter().map(|&v| v as f64).sum::<f64>() as f32
}

pub fn mean(x: &[f32]) -> f32 {
    (x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64) as f32
}

pub fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn mul(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn affine(a: &[f32], scale: f32, shift: f32) -> Vec<f32> {
    a.iter().map(|x| x * scale + shift).collect()
}

pub fn relu(a: &[f32]) -> Vec<f32> {
    a.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
}

pub fn relu_mask(a: &[f32]) -> Vec<f32> {
    a.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect()
}

pub fn sigmoid(a: &[f32]) -> Vec<f32> {
    a.iter().map(|&x| (1.0 / (1.0 + (-(x as f64)).exp())) as f32).collect()
}

/// Mean squared error over all elements, computed as `mean((p - t)^2)`.
pub fn mse(pred: &[f32], target: &[f32]) -> f32 {
    let diff = add(pred, &affine(target, -1.0, 0.0));
    mean(&mul(&diff, &diff))
}

fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `op(A) · op(B)` where `op` optionally transposes. `a_shape`/`b_shape` are the
/// stored shapes. Returns the product and its shape `(m, n)`.
pub fn matmul(
    a: &[f32],
    a_shape: (usize, usize),
    b: &[f32],
    b_shape: (usize, usize),
    ta: bool,
    tb: bool,
) -> (Vec<f32>, (usize, usize)) {
    // Row-major op(A) [m, k] and op(B)^T [n, k] so the inner loop is contiguous.
    let (m, k) = if ta { (a_shape.1, a_shape.0) } else { a_shape };
    let n = if tb { b_shape.0 } else { b_shape.1 };
    let a_rows = if ta { transpose(a, a_shape.0, a_shape.1) } else { a.to_vec() };
    let b_cols = if tb { b.to_vec() } else { transpose(b, b_shape.0, b_shape.1) };
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let ar = &a_rows[i * k..(i + 1) * k];
        for j in 0..n {
            let bc = &b_cols[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for t in 0..k {
                acc += ar[t] as f64 * bc[t] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    (out, (m, n))
}

/// Spatial geometry of a stride-1 zero-padded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    #[inline]
    fn src(&self, i: usize, d: usize, limit: usize) -> Option<usize> {
        let p = i + d;
        if p < self.pad || p - self.pad >= limit {
            None
        } else {
            Some(p - self.pad)
        }
    }
}

/// `y[n,o,i,j] = sum_{c,di,dj} x[n,c,i+di-p,j+dj-p] k[o,c,di,dj]`.
pub fn conv2d(x: &[f32], k: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut y = vec![0.0f32; g.batch * g.out_ch * oh * ow];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..g.in_ch {
                        let xb = (n * g.in_ch + c) * g.h * g.w;
                        let kb = (o * g.in_ch + c) * g.kh * g.kw;
                        for di in 0..g.kh {
                            let Some(si) = g.src(i, di, g.h) else { continue };
                            for dj in 0..g.kw {
                                let Some(sj) = g.src(j, dj, g.w) else { continue };
                                acc += x[xb + si * g.w + sj] as f64 * k[kb + di * g.kw + dj] as f64;
                            }
                        }
                    }
                    y[((n * g.out_ch + o) * oh + i) * ow + j] = acc as f32;
                }
            }
        }
    }
    y
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(dy: &[f32], k: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dx = vec![0.0f32; g.batch * g.in_ch * g.h * g.w];
    for n in 0..g.batch {
        for c in 0..g.in_ch {
            for a in 0..g.h {
                for b in 0..g.w {
                    let mut acc = 0.0f64;
                    for o in 0..g.out_ch {
                        let yb = (n * g.out_ch + o) * oh * ow;
                        let kb = (o * g.in_ch + c) * g.kh * g.kw;
                        for di in 0..g.kh {
                            // output row i with i + di - pad == a
                            let ip = a + g.pad;
                            if ip < di || ip - di >= oh {
                                continue;
                            }
                            let i = ip - di;
                            for dj in 0..g.kw {
                                let jp = b + g.pad;
                                if jp < dj || jp - dj >= ow {
                                    continue;
                                }
                                let j = jp - dj;
                                acc += dy[yb + i * ow + j] as f64 * k[kb + di * g.kw + dj] as f64;
                            }
                        }
                    }
                    dx[((n * g.in_ch + c) * g.h + a) * g.w + b] = acc as f32;
                }
            }
        }
    }
    dx
}

/// Gradient of `<conv2d(x, k), dy>` with respect to `k`.
pub fn conv2d_kernel_grad(x: &[f32], dy: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dk = vec![0.0f32; g.out_ch * g.in_ch * g.kh * g.kw];
    for o in 0..g.out_ch {
        for c in 0..g.in_ch {
            for di in 0..g.kh {
                for dj in 0..g.kw {
                    let mut acc = 0.0f64;
                    for n in 0..g.batch {
                        let xb = (n * g.in_ch + c) * g.h * g.w;
                        let yb = (n * g.out_ch + o) * oh * ow;
                        for i in 0..oh {
                            let Some(si) = g.src(i, di, g.h) else { continue };
                            for j in 0..ow {
                                let Some(sj) = g.src(j, dj, g.w) else { continue };
                                acc += x[xb + si * g.w + sj] as f64 * dy[yb + i * ow + j] as f64;
                            }
                        }
                    }
                    dk[((o * g.in_ch + c) * g.kh + di) * g.kw + dj] = acc as f32;
                }
            }
        }
    }
    dk
}

/// Repeats a per-channel vector `[c]` into `[n, c, s]`.
pub fn broadcast_channels(v: &[f32], n: usize, s: usize) -> Vec<f32> {
    let c = v.len();
    let mut out = Vec::with_capacity(n * c * s);
    for _ in 0..n {
        for &val in v {
            out.extend(std::iter::repeat_n(val, s));
        }
    }
    out
}

/// Sums `[n, c, s]` down to `[c]`.
pub fn sum_channels(x: &[f32], n: usize, c: usize, s: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; c];
    for b in 0..n {
        for (ch, a) in acc.iter_mut().enumerate() {
            let base = (b * c + ch) * s;
            *a += x[base..base + s].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transposes_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let (c, shape) = matmul(&a, (2, 3), &b, (3, 2), false, false);
        assert_eq!(shape, (2, 2));
        assert_eq!(c, vec![1.0 - 2.0 + 1.5, 0.0 + 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);
        let at = transpose(&a, 2, 3);
        let bt = transpose(&b, 3, 2);
        let (c2, _) = matmul(&at, (3, 2), &bt, (2, 3), true, true);
        assert_eq!(c, c2);
    }

    #[test]
    fn conv_identity_kernel() {
        let g = ConvGeom { batch: 1, in_ch: 1, out_ch: 1, h: 3, w: 3, kh: 3, kw: 3, pad: 1 };
        let x: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        assert_eq!(conv2d(&x, &k, &g), x);
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        let g = ConvGeom { batch: 2, in_ch: 2, out_ch: 3, h: 5, w: 4, kh: 3, kw: 2, pad: 1 };
        let lcg = |seed: u32, n: usize| -> Vec<f32> {
            let mut s = seed;
            (0..n)
                .map(|_| {
                    s = s.wrapping_mul(1664525).wrapping_add(1013904223);
                    (s >> 8) as f32 / (1u32 << 24) as f32 - 0.5
                })
                .collect()
        };
        let x = lcg(1, g.batch * g.in_ch * g.h * g.w);
        let k = lcg(2, g.out_ch * g.in_ch * g.kh * g.kw);
        let dy = lcg(3, g.batch * g.out_ch * g.out_h() * g.out_w());
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
        let lhs = dot(&conv2d(&x, &k, &g), &dy);
        let via_x = dot(&x, &conv2d_input_grad(&dy, &k, &g));
        let via_k = dot(&k, &conv2d_kernel_grad(&x, &dy, &g));
        assert!((lhs - via_x).abs() < 1e-5);
        assert!((lhs - via_k).abs() < 1e-5);
    }

    #[test]
    fn quantize_code_rounds_half_even_and_clamps() {
        assert_eq!(quantize_code(0.74, 0.5, 3), 1);
        assert_eq!(quantize_code(100.0, 0.5, 3), 3);
        assert_eq!(quantize_code(-100.0, 0.5, 3), -4);
        assert_eq!(quantize_code(0.25, 0.5, 4), 0);
        assert_eq!(quantize_code(0.75, 0.5, 4), 2);
    }
}
