//! Raw slice kernels shared by the tape's forward and backward rules.

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`
pub fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(grow, brow);
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
pub fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Geometry of a 1-D convolution over a `[time, channels]` signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub t_in: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn conv_out_len(&self) -> Option<usize> {
        let padded = self.t_in + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn transpose_out_len(&self) -> Option<usize> {
        ((self.t_in - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }

    /// Input row feeding output row `t` through tap `k` of a strided convolution.
    #[inline]
    fn src(&self, t: usize, k: usize) -> Option<usize> {
        (t * self.stride + k).checked_sub(self.pad).filter(|&s| s < self.t_in)
    }
}

/// `y[t] = Σ_k x[t·s + k − p] · w[k]` with `w: [kernel, c_in, c_out]`.
pub fn conv1d_forward(x: &[f64], w: &[f64], g: ConvGeom, t_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; t_out * g.c_out];
    let wk = g.c_in * g.c_out;
    for t in 0..t_out {
        let yrow = &mut y[t * g.c_out..(t + 1) * g.c_out];
        for k in 0..g.kernel {
            if let Some(s) = g.src(t, k) {
                let xrow = &x[s * g.c_in..(s + 1) * g.c_in];
                matmul_acc(xrow, &w[k * wk..(k + 1) * wk], yrow, 1, g.c_in, g.c_out);
            }
        }
    }
    y
}

/// Gradients of [`conv1d_forward`] with respect to `x` and `w`.
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    g: ConvGeom,
    t_out: usize,
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
) {
    let wk = g.c_in * g.c_out;
    if let Some(gx) = gx {
        for t in 0..t_out {
            let grow = &gy[t * g.c_out..(t + 1) * g.c_out];
            for k in 0..g.kernel {
                if let Some(s) = g.src(t, k) {
                    let dst = &mut gx[s * g.c_in..(s + 1) * g.c_in];
                    matmul_bt_acc(grow, &w[k * wk..(k + 1) * wk], dst, 1, g.c_in, g.c_out);
                }
            }
        }
    }
    if let Some(gw) = gw {
        for t in 0..t_out {
            let grow = &gy[t * g.c_out..(t + 1) * g.c_out];
            for k in 0..g.kernel {
                if let Some(s) = g.src(t, k) {
                    let xrow = &x[s * g.c_in..(s + 1) * g.c_in];
                    matmul_at_acc(xrow, grow, &mut gw[k * wk..(k + 1) * wk], 1, g.c_in, g.c_out);
                }
            }
        }
    }
}

/// Transposed convolution: `y[t·s + k − p] += x[t] · w[k]`, the adjoint of
/// [`conv1d_forward`] with respect to its input.
pub fn conv_transpose1d_forward(x: &[f64], w: &[f64], g: ConvGeom, t_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; t_out * g.c_out];
    let wk = g.c_in * g.c_out;
    for t in 0..g.t_in {
        let xrow = &x[t * g.c_in..(t + 1) * g.c_in];
        for k in 0..g.kernel {
            let Some(d) = (t * g.stride + k).checked_sub(g.pad).filter(|&d| d < t_out) else {
                continue;
            };
            matmul_acc(xrow, &w[k * wk..(k + 1) * wk], &mut y[d * g.c_out..(d + 1) * g.c_out], 1, g.c_in, g.c_out);
        }
    }
    y
}

pub fn conv_transpose1d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    g: ConvGeom,
    t_out: usize,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
) {
    let wk = g.c_in * g.c_out;
    for t in 0..g.t_in {
        let xrow = &x[t * g.c_in..(t + 1) * g.c_in];
        for k in 0..g.kernel {
            let Some(d) = (t * g.stride + k).checked_sub(g.pad).filter(|&d| d < t_out) else {
                continue;
            };
            let grow = &gy[d * g.c_out..(d + 1) * g.c_out];
            if let Some(gx) = gx.as_deref_mut() {
                matmul_bt_acc(grow, &w[k * wk..(k + 1) * wk], &mut gx[t * g.c_in..(t + 1) * g.c_in], 1, g.c_in, g.c_out);
            }
            if let Some(gw) = gw.as_deref_mut() {
                matmul_at_acc(xrow, grow, &mut gw[k * wk..(k + 1) * wk], 1, g.c_in, g.c_out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        let mut out = vec![0.0; 2];
        matmul_acc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], &mut out, 2, 2, 1);
        assert_eq!(out, vec![3.0, 7.0]);
    }

    #[test]
    fn transpose_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_T(y)> for matching geometry
        let g = ConvGeom { t_in: 12, c_in: 2, c_out: 3, kernel: 4, stride: 2, pad: 1 };
        let t_out = g.conv_out_len().unwrap();
        let x: Vec<f64> = (0..g.t_in * g.c_in).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let w: Vec<f64> = (0..g.kernel * g.c_in * g.c_out).map(|i| ((i * 5 % 13) as f64) * 0.1 - 0.6).collect();
        let y: Vec<f64> = (0..t_out * g.c_out).map(|i| ((i * 3 % 7) as f64) - 3.0).collect();
        let cx = conv1d_forward(&x, &w, g, t_out);
        let lhs = dot(&cx, &y);
        let mut gx = vec![0.0; x.len()];
        conv1d_backward(&x, &w, &y, g, t_out, Some(&mut gx), None);
        assert!((lhs - dot(&x, &gx)).abs() < 1e-9);
    }
}
