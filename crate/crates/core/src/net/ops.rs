//! Single-sample tensor kernels with their backward passes. Tensors are
//! channel-major `C × H × W` in `f32`.

use matrixmultiply::sgemm;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = alpha·A·B + beta·C` on row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index reached through the
    // given strides (each operand is a dense m×k, k×n or m×n matrix).
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `k × k` patches with zero "same" padding into a
/// `(C·k·k) × (H·W)` matrix.
pub fn im2col(x: &Tensor, k: usize) -> Vec<f32> {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut col = vec![0.0f32; x.c * k * k * hw];
    for c in 0..x.c {
        let src = &x.data[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        continue;
                    }
                    let s = sy as usize * w;
                    let d = &mut dst[y * w + x0..y * w + x1];
                    let from = (s as isize + x0 as isize + dx) as usize;
                    d.copy_from_slice(&src[from..from + (x1 - x0)]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
pub fn col2im(col: &[f32], c: usize, h: usize, w: usize, k: usize) -> Tensor {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let dst = &mut out.data[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        continue;
                    }
                    let from = (sy as usize * w) as isize + x0 as isize + dx;
                    let d = &mut dst[from as usize..from as usize + (x1 - x0)];
                    for (a, b) in d.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *a += b;
                    }
                }
            }
        }
    }
    out
}

/// Same-padded convolution; `weight` is `cout × cin × k × k`.
pub fn conv_forward(x: &Tensor, weight: &[f32], bias: &[f32], cout: usize, k: usize) -> Tensor {
    let hw = x.plane();
    let ckk = x.c * k * k;
    let col;
    let cols: &[f32] = if k == 1 {
        &x.data
    } else {
        col = im2col(x, k);
        &col
    };
    let mut out = Tensor::zeros(cout, x.h, x.w);
    gemm(cout, ckk, hw, weight, (ckk as isize, 1), cols, (hw as isize, 1), 0.0, &mut out.data);
    for (o, b) in out.data.chunks_exact_mut(hw).zip(bias) {
        o.iter_mut().for_each(|v| *v += b);
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient when
/// `need_input_grad` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    x: &Tensor,
    weight: &[f32],
    cout: usize,
    k: usize,
    dy: &Tensor,
    dweight: &mut [f32],
    dbias: &mut [f32],
    need_input_grad: bool,
) -> Option<Tensor> {
    let hw = x.plane();
    let ckk = x.c * k * k;
    let col;
    let cols: &[f32] = if k == 1 {
        &x.data
    } else {
        col = im2col(x, k);
        &col
    };
    // dW += dY · colᵀ
    gemm(cout, hw, ckk, &dy.data, (hw as isize, 1), cols, (1, hw as isize), 1.0, dweight);
    for (db, d) in dbias.iter_mut().zip(dy.data.chunks_exact(hw)) {
        *db += d.iter().sum::<f32>();
    }
    if !need_input_grad {
        return None;
    }
    // dcol = Wᵀ · dY
    let mut dcol = vec![0.0f32; ckk * hw];
    gemm(ckk, cout, hw, weight, (1, ckk as isize), &dy.data, (hw as isize, 1), 0.0, &mut dcol);
    Some(if k == 1 {
        Tensor {
            c: x.c,
            h: x.h,
            w: x.w,
            data: dcol,
        }
    } else {
        col2im(&dcol, x.c, x.h, x.w, k)
    })
}

pub fn relu(mut x: Tensor) -> Tensor {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(out: &Tensor, mut dy: Tensor) -> Tensor {
    for (d, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    dy
}

/// 2×2 max-pool; returns the pooled tensor and the flat source index of
/// every output.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    let mut idx = vec![0u32; x.c * h2 * w2];
    for c in 0..x.c {
        let base = c * x.h * x.w;
        for y in 0..h2 {
            for xx in 0..w2 {
                let cands = [
                    base + 2 * y * x.w + 2 * xx,
                    base + 2 * y * x.w + 2 * xx + 1,
                    base + (2 * y + 1) * x.w + 2 * xx,
                    base + (2 * y + 1) * x.w + 2 * xx + 1,
                ];
                let mut best = cands[0];
                for &i in &cands[1..] {
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = (c * h2 + y) * w2 + xx;
                out.data[o] = x.data[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward(dy: &Tensor, idx: &[u32], c: usize, h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(c, h, w);
    for (&i, &g) in idx.iter().zip(&dy.data) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Source taps of a half-pixel bilinear 2× upsample along one axis.
fn up_taps(o: usize, n: usize) -> [(usize, f32); 2] {
    let i = o / 2;
    if o % 2 == 0 {
        [(i.saturating_sub(1), 0.25), (i, 0.75)]
    } else {
        [(i, 0.75), ((i + 1).min(n - 1), 0.25)]
    }
}

/// Bilinear 2× upsampling (half-pixel centres, edge clamped).
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    let xt: Vec<[(usize, f32); 2]> = (0..w2).map(|o| up_taps(o, x.w)).collect();
    let mut row = vec![0.0f32; w2];
    for c in 0..x.c {
        let src = &x.data[c * x.h * x.w..(c + 1) * x.h * x.w];
        for oy in 0..h2 {
            let yt = up_taps(oy, x.h);
            for (ox, t) in xt.iter().enumerate() {
                let mut v = 0.0;
                for &(sy, wy) in &yt {
                    let r = &src[sy * x.w..];
                    v += wy * (t[0].1 * r[t[0].0] + t[1].1 * r[t[1].0]);
                }
                row[ox] = v;
            }
            out.data[(c * h2 + oy) * w2..(c * h2 + oy + 1) * w2].copy_from_slice(&row);
        }
    }
    out
}

/// Adjoint of [`upsample2`].
pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, h, w);
    let xt: Vec<[(usize, f32); 2]> = (0..dy.w).map(|o| up_taps(o, w)).collect();
    for c in 0..dy.c {
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for oy in 0..dy.h {
            let yt = up_taps(oy, h);
            let g = &dy.data[(c * dy.h + oy) * dy.w..(c * dy.h + oy + 1) * dy.w];
            for &(sy, wy) in &yt {
                let r = &mut dst[sy * w..(sy + 1) * w];
                for (ox, t) in xt.iter().enumerate() {
                    let v = wy * g[ox];
                    r[t[0].0] += t[0].1 * v;
                    r[t[1].0] += t[1].1 * v;
                }
            }
        }
    }
    dx
}

/// Channel concatenation `[a; b]`.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Splits a concatenated gradient back into `(first ca channels, rest)`.
pub fn split(d: Tensor, ca: usize) -> (Tensor, Tensor) {
    let plane = d.plane();
    let mut data = d.data;
    let rest = data.split_off(ca * plane);
    (
        Tensor {
            c: ca,
            h: d.h,
            w: d.w,
            data,
        },
        Tensor {
            c: d.c - ca,
            h: d.h,
            w: d.w,
            data: rest,
        },
    )
}
