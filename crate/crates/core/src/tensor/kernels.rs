//! Raw numeric kernels behind the graph operations. Everything here works on
//! plain slices in `C×H×W` layout; shape validation happens in the graph.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k_w) / self.stride + 1
    }

    /// Range of output indices whose tap `k` lands inside `[0, len)`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // o*s + off >= 0  and  o*s + off <= len-1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = (len as isize - 1 - off).div_euclid(s) + 1;
        let hi = hi.clamp(0, out_len as isize);
        (lo.min(hi) as usize, hi as usize)
    }
}

/// Unfold the input into a `(C·kh·kw) × (oh·ow)` patch matrix; padded taps
/// stay zero.
fn im2col<T: Scalar>(g: &ConvGeom, input: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_in = g.in_h * g.in_w;
    let plane_out = oh * ow;
    let mut col = vec![T::zero(); g.in_c * g.k_h * g.k_w * plane_out];
    for c in 0..g.in_c {
        let in_p = &input[c * plane_in..(c + 1) * plane_in];
        for ky in 0..g.k_h {
            let (y0, y1) = g.valid(ky, g.in_h, oh);
            for kx in 0..g.k_w {
                let (x0, x1) = g.valid(kx, g.in_w, ow);
                let r = (c * g.k_h + ky) * g.k_w + kx;
                let dst = &mut col[r * plane_out..(r + 1) * plane_out];
                if x0 >= x1 {
                    continue;
                }
                let ix0 = x0 * g.stride + kx - g.pad;
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &in_p[iy * g.in_w + ix0..(iy + 1) * g.in_w];
                    let row = &mut dst[oy * ow + x0..oy * ow + x1];
                    for (d, &v) in row.iter_mut().zip(src.iter().step_by(g.stride)) {
                        *d = v;
                    }
                }
            }
        }
    }
    col
}

/// Fold a patch-matrix gradient back onto the input, summing overlaps.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_in = g.in_h * g.in_w;
    let plane_out = oh * ow;
    let mut out = vec![T::zero(); g.in_c * plane_in];
    for c in 0..g.in_c {
        let out_p = &mut out[c * plane_in..(c + 1) * plane_in];
        for ky in 0..g.k_h {
            let (y0, y1) = g.valid(ky, g.in_h, oh);
            for kx in 0..g.k_w {
                let (x0, x1) = g.valid(kx, g.in_w, ow);
                if x0 >= x1 {
                    continue;
                }
                let r = (c * g.k_h + ky) * g.k_w + kx;
                let src = &col[r * plane_out..(r + 1) * plane_out];
                let ix0 = x0 * g.stride + kx - g.pad;
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut out_p[iy * g.in_w + ix0..(iy + 1) * g.in_w];
                    let row = &src[oy * ow + x0..oy * ow + x1];
                    for (d, &v) in dst.iter_mut().step_by(g.stride).zip(row) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
    out
}

/// `acc += a * x`
fn axpy<T: Scalar>(acc: &mut [T], a: T, x: &[T]) {
    for (d, &v) in acc.iter_mut().zip(x) {
        *d = *d + a * v;
    }
}

/// Dot product with eight independent partial sums, combined in a fixed
/// order.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            lanes[i] = lanes[i] + x[i] * y[i];
        }
    }
    let mut s = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s = s + x * y;
    }
    lanes.iter().fold(s, |acc, &v| acc + v)
}

pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane_out = g.out_h() * g.out_w();
    let taps = g.in_c * g.k_h * g.k_w;
    let col = im2col(g, input);
    let mut out = vec![T::zero(); g.out_c * plane_out];
    for o in 0..g.out_c {
        let out_p = &mut out[o * plane_out..(o + 1) * plane_out];
        if let Some(b) = bias {
            out_p.iter_mut().for_each(|v| *v = b[o]);
        }
        for r in 0..taps {
            let w = weight[o * taps + r];
            if w != T::zero() {
                axpy(out_p, w, &col[r * plane_out..(r + 1) * plane_out]);
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`; the first two only when
/// requested.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let plane_out = g.out_h() * g.out_w();
    let taps = g.in_c * g.k_h * g.k_w;
    let go = |o: usize| &grad_out[o * plane_out..(o + 1) * plane_out];
    let gb: Vec<T> = (0..g.out_c).map(|o| go(o).iter().copied().sum()).collect();
    let gw = need_weight.then(|| {
        let col = im2col(g, input);
        let mut gw = vec![T::zero(); weight.len()];
        for o in 0..g.out_c {
            for r in 0..taps {
                gw[o * taps + r] = dot(go(o), &col[r * plane_out..(r + 1) * plane_out]);
            }
        }
        gw
    });
    let gi = need_input.then(|| {
        let mut gcol = vec![T::zero(); taps * plane_out];
        for r in 0..taps {
            let dst = &mut gcol[r * plane_out..(r + 1) * plane_out];
            for o in 0..g.out_c {
                let w = weight[o * taps + r];
                if w != T::zero() {
                    axpy(dst, w, go(o));
                }
            }
        }
        col2im(g, &gcol)
    });
    (gi, gw, gb)
}

pub fn upsample2x<T: Scalar>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src = &input[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            let dst = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(grad: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            let src = &grad[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            let dst = &mut out[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            for (x, &g) in src.iter().enumerate() {
                dst[x / 2] = dst[x / 2] + g;
            }
        }
    }
    out
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Per-channel normalization; returns `(normalized, inv_std per channel)`.
pub fn instance_norm<T: Scalar>(x: &[T], channels: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let plane = x.len() / channels;
    let n = T::of(plane as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(channels);
    for c in 0..channels {
        let xs = &x[c * plane..(c + 1) * plane];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in out[c * plane..(c + 1) * plane].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}

pub fn instance_norm_backward<T: Scalar>(xhat: &[T], inv_std: &[T], grad: &[T]) -> Vec<T> {
    let channels = inv_std.len();
    let plane = xhat.len() / channels;
    let n = T::of(plane as f64);
    let mut out = vec![T::zero(); xhat.len()];
    for c in 0..channels {
        let r = c * plane..(c + 1) * plane;
        let (xh, g) = (&xhat[r.clone()], &grad[r.clone()]);
        let sum_g: T = g.iter().copied().sum();
        let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        let k = inv_std[c] / n;
        for ((o, &gv), &xv) in out[r].iter_mut().zip(g).zip(xh) {
            *o = k * (n * gv - sum_g - xv * sum_gx);
        }
    }
    out
}

/// Softmax over each contiguous block of `plane` values.
pub fn spatial_softmax<T: Scalar>(x: &[T], plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xs, os) in x.chunks(plane).zip(out.chunks_mut(plane)) {
        let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = (v - m).exp();
            total = total + *o;
        }
        for o in os.iter_mut() {
            *o = *o / total;
        }
    }
    out
}

pub fn spatial_softmax_backward<T: Scalar>(y: &[T], grad: &[T], plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((ys, gs), os) in y.chunks(plane).zip(grad.chunks(plane)).zip(out.chunks_mut(plane)) {
        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in os.iter_mut().zip(ys).zip(gs) {
            *o = yv * (gv - dot);
        }
    }
    out
}

/// Output shape of numpy-style broadcasting, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each linear index of `out_shape`, the linear index into a tensor of
/// `shape` under broadcasting.
pub fn broadcast_index(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let padded: Vec<usize> = std::iter::repeat(1)
        .take(rank - shape.len())
        .chain(shape.iter().copied())
        .collect();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        strides[i] = if padded[i] == 1 { 0 } else { acc };
        acc *= padded[i];
    }
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(total);
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sum `grad` (shaped like the broadcast output) back down to `len` slots.
pub fn reduce_broadcast<T: Scalar>(grad: &[T], index: &[usize], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (&g, &i) in grad.iter().zip(index) {
        out[i] = out[i] + g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.out_c * oh * ow];
        for o in 0..g.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..g.in_c {
                        for ky in 0..g.k_h {
                            for kx in 0..g.k_w {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                acc += w[((o * g.in_c + c) * g.k_h + ky) * g.k_w + kx]
                                    * x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn strided_conv_matches_direct_loop() {
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for &(stride, pad, k, h, w) in &[(1, 1, 3, 7, 6), (2, 1, 3, 8, 8), (2, 1, 3, 7, 9), (1, 3, 7, 5, 5), (2, 0, 1, 6, 6)] {
            let g = ConvGeom { in_c: 2, in_h: h, in_w: w, out_c: 3, k_h: k, k_w: k, stride, pad };
            let x: Vec<f64> = (0..2 * h * w).map(|_| next()).collect();
            let wt: Vec<f64> = (0..3 * 2 * k * k).map(|_| next()).collect();
            let b: Vec<f64> = (0..3).map(|_| next()).collect();
            let fast = conv2d_forward(&g, &x, &wt, Some(&b));
            let slow = direct_conv(&g, &x, &wt, &b);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3, 4, 4], &[1, 4, 4]), Some(vec![3, 4, 4]));
        assert_eq!(broadcast_shape(&[3, 1, 1], &[1, 4, 5]), Some(vec![3, 4, 5]));
        assert_eq!(broadcast_shape(&[4], &[2, 4]), Some(vec![2, 4]));
        assert_eq!(broadcast_shape(&[3], &[4]), None);
        assert_eq!(broadcast_index(&[1, 2], &[3, 2]), vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(broadcast_index(&[3, 1], &[3, 2]), vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn upsample_then_backward_counts_four() {
        let x: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let up = upsample2x(&x, 2, 2, 2);
        assert_eq!(up.len(), 32);
        assert_eq!(up[0..4], [0.0, 0.0, 1.0, 1.0]);
        let back = upsample2x_backward(&vec![1.0; 32], 2, 2, 2);
        assert!(back.iter().all(|&v| v == 4.0));
    }
}
