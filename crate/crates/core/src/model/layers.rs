//! Forward/backward kernels for the reference backbone. Each kernel works on a
//! single C×H×W sample; batching happens one level up.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Unrolls `k×k` patches (zero padding `k/2`) into a `[cin·k·k, H·W]` matrix.
pub fn im2col<S: Scalar>(x: &Tensor<S>, k: usize) -> Vec<S> {
    let (c, h, w) = x.shape();
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![S::zero(); c * k * k * hw];
    for ci in 0..c {
        let src = x.channel(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + s0..sy * w + s0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize, k: usize) -> Tensor<S> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let dst = out.channel_mut(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    for xx in x0..x1 {
                        let sx = (xx as isize + dx) as usize;
                        dst[sy * w + sx] += src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// Same-padded `k×k` convolution. Returns the output and the unrolled input
/// needed for the backward pass (`None` when `keep_cols` is false).
pub fn conv_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &[S],
    bias: &[S],
    cout: usize,
    k: usize,
    keep_cols: bool,
) -> (Tensor<S>, Option<Vec<S>>) {
    let (cin, h, w) = x.shape();
    let hw = h * w;
    let kk = cin * k * k;
    debug_assert_eq!(weight.len(), cout * kk);
    let mut out = Tensor::zeros(cout, h, w);
    for (co, &b) in bias.iter().enumerate() {
        out.channel_mut(co).fill(b);
    }
    if k == 1 {
        S::gemm(cout, kk, hw, S::one(), weight, false, &x.data, false, S::one(), &mut out.data);
        return (out, keep_cols.then(|| x.data.clone()));
    }
    let cols = im2col(x, k);
    S::gemm(cout, kk, hw, S::one(), weight, false, &cols, false, S::one(), &mut out.data);
    (out, keep_cols.then_some(cols))
}

/// Accumulates weight/bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<S: Scalar>(
    d_out: &Tensor<S>,
    cols: &[S],
    weight: &[S],
    cin: usize,
    k: usize,
    d_weight: &mut [S],
    d_bias: &mut [S],
    need_input_grad: bool,
) -> Option<Tensor<S>> {
    let (cout, h, w) = d_out.shape();
    let hw = h * w;
    let kk = cin * k * k;
    S::gemm(cout, hw, kk, S::one(), &d_out.data, false, cols, true, S::one(), d_weight);
    for (co, db) in d_bias.iter_mut().enumerate() {
        *db += d_out.channel(co).iter().copied().sum::<S>();
    }
    if !need_input_grad {
        return None;
    }
    let mut d_cols = vec![S::zero(); kk * hw];
    S::gemm(kk, cout, hw, S::one(), weight, true, &d_out.data, false, S::zero(), &mut d_cols);
    if k == 1 {
        return Some(Tensor {
            channels: cin,
            height: h,
            width: w,
            data: d_cols,
        });
    }
    Some(col2im(&d_cols, cin, h, w, k))
}

/// 2×2 stride-2 transposed convolution. Weight layout `[4][cout][cin]`
/// indexed by sub-pixel offset `dy·2 + dx`.
pub fn up_forward<S: Scalar>(x: &Tensor<S>, weight: &[S], bias: &[S], cout: usize) -> Tensor<S> {
    let (cin, h, w) = x.shape();
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(cout, oh, ow);
    let mut sub = vec![S::zero(); cout * hw];
    for q in 0..4 {
        let (dy, dx) = (q / 2, q % 2);
        let wq = &weight[q * cout * cin..(q + 1) * cout * cin];
        S::gemm(cout, cin, hw, S::one(), wq, false, &x.data, false, S::zero(), &mut sub);
        for co in 0..cout {
            let b = bias[co];
            let src = &sub[co * hw..(co + 1) * hw];
            let dst = out.channel_mut(co);
            for y in 0..h {
                for xx in 0..w {
                    dst[(2 * y + dy) * ow + 2 * xx + dx] = src[y * w + xx] + b;
                }
            }
        }
    }
    out
}

pub fn up_backward<S: Scalar>(
    d_out: &Tensor<S>,
    x: &Tensor<S>,
    weight: &[S],
    d_weight: &mut [S],
    d_bias: &mut [S],
) -> Tensor<S> {
    let (cin, h, w) = x.shape();
    let cout = d_out.channels;
    let hw = h * w;
    let ow = d_out.width;
    let mut dx = Tensor::zeros(cin, h, w);
    let mut dsub = vec![S::zero(); cout * hw];
    for (co, db) in d_bias.iter_mut().enumerate() {
        *db += d_out.channel(co).iter().copied().sum::<S>();
    }
    for q in 0..4 {
        let (dy, dxo) = (q / 2, q % 2);
        for co in 0..cout {
            let src = d_out.channel(co);
            let dst = &mut dsub[co * hw..(co + 1) * hw];
            for y in 0..h {
                for xx in 0..w {
                    dst[y * w + xx] = src[(2 * y + dy) * ow + 2 * xx + dxo];
                }
            }
        }
        let range = q * cout * cin..(q + 1) * cout * cin;
        S::gemm(cout, hw, cin, S::one(), &dsub, false, &x.data, true, S::one(), &mut d_weight[range.clone()]);
        S::gemm(cin, cout, hw, S::one(), &weight[range], true, &dsub, false, S::one(), &mut dx.data);
    }
    dx
}

/// 2×2 max pooling; returns the pooled map and the flat argmax per output cell.
pub fn pool_forward<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, Vec<u32>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut arg = vec![0u32; c * oh * ow];
    for ci in 0..c {
        let src = x.channel(ci);
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = 2 * y * w + 2 * xx;
                for &off in &[1, w, w + 1] {
                    let i = 2 * y * w + 2 * xx + off;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                let o = (ci * oh + y) * ow + xx;
                out.data[o] = src[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn pool_backward<S: Scalar>(d_out: &Tensor<S>, arg: &[u32], h: usize, w: usize) -> Tensor<S> {
    let c = d_out.channels;
    let plane_out = d_out.plane();
    let mut dx = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let dst = dx.channel_mut(ci);
        for j in 0..plane_out {
            let o = ci * plane_out + j;
            dst[arg[o] as usize] += d_out.data[o];
        }
    }
    dx
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-channel normalization to zero mean and unit variance.
/// Returns the normalized map and per-channel `1/σ`.
pub fn norm_forward<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, Vec<S>) {
    let n = S::lit(x.plane() as f64);
    let eps = S::lit(NORM_EPS);
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let ch = out.channel_mut(c);
        let mean = ch.iter().copied().sum::<S>() / n;
        let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let is = S::one() / (var + eps).sqrt();
        for v in ch.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}

pub fn norm_backward<S: Scalar>(d_out: &Tensor<S>, normed: &Tensor<S>, inv: &[S]) -> Tensor<S> {
    let n = S::lit(d_out.plane() as f64);
    let mut dx = d_out.clone();
    for c in 0..d_out.channels {
        let dy = d_out.channel(c);
        let xh = normed.channel(c);
        let sum_dy = dy.iter().copied().sum::<S>();
        let sum_dy_xh = dy.iter().zip(xh).map(|(&a, &b)| a * b).sum::<S>();
        let scale = inv[c] / n;
        for ((d, &g), &xv) in dx.channel_mut(c).iter_mut().zip(dy).zip(xh) {
            *d = scale * (n * g - sum_dy - xv * sum_dy_xh);
        }
    }
    dx
}

pub fn relu_inplace<S: Scalar>(x: &mut Tensor<S>) {
    for v in x.data.iter_mut() {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace<S: Scalar>(d: &mut Tensor<S>, out: &Tensor<S>) {
    for (g, &o) in d.data.iter_mut().zip(&out.data) {
        if o <= S::zero() {
            *g = S::zero();
        }
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|i| ((i * 7919) % 23) as f64 / 11.0 - 1.0).collect())
            .unwrap()
    }

    fn direct_conv(x: &Tensor<f64>, wt: &[f64], b: &[f64], cout: usize, k: usize) -> Tensor<f64> {
        let (cin, h, w) = x.shape();
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(cout, h, w);
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                s += wt[((co * cin + ci) * k + ky) * k + kx]
                                    * x.channel(ci)[sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out.channel_mut(co)[y * w + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let x = seq(3, 5, 4);
        for k in [1usize, 3] {
            let cout = 2;
            let wt: Vec<f64> = (0..cout * 3 * k * k).map(|i| (i as f64 * 0.3).sin()).collect();
            let b = vec![0.1, -0.2];
            let (got, _) = conv_forward(&x, &wt, &b, cout, k, false);
            let want = direct_conv(&x, &wt, &b, cout, k);
            for (a, e) in got.data.iter().zip(&want.data) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let x = seq(2, 4, 5);
        let cols = im2col(&x, 3);
        let c: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.17).cos()).collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = col2im(&c, 2, 4, 5, 3);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn up_places_subpixels() {
        let x = Tensor::from_vec(1, 1, 1, vec![2.0]).unwrap();
        let wt = vec![1.0, 2.0, 3.0, 4.0];
        let out = up_forward(&x, &wt, &[0.5], 1);
        assert_eq!(out.data, vec![2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn pool_picks_max_and_routes_gradient() {
        let x = Tensor::from_vec(1, 2, 4, vec![1.0, 5.0, 0.0, 0.0, 2.0, 3.0, 0.0, 9.0]).unwrap();
        let (p, arg) = pool_forward(&x);
        assert_eq!(p.data, vec![5.0, 9.0]);
        let d = pool_backward(&Tensor::from_vec(1, 1, 2, vec![1.0, 2.0]).unwrap(), &arg, 2, 4);
        assert_eq!(d.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn norm_output_is_standardized() {
        let x = seq(2, 4, 4);
        let (y, _) = norm_forward(&x);
        for c in 0..2 {
            let ch = y.channel(c);
            let m: f64 = ch.iter().sum::<f64>() / 16.0;
            let v: f64 = ch.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
    }
}
