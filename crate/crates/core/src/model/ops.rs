//! Kernels shared by the training pass and the incremental decoder.

use super::params::{Adapter, Linear, Norm};
use super::scalar::{matmul, Op, Scalar};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub(crate) struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<f64>,
}

/// Row-wise layer norm of `x` (`n x d`). Statistics are accumulated in f64.
pub(crate) fn layer_norm<T: Scalar>(norm: &Norm<T>, x: &[T], d: usize) -> (Vec<T>, NormCache<T>) {
    let n = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        for k in 0..d {
            let h = (row[k].f64() - mean) * r;
            xhat[i * d + k] = T::of(h);
            y[i * d + k] = T::of(h * norm.gain.data[k].f64() + norm.bias.data[k].f64());
        }
    }
    (y, NormCache { xhat, rstd })
}

/// Adds the input gradient to `dx`; accumulates gain/bias gradients when `grads` is given.
pub(crate) fn layer_norm_backward<T: Scalar>(
    norm: &Norm<T>,
    cache: &NormCache<T>,
    dy: &[T],
    d: usize,
    grads: Option<&mut Norm<T>>,
    dx: &mut [T],
) {
    let n = dy.len() / d;
    if let Some(g) = grads {
        for k in 0..d {
            let (mut dg, mut db) = (0.0, 0.0);
            for i in 0..n {
                dg += dy[i * d + k].f64() * cache.xhat[i * d + k].f64();
                db += dy[i * d + k].f64();
            }
            g.gain.data[k] = T::of(g.gain.data[k].f64() + dg);
            g.bias.data[k] = T::of(g.bias.data[k].f64() + db);
        }
    }
    let mut dxhat = vec![0.0f64; d];
    for i in 0..n {
        let (mut m1, mut m2) = (0.0, 0.0);
        for k in 0..d {
            let v = dy[i * d + k].f64() * norm.gain.data[k].f64();
            dxhat[k] = v;
            m1 += v;
            m2 += v * cache.xhat[i * d + k].f64();
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for k in 0..d {
            let g = cache.rstd[i] * (dxhat[k] - m1 - cache.xhat[i * d + k].f64() * m2);
            dx[i * d + k] = T::of(dx[i * d + k].f64() + g);
        }
    }
}

/// `y = x W + b (+ s * (x A^T) B^T)`. Returns `y` and, with an adapter, `x A^T`.
pub(crate) fn linear<T: Scalar>(lin: &Linear<T>, x: &[T], scale: f64) -> (Vec<T>, Option<Vec<T>>) {
    let (d_in, d_out) = (lin.d_in(), lin.d_out());
    let n = x.len() / d_in;
    let mut y = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        y.extend_from_slice(&lin.bias.data);
    }
    matmul(&mut y, x, Op::N, &lin.weight.data, Op::N, n, d_in, d_out, true);
    let t = lin.lora.as_ref().map(|Adapter { a, b }| {
        let r = a.shape[0];
        let mut t = vec![T::zero(); n * r];
        matmul(&mut t, x, Op::N, &a.data, Op::T, n, d_in, r, false);
        // y += s * t B^T, with B stored d_out x r
        T::gemm(n, r, d_out, T::of(scale), &t, r as isize, 1, &b.data, 1, r as isize, T::one(), &mut y, d_out as isize, 1);
        t
    });
    (y, t)
}

/// Backward of [`linear`]. Returns `dx`; weight and adapter gradients are
/// accumulated into `grads` only where the corresponding flag allows it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(
    lin: &Linear<T>,
    x: &[T],
    t: Option<&[T]>,
    dy: &[T],
    scale: f64,
    grads: &mut Linear<T>,
    train_base: bool,
    train_lora: bool,
) -> Vec<T> {
    let (d_in, d_out) = (lin.d_in(), lin.d_out());
    let n = x.len() / d_in;
    if train_base {
        matmul(&mut grads.weight.data, x, Op::T, dy, Op::N, d_in, n, d_out, true);
        for o in 0..d_out {
            let s: f64 = (0..n).map(|i| dy[i * d_out + o].f64()).sum();
            grads.bias.data[o] = T::of(grads.bias.data[o].f64() + s);
        }
    }
    let mut dx = vec![T::zero(); n * d_in];
    matmul(&mut dx, dy, Op::N, &lin.weight.data, Op::T, n, d_out, d_in, false);
    if let (Some(Adapter { a, b }), Some(t)) = (&lin.lora, t) {
        let r = a.shape[0];
        let s = T::of(scale);
        // dt = s * dy B
        let mut dt = vec![T::zero(); n * r];
        T::gemm(n, d_out, r, s, dy, d_out as isize, 1, &b.data, r as isize, 1, T::zero(), &mut dt, r as isize, 1);
        if train_lora {
            let g = grads.lora.as_mut().expect("gradient adapters mirror the model");
            // dB += s * dy^T t ; dA += dt^T x
            T::gemm(d_out, n, r, s, dy, 1, d_out as isize, t, r as isize, 1, T::one(), &mut g.b.data, r as isize, 1);
            matmul(&mut g.a.data, &dt, Op::T, x, Op::N, r, n, d_in, true);
        }
        matmul(&mut dx, &dt, Op::N, &a.data, Op::N, n, r, d_in, true);
    }
    dx
}

pub(crate) fn gelu<T: Scalar>(u: T) -> T {
    let u = u.f64();
    T::of(0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh()))
}

pub(crate) fn gelu_grad<T: Scalar>(u: T) -> T {
    let u = u.f64();
    let th = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    T::of(0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * u * u))
}

/// A head-strided matrix view: row `i`, head `h`, lane `c` lives at
/// `data[offset + i * stride + h * head_dim + c]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub stride: usize,
}

impl<'a, T> View<'a, T> {
    fn head(&self, h: usize, dh: usize) -> &'a [T] {
        &self.data[self.offset + h * dh..]
    }
}

/// Multi-head attention of `m` query rows over `n_keys` keys. Query row `i`
/// sees keys `0..limit(i)`. Writes probabilities (`heads x m x n_keys`) and
/// the concatenated context (`m x heads*dh`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention<T: Scalar>(
    q: View<'_, T>,
    k: View<'_, T>,
    v: View<'_, T>,
    m: usize,
    n_keys: usize,
    heads: usize,
    dh: usize,
    limit: impl Fn(usize) -> usize,
    probs: &mut [T],
    ctx: &mut [T],
) {
    let d = heads * dh;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    for h in 0..heads {
        let p = &mut probs[h * m * n_keys..(h + 1) * m * n_keys];
        T::gemm(
            m,
            dh,
            n_keys,
            scale,
            q.head(h, dh),
            q.stride as isize,
            1,
            k.head(h, dh),
            1,
            k.stride as isize,
            T::zero(),
            p,
            n_keys as isize,
            1,
        );
        for i in 0..m {
            let row = &mut p[i * n_keys..(i + 1) * n_keys];
            let lim = limit(i);
            let max = row[..lim].iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let mut e = Vec::with_capacity(lim);
            for x in &row[..lim] {
                let v = (x.f64() - max).exp();
                sum += v;
                e.push(v);
            }
            for (x, v) in row[..lim].iter_mut().zip(e) {
                *x = T::of(v / sum);
            }
            row[lim..].iter_mut().for_each(|x| *x = T::zero());
        }
        T::gemm(
            m,
            n_keys,
            dh,
            T::one(),
            p,
            n_keys as isize,
            1,
            v.head(h, dh),
            v.stride as isize,
            1,
            T::zero(),
            &mut ctx[h * dh..],
            d as isize,
            1,
        );
    }
}

/// Backward of self-attention over a fused `n x 3d` qkv buffer.
pub(crate) fn attention_backward<T: Scalar>(
    qkv: &[T],
    probs: &[T],
    dctx: &[T],
    n: usize,
    heads: usize,
    dh: usize,
) -> Vec<T> {
    let d = heads * dh;
    let s3 = 3 * d as isize;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dqkv = vec![T::zero(); n * 3 * d];
    let mut dp = vec![T::zero(); n * n];
    for h in 0..heads {
        let p = &probs[h * n * n..(h + 1) * n * n];
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        // dP = dctx_h V_h^T
        T::gemm(n, dh, n, T::one(), &dctx[h * dh..], d as isize, 1, &qkv[vo..], 1, s3, T::zero(), &mut dp, n as isize, 1);
        // dV_h = P^T dctx_h
        T::gemm(n, n, dh, T::one(), p, 1, n as isize, &dctx[h * dh..], d as isize, 1, T::one(), &mut dqkv[vo..], s3, 1);
        // dS = P * (dP - rowsum(P * dP)), folded with the score scale
        for i in 0..n {
            let row = i * n..(i + 1) * n;
            let dot: f64 = p[row.clone()].iter().zip(&dp[row.clone()]).map(|(a, b)| a.f64() * b.f64()).sum();
            for j in row {
                dp[j] = T::of(p[j].f64() * (dp[j].f64() - dot));
            }
        }
        // dQ_h = dS K_h ; dK_h = dS^T Q_h
        T::gemm(n, n, dh, scale, &dp, n as isize, 1, &qkv[ko..], s3, 1, T::one(), &mut dqkv[qo..], s3, 1);
        T::gemm(n, n, dh, scale, &dp, 1, n as isize, &qkv[qo..], s3, 1, T::one(), &mut dqkv[ko..], s3, 1);
    }
    dqkv
}

/// Numerically stable `log sum exp` of a logit row, in f64.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let num = (gelu::<f64>(u + h) - gelu::<f64>(u - h)) / (2.0 * h);
            assert!((num - gelu_grad::<f64>(u)).abs() < 1e-8, "{u}");
        }
        assert_eq!(gelu::<f64>(0.0), 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one_over_visible_keys() {
        let (m, n, heads, dh) = (4, 4, 2, 3);
        let qkv: Vec<f32> = (0..m * 3 * heads * dh).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.3).collect();
        let d = heads * dh;
        let view = |off| View { data: &qkv[..], offset: off, stride: 3 * d };
        let mut probs = vec![0.0f32; heads * m * n];
        let mut ctx = vec![0.0f32; m * d];
        let lim = |i: usize| if i < 2 { 2 } else { i + 1 };
        attention(view(0), view(d), view(2 * d), m, n, heads, dh, lim, &mut probs, &mut ctx);
        for h in 0..heads {
            for i in 0..m {
                let row = &probs[h * m * n + i * n..h * m * n + (i + 1) * n];
                let s: f64 = row.iter().map(|&x| f64::from(x)).sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row[lim(i)..].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0f64, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert!((log_sum_exp(&[0.0f32; 4]) - 4f64.ln()).abs() < 1e-7);
    }
}
