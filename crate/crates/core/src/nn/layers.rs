use super::{matmul, Real, Tensor4};
use crate::error::{check_len, Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

const K: usize = 3;

/// Unfolds 3x3 zero-padded neighbourhoods: row `ci*9 + ki*3 + kj`, column
/// `r*w + c` holds `x[ci, r+ki-1, c+kj-1]`.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..K {
            for kj in 0..K {
                let row = &mut cols[((ci * K + ki) * K + kj) * hw..][..hw];
                for r in 0..h {
                    let sr = r as isize + ki as isize - 1;
                    let dst = &mut row[r * w..(r + 1) * w];
                    if sr < 0 || sr >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sr as usize * w..(sr as usize + 1) * w];
                    match kj {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, x: &mut [T]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ki in 0..K {
            for kj in 0..K {
                let row = &cols[((ci * K + ki) * K + kj) * hw..][..hw];
                for r in 0..h {
                    let sr = r as isize + ki as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let src = &row[r * w..(r + 1) * w];
                    let dst = &mut plane[sr as usize * w..(sr as usize + 1) * w];
                    match kj {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}

fn check_conv<T: Real>(input: &Tensor4<T>, weight: &Tensor4<T>) -> Result<()> {
    if weight.shape[2] != K || weight.shape[3] != K {
        return Err(Error::param(
            "conv kernel",
            format!("must be 3x3, got {}x{}", weight.shape[2], weight.shape[3]),
        ));
    }
    check_len("conv2d input channels", weight.shape[1], input.shape[1])?;
    if input.shape[2] == 0 || input.shape[3] == 0 {
        return Err(Error::param("conv input", "empty spatial extent"));
    }
    Ok(())
}

/// 3x3 cross-correlation with zero padding 1. `weight` is
/// `(out, in, 3, 3)`.
pub fn conv2d_forward<T: Real>(input: &Tensor4<T>, weight: &Tensor4<T>, bias: &[T]) -> Result<Tensor4<T>> {
    check_conv(input, weight)?;
    let [b, cin, h, w] = input.shape;
    let cout = weight.shape[0];
    check_len("conv2d bias", cout, bias.len())?;
    let hw = h * w;
    let mut out = Tensor4::zeros([b, cout, h, w]);
    let mut cols = vec![T::zero(); cin * K * K * hw];
    for s in 0..b {
        im2col(input.sample(s), cin, h, w, &mut cols);
        let o = out.sample_mut(s);
        for (co, &bc) in bias.iter().enumerate() {
            o[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = bc);
        }
        matmul(cout, cin * K * K, hw, &weight.data, false, &cols, false, o, true);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    check_conv(input, weight)?;
    let [b, cin, h, w] = input.shape;
    let cout = weight.shape[0];
    if grad_out.shape != [b, cout, h, w] {
        return Err(Error::param(
            "conv grad_out",
            format!("shape {:?} does not match output", grad_out.shape),
        ));
    }
    let hw = h * w;
    let ck = cin * K * K;
    let mut gi = Tensor4::zeros(input.shape);
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); cout];
    let mut cols = vec![T::zero(); ck * hw];
    let mut gcols = vec![T::zero(); ck * hw];
    for s in 0..b {
        let go = grad_out.sample(s);
        for co in 0..cout {
            gb[co] += go[co * hw..(co + 1) * hw].iter().copied().sum();
        }
        im2col(input.sample(s), cin, h, w, &mut cols);
        // gw += go (cout x hw) * cols^T (hw x ck)
        matmul(cout, hw, ck, go, false, &cols, true, &mut gw, true);
        // gcols = w^T (ck x cout) * go (cout x hw)
        matmul(ck, cout, hw, &weight.data, true, go, false, &mut gcols, false);
        col2im(&gcols, cin, h, w, gi.sample_mut(s));
    }
    Ok(ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running ones.
    Train,
    /// Normalize with the running statistics.
    Inference,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
}

/// Per-channel normalization over batch, rows and columns.
pub fn batchnorm_forward<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    mode: BnMode,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    let [b, c, _, _] = x.shape;
    if b == 0 {
        return Err(Error::param("batchnorm input", "batch of size 0"));
    }
    for (ctx, len) in [
        ("batchnorm scale", gamma.len()),
        ("batchnorm shift", beta.len()),
        ("batchnorm running mean", running_mean.len()),
        ("batchnorm running var", running_var.len()),
    ] {
        check_len(ctx, c, len)?;
    }
    let p = x.plane();
    let n = b * p;
    let eps = T::of(BN_EPS);
    let mut inv_std = vec![T::zero(); c];
    let mut mean = vec![T::zero(); c];
    match mode {
        BnMode::Train => {
            let momentum = T::of(BN_MOMENTUM);
            for ch in 0..c {
                // accumulate statistics in f64 so f32 training stays stable
                let mut s = 0.0;
                for s_ in 0..b {
                    s += x.plane_of(s_, ch).iter().map(|v| v.f64()).sum::<f64>();
                }
                let mu = s / n as f64;
                let mut ss = 0.0;
                for s_ in 0..b {
                    ss += x.plane_of(s_, ch).iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>();
                }
                let var = ss / n as f64;
                mean[ch] = T::of(mu);
                inv_std[ch] = T::of(1.0 / (var + BN_EPS).sqrt());
                let unbiased = if n > 1 { var * n as f64 / (n - 1) as f64 } else { var };
                running_mean[ch] = (T::one() - momentum) * running_mean[ch] + momentum * T::of(mu);
                running_var[ch] = (T::one() - momentum) * running_var[ch] + momentum * T::of(unbiased);
            }
        }
        BnMode::Inference => {
            for ch in 0..c {
                mean[ch] = running_mean[ch];
                inv_std[ch] = T::one() / (running_var[ch] + eps).sqrt();
            }
        }
    }
    let mut out = Tensor4::zeros(x.shape);
    let mut xhat = vec![T::zero(); x.len()];
    for s in 0..b {
        for ch in 0..c {
            let off = (s * c + ch) * p;
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for j in off..off + p {
                let h = (x.data[j] - m) * is;
                xhat[j] = h;
                out.data[j] = g * h + bt;
            }
        }
    }
    Ok((out, BatchNormCache { xhat, inv_std, mode }))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Real>(
    grad_out: &Tensor4<T>,
    gamma: &[T],
    cache: &BatchNormCache<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    let [b, c, _, _] = grad_out.shape;
    check_len("batchnorm_backward cache", grad_out.len(), cache.xhat.len())?;
    check_len("batchnorm_backward scale", c, gamma.len())?;
    let p = grad_out.plane();
    let n = (b * p) as f64;
    let mut gx = Tensor4::zeros(grad_out.shape);
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for s in 0..b {
            let off = (s * c + ch) * p;
            for j in off..off + p {
                let dy = grad_out.data[j].f64();
                sum_dy += dy;
                sum_dy_xhat += dy * cache.xhat[j].f64();
            }
        }
        gb[ch] = T::of(sum_dy);
        gg[ch] = T::of(sum_dy_xhat);
        let g = gamma[ch] * cache.inv_std[ch];
        match cache.mode {
            BnMode::Train => {
                let mdy = T::of(sum_dy / n);
                let mdyx = T::of(sum_dy_xhat / n);
                for s in 0..b {
                    let off = (s * c + ch) * p;
                    for j in off..off + p {
                        gx.data[j] = g * (grad_out.data[j] - mdy - cache.xhat[j] * mdyx);
                    }
                }
            }
            BnMode::Inference => {
                for s in 0..b {
                    let off = (s * c + ch) * p;
                    for j in off..off + p {
                        gx.data[j] = g * grad_out.data[j];
                    }
                }
            }
        }
    }
    Ok((gx, gg, gb))
}

/// NaN inputs pass through unchanged.
pub fn relu_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    Tensor4 {
        shape: x.shape,
        data: x
            .data
            .iter()
            .map(|&v| if v > T::zero() || v.is_nan() { v } else { T::zero() })
            .collect(),
        grad: None,
    }
}

/// `x` is the ReLU input; the subgradient at zero is zero.
pub fn relu_backward<T: Real>(x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    if x.shape != grad_out.shape {
        return Err(Error::param(
            "relu grad_out",
            format!("shape {:?} vs input {:?}", grad_out.shape, x.shape),
        ));
    }
    Ok(Tensor4 {
        shape: x.shape,
        data: x
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
        grad: None,
    })
}

fn features<T>(t: &Tensor4<T>) -> usize {
    t.shape[1] * t.shape[2] * t.shape[3]
}

/// Fully connected layer on `(batch, features, 1, 1)` inputs. `weight` is
/// `(out, in, 1, 1)`.
pub fn dense_forward<T: Real>(x: &Tensor4<T>, weight: &Tensor4<T>, bias: &[T]) -> Result<Tensor4<T>> {
    let fin = features(x);
    let fout = weight.shape[0];
    check_len("dense input features", features(weight), fin)?;
    check_len("dense bias", fout, bias.len())?;
    let b = x.shape[0];
    let mut out = Tensor4::zeros([b, fout, 1, 1]);
    for s in 0..b {
        out.sample_mut(s).copy_from_slice(bias);
    }
    matmul(b, fin, fout, &x.data, false, &weight.data, true, &mut out.data, true);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn dense_backward<T: Real>(x: &Tensor4<T>, weight: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<DenseGrads<T>> {
    let fin = features(x);
    let fout = weight.shape[0];
    let b = x.shape[0];
    check_len("dense input features", features(weight), fin)?;
    check_len("dense grad_out", b * fout, grad_out.len())?;
    let mut gw = vec![T::zero(); fout * fin];
    matmul(fout, b, fin, &grad_out.data, true, &x.data, false, &mut gw, false);
    let mut gb = vec![T::zero(); fout];
    for s in 0..b {
        for (g, v) in gb.iter_mut().zip(grad_out.sample(s)) {
            *g += *v;
        }
    }
    let mut gx = Tensor4::zeros(x.shape);
    matmul(
        b,
        fout,
        fin,
        &grad_out.data,
        false,
        &weight.data,
        false,
        &mut gx.data,
        false,
    );
    Ok(DenseGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}
