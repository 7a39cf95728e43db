//! Forward and backward kernels for the fixed layer set. Feature maps are
//! `[channels, height, width]`; convolution weights are
//! `[out, in, kh, kw]`; dense weights are `[out, in]`.

use super::tensor::{Real, Tensor};
use super::NnError;

fn dims3<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize), NnError> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(NnError::ShapeMismatch(format!(
            "{what} must be [C, H, W], got {s:?}"
        ))),
    }
}

struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    pad: usize,
}

impl ConvDims {
    fn hp(&self) -> usize {
        self.h + 2 * self.pad
    }
    fn wp(&self) -> usize {
        self.w + 2 * self.pad
    }
}

fn conv_dims<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<ConvDims, NnError> {
    let (c, h, w) = dims3(input, "conv input")?;
    let (o, kc, kh, kw) = match *kernels.shape() {
        [o, kc, kh, kw] => (o, kc, kh, kw),
        ref s => {
            return Err(NnError::ShapeMismatch(format!(
                "kernels must be [O, C, K, K], got {s:?}"
            )))
        }
    };
    if kc != c {
        return Err(NnError::ShapeMismatch(format!(
            "kernel expects {kc} channels, input has {c}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(NnError::ShapeMismatch(format!(
            "kernel must be square and odd, got {kh}x{kw}"
        )));
    }
    if bias.shape() != [o] {
        return Err(NnError::ShapeMismatch(format!(
            "bias must be [{o}], got {:?}",
            bias.shape()
        )));
    }
    Ok(ConvDims {
        c,
        h,
        w,
        o,
        k: kh,
        pad: kh / 2,
    })
}

fn pad_input<T: Real>(input: &Tensor<T>, d: &ConvDims) -> Vec<f64> {
    let (hp, wp) = (d.hp(), d.wp());
    let mut out = vec![0.0; d.c * hp * wp];
    let src = input.data();
    for ch in 0..d.c {
        for y in 0..d.h {
            let row = &src[(ch * d.h + y) * d.w..][..d.w];
            let dst = &mut out[(ch * hp + y + d.pad) * wp + d.pad..][..d.w];
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = v.to_f64();
            }
        }
    }
    out
}

/// Same-padded cross-correlation; output keeps the input's spatial size.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let d = conv_dims(input, kernels, bias)?;
    let padded = pad_input(input, &d);
    let (hp, wp, k) = (d.hp(), d.wp(), d.k);
    let wts = kernels.data();
    let mut out = Vec::with_capacity(d.o * d.h * d.w);
    let mut acc = vec![0.0f64; d.h * d.w];
    for oc in 0..d.o {
        acc.fill(bias.data()[oc].to_f64());
        for ic in 0..d.c {
            let plane = &padded[ic * hp * wp..(ic + 1) * hp * wp];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wts[((oc * d.c + ic) * k + ky) * k + kx].to_f64();
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..d.h {
                        let src = &plane[(y + ky) * wp + kx..][..d.w];
                        let dst = &mut acc[y * d.w..][..d.w];
                        for (a, &s) in dst.iter_mut().zip(src) {
                            *a += wv * s;
                        }
                    }
                }
            }
        }
        out.extend(acc.iter().map(|&v| T::from_f64(v)));
    }
    Tensor::from_vec(&[d.o, d.h, d.w], out)
}

/// Accumulates kernel and bias gradients into `grad_kernels` / `grad_bias`
/// and returns the gradient with respect to the input.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_kernels: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let d = conv_dims(input, kernels, bias)?;
    if grad_out.shape() != [d.o, d.h, d.w] {
        return Err(NnError::ShapeMismatch("conv grad_out shape".into()));
    }
    let padded = pad_input(input, &d);
    let (hp, wp, k) = (d.hp(), d.wp(), d.k);
    let g: Vec<f64> = grad_out.to_f64_vec();
    let wts = kernels.data();
    let mut grad_pad = vec![0.0f64; d.c * hp * wp];
    let gk = grad_kernels.data_mut();
    for oc in 0..d.o {
        let gplane = &g[oc * d.h * d.w..(oc + 1) * d.h * d.w];
        let gb: f64 = gplane.iter().sum();
        grad_bias.data_mut()[oc] += T::from_f64(gb);
        for ic in 0..d.c {
            let plane = &padded[ic * hp * wp..(ic + 1) * hp * wp];
            let gpad = &mut grad_pad[ic * hp * wp..(ic + 1) * hp * wp];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((oc * d.c + ic) * k + ky) * k + kx;
                    let wv = wts[widx].to_f64();
                    let mut dw = 0.0;
                    for y in 0..d.h {
                        let src = &plane[(y + ky) * wp + kx..][..d.w];
                        let grow = &gplane[y * d.w..][..d.w];
                        for (s, gv) in src.iter().zip(grow) {
                            dw += s * gv;
                        }
                        if wv != 0.0 {
                            let dst = &mut gpad[(y + ky) * wp + kx..][..d.w];
                            for (o, gv) in dst.iter_mut().zip(grow) {
                                *o += wv * gv;
                            }
                        }
                    }
                    gk[widx] += T::from_f64(dw);
                }
            }
        }
    }
    let mut grad_in = Vec::with_capacity(d.c * d.h * d.w);
    for ic in 0..d.c {
        for y in 0..d.h {
            let row = &grad_pad[(ic * hp + y + d.pad) * wp + d.pad..][..d.w];
            grad_in.extend(row.iter().map(|&v| T::from_f64(v)));
        }
    }
    Tensor::from_vec(&[d.c, d.h, d.w], grad_in)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// Passes gradient where the forward input was positive.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// Non-overlapping 2×2 max pooling; an odd trailing row/column is dropped.
/// Also returns, per output cell, the flat input index that won (first
/// maximum in row-major scan order).
pub fn maxpool2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>), NnError> {
    let (c, h, w) = dims3(input, "pool input")?;
    if h < 2 || w < 2 {
        return Err(NnError::ShapeTooSmall {
            height: h,
            width: w,
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best_i = (ch * h + 2 * y) * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                    if src[i] > src[best_i] {
                        best_i = i;
                    }
                }
                out.push(src[best_i]);
                arg.push(best_i as u32);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, oh, ow], out)?, arg))
}

pub fn maxpool2_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        gd[i as usize] += v;
    }
    g
}

/// `W x + b`.
pub fn dense_forward<T: Real>(
    input: &[T],
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Vec<T>, NnError> {
    let (o, i) = match *weights.shape() {
        [o, i] => (o, i),
        ref s => {
            return Err(NnError::ShapeMismatch(format!(
                "dense weights must be [O, I], got {s:?}"
            )))
        }
    };
    if input.len() != i || bias.shape() != [o] {
        return Err(NnError::ShapeMismatch(format!(
            "dense expects input {i} and bias [{o}], got {} and {:?}",
            input.len(),
            bias.shape()
        )));
    }
    let x: Vec<f64> = input.iter().map(|v| v.to_f64()).collect();
    let w = weights.data();
    Ok((0..o)
        .map(|r| {
            let row = &w[r * i..(r + 1) * i];
            let dot: f64 = row.iter().zip(&x).map(|(a, b)| a.to_f64() * b).sum();
            T::from_f64(dot + bias.data()[r].to_f64())
        })
        .collect())
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn dense_backward<T: Real>(
    input: &[T],
    weights: &Tensor<T>,
    grad_out: &[T],
    grad_weights: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
) -> Vec<T> {
    let (o, i) = (weights.shape()[0], weights.shape()[1]);
    let x: Vec<f64> = input.iter().map(|v| v.to_f64()).collect();
    let w = weights.data();
    let gw = grad_weights.data_mut();
    let mut gin = vec![0.0f64; i];
    for r in 0..o {
        let g = grad_out[r].to_f64();
        grad_bias.data_mut()[r] += grad_out[r];
        if g == 0.0 {
            continue;
        }
        let wrow = &w[r * i..(r + 1) * i];
        let gwrow = &mut gw[r * i..(r + 1) * i];
        for c in 0..i {
            gwrow[c] += T::from_f64(g * x[c]);
            gin[c] += g * wrow[c].to_f64();
        }
    }
    gin.into_iter().map(T::from_f64).collect()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Pulls a gradient with respect to softmax outputs back to the logits.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - dot))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Quadruple-loop reference convolution with explicit bounds checks.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (o, ks) = (k.shape()[0], k.shape()[2]);
        let p = (ks / 2) as isize;
        let mut out = vec![0.0; o * h * w];
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = y as isize + ky as isize - p;
                                let ix = xx as isize + kx as isize - p;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += k.data()[((oc * c + ic) * ks + ky) * ks + kx]
                                        * x.data()[(ic * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * h + y) * w + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[1, 4, 5], &mut rng);
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d_forward(&x, &k, &b).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let x = Tensor::from_vec(&[1, 5, 5], vec![2.5f64; 25]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1])).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert_eq!(y.data()[yy * 5 + xx], 22.5);
            }
        }
        assert_eq!(y.data()[0], 10.0);
    }

    #[test]
    fn conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[2, 5, 5], &mut rng);
        let k = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let y = conv2d_forward(&x, &k, &b).unwrap();
        let o = conv_oracle(&x, &k, &b);
        let max = y
            .data()
            .iter()
            .zip(&o)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max <= 1e-12, "max diff {max}");
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &k, &Tensor::zeros(&[1])),
            Err(NnError::ShapeMismatch(_))
        ));
        let k2 = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(conv2d_forward(&x, &k2, &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::from_vec(&[3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::from_vec(&[2], vec![0.5f64, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn relu_gradient_is_mask() {
        let xs = [-1.3f64, -0.2, 0.4, 2.0];
        let x = Tensor::from_vec(&[4], xs.to_vec()).unwrap();
        let g = relu_backward(&x, &Tensor::from_vec(&[4], vec![1.0; 4]).unwrap());
        let h = 1e-6;
        for (i, &v) in xs.iter().enumerate() {
            let fd = ((v + h).max(0.0) - (v - h).max(0.0)) / (2.0 * h);
            assert!((g.data()[i] - fd).abs() < 1e-9);
        }
    }

    #[test]
    fn pooling_cases() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!((y.shape(), y.data()), (&[1usize, 1, 1][..], &[4.0][..]));
        assert_eq!(arg, vec![3]);
        let c = Tensor::from_vec(&[2, 4, 4], vec![0.7f64; 32]).unwrap();
        let (y, _) = maxpool2(&c).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.7));
        let (y, _) = maxpool2(&Tensor::<f64>::zeros(&[1, 5, 5])).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(matches!(
            maxpool2(&Tensor::<f64>::zeros(&[1, 1, 4])),
            Err(NnError::ShapeTooSmall { .. })
        ));
    }

    #[test]
    fn dense_cases() {
        let x = [1.5f64, -2.0, 0.25];
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(
            dense_forward(&x, &eye, &Tensor::zeros(&[3])).unwrap(),
            x.to_vec()
        );
        let b = Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap();
        assert_eq!(
            dense_forward(&x, &Tensor::zeros(&[2, 3]), &b).unwrap(),
            vec![0.3, -0.7]
        );

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_tensor(&[4, 6], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = dense_forward(&x, &w, &b).unwrap();
        for r in 0..4 {
            let mut s = b.data()[r];
            for c in 0..6 {
                s += w.data()[r * 6 + c] * x[c];
            }
            assert!((y[r] - s).abs() <= 1e-12);
        }
        assert!(dense_forward(&x[..5], &w, &b).is_err());
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0; 4]);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let a = softmax(&[0.3, -1.2, 2.0]);
        let b = softmax(&[100.3, 98.8, 102.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let big = softmax(&[1000.0, 0.0]);
        assert_eq!(big, vec![1.0, 0.0]);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
