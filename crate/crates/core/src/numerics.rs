//! Dense neural primitives shared by the pipeline, transfer and training code.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Permutation, Real, Tensor};

/// Norms at or below this are treated as zero by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-8;

struct ConvGeom {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

fn conv_geometry<R: Real>(
    input_chw: (usize, usize, usize),
    kernel: &Tensor<R>,
    bias: &Tensor<R>,
    padding: usize,
) -> Result<ConvGeom> {
    let (c_in, h, w) = input_chw;
    let (c_out, kc, k, k2) = kernel.dims4()?;
    if kc != c_in {
        return Err(Error::shape(format!(
            "conv2d kernel expects {kc} input channels, input has {c_in}"
        )));
    }
    if k != k2 {
        return Err(Error::shape(format!("conv2d kernel must be square, got {k}x{k2}")));
    }
    if k % 2 == 0 {
        return Err(Error::invalid(format!("conv2d kernel width must be odd, got {k}")));
    }
    if padding != (k - 1) / 2 {
        return Err(Error::invalid(format!(
            "conv2d padding must be {} for kernel width {k}, got {padding}",
            (k - 1) / 2
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(format!(
            "conv2d bias {:?} vs {c_out} output channels",
            bias.shape()
        )));
    }
    Ok(ConvGeom {
        c_in,
        c_out,
        h,
        w,
        k,
        pad: padding,
    })
}

/// Valid output range along one axis for a tap offset `d`.
#[inline]
fn tap_range(len: usize, d: isize) -> std::ops::Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    lo..hi.max(lo)
}

fn conv_forward_into<R: Real>(g: &ConvGeom, input: &[R], kernel: &[R], bias: &[R], out: &mut [R]) {
    let plane = g.h * g.w;
    out.par_chunks_mut(plane).enumerate().for_each(|(co, dst)| {
        dst.fill(bias[co]);
        for ci in 0..g.c_in {
            let src = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..g.k {
                let dy = ky as isize - g.pad as isize;
                for kx in 0..g.k {
                    let dx = kx as isize - g.pad as isize;
                    let wv = kernel[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == R::zero() {
                        continue;
                    }
                    let xs = tap_range(g.w, dx);
                    for y in tap_range(g.h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let s_row = &src[sy * g.w..(sy + 1) * g.w];
                        let d_row = &mut dst[y * g.w..(y + 1) * g.w];
                        for x in xs.clone() {
                            d_row[x] = d_row[x] + wv * s_row[(x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    });
}

/// Same-padded 2D cross-correlation of a `[C_in, H, W]` input.
pub fn conv2d<R: Real>(
    input: &Tensor<R>,
    kernel: &Tensor<R>,
    bias: &Tensor<R>,
    padding: usize,
) -> Result<Tensor<R>> {
    let g = conv_geometry(input.dims3()?, kernel, bias, padding)?;
    let mut out = vec![R::zero(); g.c_out * g.h * g.w];
    conv_forward_into(&g, input.data(), kernel.data(), bias.data(), &mut out);
    Tensor::new(vec![g.c_out, g.h, g.w], out)
}

/// Applies [`conv2d`] independently to every item of a `[N, C_in, H, W]` batch.
pub fn conv2d_batch<R: Real>(
    input: &Tensor<R>,
    kernel: &Tensor<R>,
    bias: &Tensor<R>,
    padding: usize,
) -> Result<Tensor<R>> {
    let (n, c, h, w) = input.dims4()?;
    let g = conv_geometry((c, h, w), kernel, bias, padding)?;
    let in_len = c * h * w;
    let out_len = g.c_out * h * w;
    let mut out = vec![R::zero(); n * out_len];
    for (i, dst) in out.chunks_mut(out_len).enumerate() {
        conv_forward_into(
            &g,
            &input.data()[i * in_len..(i + 1) * in_len],
            kernel.data(),
            bias.data(),
            dst,
        );
    }
    Tensor::new(vec![n, g.c_out, h, w], out)
}

/// Output shape of [`conv2d_batch`] without running it.
pub fn conv2d_batch_shape(input: &[usize], kernel: &[usize], padding: usize) -> Result<Vec<usize>> {
    let [n, c, h, w] = input[..] else {
        return Err(Error::shape(format!("expected rank-4 input, got {input:?}")));
    };
    let [co, ci, k, k2] = kernel[..] else {
        return Err(Error::shape(format!("expected rank-4 kernel, got {kernel:?}")));
    };
    if ci != c || k != k2 || k % 2 == 0 || padding != (k - 1) / 2 {
        return Err(Error::shape(format!(
            "kernel {kernel:?} with padding {padding} does not fit input {input:?}"
        )));
    }
    Ok(vec![n, co, h, w])
}

/// Gradients of [`conv2d_batch`]: `(d_input, d_kernel, d_bias)`.
/// `d_input` is only computed when requested.
pub(crate) fn conv2d_batch_backward<R: Real>(
    input: &Tensor<R>,
    kernel: &Tensor<R>,
    grad_out: &Tensor<R>,
    padding: usize,
    want_input: bool,
) -> (Option<Tensor<R>>, Tensor<R>, Tensor<R>) {
    let (n, c_in, h, w) = input.dims4().expect("checked in forward");
    let (c_out, _, k, _) = kernel.dims4().expect("checked in forward");
    let plane = h * w;
    let pad = padding as isize;
    let kd = kernel.data();
    let xd = input.data();
    let gd = grad_out.data();

    let d_input = want_input.then(|| {
        let mut gin = vec![R::zero(); n * c_in * plane];
        gin.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
            let (item, ci) = (idx / c_in, idx % c_in);
            for co in 0..c_out {
                let go = &gd[(item * c_out + co) * plane..(item * c_out + co + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let wv = kd[((co * c_in + ci) * k + ky) * k + kx];
                        let xs = tap_range(w, dx);
                        for y in tap_range(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            for x in xs.clone() {
                                let sx = (x as isize + dx) as usize;
                                dst[sy * w + sx] = dst[sy * w + sx] + wv * go[y * w + x];
                            }
                        }
                    }
                }
            }
        });
        Tensor::new(vec![n, c_in, h, w], gin).expect("shape")
    });

    let mut gk = vec![R::zero(); c_out * c_in * k * k];
    gk.par_chunks_mut(c_in * k * k).enumerate().for_each(|(co, dst)| {
        for item in 0..n {
            let go = &gd[(item * c_out + co) * plane..(item * c_out + co + 1) * plane];
            for ci in 0..c_in {
                let src = &xd[(item * c_in + ci) * plane..(item * c_in + ci + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let xs = tap_range(w, dx);
                        let mut acc = R::zero();
                        for y in tap_range(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            for x in xs.clone() {
                                acc = acc + go[y * w + x] * src[sy * w + (x as isize + dx) as usize];
                            }
                        }
                        let slot = &mut dst[(ci * k + ky) * k + kx];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    });

    let mut gb = vec![R::zero(); c_out];
    for item in 0..n {
        for (co, b) in gb.iter_mut().enumerate() {
            let go = &gd[(item * c_out + co) * plane..(item * c_out + co + 1) * plane];
            *b = *b + go.iter().copied().sum();
        }
    }

    (
        d_input,
        Tensor::new(kernel.shape().to_vec(), gk).expect("shape"),
        Tensor::from_vec(gb),
    )
}

pub fn relu<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    x.map(|v| if v > R::zero() { v } else { R::zero() })
}

/// Row-wise affine map `x · weightᵀ + bias`.
pub fn linear<R: Real>(x: &Tensor<R>, weight: &Tensor<R>, bias: Option<&Tensor<R>>) -> Result<Tensor<R>> {
    let (n, d_in) = x.dims2()?;
    let (d_out, w_in) = weight.dims2()?;
    if w_in != d_in {
        return Err(Error::shape(format!(
            "linear weight expects {w_in} inputs, got {d_in}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(Error::shape(format!("linear bias {:?} vs {d_out}", b.shape())));
        }
    }
    let wd = weight.data();
    let mut out = vec![R::zero(); n * d_out];
    out.par_chunks_mut(d_out)
        .zip(x.data().par_chunks(d_in))
        .for_each(|(dst, row)| {
            for (o, slot) in dst.iter_mut().enumerate() {
                let w_row = &wd[o * d_in..(o + 1) * d_in];
                let mut acc = bias.map_or(R::zero(), |b| b.data()[o]);
                for (a, b) in row.iter().zip(w_row) {
                    acc = acc + *a * *b;
                }
                *slot = acc;
            }
        });
    Tensor::new(vec![n, d_out], out)
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax<R: Real>(x: &Tensor<R>, axis: usize) -> Result<Tensor<R>> {
    if axis >= x.rank() {
        return Err(Error::invalid(format!("axis {axis} out of range for rank {}", x.rank())));
    }
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let len = x.dim(axis);
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer = x.numel() / (len * inner);
    let src = x.data();
    let mut out = vec![R::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(R::neg_infinity(), R::max);
            let mut total = R::zero();
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Normalizes `v` in place, returning its original norm. Vectors with norm
/// at or below [`NORM_EPS`] are set to zero.
pub fn l2_normalize_in_place<R: Real>(v: &mut [R]) -> R {
    let norm = v.iter().map(|&x| x * x).sum::<R>().sqrt();
    if norm <= R::of(NORM_EPS) {
        v.fill(R::zero());
    } else {
        for x in v.iter_mut() {
            *x = *x / norm;
        }
    }
    norm
}

pub fn l2_normalize<R: Real>(v: &Tensor<R>) -> Tensor<R> {
    let mut out = v.clone();
    l2_normalize_in_place(out.data_mut());
    out
}

/// Indices ordering `scores` from largest to smallest; ties keep their
/// original relative order.
pub fn argsort_desc_stable<R: Real>(scores: &[R]) -> Result<Permutation> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("sort scores"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // slice::sort_by is stable
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    Ok(Permutation::from_indices_unchecked(idx))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R = f32> {
    pub m: Tensor<R>,
    pub v: Tensor<R>,
    pub step: u64,
}

impl<R: Real> AdamState<R> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<R: Real>(
    params: &mut Tensor<R>,
    grads: &Tensor<R>,
    state: &mut AdamState<R>,
    cfg: &AdamConfig,
) -> Result<()> {
    params.same_shape(grads, "adam grads")?;
    params.same_shape(&state.m, "adam first moment")?;
    params.same_shape(&state.v, "adam second moment")?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (R::of(cfg.beta1), R::of(cfg.beta2));
    let c1 = R::one() - b1.powi(t);
    let c2 = R::one() - b2.powi(t);
    let (lr, eps) = (R::of(cfg.lr), R::of(cfg.eps));
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, (p, &g)) in params.data_mut().iter_mut().zip(grads.data()).enumerate() {
        m[i] = b1 * m[i] + (R::one() - b1) * g;
        v[i] = b2 * v[i] + (R::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[inline]
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

#[inline]
pub fn silu<R: Real>(x: R) -> R {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<R: Real>(x: R) -> R {
    let s = sigmoid(x);
    s * (R::one() + x * (R::one() - s))
}

#[inline]
pub fn softplus<R: Real>(x: R) -> R {
    x.max(R::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let input = Tensor::from_fn(&[1, 4, 5], |i| i as f32 * 0.5 - 3.0);
        let out = conv2d(&input, &t(&[1, 1, 1, 1], &[1.0]), &t(&[1], &[0.0]), 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_all_ones_interior() {
        let c = 1.75f32;
        let input = Tensor::full(&[1, 5, 5], c);
        let out = conv2d(&input, &Tensor::full(&[1, 1, 3, 3], 1.0), &t(&[1], &[0.0]), 1).unwrap();
        for y in 1..4 {
            for x in 1..4 {
                assert_eq!(out.data()[y * 5 + x], 9.0 * c);
            }
        }
        // corners see 4 taps, edges 6
        assert_eq!(out.data()[0], 4.0 * c);
        assert_eq!(out.data()[2], 6.0 * c);
    }

    #[test]
    fn conv_rejects_bad_kernels() {
        let input = Tensor::<f32>::zeros(&[2, 4, 4]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(
            conv2d(&input, &Tensor::zeros(&[1, 2, 2, 2]), &b, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            conv2d(&input, &Tensor::zeros(&[1, 3, 3, 3]), &b, 1),
            Err(Error::Shape(_))
        ));
        assert!(conv2d(&input, &Tensor::zeros(&[1, 2, 3, 3]), &b, 0).is_err());
    }

    #[test]
    fn conv_full_size_layer_shapes() {
        let first = conv2d_batch_shape(&[16, 768, 30, 30], &[3072, 768, 3, 3], 1).unwrap();
        assert_eq!(first, vec![16, 3072, 30, 30]);
        let second = conv2d_batch_shape(&first, &[768, 3072, 3, 3], 1).unwrap();
        assert_eq!(second, vec![16, 768, 30, 30]);
    }

    #[test]
    fn conv_batch_matches_per_item() {
        let input = Tensor::from_fn(&[3, 2, 4, 5], |i| ((i * 37) % 11) as f32 - 5.0);
        let kernel = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 13) % 7) as f32 * 0.1 - 0.3);
        let bias = t(&[3], &[0.1, -0.2, 0.3]);
        let batched = conv2d_batch(&input, &kernel, &bias, 1).unwrap();
        for i in 0..3 {
            let single = conv2d(&input.index_outer(i).unwrap(), &kernel, &bias, 1).unwrap();
            assert_eq!(batched.index_outer(i).unwrap(), single);
        }
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&t(&[2], &[-3.0, -0.5])).data(), &[0.0, 0.0]);
        assert_eq!(relu(&t(&[2], &[3.0, 0.5])).data(), &[3.0, 0.5]);
    }

    #[test]
    fn linear_cases() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]);
        assert_eq!(linear(&x, &w, None).unwrap().data(), &[3.0, -1.0]);

        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let xs = t(&[3, 2], &[1.0, -2.0, 3.5, 0.0, 7.0, 8.0]);
        assert_eq!(linear(&xs, &eye, Some(&t(&[2], &[0.0, 0.0]))).unwrap(), xs);

        let bias = t(&[2], &[0.25, -4.0]);
        let out = linear(&xs, &Tensor::zeros(&[2, 2]), Some(&bias)).unwrap();
        for row in out.data().chunks(2) {
            assert_eq!(row, bias.data());
        }
        assert!(linear(&xs, &Tensor::zeros(&[2, 3]), None).is_err());
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&Tensor::<f32>::full(&[5], 0.3), 0).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.2).abs() < 1e-7));

        let x = t(&[4], &[0.0, 50.0, 0.0, 0.0]);
        let p = softmax(&x.cast::<f64>(), 0).unwrap();
        assert!(p.data()[1] > 1.0 - 1e-9);

        assert!(matches!(
            softmax(&t(&[2], &[f32::NAN, 0.0]), 0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn softmax_middle_axis() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i as f32 * 0.37).sin() * 4.0);
        let p = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f32 = (0..3).map(|j| p.data()[(o * 3 + j) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn l2_normalize_cases() {
        assert_eq!(l2_normalize(&t(&[2], &[3.0, 4.0])).data(), &[0.6, 0.8]);
        assert_eq!(l2_normalize(&t(&[3], &[0.0, 0.0, 0.0])).data(), &[0.0; 3]);
        let unit = t(&[3], &[0.0, 1.0, 0.0]);
        assert_eq!(l2_normalize(&unit), unit);
    }

    #[test]
    fn argsort_cases() {
        let p = argsort_desc_stable(&[3.0f32, 1.0, 2.0]).unwrap();
        assert_eq!(p.indices(), &[0, 2, 1]);
        assert!(argsort_desc_stable(&[0.5f32; 7]).unwrap().is_identity());
        assert!(argsort_desc_stable(&[0.5f32, f32::NAN]).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = t(&[3], &[1.0, -2.0, 0.5]);
        let before = p.clone();
        let mut st = AdamState::new(&[3]);
        adam_step(&mut p, &Tensor::zeros(&[3]), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::from_vec(vec![1.0, -2.0, 0.5]);
        let g = Tensor::from_vec(vec![0.3, -7.0, 1e-3]);
        let mut st = AdamState::new(&[3]);
        let cfg = AdamConfig::with_lr(1e-3);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        // m̂ = g, v̂ = g², step = lr·g/(|g|+eps)
        for ((after, before), gi) in p.data().iter().zip([1.0, -2.0, 0.5]).zip(g.data()) {
            let expected = before - 1e-3 * gi / (gi.abs() + 1e-8);
            assert!((after - expected).abs() < 1e-15);
            assert!(((before - after).abs() - 1e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_constant_gradient_is_monotone() {
        let mut p = Tensor::<f32>::from_vec(vec![0.0, 0.0]);
        let g = Tensor::from_vec(vec![2.0, -0.5]);
        let mut st = AdamState::new(&[2]);
        let cfg = AdamConfig::default();
        let mut prev = p.clone();
        for _ in 0..2 {
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
            assert!(p.data()[0] < prev.data()[0]);
            assert!(p.data()[1] > prev.data()[1]);
            prev = p.clone();
        }
        assert!(adam_step(&mut p, &Tensor::zeros(&[3]), &mut st, &cfg).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0f32), 1000.0);
        assert!(softplus(-1000.0f32) >= 0.0);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(xs in proptest::collection::vec(-80.0f32..80.0, 1..64)) {
            let p = softmax(&Tensor::from_vec(xs), 0).unwrap();
            let s: f32 = p.data().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(p.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(xs in proptest::collection::vec(-10.0f64..10.0, 1..32), c in -50.0f64..50.0) {
            let a = softmax(&Tensor::from_vec(xs.clone()), 0).unwrap();
            let b = softmax(&Tensor::from_vec(xs.iter().map(|x| x + c).collect()), 0).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn l2_norm_is_zero_or_unit(xs in proptest::collection::vec(-1e3f32..1e3, 1..32), scale in prop_oneof![Just(1.0f32), Just(1e-12f32)]) {
            let v: Vec<f32> = xs.iter().map(|x| x * scale).collect();
            let n = l2_normalize(&Tensor::from_vec(v));
            let norm = n.data().iter().map(|x| x * x).sum::<f32>().sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() <= 1e-5);
        }

        #[test]
        fn argsort_roundtrip_with_ties(xs in proptest::collection::vec(0u8..4, 1..200)) {
            let scores: Vec<f32> = xs.iter().map(|&x| x as f32).collect();
            let perm = argsort_desc_stable(&scores).unwrap();
            let sorted = perm.apply(&scores).unwrap();
            prop_assert!(sorted.windows(2).all(|w| w[0] >= w[1]));
            // ties keep raster order
            for w in perm.indices().windows(2) {
                if scores[w[0]] == scores[w[1]] {
                    prop_assert!(w[0] < w[1]);
                }
            }
            prop_assert_eq!(perm.inverse().apply(&sorted).unwrap(), scores);
            prop_assert!(perm.compose(&perm.inverse()).unwrap().is_identity());
        }
    }
}
