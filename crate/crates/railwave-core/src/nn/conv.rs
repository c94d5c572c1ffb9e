use super::{dims4, shape_mismatch, NnError, Tensor};

/// 2-D convolution parameters: kernels [out_ch x in_ch x kh x kw], bias
/// [out_ch]. Implemented as cross-correlation (no kernel flip), the usual
/// CNN convention; learned kernels make the distinction unobservable.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvParams {
            kernels: Tensor::zeros(&[out_ch, in_ch, kh, kw]),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    fn validate(&self, in_ch: usize) -> Result<[usize; 4], NnError> {
        let dims = dims4(&self.kernels, "conv2d", "kernels")?;
        let [k, kc, kh, kw] = dims;
        if kc != in_ch {
            return Err(shape_mismatch(
                "conv2d",
                format!("input has {in_ch} channels, kernels expect {kc}"),
            ));
        }
        if k == 0 || kh == 0 || kw == 0 {
            return Err(shape_mismatch("conv2d", "empty kernel".into()));
        }
        if self.bias.shape != [k] {
            return Err(shape_mismatch(
                "conv2d",
                format!("bias shape {:?} does not match {k} kernels", self.bias.shape),
            ));
        }
        if self.stride == 0 {
            return Err(shape_mismatch("conv2d", "stride must be >= 1".into()));
        }
        Ok(dims)
    }
}

/// Output extent along one axis: floor((size + 2*padding - kernel)/stride)+1.
fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn pad_plane(
    src: &[f64],
    dst: &mut [f64],
    channels: usize,
    h: usize,
    w: usize,
    pad: usize,
) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    dst.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..channels {
        for y in 0..h {
            let s = c * h * w + y * w;
            let d = c * ph * pw + (y + pad) * pw + pad;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
}

/// Cross-correlation plus per-kernel bias. Activation is a separate op.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor, NnError> {
    let [n, c, h, w] = dims4(input, "conv2d", "input")?;
    let [k, _, kh, kw] = params.validate(c)?;
    let (stride, pad) = (params.stride, params.padding);
    let (oh, ow) = match (
        out_extent(h, kh, stride, pad),
        out_extent(w, kw, stride, pad),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(NnError::NonPositiveOutputDim {
                op: "conv2d",
                detail: format!("input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"),
            })
        }
    };
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0f64; c * ph * pw];
    let mut out = Tensor::zeros(&[n, k, oh, ow]);
    let kernels = &params.kernels.data;
    for ni in 0..n {
        pad_plane(
            &input.data[ni * c * h * w..(ni + 1) * c * h * w],
            &mut padded,
            c,
            h,
            w,
            pad,
        );
        for ki in 0..k {
            let out_base = (ni * k + ki) * oh * ow;
            let kernel_base = ki * c * kh * kw;
            let bias = params.bias.data[ki];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for ci in 0..c {
                        let plane = ci * ph * pw;
                        let krow_base = kernel_base + ci * kh * kw;
                        for ky in 0..kh {
                            let row = plane + (oy * stride + ky) * pw + ox * stride;
                            let src = &padded[row..row + kw];
                            let wts = &kernels[krow_base + ky * kw..krow_base + (ky + 1) * kw];
                            for i in 0..kw {
                                acc += src[i] * wts[i];
                            }
                        }
                    }
                    out.data[out_base + oy * ow + ox] = acc;
                }
            }
        }
    }
    out.debug_check_finite("conv2d");
    Ok(out)
}

/// Accumulates exact analytic gradients into `input.grad`, `kernels.grad`,
/// and `bias.grad` given the upstream gradient of the conv output.
pub fn conv2d_backward(
    input: &mut Tensor,
    params: &mut ConvParams,
    grad_out: &Tensor,
) -> Result<(), NnError> {
    let [n, c, h, w] = dims4(input, "conv2d_backward", "input")?;
    let [k, _, kh, kw] = params.validate(c)?;
    let (stride, pad) = (params.stride, params.padding);
    let (oh, ow) = (
        out_extent(h, kh, stride, pad).unwrap_or(0),
        out_extent(w, kw, stride, pad).unwrap_or(0),
    );
    if grad_out.shape != [n, k, oh, ow] {
        return Err(shape_mismatch(
            "conv2d_backward",
            format!(
                "upstream gradient shape {:?}, expected {:?}",
                grad_out.shape,
                [n, k, oh, ow]
            ),
        ));
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0f64; c * ph * pw];
    let mut padded_grad = vec![0.0f64; c * ph * pw];
    // Split borrows: kernels data is read while kernel grads accumulate.
    let kernel_data = params.kernels.data.clone();
    let kernel_grad = params.kernels.grad_mut();
    let bias_grad = params.bias.grad_mut();
    let input_grad_len = input.data.len();

    for ni in 0..n {
        pad_plane(
            &input.data[ni * c * h * w..(ni + 1) * c * h * w],
            &mut padded,
            c,
            h,
            w,
            pad,
        );
        padded_grad.iter_mut().for_each(|v| *v = 0.0);
        for ki in 0..k {
            let out_base = (ni * k + ki) * oh * ow;
            let kernel_base = ki * c * kh * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out.data[out_base + oy * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    bias_grad[ki] += g;
                    for ci in 0..c {
                        let plane = ci * ph * pw;
                        let krow_base = kernel_base + ci * kh * kw;
                        for ky in 0..kh {
                            let row = plane + (oy * stride + ky) * pw + ox * stride;
                            for kx in 0..kw {
                                kernel_grad[krow_base + ky * kw + kx] += padded[row + kx] * g;
                                padded_grad[row + kx] += kernel_data[krow_base + ky * kw + kx] * g;
                            }
                        }
                    }
                }
            }
        }
        // Unpad: interior of the padded gradient accumulates into input.grad.
        let input_grad = input.grad_mut();
        debug_assert_eq!(input_grad.len(), input_grad_len);
        for ci in 0..c {
            for y in 0..h {
                let s = ci * ph * pw + (y + pad) * pw + pad;
                let d = ni * c * h * w + ci * h * w + y * w;
                for x in 0..w {
                    input_grad[d + x] += padded_grad[s + x];
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Literal four-index definition, used as the oracle.
    fn naive_conv2d(input: &Tensor, params: &ConvParams) -> Tensor {
        let [n, c, h, w] = [
            input.shape[0],
            input.shape[1],
            input.shape[2],
            input.shape[3],
        ];
        let [k, _, kh, kw] = [
            params.kernels.shape[0],
            params.kernels.shape[1],
            params.kernels.shape[2],
            params.kernels.shape[3],
        ];
        let (s, p) = (params.stride, params.padding);
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (w + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(&[n, k, oh, ow]);
        for ni in 0..n {
            for ki in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = params.bias.data[ki];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        let xv = input.data
                                            [((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                        let wv = params.kernels.data
                                            [((ki * c + ci) * kh + ky) * kw + kx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out.data[((ni * k + ki) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let input = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let mut p = ConvParams::new(1, 1, 1, 1, 1, 0);
        p.kernels.data[0] = 1.0;
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.shape, vec![1, 1, 3, 3]);
        assert_eq!(out.data, input.data);
    }

    #[test]
    fn two_by_two_sum_kernel_matches_hand_arithmetic() {
        let input = Tensor::new(
            vec![1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let mut p = ConvParams::new(1, 1, 2, 2, 1, 0);
        p.kernels.data.iter_mut().for_each(|v| *v = 1.0);
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.shape, vec![1, 1, 2, 2]);
        assert_eq!(out.data, vec![12.0, 16.0, 24.0, 28.0]);
        assert_eq!(out.data, naive_conv2d(&input, &p).data);
    }

    #[test]
    fn matches_naive_oracle_on_random_shapes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for &(n, c, h, w, k, kh, kw, stride, pad) in &[
            (4usize, 8usize, 16usize, 16usize, 6usize, 3usize, 3usize, 1usize, 1usize),
            (2, 3, 9, 11, 4, 3, 2, 2, 0),
            (1, 2, 8, 8, 3, 5, 5, 3, 2),
            (2, 1, 7, 7, 2, 7, 7, 1, 3),
        ] {
            let input = Tensor::new(
                vec![n, c, h, w],
                (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let mut p = ConvParams::new(k, c, kh, kw, stride, pad);
            p.kernels.data = (0..k * c * kh * kw).map(|_| rng.random_range(-1.0..1.0)).collect();
            p.bias.data = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv2d(&input, &p).unwrap();
            let slow = naive_conv2d(&input, &p);
            assert_eq!(fast.shape, slow.shape);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!(
                    (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0),
                    "conv2d deviates from the quadruple-loop oracle"
                );
            }
        }
    }

    #[test]
    fn mismatched_channels_and_degenerate_dims_are_rejected() {
        let input = Tensor::zeros(&[1, 3, 8, 8]);
        let p = ConvParams::new(2, 4, 3, 3, 1, 0);
        assert!(matches!(
            conv2d(&input, &p),
            Err(NnError::ShapeMismatch { .. })
        ));
        let p = ConvParams::new(2, 3, 9, 9, 1, 0);
        assert!(matches!(
            conv2d(&input, &p),
            Err(NnError::NonPositiveOutputDim { .. })
        ));
    }

    #[test]
    fn backward_distributes_bias_gradient_exactly() {
        // d(sum out)/d(bias_k) = number of output positions.
        let input = Tensor::zeros(&[2, 1, 4, 4]);
        let mut p = ConvParams::new(3, 1, 3, 3, 1, 1);
        let mut x = input.clone();
        let out = conv2d(&x, &p).unwrap();
        let ones = Tensor::filled(&out.shape.clone(), 1.0);
        conv2d_backward(&mut x, &mut p, &ones).unwrap();
        for &g in p.bias.grad.as_ref().unwrap() {
            assert_eq!(g, (2 * 4 * 4) as f64);
        }
    }
}
