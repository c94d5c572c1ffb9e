use super::{dims4, shape_mismatch, NnError, Tensor};

/// Per-channel affine normalization state. `gamma`/`beta` are trainable;
/// the running moments are inference state updated only in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.shape[0]
    }
}

/// Values the backward pass needs: normalized activations and the
/// per-channel reciprocal standard deviation from the forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Training mode normalizes with batch statistics (biased variance) and
/// folds them into the running moments; the running variance uses the
/// unbiased estimate. Eval mode applies the stored moments and returns no
/// cache.
pub fn batchnorm2d(
    input: &Tensor,
    params: &mut BatchNormParams,
    training: bool,
) -> Result<(Tensor, Option<BatchNormCache>), NnError> {
    let [n, c, h, w] = dims4(input, "batchnorm2d", "input")?;
    if params.channels() != c {
        return Err(shape_mismatch(
            "batchnorm2d",
            format!("input has {c} channels, params have {}", params.channels()),
        ));
    }
    let m = n * h * w;
    let plane = h * w;

    if !training {
        return Ok((batchnorm2d_eval(input, params)?, None));
    }
    let mut out = Tensor::zeros(&[n, c, h, w]);

    if m < 2 {
        return Err(NnError::DegenerateBatch { m });
    }

    let mut xhat = vec![0.0f64; input.data.len()];
    let mut inv_std = vec![0.0f64; c];
    for ci in 0..c {
        let mut sum = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                sum += input.data[base + i];
            }
        }
        let mean = sum / m as f64;
        let mut varsum = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let d = input.data[base + i] - mean;
                varsum += d * d;
            }
        }
        let var = varsum / m as f64;
        let istd = 1.0 / (var + params.eps).sqrt();
        inv_std[ci] = istd;
        let (g, b) = (params.gamma.data[ci], params.beta.data[ci]);
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let xh = (input.data[base + i] - mean) * istd;
                xhat[base + i] = xh;
                out.data[base + i] = g * xh + b;
            }
        }
        let unbiased = varsum / (m - 1) as f64;
        let mom = params.momentum;
        params.running_mean.data[ci] = (1.0 - mom) * params.running_mean.data[ci] + mom * mean;
        params.running_var.data[ci] = (1.0 - mom) * params.running_var.data[ci] + mom * unbiased;
    }
    // Running moments are checkpointed as f32, so keep them on that grid.
    params.running_mean.round_to_f32();
    params.running_var.round_to_f32();
    out.debug_check_finite("batchnorm2d");
    Ok((out, Some(BatchNormCache { xhat, inv_std })))
}

/// Inference-mode normalization from the stored running moments. Takes the
/// params immutably so a frozen model can serve from shared references.
pub fn batchnorm2d_eval(input: &Tensor, params: &BatchNormParams) -> Result<Tensor, NnError> {
    let [n, c, h, w] = dims4(input, "batchnorm2d", "input")?;
    if params.channels() != c {
        return Err(shape_mismatch(
            "batchnorm2d",
            format!("input has {c} channels, params have {}", params.channels()),
        ));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for ci in 0..c {
        let mean = params.running_mean.data[ci];
        let scale = params.gamma.data[ci] / (params.running_var.data[ci] + params.eps).sqrt();
        let shift = params.beta.data[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                out.data[base + i] = (input.data[base + i] - mean) * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Gradient through the batch statistics. With g the upstream gradient and
/// per-channel sums taken over all m = N*H*W positions:
///   dx = gamma*inv_std*(g - mean(g) - xhat*mean(g*xhat))
/// dgamma accumulates g*xhat and dbeta accumulates g.
pub fn batchnorm2d_backward(
    input: &mut Tensor,
    params: &mut BatchNormParams,
    cache: &BatchNormCache,
    grad_out: &Tensor,
) -> Result<(), NnError> {
    let [n, c, h, w] = dims4(input, "batchnorm2d_backward", "input")?;
    if grad_out.shape != [n, c, h, w] {
        return Err(shape_mismatch(
            "batchnorm2d_backward",
            "upstream gradient shape differs from input".into(),
        ));
    }
    if cache.xhat.len() != input.data.len() || cache.inv_std.len() != c {
        return Err(shape_mismatch(
            "batchnorm2d_backward",
            "cache does not match input shape".into(),
        ));
    }
    let m = (n * h * w) as f64;
    let plane = h * w;
    let gamma = params.gamma.data.clone();
    let gamma_grad = params.gamma.grad_mut();
    let beta_grad = params.beta.grad_mut();
    let input_grad = input.grad_mut();
    for ci in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let g = grad_out.data[base + i];
                sum_g += g;
                sum_gx += g * cache.xhat[base + i];
            }
        }
        gamma_grad[ci] += sum_gx;
        beta_grad[ci] += sum_g;
        let coeff = gamma[ci] * cache.inv_std[ci];
        let (mg, mgx) = (sum_g / m, sum_gx / m);
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let g = grad_out.data[base + i];
                input_grad[base + i] += coeff * (g - mg - cache.xhat[base + i] * mgx);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn training_output_has_zero_mean_unit_variance_per_channel() {
        let input = random_input(&[4, 3, 5, 5], 11);
        let mut p = BatchNormParams::new(3);
        p.eps = 1e-12;
        let (out, cache) = batchnorm2d(&input, &mut p, true).unwrap();
        assert!(cache.is_some());
        let m = (4 * 5 * 5) as f64;
        for ci in 0..3 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for ni in 0..4 {
                let base = (ni * 3 + ci) * 25;
                for i in 0..25 {
                    sum += out.data[base + i];
                    sq += out.data[base + i] * out.data[base + i];
                }
            }
            let mean = sum / m;
            let var = sq / m - mean * mean;
            assert!(mean.abs() < 1e-6, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "channel {ci} var {var}");
        }
    }

    #[test]
    fn eval_with_fresh_stats_scales_by_inverse_sqrt_eps() {
        // running_mean 0, running_var 1: output = x / sqrt(1 + eps).
        let input = Tensor::filled(&[1, 1, 1, 2], 2.0);
        let mut p = BatchNormParams::new(1);
        let (out, cache) = batchnorm2d(&input, &mut p, false).unwrap();
        assert!(cache.is_none());
        let expect = 2.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out.data[0] - expect).abs() < 1e-15);
        assert!((out.data[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn running_moments_blend_with_momentum() {
        let input = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut p = BatchNormParams::new(1);
        batchnorm2d(&input, &mut p, true).unwrap();
        // batch mean 2, unbiased var ((1-2)^2+(3-2)^2)/(2-1) = 2.
        assert!((p.running_mean.data[0] - 0.2).abs() < 1e-7);
        assert!((p.running_var.data[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-7);
    }

    #[test]
    fn eval_mode_leaves_running_moments_untouched() {
        let input = random_input(&[2, 2, 3, 3], 3);
        let mut p = BatchNormParams::new(2);
        let before = (p.running_mean.data.clone(), p.running_var.data.clone());
        batchnorm2d(&input, &mut p, false).unwrap();
        assert_eq!(before.0, p.running_mean.data);
        assert_eq!(before.1, p.running_var.data);
    }

    #[test]
    fn single_element_batch_is_rejected_in_training() {
        let input = Tensor::zeros(&[1, 2, 1, 1]);
        let mut p = BatchNormParams::new(2);
        assert!(matches!(
            batchnorm2d(&input, &mut p, true),
            Err(NnError::DegenerateBatch { m: 1 })
        ));
    }

    #[test]
    fn zero_gamma_blocks_the_input_gradient_exactly() {
        let input = random_input(&[2, 2, 4, 4], 9);
        let mut p = BatchNormParams::new(2);
        p.gamma.data.iter_mut().for_each(|v| *v = 0.0);
        let (_, cache) = batchnorm2d(&input, &mut p, true).unwrap();
        let mut x = input.clone();
        let g = random_input(&[2, 2, 4, 4], 10);
        batchnorm2d_backward(&mut x, &mut p, &cache.unwrap(), &g).unwrap();
        assert!(x.grad.as_ref().unwrap().iter().all(|&v| v == 0.0));
        // beta still sees the full upstream gradient.
        let dbeta: f64 = p.beta.grad.as_ref().unwrap().iter().sum();
        assert!((dbeta - g.data.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn backward_gradient_sums_to_zero_per_channel() {
        // The batch-statistics path projects out the mean direction: for any
        // upstream gradient the input gradients of one channel sum to ~0.
        let input = random_input(&[3, 2, 4, 4], 17);
        let mut p = BatchNormParams::new(2);
        let (_, cache) = batchnorm2d(&input, &mut p, true).unwrap();
        let mut x = input.clone();
        let g = random_input(&[3, 2, 4, 4], 18);
        batchnorm2d_backward(&mut x, &mut p, &cache.unwrap(), &g).unwrap();
        let grad = x.grad.as_ref().unwrap();
        for ci in 0..2 {
            let mut sum = 0.0;
            for ni in 0..3 {
                let base = (ni * 2 + ci) * 16;
                for i in 0..16 {
                    sum += grad[base + i];
                }
            }
            assert!(sum.abs() < 1e-9, "channel {ci} gradient sum {sum}");
        }
    }
}
