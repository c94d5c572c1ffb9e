use super::{dims2, shape_mismatch, NnError, Tensor};

/// Affine classification head: weight rows are output units.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(out_features: usize, in_features: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(&[out_features, in_features]),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    fn validate(&self, in_features: usize) -> Result<[usize; 2], NnError> {
        let dims = dims2(&self.weight, "linear", "weight")?;
        let [k, f] = dims;
        if f != in_features {
            return Err(shape_mismatch(
                "linear",
                format!("input has {in_features} features, weight expects {f}"),
            ));
        }
        if self.bias.shape != [k] {
            return Err(shape_mismatch(
                "linear",
                format!("bias shape {:?} does not match {k} outputs", self.bias.shape),
            ));
        }
        Ok(dims)
    }
}

pub fn linear(input: &Tensor, params: &LinearParams) -> Result<Tensor, NnError> {
    let [n, f] = dims2(input, "linear", "input")?;
    let [k, _] = params.validate(f)?;
    let mut out = Tensor::zeros(&[n, k]);
    for ni in 0..n {
        let row = &input.data[ni * f..(ni + 1) * f];
        for ki in 0..k {
            let wrow = &params.weight.data[ki * f..(ki + 1) * f];
            let mut acc = params.bias.data[ki];
            for i in 0..f {
                acc += row[i] * wrow[i];
            }
            out.data[ni * k + ki] = acc;
        }
    }
    out.debug_check_finite("linear");
    Ok(out)
}

pub fn linear_backward(
    input: &mut Tensor,
    params: &mut LinearParams,
    grad_out: &Tensor,
) -> Result<(), NnError> {
    let [n, f] = dims2(input, "linear_backward", "input")?;
    let [k, _] = params.validate(f)?;
    if grad_out.shape != [n, k] {
        return Err(shape_mismatch(
            "linear_backward",
            format!("upstream gradient shape {:?}, expected [{n}, {k}]", grad_out.shape),
        ));
    }
    let weight = params.weight.data.clone();
    let wgrad = params.weight.grad_mut();
    let bgrad = params.bias.grad_mut();
    input.grad_mut();
    // Field-level split: read `data`, write `grad`.
    let data = &input.data;
    let igrad = input.grad.as_mut().expect("grad buffer just created");
    for ni in 0..n {
        for ki in 0..k {
            let g = grad_out.data[ni * k + ki];
            if g == 0.0 {
                continue;
            }
            bgrad[ki] += g;
            for i in 0..f {
                wgrad[ki * f + i] += data[ni * f + i] * g;
                igrad[ni * f + i] += weight[ki * f + i] * g;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_zero_bias_is_a_pass_through() {
        let input = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut p = LinearParams::new(3, 3);
        for i in 0..3 {
            p.weight.data[i * 3 + i] = 1.0;
        }
        assert_eq!(linear(&input, &p).unwrap().data, input.data);
    }

    #[test]
    fn two_by_two_affine_matches_hand_arithmetic() {
        let input = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let mut p = LinearParams::new(2, 2);
        p.weight.data = vec![1.0, 2.0, 3.0, 4.0];
        p.bias.data = vec![0.5, -0.5];
        assert_eq!(linear(&input, &p).unwrap().data, vec![3.5, 6.5]);
    }

    #[test]
    fn feature_count_mismatch_is_rejected() {
        let input = Tensor::zeros(&[1, 4]);
        let p = LinearParams::new(2, 3);
        assert!(matches!(
            linear(&input, &p),
            Err(NnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_of_sum_gives_inputs_as_weight_gradient() {
        // loss = sum(out) makes dW[k][i] = sum over batch of input[n][i].
        let input = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut p = LinearParams::new(2, 2);
        let mut x = input.clone();
        let g = Tensor::filled(&[2, 2], 1.0);
        linear_backward(&mut x, &mut p, &g).unwrap();
        assert_eq!(p.weight.grad.as_ref().unwrap(), &vec![4.0, 6.0, 4.0, 6.0]);
        assert_eq!(p.bias.grad.as_ref().unwrap(), &vec![2.0, 2.0]);
    }
}
