use super::{shape_mismatch, NnError, Tensor};

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.grad = None;
    out.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    out
}

/// The mask comes from the forward *input*: positions with input > 0 pass
/// the upstream gradient through, everything else (including the kink at
/// exactly 0) contributes nothing.
pub fn relu_backward(input: &mut Tensor, grad_out: &Tensor) -> Result<(), NnError> {
    if input.shape != grad_out.shape {
        return Err(shape_mismatch(
            "relu_backward",
            format!(
                "input shape {:?} vs upstream gradient {:?}",
                input.shape, grad_out.shape
            ),
        ));
    }
    input.grad_mut();
    let data = &input.data;
    let grad = input.grad.as_mut().expect("grad buffer just created");
    for i in 0..grad_out.data.len() {
        if data[i] > 0.0 {
            grad[i] += grad_out.data[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_negatives_and_keeps_positives() {
        let x = Tensor::new(vec![5], vec![-2.0, -0.5, 0.0, 0.5, 2.0]).unwrap();
        assert_eq!(relu(&x).data, vec![0.0, 0.0, 0.0, 0.5, 2.0]);
    }

    #[test]
    fn backward_masks_gradient_by_sign_of_input() {
        let mut x = Tensor::new(vec![4], vec![-1.0, 0.0, 1.0, 3.0]).unwrap();
        let g = Tensor::filled(&[4], 2.0);
        relu_backward(&mut x, &g).unwrap();
        assert_eq!(x.grad.as_ref().unwrap(), &vec![0.0, 0.0, 2.0, 2.0]);
    }
}
