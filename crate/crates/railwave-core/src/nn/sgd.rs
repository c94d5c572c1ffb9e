use super::{NnError, Tensor};

/// Momentum SGD with decoupled-in-name-only weight decay folded into the
/// gradient: v <- momentum*v + grad + wd*param, param <- param - lr*v.
/// Both the parameter and the velocity are snapped back to the f32 grid
/// afterwards so checkpointed state reproduces training bit-for-bit.
pub fn sgd_step(
    param: &mut Tensor,
    velocity: &mut Vec<f64>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), NnError> {
    let grad = param
        .grad
        .as_ref()
        .ok_or_else(|| NnError::MissingGradient(format!("tensor of shape {:?}", param.shape)))?;
    if velocity.is_empty() {
        velocity.resize(param.data.len(), 0.0);
    }
    if velocity.len() != param.data.len() {
        return Err(NnError::BadTensor(format!(
            "velocity length {} does not match parameter length {}",
            velocity.len(),
            param.data.len()
        )));
    }
    for i in 0..param.data.len() {
        let v = momentum * velocity[i] + grad[i] + weight_decay * param.data[i];
        velocity[i] = v as f32 as f64;
        param.data[i] = (param.data[i] - lr * velocity[i]) as f32 as f64;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_the_identity_on_parameters() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap();
        p.grad = Some(vec![5.0, -5.0, 100.0]);
        let before = p.data.clone();
        let mut v = Vec::new();
        sgd_step(&mut p, &mut v, 0.0, 0.9, 1e-4).unwrap();
        assert_eq!(p.data, before);
        // Velocity still accumulates so later nonzero-lr steps behave.
        assert!(v[0] != 0.0);
    }

    #[test]
    fn plain_gradient_step_matches_hand_arithmetic() {
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        p.grad = Some(vec![0.5]);
        let mut v = Vec::new();
        sgd_step(&mut p, &mut v, 0.1, 0.0, 0.0).unwrap();
        // 1.0 - 0.1*0.5 = 0.95, then rounded to the nearest f32.
        assert!((p.data[0] - 0.95).abs() < 1e-7);
        assert_eq!(p.data[0], 0.95f32 as f64);
    }

    #[test]
    fn momentum_accumulates_across_steps() {
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut v = Vec::new();
        p.grad = Some(vec![1.0]);
        sgd_step(&mut p, &mut v, 1.0, 0.5, 0.0).unwrap();
        assert_eq!(p.data[0], -1.0);
        p.grad = Some(vec![1.0]);
        sgd_step(&mut p, &mut v, 1.0, 0.5, 0.0).unwrap();
        // v = 0.5*1 + 1 = 1.5; param = -1 - 1.5 = -2.5, exact in f32.
        assert_eq!(p.data[0], -2.5);
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient_signal() {
        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap();
        p.grad = Some(vec![0.0]);
        let mut v = Vec::new();
        sgd_step(&mut p, &mut v, 0.5, 0.0, 0.5).unwrap();
        // v = 0.5*2 = 1; param = 2 - 0.5*1 = 1.5, exact in f32.
        assert_eq!(p.data[0], 1.5);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::zeros(&[2]);
        let mut v = Vec::new();
        assert!(matches!(
            sgd_step(&mut p, &mut v, 0.1, 0.9, 0.0),
            Err(NnError::MissingGradient(_))
        ));
    }

    #[test]
    fn parameters_and_velocity_stay_on_the_f32_grid() {
        let mut p = Tensor::new(vec![1], vec![0.1f32 as f64]).unwrap();
        p.grad = Some(vec![0.3]);
        let mut v = vec![0.7];
        sgd_step(&mut p, &mut v, 0.01, 0.9, 1e-4).unwrap();
        assert_eq!(p.data[0], p.data[0] as f32 as f64);
        assert_eq!(v[0], v[0] as f32 as f64);
    }
}
