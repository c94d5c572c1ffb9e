use super::{dims2, shape_mismatch, NnError, Tensor};

/// Softmax with max-subtraction followed by mean negative log-likelihood.
/// Returns the scalar loss and the full probability tensor [N x K].
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
) -> Result<(f64, Tensor), NnError> {
    let [n, k] = dims2(logits, "softmax_cross_entropy", "logits")?;
    if labels.len() != n {
        return Err(shape_mismatch(
            "softmax_cross_entropy",
            format!("{n} logit rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NnError::BadLabel {
            label: bad,
            classes: k,
        });
    }
    let mut probs = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    for ni in 0..n {
        let row = &logits.data[ni * k..(ni + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (i, &x) in row.iter().enumerate() {
            let e = (x - m).exp();
            probs.data[ni * k + i] = e;
            z += e;
        }
        for i in 0..k {
            probs.data[ni * k + i] /= z;
        }
        // -ln p[label] computed from logits directly, not from the divided
        // probability, to avoid an extra rounding step.
        loss += m + z.ln() - row[labels[ni]];
    }
    Ok((loss / n as f64, probs))
}

/// Gradient of the mean loss w.r.t. the logits: (p - onehot)/N.
pub fn softmax_cross_entropy_backward(
    logits: &mut Tensor,
    probs: &Tensor,
    labels: &[usize],
) -> Result<(), NnError> {
    let [n, k] = dims2(logits, "softmax_cross_entropy_backward", "logits")?;
    if probs.shape != [n, k] || labels.len() != n {
        return Err(shape_mismatch(
            "softmax_cross_entropy_backward",
            "probabilities or labels do not match the logits".into(),
        ));
    }
    let grad = logits.grad_mut();
    let scale = 1.0 / n as f64;
    for ni in 0..n {
        for i in 0..k {
            let onehot = if labels[ni] == i { 1.0 } else { 0.0 };
            grad[ni * k + i] += (probs.data[ni * k + i] - onehot) * scale;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_over_17_classes_give_ln_17() {
        let logits = Tensor::filled(&[1, 17], 0.3);
        let (loss, probs) = softmax_cross_entropy(&logits, &[4]).unwrap();
        assert!((loss - 2.833213344056216).abs() < 1e-12);
        for &p in &probs.data {
            assert!((p - 1.0 / 17.0).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_logits_survive_via_max_subtraction() {
        let logits =
            Tensor::new(vec![1, 2], vec![1000.0, 1000.0 + std::f64::consts::LN_2]).unwrap();
        let (loss, probs) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((probs.data[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((probs.data[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((loss - (3.0f64 / 2.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn probability_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let logits = Tensor::new(
            vec![8, 17],
            (0..8 * 17).map(|_| rng.random_range(-50.0..50.0)).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..8).map(|i| i * 2 % 17).collect();
        let (_, probs) = softmax_cross_entropy(&logits, &labels).unwrap();
        for ni in 0..8 {
            let s: f64 = probs.data[ni * 17..(ni + 1) * 17].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {ni} sums to {s}");
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(NnError::BadLabel {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn backward_is_probs_minus_onehot_over_batch() {
        let mut logits = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let (_, probs) = softmax_cross_entropy(&logits, &[0, 1]).unwrap();
        softmax_cross_entropy_backward(&mut logits, &probs, &[0, 1]).unwrap();
        let g = logits.grad.as_ref().unwrap();
        assert!((g[0] - (0.5 - 1.0) / 2.0).abs() < 1e-15);
        assert!((g[1] - 0.5 / 2.0).abs() < 1e-15);
        // Each row of the gradient sums to zero.
        assert!((g[2] + g[3]).abs() < 1e-15);
    }
}
