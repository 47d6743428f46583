use crate::error::{HcwError, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over a batch of logits `[n, k]`.
///
/// Returns the loss and its gradient with respect to the logits
/// (`(softmax − onehot) / n`).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(HcwError::validation(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(HcwError::validation("cross_entropy on an empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(HcwError::validation(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut grad = Tensor::zeros(&[n, k]);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *gv = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// Index of the largest logit in each row (first on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::zeros(&[3, 4]);
        let (loss, _) = cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let logits = Tensor::from_vec(&[1, 3], vec![0.0, 800.0, 0.0]).unwrap();
        let (loss, grad) = cross_entropy(&logits, &[1]).unwrap();
        assert!((0.0..1e-300).contains(&loss));
        assert!(grad.max_abs() < 1e-300);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            cross_entropy(&logits, &[3]),
            Err(HcwError::Validation(_))
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = SeededRng::new(4);
        let (n, k) = (5, 4);
        let data: Vec<f64> = (0..n * k).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let logits = Tensor::from_vec(&[n, k], data.clone()).unwrap();
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-5;
        for idx in 0..n * k {
            let mut plus = data.clone();
            let mut minus = data.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let lp = cross_entropy(&Tensor::from_vec(&[n, k], plus).unwrap(), &labels)
                .unwrap()
                .0;
            let lm = cross_entropy(&Tensor::from_vec(&[n, k], minus).unwrap(), &labels)
                .unwrap()
                .0;
            let fd = (lp - lm) / (2.0 * h);
            let an = grad.data()[idx];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-12);
            assert!(
                rel < 1e-6 || (fd - an).abs() < 1e-10,
                "idx {idx}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn argmax_first_on_ties() {
        let logits = Tensor::from_vec(&[2, 3], vec![1.0, 3.0, 3.0, 0.0, -1.0, -2.0]).unwrap();
        assert_eq!(argmax_rows(&logits), vec![1, 0]);
    }
}
