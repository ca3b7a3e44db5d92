use ndarray::Array2;

use crate::scalar::Scalar;

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: T = row.iter().copied().sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Mean cross-entropy over the batch and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> (T, Array2<T>) {
    assert_eq!(logits.nrows(), labels.len(), "one label per row");
    let n = T::from_usize(labels.len()).expect("batch size");
    let mut grad = softmax(logits);
    let mut loss = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let p = grad[[i, y]];
        loss -= p.max(T::min_positive_value()).ln();
        grad[[i, y]] -= T::one();
    }
    grad.mapv_inplace(|g| g / n);
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Array2::<f64>::zeros((3, 6));
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 3, 5]);
        assert!((loss - 6f64.ln()).abs() < 1e-12);
        for row in grad.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&array![[1000.0f32, 0.0, -1000.0], [0.5, 0.25, 0.125]]);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}
