use ndarray::{Array2, ArrayView2, Axis};

use super::{NetError, Result};
use crate::scalar::Scalar;

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean negative log-likelihood of `labels` and its gradient with respect to
/// the logits, `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    let (b, classes) = logits.dim();
    if labels.len() != b || b == 0 {
        return Err(NetError::ShapeMismatch {
            expected: format!("{b} labels (non-empty batch)"),
            found: format!("{} labels", labels.len()),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(NetError::LabelOutOfRange { label, classes });
    }
    let bt = T::from_usize_lossy(b);
    let mut loss = T::zero();
    let mut grad = Array2::zeros((b, classes));
    for ((row, mut g), &label) in logits.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))).zip(labels) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[label];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *gj = (p - if j == label { T::one() } else { T::zero() }) / bt;
        }
    }
    Ok((loss / bt, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_ln2() {
        let (loss, grad) = softmax_cross_entropy(array![[0.0f64, 0.0]].view(), &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(grad, array![[-0.5, 0.5]]);
    }

    #[test]
    fn large_logits_are_stable() {
        let (loss, grad) = softmax_cross_entropy(array![[30.0f32, -30.0]].view(), &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-6);
        assert!(grad.iter().all(|g| g.is_finite()));
        let (loss, _) = softmax_cross_entropy(array![[1000.0f64, -1000.0]].view(), &[1]).unwrap();
        assert_eq!(loss, 2000.0);
    }

    #[test]
    fn label_range_checked() {
        assert!(matches!(
            softmax_cross_entropy(array![[0.0f64, 0.0]].view(), &[2]),
            Err(NetError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(vals in proptest::collection::vec(-5.0f64..5.0, 8), labels in proptest::collection::vec(0usize..2, 4)) {
            let logits = Array2::from_shape_vec((4, 2), vals).unwrap();
            let (_, grad) = softmax_cross_entropy(logits.view(), &labels).unwrap();
            let h = 1e-6;
            for i in 0..4 {
                for j in 0..2 {
                    let mut up = logits.clone();
                    up[[i, j]] += h;
                    let mut dn = logits.clone();
                    dn[[i, j]] -= h;
                    let fd = (softmax_cross_entropy(up.view(), &labels).unwrap().0 - softmax_cross_entropy(dn.view(), &labels).unwrap().0) / (2.0 * h);
                    let g = grad[[i, j]];
                    prop_assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-3), "{fd} vs {g}");
                }
            }
        }

        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f32..50.0, 6)) {
            let p = softmax(Array2::from_shape_vec((3, 2), vals).unwrap().view());
            for row in p.rows() {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }
}
