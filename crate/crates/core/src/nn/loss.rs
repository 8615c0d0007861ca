use crate::error::{Error, Result};
use crate::tensor::Real;

pub fn softmax<R: Real>(logits: &[R]) -> Vec<R> {
    let m = logits.iter().fold(R::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<R> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: R = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Class-weighted categorical cross-entropy on raw logits.
///
/// Returns `w[label] * -log softmax(logits)[label]` and its gradient with respect to the logits.
pub fn weighted_softmax_xent<R: Real>(
    logits: &[R],
    label: usize,
    class_weights: &[R],
) -> Result<(R, Vec<R>)> {
    let k = logits.len();
    if label >= k {
        return Err(Error::Invalid(format!("label {label} outside [0, {k})")));
    }
    if class_weights.len() != k {
        return Err(Error::Shape(format!(
            "{} class weights for {k} logits",
            class_weights.len()
        )));
    }
    let m = logits.iter().fold(R::neg_infinity(), |a, &b| a.max(b));
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<R>().ln();
    let w = class_weights[label];
    let loss = w * (lse - logits[label]);
    let mut grad = softmax(logits);
    grad[label] -= R::one();
    grad.iter_mut().for_each(|g| *g *= w);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let (loss, _) = weighted_softmax_xent(&[0.3f64; 4], 2, &[1.0; 4]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn weight_scales_linearly() {
        let logits = [0.5f64, -1.0, 2.0, 0.1];
        let (l1, g1) = weighted_softmax_xent(&logits, 1, &[1.0, 1.5, 1.0, 1.0]).unwrap();
        let (l2, g2) = weighted_softmax_xent(&logits, 1, &[1.0, 3.0, 1.0, 1.0]).unwrap();
        assert_eq!(l2, 2.0 * l1);
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[100.0f32, -3.0, 7.5, 0.0]);
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        assert!(weighted_softmax_xent(&[0.0f32; 4], 4, &[1.0; 4]).is_err());
    }
}
