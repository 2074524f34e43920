//! Chamfer distance and softmax cross-entropy.
//!
//! Chamfer uses squared Euclidean distances, a mean per direction, and the
//! two directions summed:
//! `CD(A,B) = mean_a min_b ‖a-b‖² + mean_b min_a ‖b-a‖²`.
//! Nearest-neighbour search is exact brute force; ties go to the lowest index.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Nearest-neighbour assignment between two point sets and the resulting
/// Chamfer value.
#[derive(Debug, Clone)]
pub struct NearestPairs {
    pub value: f64,
    pub a_to_b: Vec<usize>,
    pub b_to_a: Vec<usize>,
}

/// Brute-force nearest neighbours in both directions between flat row-major
/// point arrays with `dim` coordinates per point.
pub fn nearest_pairs(a: &[f64], b: &[f64], dim: usize) -> NearestPairs {
    let n = a.len() / dim;
    let m = b.len() / dim;
    let mut best_a = vec![f64::INFINITY; n];
    let mut best_b = vec![f64::INFINITY; m];
    let mut a_to_b = vec![0usize; n];
    let mut b_to_a = vec![0usize; m];
    for (i, p) in a.chunks_exact(dim).enumerate() {
        for (j, q) in b.chunks_exact(dim).enumerate() {
            let d: f64 = p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum();
            if d < best_a[i] {
                best_a[i] = d;
                a_to_b[i] = j;
            }
            if d < best_b[j] {
                best_b[j] = d;
                b_to_a[j] = i;
            }
        }
    }
    let value = best_a.iter().sum::<f64>() / n as f64 + best_b.iter().sum::<f64>() / m as f64;
    NearestPairs { value, a_to_b, b_to_a }
}

/// Chamfer distance between two `[n,3]`-style point sets.
pub fn chamfer(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::shape("chamfer", a.shape(), b.shape()));
    }
    Ok(nearest_pairs(a.data(), b.data(), a.cols()).value)
}

/// Log-sum-exp of a logit row and its softmax, via the max shift.
pub(crate) fn log_softmax_parts(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / sum).collect();
    (max + sum.ln(), probs)
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let (lse, _) = log_softmax_parts(logits);
    Ok(lse - logits[label])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn cloud(rows: &[[f64; 3]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn chamfer_examples() {
        let a = cloud(&[[0.0, 0.0, 0.0], [0.3, -1.0, 2.0]]);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);

        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);

        let a = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn chamfer_ties_break_to_lowest_index() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let pairs = nearest_pairs(a.data(), b.data(), 3);
        assert_eq!(pairs.a_to_b, vec![0]);
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        let stable = cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(stable.is_finite() && stable.abs() < 1e-12);
        let v = cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!((v - 0.40760596).abs() < 1e-8, "{v}");
        assert!(cross_entropy(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn tape_chamfer_matches_pure_value_and_averages_groups() {
        let a = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0], [0.0, 0.5, 0.0]]);
        let mut tape = Tape::new();
        let (x, y) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let both = tape.chamfer(x, y, 2).unwrap();
        let first = chamfer(&a.slice_rows(0, 1).unwrap(), &b.slice_rows(0, 1).unwrap()).unwrap();
        let second = chamfer(&a.slice_rows(1, 2).unwrap(), &b.slice_rows(1, 2).unwrap()).unwrap();
        assert_eq!(tape.value(both).item(), (first + second) / 2.0);
        let whole = tape.chamfer(x, y, 1).unwrap();
        assert_eq!(tape.value(whole).item(), chamfer(&a, &b).unwrap());
    }

    #[test]
    fn tape_cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::vector(vec![0.0, 1.0]).unwrap());
        assert!(tape.softmax_cross_entropy(l, &[2]).is_err());
        let v = tape.softmax_cross_entropy(l, &[1]).unwrap();
        assert!((tape.value(v).item() - cross_entropy(&[0.0, 1.0], 1).unwrap()).abs() < 1e-15);
    }
}
