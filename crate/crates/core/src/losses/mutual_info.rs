use ndarray::{Array2, Axis};

use super::LossValue;
use crate::numerics::{entropy, ProbabilityMatrix};

/// Negative mutual information on target predictions:
/// mean conditional entropy minus the entropy of the mean prediction.
///
/// Returns the gradient with respect to the probability entries.
pub fn mutual_info(p: &ProbabilityMatrix) -> (LossValue, Array2<f64>) {
    let data = p.data();
    let n = data.nrows() as f64;
    let conditional = data.rows().into_iter().map(|r| entropy(r.iter().copied())).sum::<f64>() / n;
    let marginal = data.mean_axis(Axis(0)).expect("non-empty");
    let marginal_entropy = entropy(marginal.iter().copied());
    let value = conditional - marginal_entropy;

    let floor = f64::MIN_POSITIVE;
    let mut grad = Array2::zeros(data.dim());
    for ((i, c), g) in grad.indexed_iter_mut() {
        *g = (marginal[c].max(floor).ln() - data[[i, c]].max(floor).ln()) / n;
    }
    (
        LossValue::scalar(value)
            .with_component("conditional_entropy", conditional)
            .with_component("marginal_entropy", marginal_entropy),
        grad,
    )
}

pub fn mutual_info_loss(p: &ProbabilityMatrix) -> LossValue {
    mutual_info(p).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn uniform_rows_give_zero() {
        let p = ProbabilityMatrix::new(Array2::from_elem((3, 4), 0.25)).unwrap();
        assert_abs_diff_eq!(mutual_info_loss(&p).value, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn confident_and_balanced_is_minus_log2() {
        let p = ProbabilityMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(mutual_info_loss(&p).value, -(2f64.ln()), epsilon = 1e-15);
    }

    #[test]
    fn single_one_hot_row_is_zero() {
        let p = ProbabilityMatrix::one_hot(&[2], 3).unwrap();
        assert_eq!(mutual_info_loss(&p).value, 0.0);
    }
}
