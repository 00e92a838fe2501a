use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Natural log with the probability floor.
#[inline]
pub fn clamped_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Categorical cross-entropy `-ln p[target]` of one probability vector.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    if target >= probs.len() {
        return Err(Error::TargetOutOfRange {
            target,
            classes: probs.len(),
        });
    }
    Ok(-clamped_ln(probs[target]))
}

/// Gradient of the batch-mean cross-entropy w.r.t. the logits feeding a
/// softmax: `(p - onehot(y)) / batch`.
pub fn softmax_cross_entropy_grad(
    probs: &[f64],
    classes: usize,
    targets: &[usize],
) -> Result<Vec<f64>> {
    let n = targets.len();
    let mut g = probs.to_vec();
    for (row, &t) in g.chunks_exact_mut(classes).zip(targets) {
        if t >= classes {
            return Err(Error::TargetOutOfRange { target: t, classes });
        }
        row[t] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn one_hot_is_zero() {
        assert_abs_diff_eq!(cross_entropy(&[1.0, 0.0, 0.0], 0).unwrap(), 0.0);
    }

    #[test]
    fn uniform_six_classes_is_ln6() {
        let p = [1.0 / 6.0; 6];
        for t in 0..6 {
            assert_abs_diff_eq!(cross_entropy(&p, t).unwrap(), 1.791759, epsilon = 1e-6);
        }
    }

    #[test]
    fn direct_value() {
        assert_abs_diff_eq!(
            cross_entropy(&[0.7, 0.3], 1).unwrap(),
            1.203973,
            epsilon = 1e-6
        );
    }

    #[test]
    fn zero_probability_is_clamped() {
        let v = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert_abs_diff_eq!(v, -(1e-12f64).ln());
    }

    #[test]
    fn target_out_of_range() {
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], 2),
            Err(Error::TargetOutOfRange {
                target: 2,
                classes: 2
            })
        ));
    }
}
