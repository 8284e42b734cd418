use crate::numerics::DenseArray;

use super::PipelineError;

fn check(logits: &DenseArray, target: &DenseArray) -> Result<(), PipelineError> {
    if logits.len() != target.len() {
        return Err(PipelineError::Config(format!(
            "logits have {} elements, target {}",
            logits.len(),
            target.len()
        )));
    }
    if let Some(i) = target.data().iter().position(|&y| y != 0.0 && y != 1.0) {
        return Err(PipelineError::Target { index: i, value: target.data()[i] });
    }
    Ok(())
}

/// Mean binary cross-entropy of `sigmoid(z)` against `y ∈ {0, 1}`, computed
/// as `max(z, 0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_loss(logits: &DenseArray, target: &DenseArray) -> Result<f64, PipelineError> {
    check(logits, target)?;
    let n = logits.len().max(1) as f64;
    let sum: f64 = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(sum / n)
}

/// Gradient of [`bce_loss`] with respect to the logits: `(σ(z) − y) / P`.
pub fn bce_grad(logits: &DenseArray, target: &DenseArray) -> Result<DenseArray, PipelineError> {
    check(logits, target)?;
    let n = logits.len().max(1) as f64;
    let data = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &y)| (crate::numerics::ops::sigmoid_f64(z) - y) / n)
        .collect();
    Ok(DenseArray::new(logits.shape().to_vec(), data)?)
}

/// Intersection over union of `sigmoid(z) ≥ 0.5` (that is `z ≥ 0`) against
/// the target; two empty masks score 1.
pub fn iou(logits: &DenseArray, target: &DenseArray) -> Result<f64, PipelineError> {
    check(logits, target)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&z, &y) in logits.data().iter().zip(target.data()) {
        let p = z >= 0.0;
        let t = y == 1.0;
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn arr(v: &[f64]) -> DenseArray {
        DenseArray::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_logits_give_ln2() {
        let l = bce_loss(&arr(&[0.0; 4]), &arr(&[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let l = bce_loss(&arr(&[50.0, -50.0, 50.0]), &arr(&[1.0, 0.0, 1.0])).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn matches_naive_formula() {
        let mut rng = Rng::new(1);
        let z = DenseArray::uniform(&[200], -5.0, 5.0, &mut rng);
        let y = arr(&(0..200).map(|_| rng.below(2) as f64).collect::<Vec<_>>());
        let naive: f64 = z
            .data()
            .iter()
            .zip(y.data())
            .map(|(&z, &y)| {
                let s = 1.0 / (1.0 + (-z).exp());
                -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / 200.0;
        assert!((bce_loss(&z, &y).unwrap() - naive).abs() < 1e-10);
    }

    #[test]
    fn rejects_soft_targets() {
        assert!(matches!(
            bce_loss(&arr(&[0.0, 0.0]), &arr(&[1.0, 0.5])),
            Err(PipelineError::Target { index: 1, .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(2);
        let z = DenseArray::uniform(&[6], -3.0, 3.0, &mut rng);
        let y = arr(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let g = bce_grad(&z, &y).unwrap();
        let num = crate::numerics::finite_diff(|x| bce_loss(x, &y).unwrap(), &z, 1e-5);
        assert!(g.max_abs_diff(&num).unwrap() < 1e-9);
    }

    #[test]
    fn iou_counts() {
        let z = arr(&[1.0, 1.0, -1.0, -1.0]);
        assert_eq!(iou(&z, &arr(&[1.0, 0.0, 1.0, 0.0])).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(&arr(&[-1.0; 2]), &arr(&[0.0; 2])).unwrap(), 1.0);
    }
}
