//! Output-space baselines. Both follow the higher-is-more-OOD convention.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_classes<T: Scalar>(logits: &Tensor<T>) -> Result<(usize, usize)> {
    let (n, c) = logits.dims2()?;
    if c < 2 {
        return Err(Error::config(format!("baseline scores need at least 2 classes, got {c}")));
    }
    logits.ensure_finite("logits")?;
    Ok((n, c))
}

fn logsumexp<T: Scalar>(row: &[T]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64().unwrap()));
    m + row.iter().map(|v| (v.to_f64().unwrap() - m).exp()).sum::<f64>().ln()
}

/// Negated maximum softmax probability, in `[-1, -1/C]`.
pub fn score_msp<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<f64>> {
    let (_, c) = check_classes(logits)?;
    Ok(logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let lse = logsumexp(row);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64().unwrap()));
            -(max - lse).exp()
        })
        .collect())
}

/// Negated free energy at temperature 1, `-logsumexp(s)`.
pub fn score_energy<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<f64>> {
    let (_, c) = check_classes(logits)?;
    Ok(logits.data().chunks_exact(c).map(|row| -logsumexp(row)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, v.len() / rows], v.to_vec()).unwrap()
    }

    #[test]
    fn msp_examples() {
        let s = score_msp(&t(1, &[0.0, 0.0])).unwrap();
        assert!((s[0] + 0.5).abs() < 1e-12);
        let s = score_msp(&t(1, &[1000.0, 0.0, 0.0])).unwrap();
        assert!((s[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn energy_examples() {
        let s = score_energy(&t(1, &[0.0, 0.0])).unwrap();
        assert!((s[0] + 2f64.ln()).abs() < 1e-12);
        let s = score_energy(&t(1, &[1e4, 1e4])).unwrap();
        assert!((s[0] + 1e4 + 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn single_class_rejected() {
        assert!(score_msp(&t(2, &[1.0, 2.0])).is_err());
        assert!(score_energy(&t(2, &[1.0, 2.0])).is_err());
    }
}
