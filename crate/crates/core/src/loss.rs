//! Training losses against soft prominence targets.

use crate::error::{Error, Result};
use crate::rasch::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Binary cross-entropy on logits.
    Bce,
    /// Squared error on sigmoid-bounded outputs.
    Mse,
}

/// Loss and its derivative with respect to the raw (pre-sigmoid) score.
#[inline]
pub(crate) fn elementwise(kind: LossKind, raw: f64, target: f64) -> (f64, f64) {
    match kind {
        LossKind::Bce => {
            let loss = raw.max(0.0) - raw * target + (-raw.abs()).exp().ln_1p();
            (loss, sigmoid(raw) - target)
        }
        LossKind::Mse => {
            let p = sigmoid(raw);
            let diff = p - target;
            (diff * diff, 2.0 * diff * p * (1.0 - p))
        }
    }
}

fn check(scores: &[f64], targets: &[f64], mask: Option<&[bool]>) -> Result<()> {
    if scores.len() != targets.len() || mask.is_some_and(|m| m.len() != scores.len()) {
        return Err(Error::Loss(format!(
            "shape mismatch: {} scores, {} targets",
            scores.len(),
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Loss(format!("target {t} outside [0, 1]")));
    }
    Ok(())
}

fn masked_mean(values: impl Iterator<Item = f64>, mask: Option<&[bool]>) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, v) in values.enumerate() {
        if mask.map_or(true, |m| m[i]) {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean binary cross-entropy between logits and soft targets over unmasked
/// positions.
pub fn bce_loss(logits: &[f64], targets: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    check(logits, targets, mask)?;
    Ok(masked_mean(
        logits
            .iter()
            .zip(targets)
            .map(|(&x, &t)| elementwise(LossKind::Bce, x, t).0),
        mask,
    ))
}

/// Mean squared error between bounded scores in `[0, 1]` and targets over
/// unmasked positions.
pub fn mse_loss(bounded: &[f64], targets: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    check(bounded, targets, mask)?;
    Ok(masked_mean(
        bounded.iter().zip(targets).map(|(&p, &t)| (p - t) * (p - t)),
        mask,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        let l = bce_loss(&[0.0], &[0.5], None).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let logit = (0.9f64 / 0.1).ln();
        let l = bce_loss(&[logit], &[1.0], None).unwrap();
        assert!((l + 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mse_perfect_fit_is_zero() {
        assert_eq!(mse_loss(&[0.2, 0.7], &[0.2, 0.7], None).unwrap(), 0.0);
    }

    #[test]
    fn mask_excludes_positions() {
        let l = bce_loss(&[0.0, 50.0], &[0.5, 0.0], Some(&[true, false])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_targets() {
        assert!(matches!(bce_loss(&[0.0], &[1.5], None), Err(Error::Loss(_))));
        assert!(mse_loss(&[0.0, 1.0], &[0.5], None).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for kind in [LossKind::Bce, LossKind::Mse] {
            for &(x, t) in &[(0.3, 0.2), (-2.0, 1.0), (4.0, 0.0)] {
                let h = 1e-6;
                let numeric = (elementwise(kind, x + h, t).0 - elementwise(kind, x - h, t).0) / (2.0 * h);
                let analytic = elementwise(kind, x, t).1;
                assert!((numeric - analytic).abs() < 1e-7, "{kind:?} {x} {t}");
            }
        }
    }
}
