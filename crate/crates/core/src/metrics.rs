//! Fairness, privacy and utility metrics.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Coefficient of variation with the population (1/K) standard deviation.
/// Undefined when the mean is not positive or a value is not finite.
pub fn cov(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cov of an empty vector".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Undefined(
            "coefficient of variation of non-finite values",
        ));
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if mean.is_nan() || mean <= 0.0 {
        return Err(Error::Undefined(
            "coefficient of variation with non-positive mean",
        ));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    Ok(var.sqrt() / mean)
}

/// Fairness index `1 / (1 + cov^2)`.
pub fn fi(cov: f64) -> Result<f64> {
    if cov.is_nan() || cov < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "cov must be >= 0, got {cov}"
        )));
    }
    Ok(1.0 / (1.0 + cov * cov))
}

/// Equal opportunity difference: the largest pairwise gap.
pub fn eod(acc: &[f64]) -> Result<f64> {
    if acc.len() < 2 {
        return Err(Error::InvalidArgument(
            "eod needs at least two clients".into(),
        ));
    }
    let max = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = acc.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// `(CoV, FI)` of the per-client target-record losses.
pub fn loss_fairness(per_client_target_loss: &[f64]) -> Result<(f64, f64)> {
    let c = cov(per_client_target_loss)?;
    Ok((c, fi(c)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Convergence {
    /// 1-indexed round.
    pub round: usize,
    /// Only the final observation supports the plateau.
    pub censored: bool,
}

/// First round from which test accuracy stays within `delta` of the series
/// maximum.
pub fn convergence_round(test_acc: &[f64], delta: f64) -> Option<Convergence> {
    if test_acc.is_empty()
        || delta.is_nan()
        || delta <= 0.0
        || test_acc.iter().any(|a| !a.is_finite())
    {
        return None;
    }
    let max = test_acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = max - delta;
    let start = match test_acc.iter().rposition(|&a| a < floor) {
        Some(i) if i + 1 == test_acc.len() => return None,
        Some(i) => i + 1,
        None => 0,
    };
    Some(Convergence {
        round: start + 1,
        censored: test_acc.len() > 1 && start + 1 == test_acc.len(),
    })
}

/// One round's metrics. Undefined CoV/FI values are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub cov_sia: Option<f64>,
    pub fi_sia: Option<f64>,
    pub cov_loss: Option<f64>,
    pub fi_loss: Option<f64>,
    pub eod: f64,
    pub mean_sia: f64,
    pub max_sia: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

impl MetricsRow {
    pub fn compute(
        round: usize,
        sia_acc: &[f64],
        target_loss: &[f64],
        train_acc: f64,
        test_acc: f64,
    ) -> Result<Self> {
        let cov_sia = cov(sia_acc).ok();
        let cov_loss = cov(target_loss).ok();
        let mean_sia = sia_acc.iter().sum::<f64>() / sia_acc.len() as f64;
        let max_sia = sia_acc.iter().copied().fold(0.0, f64::max);
        Ok(MetricsRow {
            round,
            cov_sia,
            fi_sia: cov_sia.map(fi).transpose()?,
            cov_loss,
            fi_loss: cov_loss.map(fi).transpose()?,
            eod: eod(sia_acc)?,
            mean_sia,
            max_sia,
            train_acc,
            test_acc,
        })
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Whole-run summary, shaped like a results-table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Mean SIA accuracy over all clients and rounds.
    pub mean_sia: f64,
    /// Highest SIA accuracy over all clients and rounds.
    pub max_sia: f64,
    pub cov_sia_final: Option<f64>,
    pub fi_sia_final: Option<f64>,
    pub cov_sia_mean: Option<f64>,
    pub fi_sia_mean: Option<f64>,
    pub cov_loss_final: Option<f64>,
    pub fi_loss_final: Option<f64>,
    pub cov_loss_mean: Option<f64>,
    pub fi_loss_mean: Option<f64>,
    pub eod_final: f64,
    pub eod_mean: f64,
    pub convergence_round: Option<usize>,
    pub convergence_censored: bool,
    pub converged: bool,
    pub diverged_rounds: Vec<usize>,
}

impl Summary {
    /// `diverged_rounds` lists rounds in which any client was flagged; such
    /// a run is reported as not converged.
    pub fn from_rows(rows: &[MetricsRow], diverged_rounds: Vec<usize>, delta: f64) -> Result<Self> {
        let last = rows
            .last()
            .ok_or_else(|| Error::InvalidArgument("summary needs at least one round".into()))?;
        let n = rows.len() as f64;
        let test: Vec<f64> = rows.iter().map(|r| r.test_acc).collect();
        let conv = if diverged_rounds.is_empty() {
            convergence_round(&test, delta)
        } else {
            None
        };
        Ok(Summary {
            rounds: rows.len(),
            train_acc: last.train_acc,
            test_acc: last.test_acc,
            mean_sia: rows.iter().map(|r| r.mean_sia).sum::<f64>() / n,
            max_sia: rows.iter().map(|r| r.max_sia).fold(0.0, f64::max),
            cov_sia_final: last.cov_sia,
            fi_sia_final: last.fi_sia,
            cov_sia_mean: mean_defined(rows.iter().map(|r| r.cov_sia)),
            fi_sia_mean: mean_defined(rows.iter().map(|r| r.fi_sia)),
            cov_loss_final: last.cov_loss,
            fi_loss_final: last.fi_loss,
            cov_loss_mean: mean_defined(rows.iter().map(|r| r.cov_loss)),
            fi_loss_mean: mean_defined(rows.iter().map(|r| r.fi_loss)),
            eod_final: last.eod,
            eod_mean: rows.iter().map(|r| r.eod).sum::<f64>() / n,
            convergence_round: conv.map(|c| c.round),
            convergence_censored: conv.is_some_and(|c| c.censored),
            converged: conv.is_some(),
            diverged_rounds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cov_cases() {
        assert_eq!(cov(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!((cov(&[0.2, 0.4]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(cov(&[0.0, 0.0]), Err(Error::Undefined(_))));
        assert!(cov(&[-1.0, 0.5]).is_err());
        assert!(matches!(
            cov(&[1.0, f64::INFINITY]),
            Err(Error::Undefined(_))
        ));
        assert!(cov(&[]).is_err());
    }

    #[test]
    fn fi_cases() {
        assert_eq!(fi(0.0).unwrap(), 1.0);
        assert!((fi(1.0 / 3.0).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(fi(1.0).unwrap(), 0.5);
        assert!(fi(-0.1).is_err());
    }

    #[test]
    fn eod_cases() {
        assert_eq!(eod(&[0.4; 3]).unwrap(), 0.0);
        assert!((eod(&[0.2, 0.5, 0.4]).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(
            eod(&[0.5, 0.4, 0.2]).unwrap(),
            eod(&[0.2, 0.5, 0.4]).unwrap()
        );
        assert!(eod(&[0.1]).is_err());
    }

    #[test]
    fn loss_fairness_delegates() {
        let (c, f) = loss_fairness(&[0.2, 0.4]).unwrap();
        assert!((c - 1.0 / 3.0).abs() < 1e-12);
        assert!((f - 0.9).abs() < 1e-12);
        assert!(loss_fairness(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn convergence_cases() {
        let plateau = [0.1, 0.3, 0.5, 0.7, 0.9, 0.9, 0.905, 0.9, 0.9, 0.9];
        assert_eq!(
            convergence_round(&plateau, 0.01),
            Some(Convergence {
                round: 5,
                censored: false
            })
        );
        assert_eq!(
            convergence_round(&[0.5; 4], 0.01),
            Some(Convergence {
                round: 1,
                censored: false
            })
        );
        assert_eq!(
            convergence_round(&[0.1, 0.2, 0.3, 0.4], 0.01),
            Some(Convergence {
                round: 4,
                censored: true
            })
        );
        assert_eq!(
            convergence_round(&[0.9], 0.01),
            Some(Convergence {
                round: 1,
                censored: false
            })
        );
        assert_eq!(convergence_round(&[0.1, 0.9, 0.2], 0.01), None);
    }

    #[test]
    fn summary_marks_divergence_as_non_converged() {
        let row = MetricsRow::compute(1, &[0.2, 0.4], &[1.0, 2.0], 0.8, 0.7).unwrap();
        let s = Summary::from_rows(std::slice::from_ref(&row), vec![], 0.01).unwrap();
        assert!(s.converged);
        assert_eq!(s.convergence_round, Some(1));
        let s = Summary::from_rows(&[row], vec![1], 0.01).unwrap();
        assert!(!s.converged);
        assert_eq!(s.convergence_round, None);
    }

    #[test]
    fn undefined_cov_is_none_not_zero() {
        let row = MetricsRow::compute(1, &[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], 0.5, 0.5).unwrap();
        assert_eq!(row.cov_sia, None);
        assert_eq!(row.fi_sia, None);
        assert_eq!(row.cov_loss, Some(0.0));
    }

    proptest! {
        #[test]
        fn cov_scale_invariant(v in prop::collection::vec(0.01f64..1.0, 1..10), c in 0.1f64..50.0) {
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!((cov(&v).unwrap() - cov(&scaled).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn mean_preserving_spread_never_raises_fi(
            v in prop::collection::vec(0.2f64..0.8, 2..10),
            t in 1.0f64..3.0,
        ) {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let spread: Vec<f64> = v.iter().map(|x| mean + t * (x - mean)).collect();
            prop_assume!(spread.iter().sum::<f64>() > 0.0);
            let before = fi(cov(&v).unwrap()).unwrap();
            let after = fi(cov(&spread).unwrap()).unwrap();
            prop_assert!(after <= before + 1e-12);
        }

        #[test]
        fn eod_bounded_on_unit_interval(v in prop::collection::vec(0.0f64..=1.0, 2..12)) {
            let e = eod(&v).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
        }
    }
}
