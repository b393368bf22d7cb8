//! Regression metrics shared by cross-validation, the evaluation loop,
//! and drift detection.

use super::{MetricsReport, ModelError};

/// Computes MAE, MAPE (percent, over nonzero labels), RMSE, and R^2.
///
/// When the labels are constant SS_tot is zero: R^2 is 1.0 for an exact
/// fit and negative infinity otherwise, so a degenerate evaluation is
/// visible rather than silently averaged away.
pub fn metrics(y: &[f64], y_hat: &[f64]) -> Result<MetricsReport, ModelError> {
    if y.is_empty() {
        return Err(ModelError::EmptyMatrix);
    }
    if y.len() != y_hat.len() {
        return Err(ModelError::LengthMismatch { labels: y.len(), predictions: y_hat.len() });
    }
    let n = y.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut pct_sum = 0.0;
    let mut pct_n = 0usize;
    for (yi, pi) in y.iter().zip(y_hat) {
        let err = yi - pi;
        abs_sum += err.abs();
        sq_sum += err * err;
        if *yi != 0.0 {
            pct_sum += (err / yi).abs();
            pct_n += 1;
        }
    }
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|yi| (yi - mean).powi(2)).sum();
    let r2 = if ss_tot == 0.0 {
        if sq_sum == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - sq_sum / ss_tot
    };
    Ok(MetricsReport {
        mae: abs_sum / n,
        mape: if pct_n == 0 { 0.0 } else { 100.0 * pct_sum / pct_n as f64 },
        rmse: (sq_sum / n).sqrt(),
        r2,
        n: y.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_checked_two_point_report() {
        // Residuals 10 and -10; squared residual sum 200 against total
        // squared deviation 5000.
        let r = metrics(&[100.0, 200.0], &[110.0, 190.0]).unwrap();
        assert!((r.mae - 10.0).abs() < 1e-12);
        assert!((r.mape - 7.5).abs() < 1e-12);
        assert!((r.rmse - 10.0).abs() < 1e-12);
        assert!((r.r2 - 0.96).abs() < 1e-12);
        assert_eq!(r.n, 2);
    }

    #[test]
    fn perfect_fit_scores_one() {
        let r = metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.r2, 1.0);
    }

    #[test]
    fn constant_labels_use_the_sentinel() {
        let exact = metrics(&[5.0, 5.0], &[5.0, 5.0]).unwrap();
        assert_eq!(exact.r2, 1.0);
        let off = metrics(&[5.0, 5.0], &[5.0, 6.0]).unwrap();
        assert_eq!(off.r2, f64::NEG_INFINITY);
    }

    #[test]
    fn mape_skips_zero_labels() {
        // Only the label 10 contributes: |10-12|/10 = 20%.
        let r = metrics(&[0.0, 10.0], &[3.0, 12.0]).unwrap();
        assert!((r.mape - 20.0).abs() < 1e-12);
        let all_zero = metrics(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(all_zero.mape, 0.0);
    }

    #[test]
    fn shape_errors_are_reported() {
        assert!(matches!(metrics(&[], &[]), Err(ModelError::EmptyMatrix)));
        assert!(matches!(
            metrics(&[1.0], &[1.0, 2.0]),
            Err(ModelError::LengthMismatch { labels: 1, predictions: 2 })
        ));
    }
}
