//! Joint training objective and count-level evaluation metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gt::DensityMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_reg: f64,
    pub l_dec: f64,
    pub lambda_weight: f64,
    pub total: f64,
}

/// `total = l_reg + lambda * l_dec`.
pub fn total_loss(l_reg: f64, l_dec: f64, lambda_weight: f64) -> LossBreakdown {
    LossBreakdown { l_reg, l_dec, lambda_weight, total: l_reg + lambda_weight * l_dec }
}

/// Mean squared difference over all cells.
pub fn regression_loss(pred: &DensityMap, target: &DensityMap) -> Result<f64> {
    if (pred.height, pred.width) != (target.height, target.width) {
        return Err(Error::Validation(format!(
            "prediction is {}x{}, target is {}x{}",
            pred.height, pred.width, target.height, target.width
        )));
    }
    if pred.values.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = pred.values.iter().zip(&target.values).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sq / pred.values.len() as f64)
}

pub fn count_of(map: &DensityMap) -> f64 {
    map.count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub gt_count: f64,
    pub predicted_count: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub images: Vec<ImageRecord>,
    pub n: usize,
    pub mae: f64,
    /// Root of the mean squared count error.
    pub mse: f64,
}

/// Mean absolute count error and root-mean-squared count error.
pub fn evaluate(records: Vec<ImageRecord>) -> Result<EvalRecord> {
    if records.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty record set".into()));
    }
    let n = records.len();
    let (abs, sq) = records.iter().fold((0.0, 0.0), |(a, s), r| {
        let e = r.gt_count - r.predicted_count;
        (a + e.abs(), s + e * e)
    });
    Ok(EvalRecord { n, mae: abs / n as f64, mse: libm::sqrt(sq / n as f64), images: records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn rec(gt: f64, pred: f64) -> ImageRecord {
        ImageRecord { image_id: "x".to_string(), gt_count: gt, predicted_count: pred }
    }

    fn grid(values: Vec<f64>, w: usize) -> DensityMap {
        DensityMap { height: values.len() / w, width: w, divisor: 4, values }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(2.0, 3.0, 1.0).total, 5.0);
        assert_eq!(total_loss(2.0, 3.0, 0.0).total, 2.0);
        assert_eq!(total_loss(1.5, 2.0, 0.5).total, 2.5);
    }

    #[test]
    fn regression_loss_examples() {
        let t = grid(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 3);
        assert_eq!(regression_loss(&t, &t).unwrap(), 0.0);
        let shifted = grid(t.values.iter().map(|v| v + 0.5).collect(), 3);
        assert!((regression_loss(&shifted, &t).unwrap() - 0.25).abs() < 1e-12);
        assert!(regression_loss(&grid(vec![0.0; 4], 2), &t).is_err());
    }

    #[test]
    fn metric_examples() {
        let e = evaluate(vec![rec(10.0, 10.0), rec(3.0, 3.0)]).unwrap();
        assert_eq!((e.mae, e.mse), (0.0, 0.0));
        let e = evaluate(vec![rec(10.0, 12.0), rec(20.0, 16.0)]).unwrap();
        assert!((e.mae - 3.0).abs() < 1e-12);
        assert!((e.mse - libm::sqrt(10.0)).abs() < 1e-12);
        let e = evaluate(vec![rec(7.0, 2.0)]).unwrap();
        assert_eq!((e.mae, e.mse, e.n), (5.0, 5.0, 1));
        assert!(evaluate(vec![]).is_err());
    }
}
