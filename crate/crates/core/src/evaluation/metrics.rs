use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Location;
use crate::error::{invalid, Result, SpbError};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(SpbError::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(SpbError::EmptyDataset);
    }
    Ok(())
}

/// Root average squared testing error.
pub fn rste(predictions: &[f64], validation: &[f64]) -> Result<f64> {
    check_lengths(predictions.len(), validation.len())?;
    let ss: f64 = predictions.iter().zip(validation).map(|(p, z)| (z - p).powi(2)).sum();
    Ok((ss / predictions.len() as f64).sqrt())
}

/// Sign of the log-variance term in [`pmcc`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PmccSign {
    /// `e^2 / s^2 - log s^2`.
    #[default]
    Paper,
    /// `e^2 / s^2 + log s^2`, the negatively oriented logarithmic score.
    Score,
}

impl PmccSign {
    fn factor(self) -> f64 {
        match self {
            PmccSign::Paper => -1.0,
            PmccSign::Score => 1.0,
        }
    }
}

impl fmt::Display for PmccSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PmccSign::Paper => "paper",
            PmccSign::Score => "score",
        })
    }
}

impl FromStr for PmccSign {
    type Err = SpbError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paper" => Ok(PmccSign::Paper),
            "score" => Ok(PmccSign::Score),
            other => invalid(format!("unknown PMCC sign `{other}` (expected paper or score)")),
        }
    }
}

/// Predictive model choice criterion: the mean over validation points of
/// `(z - yhat)^2 / s^2 +/- log s^2`, both terms inside the sum.
pub fn pmcc(predictions: &[f64], variances: &[f64], validation: &[f64], sign: PmccSign) -> Result<f64> {
    check_lengths(predictions.len(), validation.len())?;
    check_lengths(variances.len(), validation.len())?;
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0)) {
        return invalid(format!("PMCC needs positive variances, got {v}"));
    }
    let s = sign.factor();
    let total: f64 = predictions
        .iter()
        .zip(variances)
        .zip(validation)
        .map(|((p, v), z)| (z - p).powi(2) / v + s * v.ln())
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Half the mean squared difference over unordered pairs whose separation is
/// within `tol` of `lag`. Quadratic in the number of points.
pub fn lag1_semivariogram(locs: &[Location], values: &[f64], lag: f64, tol: f64) -> Result<f64> {
    if locs.len() != values.len() {
        return Err(SpbError::LengthMismatch { left: locs.len(), right: values.len() });
    }
    if locs.len() < 2 {
        return invalid("semivariogram needs at least 2 points");
    }
    check_lag(lag, tol)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..locs.len() {
        for j in i + 1..locs.len() {
            if (locs[i].dist(&locs[j]) - lag).abs() <= tol {
                sum += (values[i] - values[j]).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(SpbError::NoPairsAtLag { lag, tol });
    }
    Ok(sum / (2.0 * count as f64))
}

pub(crate) fn check_lag(lag: f64, tol: f64) -> Result<()> {
    if !(lag > 0.0 && lag.is_finite()) || !(tol >= 0.0) {
        return invalid(format!("semivariogram needs lag > 0 and tol >= 0, got {lag}, {tol}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rste_closed_forms() {
        let z = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(rste(&z, &z).unwrap(), 0.0);
        let shifted: Vec<f64> = z.iter().map(|v| v - 2.5).collect();
        assert!((rste(&shifted, &z).unwrap() - 2.5).abs() < 1e-15);
        assert!(matches!(rste(&z, &z[..3]), Err(SpbError::LengthMismatch { .. })));
        assert!(rste(&[], &[]).is_err());
    }

    #[test]
    fn pmcc_closed_forms() {
        assert_eq!(pmcc(&[1.0, 2.0], &[1.0, 1.0], &[1.0, 2.0], PmccSign::Paper).unwrap(), 0.0);
        let p = pmcc(&[0.0], &[4.0], &[2.0], PmccSign::Paper).unwrap();
        assert!((p - (1.0 - 4f64.ln())).abs() < 1e-15);
        let s = pmcc(&[0.0], &[4.0], &[2.0], PmccSign::Score).unwrap();
        assert!((s - (1.0 + 4f64.ln())).abs() < 1e-15);
        assert!(pmcc(&[0.0], &[0.0], &[2.0], PmccSign::Paper).is_err());
    }

    #[test]
    fn sign_parsing() {
        assert_eq!("paper".parse::<PmccSign>().unwrap(), PmccSign::Paper);
        assert_eq!(" Score".parse::<PmccSign>().unwrap(), PmccSign::Score);
        assert!("plus".parse::<PmccSign>().is_err());
        assert_eq!(PmccSign::Score.to_string(), "score");
    }

    #[test]
    fn alternating_line_gives_half() {
        let locs: Vec<Location> = (0..9).map(|i| Location { lon: i as f64, lat: 0.0 }).collect();
        let vals: Vec<f64> = (0..9).map(|i| (i % 2) as f64).collect();
        assert!((lag1_semivariogram(&locs, &vals, 1.0, 1e-6).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(lag1_semivariogram(&locs, &vals, 0.5, 1e-6), Err(SpbError::NoPairsAtLag { .. })));
    }
}
