//! Vocabulary distributions and the numerically stable softmax shared by the
//! engine, the probes and the decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Logits,
    Probabilities,
}

/// A vector over the vocabulary, tagged with the space it lives in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitDistribution {
    pub values: Vec<f64>,
    pub space: Space,
}

impl LogitDistribution {
    pub fn logits(values: Vec<f64>) -> Self {
        Self {
            values,
            space: Space::Logits,
        }
    }

    /// Wrap a probability vector, checking it is nonnegative and sums to 1
    /// within `1e-6`.
    pub fn probabilities(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Input("probabilities must be nonnegative".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("probabilities sum to {sum}")));
        }
        Ok(Self {
            values,
            space: Space::Probabilities,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Softmax at temperature 1. Already-normalized inputs are returned as-is.
    pub fn to_probabilities(&self) -> Result<Self> {
        match self.space {
            Space::Probabilities => Ok(self.clone()),
            Space::Logits => Ok(Self {
                values: softmax(&self.values)?,
                space: Space::Probabilities,
            }),
        }
    }
}

/// Max-subtracted softmax. `-inf` entries get probability 0; a row with no
/// finite entry, or any NaN/`+inf`, is a numeric error.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numeric("NaN or +inf in softmax input".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Numeric("softmax over a fully masked row".into()));
    }
    let mut out: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_handles_masks_and_large_values() {
        let p = softmax(&[1000.0, 1000.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(p, vec![0.5, 0.5, 0.0]);
        assert!(softmax(&[f64::NEG_INFINITY; 3]).is_err());
        assert!(softmax(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn probability_constructor_checks_mass() {
        assert!(LogitDistribution::probabilities(vec![0.5, 0.5]).is_ok());
        assert!(LogitDistribution::probabilities(vec![0.5, 0.6]).is_err());
        assert!(LogitDistribution::probabilities(vec![1.5, -0.5]).is_err());
    }
}
