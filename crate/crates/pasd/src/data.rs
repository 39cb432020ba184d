//! Columnar dataset: covariates, an outcome, and one column of predictions
//! per candidate model.

use crate::error::Error;
use crate::measures::Measure;
use crate::Result;

/// Covariates are stored column-major because split search sorts one feature
/// at a time over node index sets.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Dataset {
    columns: Vec<Vec<f64>>,
    outcome: Vec<f64>,
    predictions: Vec<Vec<f64>>,
    n: usize,
}

impl Dataset {
    /// Builds a dataset from covariate columns, an outcome column, and one
    /// prediction column per model. All columns must have equal length and
    /// contain only finite values.
    pub fn new(
        columns: Vec<Vec<f64>>,
        outcome: Vec<f64>,
        predictions: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = outcome.len();
        if n == 0 {
            return Err(Error::TooFewRows { n: 0, min: 1 });
        }
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: col.len(),
                });
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::ParseError {
                    row: i,
                    column: format!("x{}", j + 1),
                });
            }
        }
        if let Some(i) = outcome.iter().position(|v| !v.is_finite()) {
            return Err(Error::ParseError {
                row: i,
                column: "outcome".into(),
            });
        }
        for (k, col) in predictions.iter().enumerate() {
            if col.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: col.len(),
                });
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::ParseError {
                    row: i,
                    column: format!("prediction{}", k + 1),
                });
            }
        }
        Ok(Self {
            columns,
            outcome,
            predictions,
            n,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn n_models(&self) -> usize {
        self.predictions.len()
    }

    pub fn covariate(&self, row: usize, feature: usize) -> f64 {
        self.columns[feature][row]
    }

    pub fn feature_column(&self, feature: usize) -> &[f64] {
        &self.columns[feature]
    }

    pub fn outcome(&self, row: usize) -> f64 {
        self.outcome[row]
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcome
    }

    pub fn prediction(&self, row: usize, model: usize) -> f64 {
        self.predictions[model][row]
    }

    pub fn prediction_column(&self, model: usize) -> &[f64] {
        &self.predictions[model]
    }

    /// Copies one row of covariates into a fresh vector.
    pub fn covariate_row(&self, row: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[row]).collect()
    }

    /// Per-observation losses of one model under an individual-level measure.
    pub fn losses(&self, measure: Measure, model: usize) -> Result<Vec<f64>> {
        if model >= self.n_models() {
            return Err(Error::DimensionMismatch {
                expected: self.n_models(),
                got: model,
            });
        }
        let preds = &self.predictions[model];
        self.outcome
            .iter()
            .zip(preds)
            .map(|(&y, &p)| measure.individual_loss(y, p))
            .collect()
    }

    /// Case indicator per row; errors unless every outcome is 0 or 1.
    pub fn binary_outcomes(&self) -> Result<Vec<bool>> {
        self.outcome
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                if y == 0.0 {
                    Ok(false)
                } else if y == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::NonBinaryOutcome { row: i, value: y })
                }
            })
            .collect()
    }

    /// New dataset holding the given rows (duplicates allowed, so a bootstrap
    /// resample is just an index multiset).
    pub fn subset(&self, rows: &[u32]) -> Self {
        let take = |col: &Vec<f64>| rows.iter().map(|&r| col[r as usize]).collect::<Vec<_>>();
        Self {
            columns: self.columns.iter().map(take).collect(),
            outcome: take(&self.outcome),
            predictions: self.predictions.iter().map(take).collect(),
            n: rows.len(),
        }
    }

    /// Appends a prediction column, returning its model index.
    pub fn push_prediction_column(&mut self, column: Vec<f64>) -> Result<usize> {
        if column.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: column.len(),
            });
        }
        self.predictions.push(column);
        Ok(self.predictions.len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ragged_and_nonfinite_columns() {
        let err = Dataset::new(vec![vec![1.0, 2.0]], vec![0.0], vec![]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));

        let err = Dataset::new(vec![vec![1.0, f64::NAN]], vec![0.0, 1.0], vec![]).unwrap_err();
        assert!(matches!(err, Error::ParseError { row: 1, .. }));
    }

    #[test]
    fn binary_outcome_check() {
        let d = Dataset::new(vec![vec![0.0, 1.0]], vec![0.0, 1.0], vec![]).unwrap();
        assert_eq!(d.binary_outcomes().unwrap(), vec![false, true]);

        let d = Dataset::new(vec![vec![0.0, 1.0]], vec![0.0, 0.5], vec![]).unwrap();
        assert!(matches!(
            d.binary_outcomes().unwrap_err(),
            Error::NonBinaryOutcome { row: 1, .. }
        ));
    }

    #[test]
    fn subset_allows_duplicates() {
        let d = Dataset::new(
            vec![vec![1.0, 2.0, 3.0]],
            vec![10.0, 20.0, 30.0],
            vec![vec![0.1, 0.2, 0.3]],
        )
        .unwrap();
        let s = d.subset(&[2, 2, 0]);
        assert_eq!(s.n_rows(), 3);
        assert_eq!(s.outcome(0), 30.0);
        assert_eq!(s.outcome(1), 30.0);
        assert_eq!(s.covariate(2, 0), 1.0);
        assert_eq!(s.prediction(0, 0), 0.3);
    }
}
