//! Performance measures and subgroup-level summary statistics.
//!
//! Individual-level measures assign a loss to each observation; a subgroup's
//! performance is the mean loss with its sampling variance. The AUC is
//! group-level: it is estimated per subgroup by the two-sample rank statistic
//! together with an unbiased variance estimator built from pairwise
//! concordance counts.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    SquaredError,
    AbsoluteError,
    /// Squared error of a probability prediction against a 0/1 outcome.
    Brier,
    Auc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Individual,
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    LowerIsBetter,
    HigherIsBetter,
}

impl Measure {
    pub fn level(self) -> Level {
        match self {
            Measure::Auc => Level::Group,
            _ => Level::Individual,
        }
    }

    pub fn orientation(self) -> Orientation {
        match self {
            Measure::Auc => Orientation::HigherIsBetter,
            _ => Orientation::LowerIsBetter,
        }
    }

    /// Smallest subgroup on which the measure's estimate and variance exist:
    /// two observations for losses, two cases and two controls for AUC.
    pub fn min_total(self) -> usize {
        match self {
            Measure::Auc => 4,
            _ => 2,
        }
    }

    /// Loss for a single observation; errors for group-level measures.
    pub fn individual_loss(self, outcome: f64, prediction: f64) -> Result<f64> {
        match self {
            Measure::SquaredError | Measure::Brier => Ok((outcome - prediction).powi(2)),
            Measure::AbsoluteError => Ok((outcome - prediction).abs()),
            Measure::Auc => Err(Error::GroupLevelMeasure),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "squared-error" | "squared_error" => Ok(Measure::SquaredError),
            "absolute-error" | "absolute_error" => Ok(Measure::AbsoluteError),
            "brier" => Ok(Measure::Brier),
            "auc" => Ok(Measure::Auc),
            other => Err(Error::InvalidConfig(format!("unknown measure {other:?}"))),
        }
    }
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Measure::SquaredError => "squared-error",
            Measure::AbsoluteError => "absolute-error",
            Measure::Brier => "brier",
            Measure::Auc => "auc",
        };
        f.write_str(s)
    }
}

/// Estimated performance of one subgroup: the point estimate, the variance of
/// that estimate, and the sample composition it was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubgroupStats {
    pub estimate: f64,
    pub variance: f64,
    pub n: usize,
    pub n_cases: Option<usize>,
    pub n_controls: Option<usize>,
    /// True when a negative variance estimate was clamped to zero.
    pub variance_clamped: bool,
}

/// Mean loss and the variance of that mean for one subgroup.
pub fn loss_subgroup_stats(losses: &[f64]) -> Result<SubgroupStats> {
    let n = losses.len();
    if n < 2 {
        return Err(Error::SubgroupTooSmall { n, min: 2 });
    }
    let nf = n as f64;
    let mean = losses.iter().sum::<f64>() / nf;
    let ss: f64 = losses.iter().map(|&m| (m - mean).powi(2)).sum();
    Ok(SubgroupStats {
        estimate: mean,
        variance: ss / (nf * (nf - 1.0)),
        n,
        n_cases: None,
        n_controls: None,
        variance_clamped: false,
    })
}

/// Component estimates behind the AUC variance formula, kept separately so
/// tests can check each against exhaustive enumeration and so the raw
/// (pre-clamp) variance stays inspectable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AucComponents {
    pub estimate: f64,
    pub mu_squared: f64,
    pub xi_0_1: f64,
    pub xi_1_0: f64,
    pub variance_raw: f64,
    pub n_cases: usize,
    pub n_controls: usize,
}

/// Pairwise concordance counts for one subgroup: for each case, the number of
/// controls scored strictly below it, and for each control, the number of
/// cases scored strictly above it.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct AucCounts {
    pub n_cases: usize,
    pub n_controls: usize,
    /// Total concordant pairs.
    pub u: u64,
    /// Sum over cases of (controls below)^2.
    pub sum_c_sq: u64,
    /// Sum over controls of (cases above)^2.
    pub sum_d_sq: u64,
}

impl AucCounts {
    pub fn from_scores(scores: &[f64], is_case: &[bool]) -> Self {
        let mut cases: Vec<f64> = Vec::new();
        let mut controls: Vec<f64> = Vec::new();
        for (&s, &c) in scores.iter().zip(is_case) {
            if c {
                cases.push(s);
            } else {
                controls.push(s);
            }
        }
        cases.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        controls.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let mut out = AucCounts {
            n_cases: cases.len(),
            n_controls: controls.len(),
            ..Default::default()
        };
        for &a in &cases {
            let below = controls.partition_point(|&b| b < a) as u64;
            out.u += below;
            out.sum_c_sq += below * below;
        }
        for &b in &controls {
            let above = (cases.len() - cases.partition_point(|&a| a <= b)) as u64;
            out.sum_d_sq += above * above;
        }
        out
    }

    /// Turns the counts into the component estimates. The identities used:
    /// the sum of concordance products over case pairs (i != k) sharing
    /// distinct control pairs (j != l) equals U^2 - sum(c^2) - sum(d^2) + U
    /// by inclusion-exclusion, while the one-shared-index sums reduce to
    /// sum(d(d-1)) and sum(c(c-1)).
    pub fn components(&self) -> Result<AucComponents> {
        let (n1, n0) = (self.n_cases, self.n_controls);
        if n1 < 2 || n0 < 2 {
            return Err(Error::SubgroupTooSmall {
                n: n1 + n0,
                min: 4,
            });
        }
        let (n1f, n0f) = (n1 as f64, n0 as f64);
        let u = self.u as f64;
        let estimate = u / (n1f * n0f);

        let pair_sum = (self.u as u128 * self.u as u128 + self.u as u128)
            .checked_sub(self.sum_c_sq as u128 + self.sum_d_sq as u128)
            .expect("pairwise concordance sum cannot be negative") as f64;
        let mu_squared = pair_sum / (n1f * (n1f - 1.0) * n0f * (n0f - 1.0));

        let xi_0_1 = (self.sum_d_sq as f64 - u) / (n1f * (n1f - 1.0) * n0f) - mu_squared;
        let xi_1_0 = (self.sum_c_sq as f64 - u) / (n1f * n0f * (n0f - 1.0)) - mu_squared;

        let variance_raw = (estimate - mu_squared + (n1f - 1.0) * xi_0_1 + (n0f - 1.0) * xi_1_0)
            / (n0f * n1f);

        Ok(AucComponents {
            estimate,
            mu_squared,
            xi_0_1,
            xi_1_0,
            variance_raw,
            n_cases: n1,
            n_controls: n0,
        })
    }

    pub fn stats(&self) -> Result<SubgroupStats> {
        let comp = self.components()?;
        Ok(SubgroupStats {
            estimate: comp.estimate,
            variance: comp.variance_raw.max(0.0),
            n: comp.n_cases + comp.n_controls,
            n_cases: Some(comp.n_cases),
            n_controls: Some(comp.n_controls),
            variance_clamped: comp.variance_raw < 0.0,
        })
    }
}

/// AUC estimate and variance for one subgroup given model scores and case
/// status. Requires at least two cases and two controls; a negative variance
/// estimate is clamped to zero and flagged.
pub fn auc_subgroup_stats(scores: &[f64], is_case: &[bool]) -> Result<SubgroupStats> {
    if scores.len() != is_case.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: is_case.len(),
        });
    }
    AucCounts::from_scores(scores, is_case).stats()
}

/// Raw component estimates for the AUC variance.
pub fn auc_variance_components(scores: &[f64], is_case: &[bool]) -> Result<AucComponents> {
    if scores.len() != is_case.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: is_case.len(),
        });
    }
    AucCounts::from_scores(scores, is_case).components()
}

/// Point estimate of the AUC alone; needs one case and one control.
pub fn auc_estimate(scores: &[f64], is_case: &[bool]) -> Result<f64> {
    let counts = AucCounts::from_scores(scores, is_case);
    if counts.n_cases == 0 || counts.n_controls == 0 {
        return Err(Error::SubgroupTooSmall {
            n: counts.n_cases + counts.n_controls,
            min: 2,
        });
    }
    Ok(counts.u as f64 / (counts.n_cases as f64 * counts.n_controls as f64))
}

/// Subgroup stats for any measure from the rows' outcomes, scores, and (for
/// individual measures) precomputed losses.
pub fn subgroup_stats_for(
    measure: Measure,
    losses: Option<&[f64]>,
    scores: &[f64],
    is_case: &[bool],
) -> Result<SubgroupStats> {
    match measure.level() {
        Level::Individual => {
            loss_subgroup_stats(losses.expect("individual measures require losses"))
        }
        Level::Group => auc_subgroup_stats(scores, is_case),
    }
}
