//! Covariate-dependent combination of fixed prediction models: majority
//! voting over forests fit on shared bootstrap resamples, and two
//! mixture-of-experts EM variants whose gating weights are driven by
//! estimated conditional performance surfaces.

use crate::data::Dataset;
use crate::ensemble::{fit_forest_with_bootstrap, Forest, ForestConfig};
use crate::error::Error;
use crate::measures::{Measure, Orientation};
use crate::rng;
use crate::Result;

use rand::Rng;

/// Per-replicate best-model tally. `values[b][k]` is model k's estimated
/// performance in replicate b; the best model of each replicate gets one
/// vote, split equally on exact ties.
pub fn vote_tally(values: &[Vec<f64>], orientation: Orientation) -> Vec<f64> {
    let b = values.len();
    let k = values[0].len();
    let mut weights = vec![0.0; k];
    for row in values {
        let best = match orientation {
            Orientation::LowerIsBetter => row.iter().copied().fold(f64::INFINITY, f64::min),
            Orientation::HigherIsBetter => {
                row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        };
        let tied: Vec<usize> = (0..k).filter(|&j| row[j] == best).collect();
        for j in &tied {
            weights[*j] += 1.0 / tied.len() as f64;
        }
    }
    for w in &mut weights {
        *w /= b as f64;
    }
    weights
}

/// Weighted sum of model predictions; the weights must already be a
/// probability vector.
pub fn combine_predict(weights: &[f64], model_predictions: &[f64]) -> Result<f64> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::WeightSumViolation { sum });
    }
    Ok(weights
        .iter()
        .zip(model_predictions)
        .map(|(w, p)| w * p)
        .sum())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VoteCombiner {
    /// One forest per model, all fit on identical bootstrap resamples.
    pub forests: Vec<Forest>,
    pub measure: Measure,
    pub n_replicates: usize,
}

/// Fits one forest per prediction column on a shared set of bootstrap
/// resamples, so replicate b compares all models on the same data.
pub fn fit_vote_combiner(
    data: &Dataset,
    measure: Measure,
    config: &ForestConfig,
) -> Result<VoteCombiner> {
    let n = data.n_rows();
    let bootstraps: Vec<Vec<u32>> = (0..config.n_trees)
        .map(|b| {
            let mut rng = rng::stream_rng2(config.seed, 0xB007, b as u64);
            (0..n).map(|_| rng.gen_range(0..n as u32)).collect()
        })
        .collect();
    let forests = (0..data.n_models())
        .map(|k| {
            let mut cfg = config.clone();
            cfg.seed = rng::derive_seed2(config.seed, 0x50DE, k as u64);
            fit_forest_with_bootstrap(data, measure, k, &cfg, bootstraps.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VoteCombiner {
        forests,
        measure,
        n_replicates: config.n_trees,
    })
}

impl VoteCombiner {
    fn tally_values<F>(&self, predict: F) -> Result<Vec<f64>>
    where
        F: Fn(&crate::tree::Tree) -> Result<f64>,
    {
        let mut values = Vec::with_capacity(self.n_replicates);
        for b in 0..self.n_replicates {
            let row = self
                .forests
                .iter()
                .map(|f| predict(&f.trees[b]))
                .collect::<Result<Vec<f64>>>()?;
            values.push(row);
        }
        Ok(vote_tally(&values, self.measure.orientation()))
    }

    pub fn weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.tally_values(|tree| tree.predict(x))
    }

    pub fn weights_for_row(&self, data: &Dataset, row: usize) -> Result<Vec<f64>> {
        self.tally_values(|tree| Ok(tree.predict_row(data, row)))
    }

    pub fn predict_row(&self, data: &Dataset, row: usize) -> Result<f64> {
        let w = self.weights_for_row(data, row)?;
        let preds: Vec<f64> = (0..data.n_models())
            .map(|k| data.prediction(row, k))
            .collect();
        combine_predict(&w, &preds)
    }
}

/// Combination weights of one forest-per-model tree replicate at `x`.
pub fn vote_weights(combiner: &VoteCombiner, x: &[f64]) -> Result<Vec<f64>> {
    combiner.weights(x)
}

/// Softmax over `beta[k] * mu_at_x[k]`, stabilized by subtracting the
/// largest exponent.
pub fn softmax_weights(beta: &[f64], mu_at_x: &[f64]) -> Vec<f64> {
    let exponents: Vec<f64> = beta.iter().zip(mu_at_x).map(|(b, m)| b * m).collect();
    let max = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = exponents.iter().map(|e| (e - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for w in &mut out {
        *w /= sum;
    }
    out
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EmConfig {
    pub tolerance: f64,
    pub max_iter: usize,
    pub init_sigmas: Option<Vec<f64>>,
    pub init_betas: Option<Vec<f64>>,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            tolerance: 1e-8,
            max_iter: 500,
            init_sigmas: None,
            init_betas: None,
        }
    }
}

/// Gaussian mixture-of-experts parameters with softmax gating. `betas` holds
/// all K coefficients with the last fixed to 0 as the reference level.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EmParams {
    pub sigmas: Vec<f64>,
    pub betas: Vec<f64>,
    pub loglik_trace: Vec<f64>,
}

fn log_normal_pdf(y: f64, mean: f64, sigma_sq: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * sigma_sq).ln() - (y - mean).powi(2) / (2.0 * sigma_sq)
}

/// ln Σ_k exp(beta_k * mu_k), the softmax normalizer.
fn log_partition(beta: &[f64], mu_row: &[f64]) -> f64 {
    let exps: Vec<f64> = beta.iter().zip(mu_row).map(|(b, m)| b * m).collect();
    let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + exps.iter().map(|e| (e - max).exp()).sum::<f64>().ln()
}

fn check_mu_estimates(data: &Dataset, mu_estimates: &[Vec<f64>]) -> Result<()> {
    if mu_estimates.len() != data.n_models() {
        return Err(Error::DimensionMismatch {
            expected: data.n_models(),
            got: mu_estimates.len(),
        });
    }
    for col in mu_estimates {
        if col.len() != data.n_rows() {
            return Err(Error::DimensionMismatch {
                expected: data.n_rows(),
                got: col.len(),
            });
        }
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "nonfinite performance estimate".into(),
            ));
        }
    }
    Ok(())
}

fn mean_squared_residuals(data: &Dataset) -> Vec<f64> {
    (0..data.n_models())
        .map(|k| {
            let sum: f64 = (0..data.n_rows())
                .map(|i| (data.outcome(i) - data.prediction(i, k)).powi(2))
                .sum();
            (sum / data.n_rows() as f64).max(1e-12)
        })
        .collect()
}

fn weighted_sigma_update(data: &Dataset, lambda: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k_models = data.n_models();
    let mut sigmas = Vec::with_capacity(k_models);
    for j in 0..k_models {
        let mass: f64 = lambda.iter().map(|row| row[j]).sum();
        if mass < 1e-12 {
            return Err(Error::DegenerateComponent { component: j, mass });
        }
        let num: f64 = lambda
            .iter()
            .enumerate()
            .map(|(i, row)| row[j] * (data.prediction(i, j) - data.outcome(i)).powi(2))
            .sum();
        sigmas.push((num / mass).max(1e-12));
    }
    Ok(sigmas)
}

/// Fits the softmax-gated Gaussian mixture by EM: closed-form variance
/// updates, Fisher-scoring gating updates, and a recorded log-likelihood
/// trace. `mu_estimates` holds one estimated performance surface per model,
/// evaluated at the training rows.
pub fn em_fit(data: &Dataset, mu_estimates: &[Vec<f64>], config: &EmConfig) -> Result<EmParams> {
    check_mu_estimates(data, mu_estimates)?;
    let n = data.n_rows();
    let k_models = data.n_models();

    let mut sigmas = match &config.init_sigmas {
        Some(s) if s.len() == k_models => s.clone(),
        Some(s) => {
            return Err(Error::DimensionMismatch {
                expected: k_models,
                got: s.len(),
            })
        }
        None => mean_squared_residuals(data),
    };
    let mut betas = match &config.init_betas {
        Some(b) if b.len() == k_models => b.clone(),
        Some(b) => {
            return Err(Error::DimensionMismatch {
                expected: k_models,
                got: b.len(),
            })
        }
        None => vec![0.0; k_models],
    };
    betas[k_models - 1] = 0.0;

    let mu_rows: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..k_models).map(|k| mu_estimates[k][i]).collect())
        .collect();

    let loglik = |sigmas: &[f64], betas: &[f64]| -> f64 {
        (0..n)
            .map(|i| {
                let a = log_partition(betas, &mu_rows[i]);
                let lw: Vec<f64> = (0..k_models)
                    .map(|k| {
                        betas[k] * mu_rows[i][k]
                            + log_normal_pdf(data.outcome(i), data.prediction(i, k), sigmas[k])
                    })
                    .collect();
                let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + lw.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - a
            })
            .sum()
    };

    let mut trace = vec![loglik(&sigmas, &betas)];

    for _ in 0..config.max_iter {
        // E-step.
        let lambda: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let lw: Vec<f64> = (0..k_models)
                    .map(|k| {
                        betas[k] * mu_rows[i][k]
                            + log_normal_pdf(data.outcome(i), data.prediction(i, k), sigmas[k])
                    })
                    .collect();
                let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut row: Vec<f64> = lw.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = row.iter().sum();
                for v in &mut row {
                    *v /= sum;
                }
                row
            })
            .collect();

        // M-step: variances, then gating coefficients.
        sigmas = weighted_sigma_update(data, &lambda)?;

        if k_models > 1 {
            let lambda_free: Vec<Vec<f64>> =
                lambda.iter().map(|row| row[..k_models - 1].to_vec()).collect();
            let mu_free: Vec<Vec<f64>> = mu_rows
                .iter()
                .map(|row| row[..k_models - 1].to_vec())
                .collect();
            let mut beta_free: Vec<f64> = betas[..k_models - 1].to_vec();
            for _ in 0..25 {
                let next = fisher_scoring_step(&lambda_free, &mu_free, &beta_free)?;
                let moved = next
                    .iter()
                    .zip(&beta_free)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                beta_free = next;
                if moved < 1e-10 {
                    break;
                }
            }
            betas[..k_models - 1].copy_from_slice(&beta_free);
        }

        let ll = loglik(&sigmas, &betas);
        let delta = ll - *trace.last().unwrap();
        trace.push(ll);
        if delta.abs() < config.tolerance {
            break;
        }
    }

    Ok(EmParams {
        sigmas,
        betas,
        loglik_trace: trace,
    })
}

/// The gating objective Σ_i Σ_k λ_ik log π_ik over the K−1 free coefficients
/// (the Kth responsibility is the implicit remainder).
fn gating_objective(lambda: &[Vec<f64>], mu: &[Vec<f64>], beta: &[f64]) -> f64 {
    lambda
        .iter()
        .zip(mu)
        .map(|(lrow, mrow)| {
            let exps: Vec<f64> = beta.iter().zip(mrow).map(|(b, m)| b * m).collect();
            let max = exps.iter().copied().fold(0.0f64, f64::max);
            let a = max
                + ((-max).exp() + exps.iter().map(|e| (e - max).exp()).sum::<f64>()).ln();
            lrow.iter()
                .zip(&exps)
                .map(|(l, e)| l * e)
                .sum::<f64>()
                - a
        })
        .sum()
}

fn gating_probs(mu_row: &[f64], beta: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = beta.iter().zip(mu_row).map(|(b, m)| b * m).collect();
    let max = exps.iter().copied().fold(0.0f64, f64::max);
    let denom = (-max).exp() + exps.iter().map(|e| (e - max).exp()).sum::<f64>();
    exps.iter().map(|e| (e - max).exp() / denom).collect()
}

pub(crate) fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in i + 1..n {
            s -= a[i][j] * x[j];
        }
        x[i] = s / a[i][i];
    }
    Some(x)
}

/// One Fisher-scoring update of the K−1 free gating coefficients, with step
/// halving so the gating objective never decreases. `lambda` and `mu` are
/// n×(K−1) row matrices; the reference model's coefficient stays 0.
pub fn fisher_scoring_step(
    lambda: &[Vec<f64>],
    mu: &[Vec<f64>],
    beta: &[f64],
) -> Result<Vec<f64>> {
    let k_free = beta.len();
    let mut score = vec![0.0; k_free];
    let mut hessian = vec![vec![0.0; k_free]; k_free];
    for (lrow, mrow) in lambda.iter().zip(mu) {
        let pi = gating_probs(mrow, beta);
        for s in 0..k_free {
            score[s] += (lrow[s] - pi[s]) * mrow[s];
            hessian[s][s] -= mrow[s] * mrow[s] * pi[s] * (1.0 - pi[s]);
            for t in 0..k_free {
                if t != s {
                    hessian[s][t] += mrow[s] * mrow[t] * pi[s] * pi[t];
                }
            }
        }
    }

    let direction = match solve_linear(hessian.clone(), score.clone()) {
        Some(d) => d,
        None => {
            let mut ridged = hessian;
            for (s, row) in ridged.iter_mut().enumerate() {
                row[s] -= 1e-8;
            }
            solve_linear(ridged, score).ok_or(Error::SingularHessian)?
        }
    };

    let current = gating_objective(lambda, mu, beta);
    let mut scale = 1.0;
    for _ in 0..=20 {
        let candidate: Vec<f64> = beta
            .iter()
            .zip(&direction)
            .map(|(b, d)| b - scale * d)
            .collect();
        if gating_objective(lambda, mu, &candidate) >= current {
            return Ok(candidate);
        }
        scale /= 2.0;
    }
    Ok(beta.to_vec())
}

/// Parameters of the analytic variant: gating weights proportional to
/// β_k · p(μ̂_k(x); τ²) with a scaled chi-squared(1) density and closed-form
/// M-step updates for everything.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AnalyticEmParams {
    pub sigmas: Vec<f64>,
    pub betas: Vec<f64>,
    pub tau_sq: f64,
    pub loglik_trace: Vec<f64>,
    /// Set when nonpositive performance estimates had to be clamped to 1e-12
    /// to stay inside the chi-squared support.
    pub mu_clamped: bool,
}

/// ln of the scaled chi-squared(1) density (1/(τ²√2π))·(μ/τ²)^{-1/2}·e^{-μ/2τ²}.
fn log_scaled_chi_sq(mu: f64, tau_sq: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * mu.ln() - 0.5 * tau_sq.ln()
        - mu / (2.0 * tau_sq)
}

/// Analytic EM: every M-step update is closed-form. The performance surfaces
/// must be squared-error-like (positive); nonpositive values are clamped.
pub fn em_fit_analytic(
    data: &Dataset,
    mu_estimates: &[Vec<f64>],
    config: &EmConfig,
) -> Result<AnalyticEmParams> {
    check_mu_estimates(data, mu_estimates)?;
    let n = data.n_rows();
    let k_models = data.n_models();

    let mut mu_clamped = false;
    let mu_rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..k_models)
                .map(|k| {
                    let v = mu_estimates[k][i];
                    if v <= 0.0 {
                        mu_clamped = true;
                        1e-12
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();

    let mut sigmas = match &config.init_sigmas {
        Some(s) => s.clone(),
        None => mean_squared_residuals(data),
    };
    let mut betas = match &config.init_betas {
        Some(b) => b.clone(),
        None => vec![1.0 / k_models as f64; k_models],
    };
    let mut tau_sq =
        mu_rows.iter().flatten().sum::<f64>() / (n * k_models) as f64;

    let loglik = |sigmas: &[f64], betas: &[f64], tau_sq: f64| -> f64 {
        (0..n)
            .map(|i| {
                let lw: Vec<f64> = (0..k_models)
                    .map(|k| {
                        betas[k].ln()
                            + log_scaled_chi_sq(mu_rows[i][k], tau_sq)
                            + log_normal_pdf(data.outcome(i), data.prediction(i, k), sigmas[k])
                    })
                    .collect();
                let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + lw.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
            })
            .sum()
    };

    let mut trace = vec![loglik(&sigmas, &betas, tau_sq)];

    for _ in 0..config.max_iter {
        let lambda: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let lw: Vec<f64> = (0..k_models)
                    .map(|k| {
                        betas[k].ln()
                            + log_scaled_chi_sq(mu_rows[i][k], tau_sq)
                            + log_normal_pdf(data.outcome(i), data.prediction(i, k), sigmas[k])
                    })
                    .collect();
                let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut row: Vec<f64> = lw.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = row.iter().sum();
                for v in &mut row {
                    *v /= sum;
                }
                row
            })
            .collect();

        sigmas = weighted_sigma_update(data, &lambda)?;
        betas = analytic_beta_update(&lambda);
        tau_sq = analytic_tau_update(&lambda, &mu_rows);

        let ll = loglik(&sigmas, &betas, tau_sq);
        let delta = ll - *trace.last().unwrap();
        trace.push(ll);
        if delta.abs() < config.tolerance {
            break;
        }
    }

    Ok(AnalyticEmParams {
        sigmas,
        betas,
        tau_sq,
        loglik_trace: trace,
        mu_clamped,
    })
}

/// Mixing proportions: mean responsibility per model, renormalized so the
/// simplex constraint holds exactly.
fn analytic_beta_update(lambda: &[Vec<f64>]) -> Vec<f64> {
    let n = lambda.len() as f64;
    let k = lambda[0].len();
    let mut betas: Vec<f64> = (0..k)
        .map(|j| lambda.iter().map(|row| row[j]).sum::<f64>() / n)
        .collect();
    let sum: f64 = betas.iter().sum();
    for b in &mut betas {
        *b /= sum;
    }
    betas
}

/// Scale update: responsibility-weighted mean of the performance estimates.
fn analytic_tau_update(lambda: &[Vec<f64>], mu_rows: &[Vec<f64>]) -> f64 {
    lambda
        .iter()
        .zip(mu_rows)
        .map(|(lrow, mrow)| lrow.iter().zip(mrow).map(|(l, m)| l * m).sum::<f64>())
        .sum::<f64>()
        / lambda.len() as f64
}

/// Analytic gating weights at one covariate pattern.
pub fn analytic_weights(params: &AnalyticEmParams, mu_at_x: &[f64]) -> Vec<f64> {
    let lw: Vec<f64> = params
        .betas
        .iter()
        .zip(mu_at_x)
        .map(|(b, m)| b.ln() + log_scaled_chi_sq(m.max(1e-12), params.tau_sq))
        .collect();
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = lw.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for w in &mut out {
        *w /= sum;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmVariant {
    Numerical,
    Analytic,
}

/// A fitted EM combiner bundling the per-model performance forests (the
/// weight drivers) with the mixture parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EmCombiner {
    pub forests: Vec<Forest>,
    pub variant: EmVariant,
    pub params: Option<EmParams>,
    pub analytic_params: Option<AnalyticEmParams>,
}

/// Fits per-model performance forests, evaluates their surfaces on the
/// training rows, and runs the requested EM variant on top.
pub fn fit_em_combiner(
    data: &Dataset,
    measure: Measure,
    variant: EmVariant,
    forest_config: &ForestConfig,
    em_config: &EmConfig,
) -> Result<EmCombiner> {
    let forests = (0..data.n_models())
        .map(|k| {
            let mut cfg = forest_config.clone();
            cfg.seed = rng::derive_seed2(forest_config.seed, 0xE4, k as u64);
            crate::ensemble::fit_forest(data, measure, k, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mu_estimates: Vec<Vec<f64>> = forests
        .iter()
        .map(|f| (0..data.n_rows()).map(|i| f.predict_row(data, i)).collect())
        .collect();
    let (params, analytic_params) = match variant {
        EmVariant::Numerical => (Some(em_fit(data, &mu_estimates, em_config)?), None),
        EmVariant::Analytic => (None, Some(em_fit_analytic(data, &mu_estimates, em_config)?)),
    };
    Ok(EmCombiner {
        forests,
        variant,
        params,
        analytic_params,
    })
}

impl EmCombiner {
    pub fn weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mu_at: Vec<f64> = self
            .forests
            .iter()
            .map(|f| f.predict(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.weights_from_mu(&mu_at))
    }

    pub fn weights_for_row(&self, data: &Dataset, row: usize) -> Vec<f64> {
        let mu_at: Vec<f64> = self
            .forests
            .iter()
            .map(|f| f.predict_row(data, row))
            .collect();
        self.weights_from_mu(&mu_at)
    }

    fn weights_from_mu(&self, mu_at: &[f64]) -> Vec<f64> {
        match self.variant {
            EmVariant::Numerical => {
                softmax_weights(&self.params.as_ref().unwrap().betas, mu_at)
            }
            EmVariant::Analytic => {
                analytic_weights(self.analytic_params.as_ref().unwrap(), mu_at)
            }
        }
    }

    pub fn predict_row(&self, data: &Dataset, row: usize) -> Result<f64> {
        let w = self.weights_for_row(data, row);
        let preds: Vec<f64> = (0..data.n_models())
            .map(|k| data.prediction(row, k))
            .collect();
        combine_predict(&w, &preds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::GrowthConfig;

    #[test]
    fn tally_hand_examples() {
        let values = vec![
            vec![1.0, 2.0],
            vec![1.0, 2.0],
            vec![1.0, 2.0],
            vec![2.0, 1.0],
        ];
        assert_eq!(
            vote_tally(&values, Orientation::LowerIsBetter),
            vec![0.75, 0.25]
        );

        let tied = vec![vec![1.0, 1.0], vec![0.5, 2.0]];
        assert_eq!(
            vote_tally(&tied, Orientation::LowerIsBetter),
            vec![0.75, 0.25]
        );

        let auc = vec![vec![0.6, 0.9], vec![0.7, 0.8]];
        assert_eq!(
            vote_tally(&auc, Orientation::HigherIsBetter),
            vec![0.0, 1.0]
        );
    }

    #[test]
    fn tally_is_transform_invariant_and_normalized() {
        let values = vec![vec![3.0, 1.0, 2.0], vec![0.5, 0.5, 4.0]];
        let base = vote_tally(&values, Orientation::LowerIsBetter);
        let transformed: Vec<Vec<f64>> = values
            .iter()
            .map(|row| row.iter().map(|v| v.exp() + 7.0).collect())
            .collect();
        let after = vote_tally(&transformed, Orientation::LowerIsBetter);
        for (a, b) in base.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn combine_predict_hand_values() {
        assert_eq!(combine_predict(&[1.0, 0.0], &[5.0, 9.0]).unwrap(), 5.0);
        assert_eq!(combine_predict(&[0.5, 0.5], &[2.0, 4.0]).unwrap(), 3.0);
        assert!(matches!(
            combine_predict(&[0.6, 0.6], &[1.0, 1.0]),
            Err(Error::WeightSumViolation { .. })
        ));
    }

    #[test]
    fn softmax_weights_behave() {
        let uniform = softmax_weights(&[0.0, 0.0, 0.0], &[5.0, 1.0, -2.0]);
        for w in &uniform {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }

        let extreme = softmax_weights(&[-500.0, 0.0], &[1.0, 1.0]);
        assert!(extreme.iter().all(|w| w.is_finite()));
        assert!(extreme[1] > 0.999_999);

        let beta = [0.3, -0.2, 0.1];
        let mu = [1.5, 2.0, 0.5];
        let w = softmax_weights(&beta, &mu);
        let denom: f64 = beta.iter().zip(&mu).map(|(b, m)| (b * m).exp()).sum();
        for k in 0..3 {
            assert!((w[k] - (beta[k] * mu[k]).exp() / denom).abs() < 1e-12);
        }
    }

    fn combiner_data(n: usize, seed: u64) -> Dataset {
        let mut rng = rng::stream_rng(seed, 5);
        let cols: Vec<Vec<f64>> =
            (0..3).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| cols[0][i] * 2.0 + rng.gen::<f64>() * 0.2)
            .collect();
        let good: Vec<f64> = y.iter().map(|v| v + 0.01).collect();
        let bad: Vec<f64> = y.iter().map(|v| v + 2.0).collect();
        Dataset::new(cols, y, vec![good, bad]).unwrap()
    }

    /// Two models with comparable overall error but different regional
    /// strengths, so EM responsibilities stay well away from collapse.
    fn balanced_data(n: usize, seed: u64) -> Dataset {
        let mut rng = rng::stream_rng(seed, 6);
        let cols: Vec<Vec<f64>> =
            (0..3).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| cols[0][i] * 2.0 + rng.gen::<f64>() * 0.3)
            .collect();
        let a: Vec<f64> = (0..n)
            .map(|i| y[i] + if cols[1][i] < 0.5 { 0.6 } else { -0.15 })
            .collect();
        let b: Vec<f64> = (0..n)
            .map(|i| y[i] + if cols[1][i] < 0.5 { -0.15 } else { 0.6 })
            .collect();
        Dataset::new(cols, y, vec![a, b]).unwrap()
    }

    fn small_forest_config(seed: u64) -> ForestConfig {
        ForestConfig {
            n_trees: 5,
            growth: GrowthConfig {
                min_node_size: 10,
                max_depth: 3,
                ..GrowthConfig::default()
            },
            seed,
            ..ForestConfig::default()
        }
    }

    #[test]
    fn vote_combiner_prefers_dominating_model() {
        let data = combiner_data(120, 1);
        let combiner =
            fit_vote_combiner(&data, Measure::SquaredError, &small_forest_config(3)).unwrap();
        assert_eq!(combiner.forests.len(), 2);
        for (a, b) in combiner.forests[0]
            .bootstrap_indices
            .iter()
            .zip(&combiner.forests[1].bootstrap_indices)
        {
            assert_eq!(a, b, "bootstraps must be shared across models");
        }
        for row in [0, 17, 63] {
            let w = combiner.weights_for_row(&data, row).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w[0] > 0.99, "dominating model should win: {w:?}");
        }
    }

    #[test]
    fn single_model_vote_weight_is_one() {
        let data = combiner_data(100, 2);
        let solo = Dataset::new(
            (0..3).map(|j| data.feature_column(j).to_vec()).collect(),
            data.outcomes().to_vec(),
            vec![data.prediction_column(0).to_vec()],
        )
        .unwrap();
        let combiner =
            fit_vote_combiner(&solo, Measure::SquaredError, &small_forest_config(4)).unwrap();
        let w = combiner.weights(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn fisher_step_is_stationary_when_lambda_equals_pi() {
        let mu = vec![vec![1.0, 2.0], vec![0.5, 1.5], vec![2.0, 0.1]];
        let beta = vec![0.4, -0.3];
        let lambda: Vec<Vec<f64>> = mu
            .iter()
            .map(|row| gating_probs(row, &beta))
            .collect();
        let next = fisher_scoring_step(&lambda, &mu, &beta).unwrap();
        for (a, b) in next.iter().zip(&beta) {
            assert!((a - b).abs() < 1e-9, "stationary point moved: {next:?}");
        }
    }

    #[test]
    fn fisher_step_handles_all_zero_surfaces() {
        let mu = vec![vec![0.0, 0.0]; 4];
        let lambda = vec![vec![0.3, 0.3]; 4];
        let beta = vec![0.7, -0.2];
        let next = fisher_scoring_step(&lambda, &mu, &beta).unwrap();
        assert_eq!(next, beta);
    }

    #[test]
    fn fisher_score_and_hessian_match_finite_differences() {
        let mut rng = rng::stream_rng(42, 9);
        let n = 12;
        let k_free = 2;
        let mu: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k_free).map(|_| rng.gen::<f64>() * 3.0).collect())
            .collect();
        let lambda: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let a = rng.gen::<f64>() * 0.4;
                let b = rng.gen::<f64>() * 0.4;
                vec![a, b]
            })
            .collect();
        let beta = vec![0.25, -0.4];

        let h = 1e-6;
        let mut grad = vec![0.0; k_free];
        for s in 0..k_free {
            let mut up = beta.clone();
            let mut down = beta.clone();
            up[s] += h;
            down[s] -= h;
            grad[s] = (gating_objective(&lambda, &mu, &up)
                - gating_objective(&lambda, &mu, &down))
                / (2.0 * h);
        }

        let mut score = vec![0.0; k_free];
        for (lrow, mrow) in lambda.iter().zip(&mu) {
            let pi = gating_probs(mrow, &beta);
            for s in 0..k_free {
                score[s] += (lrow[s] - pi[s]) * mrow[s];
            }
        }
        for s in 0..k_free {
            let denom = grad[s].abs().max(1e-3);
            assert!(
                ((score[s] - grad[s]) / denom).abs() < 1e-6,
                "score {s}: analytic {} vs fd {}",
                score[s],
                grad[s]
            );
        }

        // Hessian columns against finite differences of the score.
        for t in 0..k_free {
            let mut up = beta.clone();
            let mut down = beta.clone();
            up[t] += h;
            down[t] -= h;
            let score_at = |b: &[f64]| -> Vec<f64> {
                let mut u = vec![0.0; k_free];
                for (lrow, mrow) in lambda.iter().zip(&mu) {
                    let pi = gating_probs(mrow, b);
                    for s in 0..k_free {
                        u[s] += (lrow[s] - pi[s]) * mrow[s];
                    }
                }
                u
            };
            let fd: Vec<f64> = score_at(&up)
                .iter()
                .zip(score_at(&down))
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();

            let mut hess_col = vec![0.0; k_free];
            for mrow in &mu {
                let pi = gating_probs(mrow, &beta);
                for s in 0..k_free {
                    if s == t {
                        hess_col[s] -= mrow[s] * mrow[s] * pi[s] * (1.0 - pi[s]);
                    } else {
                        hess_col[s] += mrow[s] * mrow[t] * pi[s] * pi[t];
                    }
                }
            }
            for s in 0..k_free {
                let denom = fd[s].abs().max(1e-3);
                assert!(
                    ((hess_col[s] - fd[s]) / denom).abs() < 1e-5,
                    "hessian ({s},{t}): analytic {} vs fd {}",
                    hess_col[s],
                    fd[s]
                );
            }
        }
    }

    #[test]
    fn em_two_observation_e_step_matches_hand_formula() {
        let data = Dataset::new(
            vec![vec![0.0, 1.0]],
            vec![1.0, 2.0],
            vec![vec![0.8, 1.9], vec![1.5, 2.5]],
        )
        .unwrap();
        let mu = vec![vec![1.0, 1.0], vec![2.0, 2.0]];
        let config = EmConfig {
            max_iter: 0,
            ..EmConfig::default()
        };
        let params = em_fit(&data, &mu, &config).unwrap();

        // With zero iterations only the initial log-likelihood is recorded;
        // recompute it by hand from the initialization.
        let sigma1 = ((1.0f64 - 0.8).powi(2) + (2.0f64 - 1.9).powi(2)) / 2.0;
        let sigma2 = ((1.0f64 - 1.5).powi(2) + (2.0f64 - 2.5).powi(2)) / 2.0;
        let phi = |y: f64, m: f64, s: f64| {
            (-(y - m).powi(2) / (2.0 * s)).exp() / (2.0 * std::f64::consts::PI * s).sqrt()
        };
        let hand: f64 = [(1.0, 0.8, 1.5), (2.0, 1.9, 2.5)]
            .iter()
            .map(|&(y, h1, h2)| (0.5 * phi(y, h1, sigma1) + 0.5 * phi(y, h2, sigma2)).ln())
            .sum();
        assert!((params.loglik_trace[0] - hand).abs() < 1e-10);

        // One full iteration: its lambda values follow the posterior-ratio
        // formula; verify through the sigma update they imply.
        let config = EmConfig {
            max_iter: 1,
            ..EmConfig::default()
        };
        let params = em_fit(&data, &mu, &config).unwrap();
        let lam = |y: f64, h1: f64, h2: f64| {
            let a = phi(y, h1, sigma1) * 0.5;
            let b = phi(y, h2, sigma2) * 0.5;
            a / (a + b)
        };
        let l11 = lam(1.0, 0.8, 1.5);
        let l21 = lam(2.0, 1.9, 2.5);
        let expected_sigma1 = (l11 * (1.0f64 - 0.8).powi(2) + l21 * (2.0f64 - 1.9).powi(2))
            / (l11 + l21);
        assert!((params.sigmas[0] - expected_sigma1).abs() < 1e-10);
    }

    #[test]
    fn em_single_model_reduces_to_residual_variance() {
        let data = Dataset::new(
            vec![vec![0.0, 1.0, 2.0, 3.0]],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![vec![1.5, 2.5, 2.5, 4.5]],
        )
        .unwrap();
        let mu = vec![vec![0.3; 4]];
        let params = em_fit(&data, &mu, &EmConfig::default()).unwrap();
        let msr = (0.25 + 0.25 + 0.25 + 0.25) / 4.0;
        assert!((params.sigmas[0] - msr).abs() < 1e-12);
        assert_eq!(params.betas, vec![0.0]);
    }

    #[test]
    fn em_loglik_trace_is_non_decreasing() {
        let data = balanced_data(60, 11);
        let mu: Vec<Vec<f64>> = (0..2)
            .map(|k| {
                (0..60)
                    .map(|i| (data.outcome(i) - data.prediction(i, k)).powi(2))
                    .collect()
            })
            .collect();
        let params = em_fit(&data, &mu, &EmConfig::default()).unwrap();
        assert!(params.loglik_trace.len() > 2);
        for w in params.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "log-likelihood decreased: {w:?}");
        }
    }

    #[test]
    fn analytic_updates_hand_values() {
        // One observation, lambda = (0.5, 0.5), mu = (2, 4): tau^2 = 3.
        let lambda = vec![vec![0.5, 0.5]];
        let mu_rows = vec![vec![2.0, 4.0]];
        assert_eq!(analytic_tau_update(&lambda, &mu_rows), 3.0);

        // Uniform responsibilities give uniform mixing proportions.
        let uniform = vec![vec![1.0 / 3.0; 3]; 5];
        for b in analytic_beta_update(&uniform) {
            assert!((b - 1.0 / 3.0).abs() < 1e-12);
        }

        let skewed = vec![vec![0.9, 0.1], vec![0.7, 0.3]];
        let betas = analytic_beta_update(&skewed);
        assert!((betas[0] - 0.8).abs() < 1e-12);
        assert!((betas[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn analytic_em_invariants_and_clamping() {
        let data = balanced_data(50, 13);
        let mu: Vec<Vec<f64>> = (0..2)
            .map(|k| {
                (0..50)
                    .map(|i| (data.outcome(i) - data.prediction(i, k)).powi(2).max(0.01))
                    .collect()
            })
            .collect();
        let config = EmConfig {
            max_iter: 20,
            ..EmConfig::default()
        };
        let params = em_fit_analytic(&data, &mu, &config).unwrap();
        assert!((params.betas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(params.betas.iter().all(|&b| b >= 0.0));
        assert!(params.tau_sq > 0.0);
        assert!(!params.mu_clamped);
        for w in params.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "log-likelihood decreased: {w:?}");
        }

        let mut negative = mu.clone();
        negative[0][0] = -1.0;
        let clamped = em_fit_analytic(&data, &negative, &config).unwrap();
        assert!(clamped.mu_clamped);
    }

    #[test]
    fn em_combiner_end_to_end_weights_sum_to_one() {
        let data = balanced_data(100, 21);
        for variant in [EmVariant::Numerical, EmVariant::Analytic] {
            let combiner = fit_em_combiner(
                &data,
                Measure::SquaredError,
                variant,
                &small_forest_config(7),
                &EmConfig {
                    max_iter: 30,
                    ..EmConfig::default()
                },
            )
            .unwrap();
            let w = combiner.weights_for_row(&data, 3);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let pred = combiner.predict_row(&data, 3).unwrap();
            assert!(pred.is_finite());
        }
    }

    #[test]
    fn degenerate_component_is_reported() {
        let data = Dataset::new(
            vec![vec![0.0, 1.0]],
            vec![1.0, 2.0],
            vec![vec![1.0, 2.0], vec![1.0, 2.0]],
        )
        .unwrap();
        let lambda = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert!(matches!(
            weighted_sigma_update(&data, &lambda),
            Err(Error::DegenerateComponent { component: 1, .. })
        ));
    }
}
