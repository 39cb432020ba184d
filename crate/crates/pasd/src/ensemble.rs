//! Bootstrap forests with out-of-bag leaf estimates and gradient boosting on
//! per-observation performance values.

use rand::Rng;

use crate::data::Dataset;
use crate::error::Error;
use crate::exec;
use crate::measures::{Level, Measure};
use crate::rng;
use crate::tree::{grow_tree_on, grow_tree_to_targets, honest_estimate_on, GrowthConfig, Tree};
use crate::Result;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Features drawn per split search; defaults to ceil(p/3).
    pub mtry: Option<usize>,
    pub growth: GrowthConfig,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            mtry: None,
            growth: GrowthConfig::fully_grown(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub measure: Measure,
    pub model_index: usize,
    /// Per-tree bootstrap row multisets; the out-of-bag rows used for each
    /// tree's leaf estimates are their complements.
    pub bootstrap_indices: Vec<Vec<u32>>,
    pub mtry: usize,
    pub seed: u64,
}

pub fn default_mtry(n_features: usize) -> usize {
    n_features.div_ceil(3).max(1)
}

/// Fits a forest of fully grown trees, one per bootstrap resample, with each
/// tree's leaf estimates recomputed from its out-of-bag rows.
pub fn fit_forest(
    data: &Dataset,
    measure: Measure,
    model_index: usize,
    config: &ForestConfig,
) -> Result<Forest> {
    let n = data.n_rows();
    let bootstraps: Vec<Vec<u32>> = (0..config.n_trees)
        .map(|b| {
            let mut rng = rng::stream_rng2(config.seed, 0xB007, b as u64);
            (0..n).map(|_| rng.gen_range(0..n as u32)).collect()
        })
        .collect();
    fit_forest_with_bootstrap(data, measure, model_index, config, bootstraps)
}

/// Forest fit over caller-supplied bootstrap multisets. Combiners use this to
/// share one resample across several models; tests use it to force an
/// identity bootstrap.
pub fn fit_forest_with_bootstrap(
    data: &Dataset,
    measure: Measure,
    model_index: usize,
    config: &ForestConfig,
    bootstraps: Vec<Vec<u32>>,
) -> Result<Forest> {
    if config.n_trees == 0 || bootstraps.len() != config.n_trees {
        return Err(Error::InvalidConfig(format!(
            "need one bootstrap per tree: {} trees, {} resamples",
            config.n_trees,
            bootstraps.len()
        )));
    }
    let mtry = config.mtry.unwrap_or_else(|| default_mtry(data.n_features()));
    let trees = exec::par_map_indexed(config.n_trees, |b| {
        let mut growth = config.growth.clone();
        growth.mtry = Some(mtry);
        growth.seed = rng::derive_seed2(config.seed, 0x7EE5, b as u64);
        let tree = grow_tree_on(data, measure, model_index, &growth, &bootstraps[b])?;

        let mut in_bag = vec![false; data.n_rows()];
        for &r in &bootstraps[b] {
            in_bag[r as usize] = true;
        }
        let oob: Vec<u32> = (0..data.n_rows() as u32)
            .filter(|&r| !in_bag[r as usize])
            .collect();
        honest_estimate_on(&tree, data, &oob)
    })
    .into_iter()
    .collect::<Result<Vec<Tree>>>()?;

    Ok(Forest {
        trees,
        measure,
        model_index,
        bootstrap_indices: bootstraps,
        mtry,
        seed: config.seed,
    })
}

impl Forest {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let mut sum = 0.0;
        for tree in &self.trees {
            sum += tree.predict(x)?;
        }
        Ok(sum / self.trees.len() as f64)
    }

    pub fn predict_row(&self, data: &Dataset, row: usize) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict_row(data, row)).sum();
        sum / self.trees.len() as f64
    }
}

/// Mean of the per-tree predictions at `x`.
pub fn forest_predict(forest: &Forest, x: &[f64]) -> Result<f64> {
    forest.predict(x)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BoostConfig {
    pub n_stages: usize,
    pub shrinkage: f64,
    pub loss: BoostLoss,
    /// Stage-tree growth; depth 3 by default.
    pub growth: GrowthConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoostLoss {
    L2,
    L1,
}

impl Default for BoostConfig {
    fn default() -> Self {
        let growth = GrowthConfig {
            max_depth: 3,
            ..GrowthConfig::default()
        };
        BoostConfig {
            n_stages: 200,
            shrinkage: 0.1,
            loss: BoostLoss::L2,
            growth,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BoostedModel {
    pub initial_value: f64,
    pub stages: Vec<Tree>,
    pub shrinkage: f64,
    pub loss: BoostLoss,
}

/// Per-observation performance values to boost against; group-level measures
/// have no such values.
pub fn boosting_targets(data: &Dataset, measure: Measure, model_index: usize) -> Result<Vec<f64>> {
    if measure.level() == Level::Group {
        return Err(Error::GroupLevelMeasure);
    }
    data.losses(measure, model_index)
}

/// Stagewise fit: start from the target mean, then repeatedly fit a shallow
/// tree to the current residuals (or their signs, for L1) and add it with
/// shrinkage.
pub fn fit_boosting(
    data: &Dataset,
    targets: &[f64],
    config: &BoostConfig,
) -> Result<BoostedModel> {
    if targets.len() != data.n_rows() {
        return Err(Error::DimensionMismatch {
            expected: data.n_rows(),
            got: targets.len(),
        });
    }
    if !(0.0..=1.0).contains(&config.shrinkage) || config.shrinkage == 0.0 {
        return Err(Error::InvalidConfig(format!(
            "shrinkage {} outside (0, 1]",
            config.shrinkage
        )));
    }
    let n = data.n_rows() as f64;
    let initial_value = targets.iter().sum::<f64>() / n;

    let mut current: Vec<f64> = vec![initial_value; data.n_rows()];
    let mut stages = Vec::with_capacity(config.n_stages);
    for m in 0..config.n_stages {
        let residuals: Vec<f64> = targets
            .iter()
            .zip(&current)
            .map(|(t, c)| t - c)
            .collect();
        let stage_targets: Vec<f64> = match config.loss {
            BoostLoss::L2 => residuals.clone(),
            BoostLoss::L1 => residuals
                .iter()
                .map(|&r| if r == 0.0 { 0.0 } else { r.signum() })
                .collect(),
        };
        let mut growth = config.growth.clone();
        growth.seed = rng::derive_seed2(config.seed, 0xB005, m as u64);
        let stage = grow_tree_to_targets(data, &stage_targets, &growth)?;
        for (i, c) in current.iter_mut().enumerate() {
            *c += config.shrinkage * stage.predict_row(data, i);
        }
        stages.push(stage);
    }

    Ok(BoostedModel {
        initial_value,
        stages,
        shrinkage: config.shrinkage,
        loss: config.loss,
    })
}

impl BoostedModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let mut out = self.initial_value;
        for stage in &self.stages {
            out += self.shrinkage * stage.predict(x)?;
        }
        Ok(out)
    }

    pub fn predict_row(&self, data: &Dataset, row: usize) -> f64 {
        self.initial_value
            + self.shrinkage
                * self
                    .stages
                    .iter()
                    .map(|s| s.predict_row(data, row))
                    .sum::<f64>()
    }
}

pub fn boosting_predict(model: &BoostedModel, x: &[f64]) -> Result<f64> {
    model.predict(x)
}
