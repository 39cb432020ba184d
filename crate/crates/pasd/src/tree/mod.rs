//! Recursive binary partitioning of covariate space by heterogeneity in
//! model performance.
//!
//! Two split criteria are supported: the standardized squared difference of
//! the children's performance estimates (maximized), and CART-style combined
//! child dispersion of per-observation losses (minimized). Trees are stored
//! as flat arenas; node 0 is the root and every parent precedes its children.

mod split;

use std::collections::HashSet;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Error;
use crate::measures::{self, Level, Measure, SubgroupStats};
use crate::rng;
use crate::Result;

pub(crate) use split::{sample_features, scan_best_split, NodeTargets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitCriterion {
    /// Standardized squared difference between child performance estimates.
    Pasd,
    /// Combined child dispersion of transformed outcomes (losses).
    CartTo,
}

/// Dispersion measure used by the `CartTo` criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heterogeneity {
    L2,
    L1,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthConfig {
    pub criterion: SplitCriterion,
    pub heterogeneity: Heterogeneity,
    pub max_depth: u32,
    /// Minimum child size for individual-level measures.
    pub min_node_size: usize,
    /// Minimum cases per child for AUC trees.
    pub min_cases: usize,
    /// Minimum controls per child for AUC trees.
    pub min_controls: usize,
    /// Features drawn per split search; `None` scans all of them.
    pub mtry: Option<usize>,
    pub seed: u64,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        GrowthConfig {
            criterion: SplitCriterion::Pasd,
            heterogeneity: Heterogeneity::L2,
            max_depth: 10,
            min_node_size: 75,
            min_cases: 10,
            min_controls: 10,
            mtry: None,
            seed: 0,
        }
    }
}

impl GrowthConfig {
    /// Configuration for ensemble base learners: growth continues until the
    /// measure's own admissibility minimums stop it (depth-capped only as a
    /// guard against degenerate chains).
    pub fn fully_grown() -> Self {
        GrowthConfig {
            max_depth: 30,
            min_node_size: 2,
            min_cases: 2,
            min_controls: 2,
            ..GrowthConfig::default()
        }
    }

    pub fn validate(&self, measure: Measure, n_features: usize) -> Result<()> {
        if self.criterion == SplitCriterion::CartTo && measure.level() == Level::Group {
            return Err(Error::GroupLevelMeasure);
        }
        match measure.level() {
            Level::Individual if self.min_node_size < 2 => {
                return Err(Error::InvalidConfig(
                    "min_node_size must be at least 2".into(),
                ))
            }
            Level::Group if self.min_cases < 2 || self.min_controls < 2 => {
                return Err(Error::InvalidConfig(
                    "min_cases and min_controls must be at least 2".into(),
                ))
            }
            _ => {}
        }
        if let Some(mtry) = self.mtry {
            if mtry == 0 || mtry > n_features {
                return Err(Error::InvalidConfig(format!(
                    "mtry {mtry} out of range 1..={n_features}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub cutpoint: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub feature: usize,
    pub cutpoint: f64,
    /// Split criterion value achieved by this split.
    pub statistic: f64,
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeNode {
    pub depth: u32,
    pub stats: SubgroupStats,
    /// Dispersion of the fitting targets around this node's own estimate
    /// (individual-level trees only).
    pub node_error: Option<f64>,
    /// Set when holdout re-estimation fell back to an ancestor's sample.
    #[serde(default)]
    pub fallback: bool,
    pub split: Option<SplitInfo>,
    #[serde(skip)]
    pub sample_indices: Vec<u32>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.split.is_none()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
    pub measure: Measure,
    pub model_index: usize,
    pub n_features: usize,
    pub config: GrowthConfig,
}

/// Grows a tree on the full dataset for one model under one measure.
pub fn grow_tree(
    data: &Dataset,
    measure: Measure,
    model_index: usize,
    config: &GrowthConfig,
) -> Result<Tree> {
    let rows: Vec<u32> = (0..data.n_rows() as u32).collect();
    grow_tree_on(data, measure, model_index, config, &rows)
}

/// Grows a tree on an index multiset (duplicates allowed, e.g. a bootstrap).
pub(crate) fn grow_tree_on(
    data: &Dataset,
    measure: Measure,
    model_index: usize,
    config: &GrowthConfig,
    rows: &[u32],
) -> Result<Tree> {
    config.validate(measure, data.n_features())?;
    if model_index >= data.n_models() {
        return Err(Error::DimensionMismatch {
            expected: data.n_models(),
            got: model_index,
        });
    }

    let losses;
    let is_case;
    let targets = match measure.level() {
        Level::Individual => {
            losses = data.losses(measure, model_index)?;
            if rows.len() < config.min_node_size.max(2) {
                return Err(Error::DatasetTooSmall {
                    n: rows.len(),
                    min: config.min_node_size.max(2),
                });
            }
            NodeTargets::Values(&losses)
        }
        Level::Group => {
            is_case = data.binary_outcomes()?;
            let cases = rows.iter().filter(|&&r| is_case[r as usize]).count();
            if cases < 2 || rows.len() - cases < 2 {
                return Err(Error::DatasetTooSmall {
                    n: rows.len(),
                    min: 4,
                });
            }
            NodeTargets::Auc {
                scores: data.prediction_column(model_index),
                is_case: &is_case,
            }
        }
    };

    let mut grower = Grower {
        data,
        targets,
        config,
        heterogeneity: config.heterogeneity,
        rng: rng::stream_rng(config.seed, 0x7265_6573),
        nodes: Vec::new(),
    };
    grower.grow(rows.to_vec(), 0)?;
    Ok(Tree {
        nodes: grower.nodes,
        measure,
        model_index,
        n_features: data.n_features(),
        config: config.clone(),
    })
}

/// Fits a tree to arbitrary real-valued targets (one per dataset row) using
/// the configured criterion; used for boosting stages on residuals. The
/// resulting tree reports squared error as its nominal measure.
pub fn grow_tree_to_targets(data: &Dataset, targets: &[f64], config: &GrowthConfig) -> Result<Tree> {
    if targets.len() != data.n_rows() {
        return Err(Error::DimensionMismatch {
            expected: data.n_rows(),
            got: targets.len(),
        });
    }
    config.validate(Measure::SquaredError, data.n_features())?;
    if data.n_rows() < config.min_node_size.max(2) {
        return Err(Error::DatasetTooSmall {
            n: data.n_rows(),
            min: config.min_node_size.max(2),
        });
    }
    let rows: Vec<u32> = (0..data.n_rows() as u32).collect();
    let mut grower = Grower {
        data,
        targets: NodeTargets::Values(targets),
        config,
        heterogeneity: config.heterogeneity,
        rng: rng::stream_rng(config.seed, 0x7265_6573),
        nodes: Vec::new(),
    };
    grower.grow(rows, 0)?;
    Ok(Tree {
        nodes: grower.nodes,
        measure: Measure::SquaredError,
        model_index: 0,
        n_features: data.n_features(),
        config: config.clone(),
    })
}

/// Best split of a node under the CART-style criterion; `None` when no
/// admissible split exists. `rows` indexes into `data`, `losses` is
/// row-indexed.
pub fn best_split_cart_to(
    data: &Dataset,
    losses: &[f64],
    rows: &[u32],
    config: &GrowthConfig,
) -> Result<Option<(Split, f64)>> {
    if config.criterion != SplitCriterion::CartTo {
        return Err(Error::InvalidConfig(
            "config criterion must be cart_to".into(),
        ));
    }
    config.validate(Measure::SquaredError, data.n_features())?;
    let features: Vec<usize> = (0..data.n_features()).collect();
    Ok(
        scan_best_split(data, NodeTargets::Values(losses), rows, &features, config)
            .map(|r| (r.split, r.statistic)),
    )
}

/// Best split of a node under the standardized-difference criterion for an
/// individual-level measure; `None` when no admissible split exists.
pub fn best_split_pasd(
    data: &Dataset,
    losses: &[f64],
    rows: &[u32],
    config: &GrowthConfig,
) -> Result<Option<(Split, f64)>> {
    if config.criterion != SplitCriterion::Pasd {
        return Err(Error::InvalidConfig("config criterion must be pasd".into()));
    }
    config.validate(Measure::SquaredError, data.n_features())?;
    let features: Vec<usize> = (0..data.n_features()).collect();
    Ok(
        scan_best_split(data, NodeTargets::Values(losses), rows, &features, config)
            .map(|r| (r.split, r.statistic)),
    )
}

/// Best split of a node under the standardized-difference criterion for the
/// AUC; scores come from the given model's prediction column.
pub fn best_split_pasd_auc(
    data: &Dataset,
    model_index: usize,
    rows: &[u32],
    config: &GrowthConfig,
) -> Result<Option<(Split, f64)>> {
    if config.criterion != SplitCriterion::Pasd {
        return Err(Error::InvalidConfig("config criterion must be pasd".into()));
    }
    config.validate(Measure::Auc, data.n_features())?;
    let is_case = data.binary_outcomes()?;
    let targets = NodeTargets::Auc {
        scores: data.prediction_column(model_index),
        is_case: &is_case,
    };
    let features: Vec<usize> = (0..data.n_features()).collect();
    Ok(scan_best_split(data, targets, rows, &features, config).map(|r| (r.split, r.statistic)))
}

struct Grower<'a> {
    data: &'a Dataset,
    targets: NodeTargets<'a>,
    config: &'a GrowthConfig,
    heterogeneity: Heterogeneity,
    rng: ChaCha8Rng,
    nodes: Vec<TreeNode>,
}

impl Grower<'_> {
    fn grow(&mut self, rows: Vec<u32>, depth: u32) -> Result<usize> {
        let stats = node_stats(self.targets, &rows)?;
        let node_error = node_dispersion(self.targets, &rows, self.heterogeneity, stats.estimate);
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            depth,
            stats,
            node_error,
            fallback: false,
            split: None,
            sample_indices: rows.clone(),
        });

        if depth < self.config.max_depth {
            let features = sample_features(
                self.data.n_features(),
                self.config.mtry,
                &mut self.rng,
            );
            if let Some(found) =
                scan_best_split(self.data, self.targets, &rows, &features, self.config)
            {
                let (left_rows, right_rows) = partition_rows(self.data, &rows, found.split);
                let left = self.grow(left_rows, depth + 1)?;
                let right = self.grow(right_rows, depth + 1)?;
                self.nodes[id].split = Some(SplitInfo {
                    feature: found.split.feature,
                    cutpoint: found.split.cutpoint,
                    statistic: found.statistic,
                    left,
                    right,
                });
            }
        }
        Ok(id)
    }
}

fn partition_rows(data: &Dataset, rows: &[u32], split: Split) -> (Vec<u32>, Vec<u32>) {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for &r in rows {
        if data.covariate(r as usize, split.feature) <= split.cutpoint {
            left.push(r);
        } else {
            right.push(r);
        }
    }
    (left, right)
}

fn node_stats(targets: NodeTargets<'_>, rows: &[u32]) -> Result<SubgroupStats> {
    match targets {
        NodeTargets::Values(values) => {
            let sample: Vec<f64> = rows.iter().map(|&r| values[r as usize]).collect();
            measures::loss_subgroup_stats(&sample)
        }
        NodeTargets::Auc { scores, is_case } => {
            let s: Vec<f64> = rows.iter().map(|&r| scores[r as usize]).collect();
            let c: Vec<bool> = rows.iter().map(|&r| is_case[r as usize]).collect();
            measures::auc_subgroup_stats(&s, &c)
        }
    }
}

fn node_dispersion(
    targets: NodeTargets<'_>,
    rows: &[u32],
    het: Heterogeneity,
    center: f64,
) -> Option<f64> {
    match targets {
        NodeTargets::Values(values) => Some(
            rows.iter()
                .map(|&r| {
                    let d = values[r as usize] - center;
                    match het {
                        Heterogeneity::L2 => d * d,
                        Heterogeneity::L1 => d.abs(),
                    }
                })
                .sum(),
        ),
        NodeTargets::Auc { .. } => None,
    }
}

impl Tree {
    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn n_internal(&self) -> usize {
        self.nodes.len() - self.n_leaves()
    }

    /// Distinct features appearing in any split.
    pub fn features_used(&self) -> std::collections::BTreeSet<usize> {
        self.nodes
            .iter()
            .filter_map(|n| n.split.as_ref().map(|s| s.feature))
            .collect()
    }

    pub fn parent_map(&self) -> Vec<Option<usize>> {
        let mut parents = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(s) = &node.split {
                parents[s.left] = Some(id);
                parents[s.right] = Some(id);
            }
        }
        parents
    }

    /// Leaf reached by a covariate vector; ties on the cutpoint go left.
    pub fn leaf_for(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        let mut id = 0;
        while let Some(s) = &self.nodes[id].split {
            id = if x[s.feature] <= s.cutpoint {
                s.left
            } else {
                s.right
            };
        }
        Ok(id)
    }

    pub fn leaf_for_row(&self, data: &Dataset, row: usize) -> usize {
        let mut id = 0;
        while let Some(s) = &self.nodes[id].split {
            id = if data.covariate(row, s.feature) <= s.cutpoint {
                s.left
            } else {
                s.right
            };
        }
        id
    }

    /// Leaf reached when the nodes in `collapsed` are treated as leaves.
    pub fn leaf_for_row_collapsed(
        &self,
        data: &Dataset,
        row: usize,
        collapsed: &HashSet<usize>,
    ) -> usize {
        let mut id = 0;
        while !collapsed.contains(&id) {
            match &self.nodes[id].split {
                Some(s) => {
                    id = if data.covariate(row, s.feature) <= s.cutpoint {
                        s.left
                    } else {
                        s.right
                    };
                }
                None => break,
            }
        }
        id
    }

    /// Estimated performance for a covariate vector.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.nodes[self.leaf_for(x)?].stats.estimate)
    }

    pub fn predict_row(&self, data: &Dataset, row: usize) -> f64 {
        self.nodes[self.leaf_for_row(data, row)].stats.estimate
    }

    /// Routes rows through the tree, returning the row subset visiting each
    /// node (root gets all of them).
    pub(crate) fn route_rows(&self, data: &Dataset, rows: &[u32]) -> Vec<Vec<u32>> {
        let mut per_node: Vec<Vec<u32>> = vec![Vec::new(); self.nodes.len()];
        for &r in rows {
            let mut id = 0;
            loop {
                per_node[id].push(r);
                match &self.nodes[id].split {
                    Some(s) => {
                        id = if data.covariate(r as usize, s.feature) <= s.cutpoint {
                            s.left
                        } else {
                            s.right
                        };
                    }
                    None => break,
                }
            }
        }
        per_node
    }

    /// New tree with the given nodes collapsed into leaves (their descendants
    /// dropped); node ids are re-assigned in preorder.
    pub fn pruned(&self, collapsed: &[usize]) -> Tree {
        let set: HashSet<usize> = collapsed.iter().copied().collect();
        let mut nodes = Vec::new();
        self.copy_pruned(0, &set, &mut nodes);
        Tree {
            nodes,
            measure: self.measure,
            model_index: self.model_index,
            n_features: self.n_features,
            config: self.config.clone(),
        }
    }

    fn copy_pruned(&self, id: usize, set: &HashSet<usize>, out: &mut Vec<TreeNode>) -> usize {
        let new_id = out.len();
        let mut node = self.nodes[id].clone();
        let split = node.split.take();
        out.push(node);
        if let Some(s) = split {
            if !set.contains(&id) {
                let left = self.copy_pruned(s.left, set, out);
                let right = self.copy_pruned(s.right, set, out);
                out[new_id].split = Some(SplitInfo { left, right, ..s });
            }
        }
        new_id
    }

    /// Indented text rendering of the fitted partition.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("root: {}\n", self.node_summary(0)));
        self.render_children(0, "", &mut out);
        out
    }

    fn node_summary(&self, id: usize) -> String {
        let n = &self.nodes[id];
        let mut s = format!(
            "n={} estimate={:.4} se={:.4}",
            n.stats.n,
            n.stats.estimate,
            n.stats.variance.sqrt()
        );
        if let (Some(ca), Some(co)) = (n.stats.n_cases, n.stats.n_controls) {
            s.push_str(&format!(" cases={ca} controls={co}"));
        }
        if n.fallback {
            s.push_str(" (fallback)");
        }
        s
    }

    fn render_children(&self, id: usize, prefix: &str, out: &mut String) {
        if let Some(s) = &self.nodes[id].split {
            out.push_str(&format!(
                "{prefix}+- x{} <= {:.6} [statistic {:.4}]: {}\n",
                s.feature + 1,
                s.cutpoint,
                s.statistic,
                self.node_summary(s.left)
            ));
            self.render_children(s.left, &format!("{prefix}|  "), out);
            out.push_str(&format!(
                "{prefix}`- x{} > {:.6}: {}\n",
                s.feature + 1,
                s.cutpoint,
                self.node_summary(s.right)
            ));
            self.render_children(s.right, &format!("{prefix}   "), out);
        }
    }
}

/// Re-estimates every node's performance from holdout data routed through
/// the fixed tree structure. A node whose holdout sample is below the
/// measure's minimum keeps the nearest ancestor's holdout estimate and is
/// flagged; if even the root's holdout sample is inadmissible, the root keeps
/// its training estimate.
pub fn honest_estimate(tree: &Tree, holdout: &Dataset) -> Result<Tree> {
    let rows: Vec<u32> = (0..holdout.n_rows() as u32).collect();
    honest_estimate_on(tree, holdout, &rows)
}

/// Same as [`honest_estimate`] but restricted to a row subset, e.g. the
/// out-of-bag rows of a bootstrap resample.
pub(crate) fn honest_estimate_on(tree: &Tree, data: &Dataset, rows: &[u32]) -> Result<Tree> {
    if data.n_features() != tree.n_features {
        return Err(Error::DimensionMismatch {
            expected: tree.n_features,
            got: data.n_features(),
        });
    }
    let losses;
    let is_case;
    let targets = match tree.measure.level() {
        Level::Individual => {
            losses = data.losses(tree.measure, tree.model_index)?;
            NodeTargets::Values(&losses)
        }
        Level::Group => {
            is_case = data.binary_outcomes()?;
            NodeTargets::Auc {
                scores: data.prediction_column(tree.model_index),
                is_case: &is_case,
            }
        }
    };

    let per_node = tree.route_rows(data, rows);
    let parents = tree.parent_map();
    let mut out = tree.clone();
    let mut effective: Vec<SubgroupStats> = Vec::with_capacity(tree.nodes.len());

    for id in 0..tree.nodes.len() {
        let own = node_stats(targets, &per_node[id]).ok();
        let (stats, fallback) = match own {
            Some(s) => (s, false),
            None => match parents[id] {
                Some(p) => (effective[p], true),
                None => (tree.nodes[id].stats, true),
            },
        };
        effective.push(stats);
        out.nodes[id].stats = stats;
        out.nodes[id].fallback = fallback;
        out.nodes[id].sample_indices = per_node[id].clone();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_data() -> Dataset {
        // Feature 1 separates losses cleanly: low x -> loss 0/1, high x -> 8/9.
        let x1 = vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let x2 = vec![5.0, 1.0, 2.0, 4.0, 3.0, 0.0, 6.0, 7.0];
        let y = vec![0.0, 1.0, 0.5, 0.5, 8.0, 9.0, 8.5, 8.5];
        let pred = vec![0.0; 8];
        Dataset::new(vec![x1, x2], y, vec![pred]).unwrap()
    }

    fn small_config() -> GrowthConfig {
        GrowthConfig {
            min_node_size: 2,
            max_depth: 4,
            ..GrowthConfig::default()
        }
    }

    #[test]
    fn grows_the_obvious_split() {
        let data = simple_data();
        let tree = grow_tree(&data, Measure::AbsoluteError, 0, &small_config()).unwrap();
        let root_split = tree.nodes[0].split.as_ref().expect("root should split");
        assert_eq!(root_split.feature, 0);
        assert_eq!(root_split.cutpoint, 0.5);
        assert!(tree.features_used().contains(&0));
    }

    #[test]
    fn predict_routes_boundary_left() {
        let data = simple_data();
        let tree = grow_tree(&data, Measure::AbsoluteError, 0, &small_config()).unwrap();
        let root = tree.nodes[0].split.as_ref().unwrap();
        // A point exactly on the root cutpoint lands in the left subtree.
        let leaf = tree.leaf_for(&[root.cutpoint, 3.0]).unwrap();
        let mut in_left = HashSet::new();
        let mut stack = vec![root.left];
        while let Some(id) = stack.pop() {
            in_left.insert(id);
            if let Some(s) = &tree.nodes[id].split {
                stack.push(s.left);
                stack.push(s.right);
            }
        }
        assert!(in_left.contains(&leaf));
        assert!(!in_left.contains(&tree.leaf_for(&[root.cutpoint + 1e-9, 3.0]).unwrap()));
        assert!(matches!(
            tree.predict(&[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn max_depth_zero_gives_root_only() {
        let data = simple_data();
        let config = GrowthConfig {
            max_depth: 0,
            min_node_size: 2,
            ..GrowthConfig::default()
        };
        let tree = grow_tree(&data, Measure::SquaredError, 0, &config).unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert!(tree.nodes[0].is_leaf());
    }

    #[test]
    fn cart_to_rejects_auc() {
        let data = simple_data();
        let config = GrowthConfig {
            criterion: SplitCriterion::CartTo,
            ..GrowthConfig::default()
        };
        assert!(matches!(
            grow_tree(&data, Measure::Auc, 0, &config),
            Err(Error::GroupLevelMeasure)
        ));
    }

    #[test]
    fn too_small_dataset_is_rejected() {
        let data = Dataset::new(vec![vec![1.0, 2.0]], vec![0.0, 1.0], vec![vec![0.0, 0.0]])
            .unwrap();
        let config = GrowthConfig::default(); // min_node_size 20
        assert!(matches!(
            grow_tree(&data, Measure::SquaredError, 0, &config),
            Err(Error::DatasetTooSmall { .. })
        ));
    }

    #[test]
    fn split_statistic_matches_recomputation_from_child_indices() {
        let data = simple_data();
        let tree = grow_tree(&data, Measure::SquaredError, 0, &small_config()).unwrap();
        let losses = data.losses(Measure::SquaredError, 0).unwrap();
        for node in &tree.nodes {
            if let Some(s) = &node.split {
                let child = |id: usize| {
                    let sample: Vec<f64> = tree.nodes[id]
                        .sample_indices
                        .iter()
                        .map(|&r| losses[r as usize])
                        .collect();
                    measures::loss_subgroup_stats(&sample).unwrap()
                };
                let (l, r) = (child(s.left), child(s.right));
                let expect = (l.estimate - r.estimate).powi(2) / (l.variance + r.variance);
                assert!(
                    (s.statistic - expect).abs() <= 1e-10 * expect.abs().max(1.0),
                    "stored {} vs recomputed {}",
                    s.statistic,
                    expect
                );
            }
        }
    }

    #[test]
    fn children_partition_parent_exactly() {
        let data = simple_data();
        let tree = grow_tree(&data, Measure::SquaredError, 0, &small_config()).unwrap();
        for node in &tree.nodes {
            if let Some(s) = &node.split {
                let mut merged: Vec<u32> = tree.nodes[s.left]
                    .sample_indices
                    .iter()
                    .chain(&tree.nodes[s.right].sample_indices)
                    .copied()
                    .collect();
                merged.sort_unstable();
                let mut parent = node.sample_indices.clone();
                parent.sort_unstable();
                assert_eq!(merged, parent);
            }
        }
    }

    #[test]
    fn honest_estimate_on_training_data_reproduces_training_stats() {
        let data = simple_data();
        let tree = grow_tree(&data, Measure::SquaredError, 0, &small_config()).unwrap();
        let honest = honest_estimate(&tree, &data).unwrap();
        for (a, b) in tree.nodes.iter().zip(&honest.nodes) {
            assert!((a.stats.estimate - b.stats.estimate).abs() < 1e-12);
            assert!(!b.fallback);
        }
    }

    #[test]
    fn honest_estimate_falls_back_on_undersized_leaves() {
        let data = simple_data();
        let tree = grow_tree(&data, Measure::SquaredError, 0, &small_config()).unwrap();
        // Holdout entirely on the high side: the low child gets nothing and
        // must inherit the root's holdout estimate.
        let holdout = Dataset::new(
            vec![vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 2.0]],
            vec![4.0, 5.0, 6.0],
            vec![vec![0.0, 0.0, 0.0]],
        )
        .unwrap();
        let honest = honest_estimate(&tree, &holdout).unwrap();
        let s = honest.nodes[0].split.as_ref().unwrap();
        assert!(honest.nodes[s.left].fallback);
        assert_eq!(
            honest.nodes[s.left].stats.estimate,
            honest.nodes[0].stats.estimate
        );
        assert!(!honest.nodes[s.right].fallback);
    }

    #[test]
    fn pruning_to_root_keeps_root_stats() {
        let data = simple_data();
        let tree = grow_tree(&data, Measure::SquaredError, 0, &small_config()).unwrap();
        let pruned = tree.pruned(&[0]);
        assert_eq!(pruned.nodes.len(), 1);
        assert_eq!(pruned.nodes[0].stats, tree.nodes[0].stats);
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let data = simple_data();
        let tree = grow_tree(&data, Measure::SquaredError, 0, &small_config()).unwrap();
        let json = serde_json::to_string(&tree).unwrap();
        let back: Tree = serde_json::from_str(&json).unwrap();
        assert_eq!(back.nodes.len(), tree.nodes.len());
        for (a, b) in tree.nodes.iter().zip(&back.nodes) {
            assert_eq!(a.stats.estimate.to_bits(), b.stats.estimate.to_bits());
            assert_eq!(a.stats.variance.to_bits(), b.stats.variance.to_bits());
            match (&a.split, &b.split) {
                (Some(x), Some(y)) => {
                    assert_eq!(x.cutpoint.to_bits(), y.cutpoint.to_bits());
                    assert_eq!(x.statistic.to_bits(), y.statistic.to_bits());
                    assert_eq!((x.feature, x.left, x.right), (y.feature, y.left, y.right));
                }
                (None, None) => {}
                _ => panic!("structure changed in round trip"),
            }
        }
        // Predictions agree bit-exactly after the round trip.
        for row in 0..data.n_rows() {
            assert_eq!(
                tree.predict_row(&data, row).to_bits(),
                back.predict_row(&data, row).to_bits()
            );
        }
    }

    #[test]
    fn mtry_restricts_candidate_features() {
        // With mtry = 1 and a fixed seed, splits still happen but stay
        // deterministic.
        let data = simple_data();
        let config = GrowthConfig {
            mtry: Some(1),
            min_node_size: 2,
            seed: 9,
            ..GrowthConfig::default()
        };
        let t1 = grow_tree(&data, Measure::SquaredError, 0, &config).unwrap();
        let t2 = grow_tree(&data, Measure::SquaredError, 0, &config).unwrap();
        assert_eq!(serde_json::to_string(&t1).unwrap(), serde_json::to_string(&t2).unwrap());
    }

    #[test]
    fn auc_tree_grows_and_respects_minimums() {
        // Scores separate cases from controls well in the x > 0 half only.
        let n = 80;
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut score = Vec::new();
        for i in 0..n {
            let high = i >= n / 2;
            let case = i % 2 == 0;
            x.push(if high { 1.0 } else { 0.0 });
            y.push(if case { 1.0 } else { 0.0 });
            // Good discrimination on the high side, none on the low side.
            let s = if high {
                if case {
                    0.8 + (i as f64) * 1e-3
                } else {
                    0.2 + (i as f64) * 1e-3
                }
            } else {
                0.5 + ((i * 7) % 13) as f64 * 1e-3
            };
            score.push(s);
        }
        let data = Dataset::new(vec![x], y, vec![score]).unwrap();
        let config = GrowthConfig {
            min_cases: 5,
            min_controls: 5,
            max_depth: 3,
            ..GrowthConfig::default()
        };
        let tree = grow_tree(&data, Measure::Auc, 0, &config).unwrap();
        let s = tree.nodes[0].split.as_ref().expect("root should split");
        assert_eq!(s.feature, 0);
        for node in &tree.nodes {
            assert!(node.stats.n_cases.unwrap() >= 2);
            assert!(node.stats.n_controls.unwrap() >= 2);
        }
    }
}
