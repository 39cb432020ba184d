//! Pruning sequences and cross-validated subtree selection.
//!
//! Trees grown to their admissibility limits are pruned by iteratively
//! removing the branch whose mean split statistic (or error-reduction rate,
//! for loss-based trees) is weakest, yielding a nested sequence indexed by
//! increasing penalty values. The final subtree is picked by V-fold
//! cross-validation, either minimizing held-out prediction error or
//! maximizing held-out penalized split complexity.

use std::collections::HashSet;

use crate::data::Dataset;
use crate::error::Error;
use crate::exec;
use crate::measures::{self, Level, Measure};
use crate::rng;
use crate::tree::{grow_tree_on, GrowthConfig, SplitCriterion, Tree};
use crate::Result;

/// Nested pruning sequence over one tree. Entry `k` is the subtree obtained
/// by collapsing `collapsed[k]` (a cumulative set of node ids of the original
/// tree) and is optimal for penalties in `[alphas[k], alphas[k+1])`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PrunedSequence {
    pub alphas: Vec<f64>,
    pub collapsed: Vec<Vec<usize>>,
}

impl PrunedSequence {
    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// Materializes subtree `k`.
    pub fn subtree(&self, tree: &Tree, k: usize) -> Tree {
        tree.pruned(&self.collapsed[k])
    }

    /// Index of the subtree optimal at penalty `alpha`: the last entry whose
    /// threshold does not exceed it.
    pub fn index_for_alpha(&self, alpha: f64) -> usize {
        let mut k = 0;
        for (i, &a) in self.alphas.iter().enumerate() {
            if a <= alpha {
                k = i;
            }
        }
        k
    }
}

/// View of a tree with some internal nodes collapsed into leaves.
struct View<'a> {
    tree: &'a Tree,
    collapsed: &'a HashSet<usize>,
}

impl View<'_> {
    fn is_leaf(&self, id: usize) -> bool {
        self.collapsed.contains(&id) || self.tree.nodes[id].is_leaf()
    }

    fn internal_nodes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            if self.is_leaf(id) {
                continue;
            }
            out.push(id);
            let s = self.tree.nodes[id].split.as_ref().unwrap();
            stack.push(s.right);
            stack.push(s.left);
        }
        out
    }

    /// Per-branch accumulation: `f(id) -> value` over internal nodes, summed
    /// bottom-up. Returns (sum, internal-count) for each internal node id.
    fn branch_sums(&self, f: &dyn Fn(usize) -> f64) -> Vec<(usize, f64, usize)> {
        let mut out = Vec::new();
        self.branch_rec(0, f, &mut out);
        out
    }

    fn branch_rec(
        &self,
        id: usize,
        f: &dyn Fn(usize) -> f64,
        out: &mut Vec<(usize, f64, usize)>,
    ) -> (f64, usize) {
        if self.is_leaf(id) {
            return (0.0, 0);
        }
        let s = self.tree.nodes[id].split.as_ref().unwrap();
        let (ls, lc) = self.branch_rec(s.left, f, out);
        let (rs, rc) = self.branch_rec(s.right, f, out);
        let sum = f(id) + ls + rs;
        let count = 1 + lc + rc;
        out.push((id, sum, count));
        (sum, count)
    }

    /// Training error and leaf count of each internal node's branch.
    fn branch_leaf_errors(&self) -> Vec<(usize, f64, usize)> {
        let mut out = Vec::new();
        self.leaf_rec(0, &mut out);
        out
    }

    fn leaf_rec(&self, id: usize, out: &mut Vec<(usize, f64, usize)>) -> (f64, usize) {
        if self.is_leaf(id) {
            let err = self.tree.nodes[id]
                .node_error
                .expect("loss-based pruning requires node errors");
            return (err, 1);
        }
        let s = self.tree.nodes[id].split.as_ref().unwrap();
        let (le, ln) = self.leaf_rec(s.left, out);
        let (re, rn) = self.leaf_rec(s.right, out);
        out.push((id, le + re, ln + rn));
        (le + re, ln + rn)
    }
}

/// Penalized split complexity of a subtree: the sum of split statistics over
/// its internal nodes minus `alpha` per internal node.
pub fn split_complexity(tree: &Tree, collapsed: &[usize], alpha: f64) -> f64 {
    let set: HashSet<usize> = collapsed.iter().copied().collect();
    let view = View {
        tree,
        collapsed: &set,
    };
    view.internal_nodes()
        .iter()
        .map(|&id| tree.nodes[id].split.as_ref().unwrap().statistic - alpha)
        .sum()
}

/// Mean split statistic over the branch rooted at `node`; infinite for a
/// terminal node, so leaves are never the weakest link.
pub fn g_value(tree: &Tree, node: usize) -> f64 {
    let empty = HashSet::new();
    let view = View {
        tree,
        collapsed: &empty,
    };
    if view.is_leaf(node) {
        return f64::INFINITY;
    }
    let sums = view.branch_sums(&|id| tree.nodes[id].split.as_ref().unwrap().statistic);
    let (_, sum, count) = *sums.iter().find(|(id, _, _)| *id == node).unwrap();
    sum / count as f64
}

/// Weakest-link pruning on branch-mean split statistics. The returned alphas
/// are non-decreasing (strictly increasing except for exact ties, which are
/// merged into one step) and the last subtree is root-only.
pub fn weakest_link_sequence(tree: &Tree) -> PrunedSequence {
    prune_iteratively(tree, |view| {
        view.branch_sums(&|id| tree.nodes[id].split.as_ref().unwrap().statistic)
            .into_iter()
            .map(|(id, sum, count)| (id, sum / count as f64))
            .collect()
    })
}

/// Cost-complexity pruning on training-error reduction per removed leaf.
/// Requires an individual-level tree (node errors must be present).
pub fn cost_complexity_sequence(tree: &Tree) -> Result<PrunedSequence> {
    if tree.measure.level() == Level::Group {
        return Err(Error::MeasureMismatch(
            "cost-complexity pruning needs per-observation losses".into(),
        ));
    }
    Ok(prune_iteratively(tree, |view| {
        view.branch_leaf_errors()
            .into_iter()
            .map(|(id, leaf_err, n_leaves)| {
                let own = tree.nodes[id].node_error.expect("individual-level tree");
                (id, (own - leaf_err) / (n_leaves as f64 - 1.0))
            })
            .collect()
    }))
}

fn prune_iteratively<F>(tree: &Tree, g_fn: F) -> PrunedSequence
where
    F: Fn(&View) -> Vec<(usize, f64)>,
{
    let mut collapsed_set: HashSet<usize> = HashSet::new();
    let mut alphas = vec![0.0];
    let mut collapsed = vec![Vec::new()];
    let parents = tree.parent_map();

    loop {
        let view = View {
            tree,
            collapsed: &collapsed_set,
        };
        let gs = g_fn(&view);
        if gs.is_empty() {
            break;
        }
        let g_min = gs
            .iter()
            .map(|&(_, g)| g)
            .fold(f64::INFINITY, f64::min);
        let minimizers: HashSet<usize> = gs
            .iter()
            .filter(|&&(_, g)| g == g_min)
            .map(|&(id, _)| id)
            .collect();
        // Collapse only the topmost minimizers; descendants vanish with them.
        for &id in &minimizers {
            let mut anc = parents[id];
            let mut covered = false;
            while let Some(p) = anc {
                if minimizers.contains(&p) {
                    covered = true;
                    break;
                }
                anc = parents[p];
            }
            if !covered {
                collapsed_set.insert(id);
            }
        }

        let last = *alphas.last().unwrap();
        let mut list: Vec<usize> = collapsed_set.iter().copied().collect();
        list.sort_unstable();
        if g_min > last {
            alphas.push(g_min);
            collapsed.push(list);
        } else {
            // An exact tie (or a harmful split with negative reduction):
            // the smaller tree already wins at the current penalty.
            *collapsed.last_mut().unwrap() = list;
        }
    }
    PrunedSequence { alphas, collapsed }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Minimize V-fold held-out squared prediction error of the losses.
    CvPredictionError,
    /// Maximize V-fold held-out penalized split complexity.
    CvSplitComplexity,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SelectionConfig {
    pub folds: usize,
    /// Penalty per internal node for the split-complexity rule.
    pub alpha_prime: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            folds: 10,
            alpha_prime: 4.0,
            seed: 0,
        }
    }
}

/// Tree-fitting methods exposed by the crate: loss-dispersion growth with
/// error-based selection, or standardized-difference growth with either
/// selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeMethod {
    CartTo,
    Pasd1,
    Pasd2,
}

impl TreeMethod {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cart-to" | "cart_to" => Ok(TreeMethod::CartTo),
            "pasd1" | "pasd-1" => Ok(TreeMethod::Pasd1),
            "pasd2" | "pasd-2" => Ok(TreeMethod::Pasd2),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

/// Grows, prunes, and selects a final tree with the given method.
pub fn fit_tree(
    data: &Dataset,
    measure: Measure,
    model_index: usize,
    method: TreeMethod,
    growth: &GrowthConfig,
    selection: &SelectionConfig,
) -> Result<Tree> {
    let mut growth = growth.clone();
    growth.criterion = match method {
        TreeMethod::CartTo => SplitCriterion::CartTo,
        TreeMethod::Pasd1 | TreeMethod::Pasd2 => SplitCriterion::Pasd,
    };
    match method {
        TreeMethod::CartTo | TreeMethod::Pasd1 => {
            select_final_cv_error(data, measure, model_index, &growth, selection)
        }
        TreeMethod::Pasd2 => {
            select_final_cv_split_complexity(data, measure, model_index, &growth, selection)
        }
    }
}

fn sequence_for(tree: &Tree) -> Result<PrunedSequence> {
    match tree.config.criterion {
        SplitCriterion::Pasd => Ok(weakest_link_sequence(tree)),
        SplitCriterion::CartTo => cost_complexity_sequence(tree),
    }
}

fn assign_folds(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if folds < 2 || folds > n {
        return Err(Error::InvalidConfig(format!(
            "fold count {folds} out of range 2..={n}"
        )));
    }
    let mut rng = rng::stream_rng(seed, 0xF01D);
    let mut order: Vec<u32> = (0..n as u32).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let base = n / folds;
    let extra = n % folds;
    let mut out = Vec::with_capacity(folds);
    let mut at = 0;
    for v in 0..folds {
        let take = base + usize::from(v < extra);
        out.push(order[at..at + take].to_vec());
        at += take;
    }
    Ok(out)
}

/// Geometric midpoint of consecutive penalty thresholds, used to look up the
/// matching subtree inside each fold's own sequence.
fn eval_alpha(alphas: &[f64], k: usize) -> f64 {
    if k + 1 < alphas.len() {
        (alphas[k] * alphas[k + 1]).sqrt()
    } else {
        f64::INFINITY
    }
}

/// V-fold selection by held-out prediction error of the losses. Applies to
/// individual-level measures only.
pub fn select_final_cv_error(
    data: &Dataset,
    measure: Measure,
    model_index: usize,
    growth: &GrowthConfig,
    selection: &SelectionConfig,
) -> Result<Tree> {
    if measure.level() == Level::Group {
        return Err(Error::GroupLevelMeasure);
    }
    let tree0 = grow_tree_on(
        data,
        measure,
        model_index,
        growth,
        &(0..data.n_rows() as u32).collect::<Vec<_>>(),
    )?;
    let seq = sequence_for(&tree0)?;
    if seq.len() == 1 {
        return Ok(tree0.pruned(&seq.collapsed[0]));
    }

    let losses = data.losses(measure, model_index)?;
    let folds = assign_folds(data.n_rows(), selection.folds, selection.seed)?;
    let fold_errors: Vec<Result<Vec<f64>>> = exec::par_map_indexed(folds.len(), |v| {
        let test = &folds[v];
        let test_set: HashSet<u32> = test.iter().copied().collect();
        let train: Vec<u32> = (0..data.n_rows() as u32)
            .filter(|r| !test_set.contains(r))
            .collect();
        let mut fold_growth = growth.clone();
        fold_growth.seed = rng::derive_seed2(growth.seed, 0xCF, v as u64);
        let tree_v = grow_tree_on(data, measure, model_index, &fold_growth, &train)?;
        let seq_v = sequence_for(&tree_v)?;

        let mut errs = Vec::with_capacity(seq.len());
        for k in 0..seq.len() {
            let j = seq_v.index_for_alpha(eval_alpha(&seq.alphas, k));
            let collapsed: HashSet<usize> = seq_v.collapsed[j].iter().copied().collect();
            let mut sum = 0.0;
            for &r in test {
                let leaf = tree_v.leaf_for_row_collapsed(data, r as usize, &collapsed);
                let pred = tree_v.nodes[leaf].stats.estimate;
                sum += (losses[r as usize] - pred).powi(2);
            }
            errs.push(sum / test.len() as f64);
        }
        Ok(errs)
    });

    let mut totals = vec![0.0; seq.len()];
    for errs in fold_errors {
        for (t, e) in totals.iter_mut().zip(errs?) {
            *t += e;
        }
    }
    // Ties go to the larger index, i.e. the smaller tree.
    let mut best_k = 0;
    for (k, &t) in totals.iter().enumerate() {
        if t <= totals[best_k] {
            best_k = k;
        }
    }
    Ok(tree0.pruned(&seq.collapsed[best_k]))
}

/// Precomputed state for split-complexity selection: the full-data tree and
/// sequence plus per-fold held-out node statistics. The penalty enters only
/// at [`Pasd2Selector::select`], so one precomputation serves a whole grid of
/// penalty values.
pub struct Pasd2Selector {
    tree0: Tree,
    seq: PrunedSequence,
    /// fold_scores[v][k] = (held-out statistic sum, internal node count).
    fold_scores: Vec<Vec<(f64, usize)>>,
}

impl Pasd2Selector {
    pub fn new(
        data: &Dataset,
        measure: Measure,
        model_index: usize,
        growth: &GrowthConfig,
        selection: &SelectionConfig,
    ) -> Result<Self> {
        if growth.criterion != SplitCriterion::Pasd {
            return Err(Error::InvalidConfig(
                "split-complexity selection requires the pasd criterion".into(),
            ));
        }
        let tree0 = grow_tree_on(
            data,
            measure,
            model_index,
            growth,
            &(0..data.n_rows() as u32).collect::<Vec<_>>(),
        )?;
        let seq = sequence_for(&tree0)?;

        let folds = assign_folds(data.n_rows(), selection.folds, selection.seed)?;
        let fold_scores: Vec<Result<Vec<(f64, usize)>>> =
            exec::par_map_indexed(folds.len(), |v| {
                let test = &folds[v];
                let test_set: HashSet<u32> = test.iter().copied().collect();
                let train: Vec<u32> = (0..data.n_rows() as u32)
                    .filter(|r| !test_set.contains(r))
                    .collect();
                let mut fold_growth = growth.clone();
                fold_growth.seed = rng::derive_seed2(growth.seed, 0xCF, v as u64);
                let tree_v = grow_tree_on(data, measure, model_index, &fold_growth, &train)?;
                let seq_v = sequence_for(&tree_v)?;

                let heldout = heldout_statistics(&tree_v, data, measure, model_index, test)?;

                let mut scores = Vec::with_capacity(seq.len());
                for k in 0..seq.len() {
                    let j = seq_v.index_for_alpha(eval_alpha(&seq.alphas, k));
                    let collapsed: HashSet<usize> =
                        seq_v.collapsed[j].iter().copied().collect();
                    let view = View {
                        tree: &tree_v,
                        collapsed: &collapsed,
                    };
                    let internal = view.internal_nodes();
                    let sum: f64 = internal.iter().map(|&id| heldout[id]).sum();
                    scores.push((sum, internal.len()));
                }
                Ok(scores)
            });

        let fold_scores = fold_scores.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Pasd2Selector {
            tree0,
            seq,
            fold_scores,
        })
    }

    pub fn tree0(&self) -> &Tree {
        &self.tree0
    }

    /// Final subtree maximizing mean held-out split complexity at the given
    /// per-node penalty; ties pick the smaller tree.
    pub fn select(&self, alpha_prime: f64) -> Tree {
        let v = self.fold_scores.len() as f64;
        let mut best_k = 0;
        let mut best_val = f64::NEG_INFINITY;
        for k in 0..self.seq.len() {
            let total: f64 = self
                .fold_scores
                .iter()
                .map(|scores| scores[k].0 - alpha_prime * scores[k].1 as f64)
                .sum();
            let val = total / v;
            if val >= best_val {
                best_val = val;
                best_k = k;
            }
        }
        self.tree0.pruned(&self.seq.collapsed[best_k])
    }
}

/// Recomputes each internal node's split statistic from held-out rows routed
/// through the tree. The growth minimums do not apply here: the splits are
/// fixed, so a node contributes whenever both children have enough held-out
/// rows for the measure itself (and a positive finite variance sum); anything
/// smaller contributes 0.
fn heldout_statistics(
    tree: &Tree,
    data: &Dataset,
    measure: Measure,
    model_index: usize,
    rows: &[u32],
) -> Result<Vec<f64>> {
    let losses = match measure.level() {
        Level::Individual => Some(data.losses(measure, model_index)?),
        Level::Group => None,
    };
    let is_case = match measure.level() {
        Level::Group => Some(data.binary_outcomes()?),
        Level::Individual => None,
    };
    let per_node = tree.route_rows(data, rows);
    let mut out = vec![0.0; tree.nodes.len()];

    for (id, node) in tree.nodes.iter().enumerate() {
        let Some(split) = &node.split else { continue };
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for &r in &per_node[id] {
            if data.covariate(r as usize, split.feature) <= split.cutpoint {
                left.push(r);
            } else {
                right.push(r);
            }
        }

        let stats = |subset: &[u32]| -> Option<measures::SubgroupStats> {
            match measure.level() {
                Level::Individual => {
                    if subset.len() < 2 {
                        return None;
                    }
                    let sample: Vec<f64> = subset
                        .iter()
                        .map(|&r| losses.as_ref().unwrap()[r as usize])
                        .collect();
                    measures::loss_subgroup_stats(&sample).ok()
                }
                Level::Group => {
                    let flags = is_case.as_ref().unwrap();
                    let cases = subset.iter().filter(|&&r| flags[r as usize]).count();
                    if cases < 2 || subset.len() - cases < 2 {
                        return None;
                    }
                    let s: Vec<f64> = subset
                        .iter()
                        .map(|&r| data.prediction(r as usize, model_index))
                        .collect();
                    let c: Vec<bool> = subset.iter().map(|&r| flags[r as usize]).collect();
                    measures::auc_subgroup_stats(&s, &c).ok()
                }
            }
        };

        if let (Some(l), Some(r)) = (stats(&left), stats(&right)) {
            let denom = l.variance + r.variance;
            if denom > 0.0 && denom.is_finite() {
                out[id] = (l.estimate - r.estimate).powi(2) / denom;
            }
        }
    }
    Ok(out)
}

/// V-fold selection by held-out penalized split complexity.
pub fn select_final_cv_split_complexity(
    data: &Dataset,
    measure: Measure,
    model_index: usize,
    growth: &GrowthConfig,
    selection: &SelectionConfig,
) -> Result<Tree> {
    let selector = Pasd2Selector::new(data, measure, model_index, growth, selection)?;
    Ok(selector.select(selection.alpha_prime))
}
