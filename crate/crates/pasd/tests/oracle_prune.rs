//! Pruning oracle: enumerate every pruned subtree of small fitted trees and
//! check that each sequence entry is optimal for its penalty range, that the
//! thresholds increase, and that the subtrees are nested.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use pasd::data::Dataset;
use pasd::measures::Measure;
use pasd::prune::{
    cost_complexity_sequence, split_complexity, weakest_link_sequence, PrunedSequence,
};
use pasd::tree::{grow_tree, GrowthConfig, Heterogeneity, SplitCriterion, Tree};

/// Every pruned subtree of `node`, as (split statistic sum, internal count,
/// leaf error sum, leaf count).
fn enumerate_subtrees(tree: &Tree, node: usize) -> Vec<(f64, usize, f64, usize)> {
    let n = &tree.nodes[node];
    let own_error = n.node_error.unwrap_or(f64::NAN);
    match &n.split {
        None => vec![(0.0, 0, own_error, 1)],
        Some(s) => {
            let mut out = vec![(0.0, 0, own_error, 1)];
            for (ls, li, le, ll) in enumerate_subtrees(tree, s.left) {
                for (rs, ri, re, rl) in enumerate_subtrees(tree, s.right) {
                    out.push((s.statistic + ls + rs, 1 + li + ri, le + re, ll + rl));
                }
            }
            out
        }
    }
}

/// Alphas probing strictly inside each optimality interval, plus one below
/// and one above the sequence's range.
fn probe_alphas(seq: &PrunedSequence) -> Vec<f64> {
    let mut probes = vec![seq.alphas[0] - 1.0];
    for w in seq.alphas.windows(2) {
        probes.push(w[0] / 2.0 + w[1] / 2.0);
    }
    probes.push(seq.alphas.last().unwrap() + 1.0);
    probes
}

fn grow_random_tree(seed: u64, criterion: SplitCriterion) -> (Dataset, Tree) {
    let mut rng = pasd::rng::stream_rng(0x9121E, seed);
    let n = rng.gen_range(40..=70);
    let p = 2;
    let x: Vec<Vec<f64>> = (0..p)
        .map(|_| (0..n).map(|_| rng.gen::<f64>()).collect())
        .collect();
    // A step signal on x0 gives the losses real structure to split on.
    let outcome: Vec<f64> = (0..n)
        .map(|i| {
            let step = if x[0][i] > 0.5 { 1.5 } else { 0.0 };
            let e: f64 = StandardNormal.sample(&mut rng);
            step + 0.8 * e
        })
        .collect();
    let preds = vec![vec![0.0; n]];
    let data = Dataset::new(x, outcome, preds).unwrap();
    let config = GrowthConfig {
        criterion,
        heterogeneity: Heterogeneity::L2,
        max_depth: 3,
        min_node_size: 5,
        min_cases: 2,
        min_controls: 2,
        mtry: None,
        seed: 0,
    };
    let tree = grow_tree(&data, Measure::SquaredError, 0, &config).unwrap();
    (data, tree)
}

fn assert_nested_and_increasing(tree: &Tree, seq: &PrunedSequence, seed: u64) {
    assert!(!seq.is_empty());
    assert_eq!(seq.alphas[0], 0.0);
    assert!(seq.collapsed[0].is_empty(), "seed {seed}");
    for w in seq.alphas.windows(2) {
        assert!(w[0] < w[1], "thresholds not increasing (seed {seed})");
    }
    for w in seq.collapsed.windows(2) {
        let prev: std::collections::HashSet<usize> = w[0].iter().copied().collect();
        assert!(
            w[1].iter().filter(|id| !prev.contains(id)).count() > 0 || w[0].len() == w[1].len(),
            "no progress between steps (seed {seed})"
        );
        // Nestedness: every leaf of the later subtree is a leaf of an
        // ancestor-or-self collapse in the earlier one, which reduces to the
        // earlier collapsed set having no node outside the later subtree.
        let later = seq.subtree(tree, seq.collapsed.iter().position(|c| c == &w[1]).unwrap());
        assert!(later.n_internal() <= seq.subtree(tree, seq.collapsed.iter().position(|c| c == &w[0]).unwrap()).n_internal(),
            "subtree grew along the sequence (seed {seed})");
    }
    let last = seq.subtree(tree, seq.len() - 1);
    assert_eq!(last.n_internal(), 0, "last subtree not root-only (seed {seed})");
}

#[test]
fn split_complexity_sequence_entries_are_optimal_for_their_interval() {
    let mut nontrivial = 0;
    for seed in 0..40 {
        let (_, tree) = grow_random_tree(seed, SplitCriterion::Pasd);
        if tree.n_internal() > 10 {
            continue;
        }
        if tree.n_internal() >= 3 {
            nontrivial += 1;
        }
        let seq = weakest_link_sequence(&tree);
        assert_nested_and_increasing(&tree, &seq, seed);

        let all = enumerate_subtrees(&tree, 0);
        for alpha in probe_alphas(&seq) {
            let best = all
                .iter()
                .map(|&(stat_sum, internal, _, _)| stat_sum - alpha * internal as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            let k = seq.index_for_alpha(alpha);
            let achieved = split_complexity(&tree, &seq.collapsed[k], alpha);
            let tol = 1e-9 * best.abs().max(1.0);
            assert!(
                achieved >= best - tol,
                "subtree {k} at alpha {alpha} scores {achieved}, best {best} (seed {seed})"
            );
        }
    }
    assert!(nontrivial >= 10, "too few trees with enough structure");
}

#[test]
fn cost_complexity_sequence_entries_are_optimal_for_their_interval() {
    let mut nontrivial = 0;
    for seed in 0..40 {
        let (_, tree) = grow_random_tree(seed, SplitCriterion::CartTo);
        if tree.n_internal() > 10 {
            continue;
        }
        if tree.n_internal() >= 3 {
            nontrivial += 1;
        }
        let seq = cost_complexity_sequence(&tree).unwrap();
        assert_nested_and_increasing(&tree, &seq, seed);

        let all = enumerate_subtrees(&tree, 0);
        for alpha in probe_alphas(&seq) {
            let best = all
                .iter()
                .map(|&(_, _, risk, leaves)| risk + alpha * leaves as f64)
                .fold(f64::INFINITY, f64::min);
            let k = seq.index_for_alpha(alpha);
            let pruned = seq.subtree(&tree, k);
            let achieved: f64 = pruned
                .nodes
                .iter()
                .filter(|n| n.is_leaf())
                .map(|n| n.node_error.unwrap())
                .sum::<f64>()
                + alpha * pruned.n_leaves() as f64;
            let tol = 1e-9 * best.abs().max(1.0);
            assert!(
                achieved <= best + tol,
                "subtree {k} at alpha {alpha} costs {achieved}, best {best} (seed {seed})"
            );
        }
    }
    assert!(nontrivial >= 10, "too few trees with enough structure");
}

#[test]
fn threshold_boundary_picks_the_smaller_tree() {
    for seed in 0..40 {
        let (_, tree) = grow_random_tree(seed, SplitCriterion::Pasd);
        let seq = weakest_link_sequence(&tree);
        for (k, &alpha) in seq.alphas.iter().enumerate() {
            assert_eq!(seq.index_for_alpha(alpha), k, "seed {seed}");
        }
        assert_eq!(seq.index_for_alpha(f64::INFINITY), seq.len() - 1);
    }
}

#[test]
fn group_level_trees_reject_cost_complexity() {
    let mut rng = pasd::rng::stream_rng(0x9122E, 7);
    let n = 40;
    let x: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..n).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let outcome: Vec<f64> = (0..n).map(|i| f64::from(i % 2 == 0)).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let data = Dataset::new(x, outcome, vec![scores]).unwrap();
    let config = GrowthConfig {
        criterion: SplitCriterion::Pasd,
        max_depth: 2,
        ..GrowthConfig::fully_grown()
    };
    let tree = grow_tree(&data, Measure::Auc, 0, &config).unwrap();
    assert!(cost_complexity_sequence(&tree).is_err());
    let seq = weakest_link_sequence(&tree);
    assert_eq!(seq.subtree(&tree, seq.len() - 1).n_internal(), 0);
}
