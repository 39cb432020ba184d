//! Split search over every admissible (feature, cutpoint) pair of a node.
//!
//! Candidate cutpoints are midpoints between consecutive distinct feature
//! values. Individual-level targets use centered prefix sums, so a full
//! feature scan is O(m log m); the group-level AUC scan recomputes both
//! children's rank statistics in one O(m) pass per cutpoint.

use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::measures::AucCounts;
use crate::tree::{GrowthConfig, Heterogeneity, Split, SplitCriterion};

/// Fitting targets for one tree.
#[derive(Debug, Clone, Copy)]
pub(crate) enum NodeTargets<'a> {
    /// Row-indexed real-valued targets: observation losses or residuals.
    Values(&'a [f64]),
    /// Row-indexed model scores and case status for AUC trees.
    Auc {
        scores: &'a [f64],
        is_case: &'a [bool],
    },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ScanResult {
    pub split: Split,
    pub statistic: f64,
}

/// Best split among `features` for the node holding `rows` (row ids may
/// repeat under bootstrap resampling). Ties keep the lowest feature index,
/// then the smallest cutpoint.
pub(crate) fn scan_best_split(
    data: &Dataset,
    targets: NodeTargets<'_>,
    rows: &[u32],
    features: &[usize],
    config: &GrowthConfig,
) -> Option<ScanResult> {
    match targets {
        NodeTargets::Values(values) => scan_values(data, values, rows, features, config),
        NodeTargets::Auc { scores, is_case } => {
            scan_auc(data, scores, is_case, rows, features, config)
        }
    }
}

/// Draws the features examined by one split search: all of them, or a fresh
/// uniform subset of `mtry` without replacement.
pub(crate) fn sample_features(p: usize, mtry: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match mtry {
        Some(k) if k < p => {
            let mut picked = rand::seq::index::sample(rng, p, k).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..p).collect(),
    }
}

struct Best {
    result: Option<ScanResult>,
    criterion: SplitCriterion,
}

impl Best {
    fn new(criterion: SplitCriterion) -> Self {
        Best {
            result: None,
            criterion,
        }
    }

    fn consider(&mut self, statistic: f64, feature: usize, cutpoint: f64) {
        if !statistic.is_finite() {
            return;
        }
        let better = match &self.result {
            None => true,
            Some(cur) => match self.criterion {
                SplitCriterion::Pasd => statistic > cur.statistic,
                SplitCriterion::CartTo => statistic < cur.statistic,
            },
        };
        if better {
            self.result = Some(ScanResult {
                split: Split { feature, cutpoint },
                statistic,
            });
        }
    }
}

/// Midpoint between two adjacent feature values; nudged down when rounding
/// would land on the upper value, so `<=` routing stays consistent with the
/// scan position.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let cut = lo / 2.0 + hi / 2.0;
    if cut >= hi {
        lo
    } else {
        cut
    }
}

fn sorted_locals(data: &Dataset, rows: &[u32], feature: usize) -> Vec<u32> {
    let mut ord: Vec<u32> = (0..rows.len() as u32).collect();
    ord.sort_unstable_by(|&a, &b| {
        let xa = data.covariate(rows[a as usize] as usize, feature);
        let xb = data.covariate(rows[b as usize] as usize, feature);
        xa.partial_cmp(&xb).unwrap()
    });
    ord
}

fn scan_values(
    data: &Dataset,
    values: &[f64],
    rows: &[u32],
    features: &[usize],
    config: &GrowthConfig,
) -> Option<ScanResult> {
    let m = rows.len();
    let min = config.min_node_size.max(2);
    if m < 2 * min {
        return None;
    }
    let mut best = Best::new(config.criterion);

    let use_l1 = config.criterion == SplitCriterion::CartTo
        && config.heterogeneity == Heterogeneity::L1;
    if use_l1 {
        scan_values_l1(data, values, rows, features, min, &mut best);
        return best.result;
    }

    // Centering targets at the node mean keeps the sum-of-squares prefix
    // arithmetic stable regardless of the targets' absolute level.
    let node_mean = rows.iter().map(|&r| values[r as usize]).sum::<f64>() / m as f64;
    let mut pre1 = vec![0.0; m + 1];
    let mut pre2 = vec![0.0; m + 1];

    for &feature in features {
        let ord = sorted_locals(data, rows, feature);
        for (t, &lo) in ord.iter().enumerate() {
            let c = values[rows[lo as usize] as usize] - node_mean;
            pre1[t + 1] = pre1[t] + c;
            pre2[t + 1] = pre2[t] + c * c;
        }
        let (tot1, tot2) = (pre1[m], pre2[m]);

        for t in 1..m {
            let xa = data.covariate(rows[ord[t - 1] as usize] as usize, feature);
            let xb = data.covariate(rows[ord[t] as usize] as usize, feature);
            if xa == xb || t < min || m - t < min {
                continue;
            }
            let cut = midpoint(xa, xb);
            let (tf, rf) = (t as f64, (m - t) as f64);
            let mean_l = pre1[t] / tf;
            let mean_r = (tot1 - pre1[t]) / rf;
            let ss_l = (pre2[t] - tf * mean_l * mean_l).max(0.0);
            let ss_r = ((tot2 - pre2[t]) - rf * mean_r * mean_r).max(0.0);

            match config.criterion {
                SplitCriterion::Pasd => {
                    let var_l = ss_l / (tf * (tf - 1.0));
                    let var_r = ss_r / (rf * (rf - 1.0));
                    let denom = var_l + var_r;
                    if denom > 0.0 && denom.is_finite() {
                        best.consider((mean_l - mean_r).powi(2) / denom, feature, cut);
                    }
                }
                SplitCriterion::CartTo => {
                    best.consider(ss_l + ss_r, feature, cut);
                }
            }
        }
    }
    best.result
}

/// Fenwick tree over target ranks; supports absolute-deviation sums about an
/// arbitrary center in O(log m) per query.
struct Fenwick {
    count: Vec<u64>,
    sum: Vec<f64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick {
            count: vec![0; n + 1],
            sum: vec![0.0; n + 1],
        }
    }

    fn add(&mut self, mut i: usize, value: f64) {
        i += 1;
        while i < self.count.len() {
            self.count[i] += 1;
            self.sum[i] += value;
            i += i & i.wrapping_neg();
        }
    }

    /// Count and sum of inserted items with rank < i.
    fn prefix(&self, mut i: usize) -> (u64, f64) {
        let (mut c, mut s) = (0, 0.0);
        while i > 0 {
            c += self.count[i];
            s += self.sum[i];
            i -= i & i.wrapping_neg();
        }
        (c, s)
    }
}

fn abs_dev(center: f64, cnt_below: f64, sum_below: f64, cnt: f64, sum: f64) -> f64 {
    center * cnt_below - sum_below + (sum - sum_below) - center * (cnt - cnt_below)
}

fn scan_values_l1(
    data: &Dataset,
    values: &[f64],
    rows: &[u32],
    features: &[usize],
    min: usize,
    best: &mut Best,
) {
    let m = rows.len();
    let val = |lo: u32| values[rows[lo as usize] as usize];

    // Rank the node's targets once; every feature pass reuses them.
    let mut by_val: Vec<u32> = (0..m as u32).collect();
    by_val.sort_unstable_by(|&a, &b| val(a).partial_cmp(&val(b)).unwrap());
    let mut rank_of = vec![0usize; m];
    let mut vals_sorted = vec![0.0; m];
    let mut all_prefix = vec![0.0; m + 1];
    for (k, &lo) in by_val.iter().enumerate() {
        rank_of[lo as usize] = k;
        vals_sorted[k] = val(lo);
        all_prefix[k + 1] = all_prefix[k] + vals_sorted[k];
    }
    let total_sum = all_prefix[m];

    for &feature in features {
        let ord = sorted_locals(data, rows, feature);
        let mut fen = Fenwick::new(m);
        let mut sum_l = 0.0;

        for t in 1..m {
            let moved = ord[t - 1];
            fen.add(rank_of[moved as usize], val(moved));
            sum_l += val(moved);

            let xa = data.covariate(rows[moved as usize] as usize, feature);
            let xb = data.covariate(rows[ord[t] as usize] as usize, feature);
            if xa == xb || t < min || m - t < min {
                continue;
            }
            let cut = midpoint(xa, xb);
            let (tf, rf) = (t as f64, (m - t) as f64);

            let mean_l = sum_l / tf;
            let idx_l = vals_sorted.partition_point(|&v| v <= mean_l);
            let (cnt_bl, sum_bl) = fen.prefix(idx_l);
            let l1_l = abs_dev(mean_l, cnt_bl as f64, sum_bl, tf, sum_l);

            let sum_r = total_sum - sum_l;
            let mean_r = sum_r / rf;
            let idx_r = vals_sorted.partition_point(|&v| v <= mean_r);
            let (cnt_bl_r, sum_bl_r) = fen.prefix(idx_r);
            let cnt_br = idx_r as f64 - cnt_bl_r as f64;
            let sum_br = all_prefix[idx_r] - sum_bl_r;
            let l1_r = abs_dev(mean_r, cnt_br, sum_br, rf, sum_r);

            best.consider(l1_l + l1_r, feature, cut);
        }
    }
}


fn scan_auc(
    data: &Dataset,
    scores: &[f64],
    is_case: &[bool],
    rows: &[u32],
    features: &[usize],
    config: &GrowthConfig,
) -> Option<ScanResult> {
    // Bootstrap samples repeat rows; every statistic here is a weighted
    // count, so collapsing to distinct rows with multiplicities shrinks the
    // quadratic cutpoint scan without changing any result.
    let mut sorted_rows = rows.to_vec();
    sorted_rows.sort_unstable();
    let mut distinct: Vec<u32> = Vec::with_capacity(sorted_rows.len());
    let mut weight: Vec<u64> = Vec::new();
    for &r in &sorted_rows {
        if distinct.last() == Some(&r) {
            *weight.last_mut().unwrap() += 1;
        } else {
            distinct.push(r);
            weight.push(1);
        }
    }
    let m = distinct.len();
    let case = |lo: u32| is_case[distinct[lo as usize] as usize];
    let score = |lo: u32| scores[distinct[lo as usize] as usize];
    let (min_ca, min_co) = (config.min_cases.max(2) as u64, config.min_controls.max(2) as u64);

    let n_cases: u64 = (0..m).filter(|&lo| case(lo as u32)).map(|lo| weight[lo]).sum();
    let n_controls: u64 = rows.len() as u64 - n_cases;
    if n_cases < 2 * min_ca || n_controls < 2 * min_co {
        return None;
    }

    // Score ordering and tie groups are shared by every feature pass.
    let mut score_order: Vec<u32> = (0..m as u32).collect();
    score_order.sort_unstable_by(|&a, &b| score(a).partial_cmp(&score(b)).unwrap());
    let mut group_end: Vec<u32> = Vec::new();
    for k in 1..=m {
        if k == m || score(score_order[k]) != score(score_order[k - 1]) {
            group_end.push(k as u32);
        }
    }
    // Flat lookups in score order keep the per-cutpoint pass tight.
    let case_at: Vec<u8> = score_order.iter().map(|&lo| u8::from(case(lo))).collect();
    let weight_at: Vec<u64> = score_order
        .iter()
        .map(|&lo| weight[lo as usize])
        .collect();
    let mut score_pos = vec![0u32; m];
    for (k, &lo) in score_order.iter().enumerate() {
        score_pos[lo as usize] = k as u32;
    }

    let mut best = Best::new(SplitCriterion::Pasd);
    let mut left_at = vec![0u8; m];

    for &feature in features {
        let ord = sorted_locals(data, &distinct, feature);
        left_at.iter_mut().for_each(|s| *s = 0);
        let (mut left_cases, mut left_controls) = (0u64, 0u64);

        for t in 1..m {
            let moved = ord[t - 1];
            left_at[score_pos[moved as usize] as usize] = 1;
            if case(moved) {
                left_cases += weight[moved as usize];
            } else {
                left_controls += weight[moved as usize];
            }

            let xa = data.covariate(distinct[moved as usize] as usize, feature);
            let xb = data.covariate(distinct[ord[t] as usize] as usize, feature);
            if xa == xb {
                continue;
            }
            let (right_cases, right_controls) =
                (n_cases - left_cases, n_controls - left_controls);
            if left_cases < min_ca
                || right_cases < min_ca
                || left_controls < min_co
                || right_controls < min_co
            {
                continue;
            }

            // One ascending-score pass accumulates both children's
            // concordance counts; ties contribute to neither direction.
            let mut acc = [AucAcc::default(), AucAcc::default()];
            let totals = [
                (left_cases, left_controls),
                (right_cases, right_controls),
            ];
            let mut gs = 0usize;
            for &ge in &group_end {
                let ge = ge as usize;
                if ge - gs == 1 {
                    // Single distinct score: only one side changes and the
                    // tie-group bookkeeping collapses.
                    let s = 1 - left_at[gs] as usize;
                    let w = weight_at[gs];
                    let a = &mut acc[s];
                    if case_at[gs] == 1 {
                        let c = a.seen_controls;
                        a.u += w * c;
                        a.sum_c_sq += w * c * c;
                        a.seen_cases += w;
                    } else {
                        let d = totals[s].0 - a.seen_cases;
                        a.sum_d_sq += w * d * d;
                        a.seen_controls += w;
                    }
                    gs = ge;
                    continue;
                }
                let mut in_group = [(0u64, 0u64); 2];
                for k in gs..ge {
                    let s = 1 - left_at[k] as usize;
                    let (w, is_case) = (weight_at[k], case_at[k] as u64);
                    in_group[s].0 += w * is_case;
                    in_group[s].1 += w * (1 - is_case);
                }
                gs = ge;
                for s in 0..2 {
                    let (gc, gk) = in_group[s];
                    let a = &mut acc[s];
                    let c = a.seen_controls;
                    a.u += gc * c;
                    a.sum_c_sq += gc * c * c;
                    let d = totals[s].0 - (a.seen_cases + gc);
                    a.sum_d_sq += gk * d * d;
                    a.seen_cases += gc;
                    a.seen_controls += gk;
                }
            }

            let stats_l = AucCounts {
                n_cases: left_cases as usize,
                n_controls: left_controls as usize,
                u: acc[0].u,
                sum_c_sq: acc[0].sum_c_sq,
                sum_d_sq: acc[0].sum_d_sq,
            }
            .stats();
            let stats_r = AucCounts {
                n_cases: right_cases as usize,
                n_controls: right_controls as usize,
                u: acc[1].u,
                sum_c_sq: acc[1].sum_c_sq,
                sum_d_sq: acc[1].sum_d_sq,
            }
            .stats();
            let (sl, sr) = match (stats_l, stats_r) {
                (Ok(a), Ok(b)) => (a, b),
                _ => continue,
            };
            let denom = sl.variance + sr.variance;
            if denom > 0.0 && denom.is_finite() {
                best.consider(
                    (sl.estimate - sr.estimate).powi(2) / denom,
                    feature,
                    midpoint(xa, xb),
                );
            }
        }
    }
    best.result
}

#[derive(Debug, Default, Clone, Copy)]
struct AucAcc {
    u: u64,
    sum_c_sq: u64,
    sum_d_sq: u64,
    seen_cases: u64,
    seen_controls: u64,
}
