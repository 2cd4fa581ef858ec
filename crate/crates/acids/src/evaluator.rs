//! Label-aware scoring of clusterings.
//!
//! The evaluator is the only principal allowed to unseal dataset labels.
//! Accuracy uses the cluster-to-class bijection that maximizes total
//! matches (optimal bipartite assignment); a majority-vote mapping is
//! available for comparison.

use crate::datagen::Dataset;
use crate::encoder::{HeadKind, Mode, Model};
use crate::error::{Error, Principal, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How clusters are mapped onto classes for accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingRule {
    /// Optimal bipartite assignment on the contingency matrix.
    Hungarian,
    /// Each cluster votes for its most frequent class (not a bijection).
    MajorityVote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    /// Matched accuracy in [0, 1].
    pub accuracy: f64,
    /// NMI between assignments and class labels.
    pub nmi_class: f64,
    /// NMI between assignments and domain ids (multi-domain runs only).
    pub nmi_domain: Option<f64>,
    /// Recall per true class under the matching.
    pub per_class_recall: Vec<f64>,
    /// Cluster-to-class matching (None for clusters left unmatched).
    pub matching: Vec<Option<usize>>,
    /// Contingency counts, clusters x classes.
    pub confusion: Vec<Vec<usize>>,
    pub n_samples: usize,
}

/// Optimal-assignment clustering accuracy plus derived statistics.
///
/// `assignments` are cluster ids in `[0, n_clusters)`; `labels` are class
/// ids. Requires at least as many clusters as classes.
pub fn hungarian_accuracy(
    assignments: &[usize],
    labels: &[i32],
    n_clusters: usize,
) -> Result<ClusterMetrics> {
    matched_accuracy(assignments, labels, n_clusters, MatchingRule::Hungarian)
}

/// Accuracy under a selectable cluster-to-class mapping rule.
pub fn matched_accuracy(
    assignments: &[usize],
    labels: &[i32],
    n_clusters: usize,
    rule: MatchingRule,
) -> Result<ClusterMetrics> {
    if assignments.is_empty() || labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    if assignments.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: (assignments.len(), 1),
            got: (labels.len(), 1),
        });
    }
    let n_classes = {
        let mut max = 0i32;
        for &l in labels {
            if l < 0 {
                return Err(Error::LabelOutOfRange {
                    label: l as i64,
                    bound: 0,
                });
            }
            max = max.max(l);
        }
        max as usize + 1
    };
    if let Some(&a) = assignments.iter().find(|&&a| a >= n_clusters) {
        return Err(Error::LabelOutOfRange {
            label: a as i64,
            bound: n_clusters,
        });
    }
    if n_clusters < n_classes {
        return Err(Error::InvalidConfig(format!(
            "need n_clusters ({n_clusters}) >= n_classes ({n_classes})"
        )));
    }

    let mut counts = vec![vec![0usize; n_classes]; n_clusters];
    for (&a, &l) in assignments.iter().zip(labels.iter()) {
        counts[a][l as usize] += 1;
    }

    let matching: Vec<Option<usize>> = match rule {
        MatchingRule::Hungarian => {
            // Pad to square and minimize negated counts.
            let k = n_clusters.max(n_classes);
            let mut cost = vec![vec![0i64; k]; k];
            for (r, row) in counts.iter().enumerate() {
                for (c, &cnt) in row.iter().enumerate() {
                    cost[r][c] = -(cnt as i64);
                }
            }
            let row_of_col = assignment_min_cost(&cost);
            let mut matching = vec![None; n_clusters];
            for (col, &row) in row_of_col.iter().enumerate() {
                if col < n_classes && row < n_clusters {
                    matching[row] = Some(col);
                }
            }
            matching
        }
        MatchingRule::MajorityVote => counts
            .iter()
            .map(|row| {
                let best = row.iter().enumerate().max_by_key(|&(_, &c)| c).unwrap();
                if *best.1 > 0 {
                    Some(best.0)
                } else {
                    None
                }
            })
            .collect(),
    };

    let n = assignments.len();
    let matched: usize = matching
        .iter()
        .enumerate()
        .filter_map(|(cluster, class)| class.map(|c| counts[cluster][c]))
        .sum();
    let accuracy = matched as f64 / n as f64;

    let mut class_totals = vec![0usize; n_classes];
    for &l in labels {
        class_totals[l as usize] += 1;
    }
    let mut per_class_recall = vec![0.0; n_classes];
    if rule == MatchingRule::Hungarian {
        for (cluster, class) in matching.iter().enumerate() {
            if let Some(c) = class {
                if class_totals[*c] > 0 {
                    per_class_recall[*c] = counts[cluster][*c] as f64 / class_totals[*c] as f64;
                }
            }
        }
    } else {
        // Majority vote may map several clusters to one class.
        for (cluster, class) in matching.iter().enumerate() {
            if let Some(c) = class {
                per_class_recall[*c] += counts[cluster][*c] as f64 / class_totals[*c] as f64;
            }
        }
    }

    let label_usize: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let nmi_class = nmi(assignments, &label_usize)?;

    Ok(ClusterMetrics {
        accuracy,
        nmi_class,
        nmi_domain: None,
        per_class_recall,
        matching,
        confusion: counts,
        n_samples: n,
    })
}

/// Normalized mutual information with arithmetic-mean normalization,
/// in [0, 1]. Zero when either labeling is constant.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput);
    }
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: (a.len(), 1),
            got: (b.len(), 1),
        });
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let n = a.len() as f64;
    let mut joint = vec![vec![0.0f64; kb]; ka];
    let mut pa = vec![0.0f64; ka];
    let mut pb = vec![0.0f64; kb];
    for (&x, &y) in a.iter().zip(b.iter()) {
        joint[x][y] += 1.0 / n;
        pa[x] += 1.0 / n;
        pb[y] += 1.0 / n;
    }
    let entropy = |p: &[f64]| -> f64 {
        p.iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| -x * x.ln())
            .sum()
    };
    let ha = entropy(&pa);
    let hb = entropy(&pb);
    if ha + hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (x, row) in joint.iter().enumerate() {
        for (y, &pxy) in row.iter().enumerate() {
            if pxy > 0.0 {
                mi += pxy * (pxy / (pa[x] * pb[y])).ln();
            }
        }
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Minimum-cost perfect assignment on a square matrix. Returns, for each
/// column, the row assigned to it. Potential-based O(n^3).
fn assignment_min_cost(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1]; // row matched to column (1-based)
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_of_col = vec![0usize; n];
    for j in 1..=n {
        row_of_col[j - 1] = p[j] - 1;
    }
    row_of_col
}

/// Eval-mode scoring of a model over one or more registered domains.
///
/// Per-sample assignment is the argmax of the replica-averaged
/// probabilities. `nmi_domain` is reported when more than one domain is
/// evaluated.
pub fn evaluate_model(
    model: &mut Model,
    data: &Dataset,
    domains: &[usize],
    head_kind: HeadKind,
) -> Result<ClusterMetrics> {
    let (assignments, labels, domain_ids) = collect_assignments(model, data, domains, head_kind)?;
    let n_clusters = match head_kind {
        HeadKind::Main => model.config.n_clusters,
        HeadKind::Over => model.config.n_overclusters,
    };
    let mut metrics = hungarian_accuracy(&assignments, &labels, n_clusters)?;
    if domains.len() > 1 {
        metrics.nmi_domain = Some(nmi(&assignments, &domain_ids)?);
    }
    Ok(metrics)
}

fn collect_assignments(
    model: &mut Model,
    data: &Dataset,
    domains: &[usize],
    head_kind: HeadKind,
) -> Result<(Vec<usize>, Vec<i32>, Vec<usize>)> {
    if domains.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = domains.to_vec();
    sorted.sort_unstable();
    let mut assignments = Vec::new();
    let mut labels = Vec::new();
    let mut domain_ids = Vec::new();
    for &d in &sorted {
        let inputs = data.inputs(d)?;
        let sealed = data.labels(d)?;
        let opened = sealed.open(Principal::Evaluator)?;
        // Chunked eval keeps the tape small; running statistics make the
        // chunking exact.
        let chunk = 256;
        let mut row = 0;
        while row < inputs.nrows() {
            let len = chunk.min(inputs.nrows() - row);
            let slice = inputs.slice(ndarray::s![row..row + len, ..]).to_owned();
            let preds = model.forward(&slice, d, head_kind, Mode::Eval)?;
            let averaged = average_replicas(&preds);
            for r in 0..len {
                assignments.push(argmax_row(&averaged, r));
                labels.push(opened[row + r]);
                domain_ids.push(d);
            }
            row += len;
        }
    }
    Ok((assignments, labels, domain_ids))
}

fn average_replicas(preds: &[Array2<f64>]) -> Array2<f64> {
    let mut avg = preds[0].clone();
    for p in &preds[1..] {
        avg += p;
    }
    avg / preds.len() as f64
}

fn argmax_row(m: &Array2<f64>, row: usize) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (j, &x) in m.row(row).iter().enumerate() {
        if x > best_val {
            best_val = x;
            best = j;
        }
    }
    best
}

/// Header written alongside the raw embedding blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub schema_version: u32,
    pub n_rows: usize,
    pub feature_dim: usize,
    /// Column semantics: feature columns, then "domain", then "label".
    pub columns: Vec<String>,
    pub blob: String,
}

/// Export trunk features (pre-head) with domain and label columns for
/// offline projection. Writes `<stem>.json` and `<stem>.bin` (row-major
/// little-endian float32).
pub fn export_embeddings(
    model: &mut Model,
    data: &Dataset,
    domains: &[usize],
    stem: &Path,
) -> Result<()> {
    if domains.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = domains.to_vec();
    sorted.sort_unstable();
    let feature_dim = model.config.feature_dim();
    let mut blob: Vec<u8> = Vec::new();
    let mut n_rows = 0usize;
    for &d in &sorted {
        let inputs = data.inputs(d)?;
        let labels = data.labels(d)?.open(Principal::Evaluator)?;
        let chunk = 256;
        let mut row = 0;
        while row < inputs.nrows() {
            let len = chunk.min(inputs.nrows() - row);
            let slice = inputs.slice(ndarray::s![row..row + len, ..]).to_owned();
            let feats = model.trunk_features(&slice, d)?;
            for r in 0..len {
                for &x in feats.row(r).iter() {
                    blob.extend_from_slice(&(x as f32).to_le_bytes());
                }
                blob.extend_from_slice(&(d as f32).to_le_bytes());
                blob.extend_from_slice(&(labels[row + r] as f32).to_le_bytes());
            }
            n_rows += len;
            row += len;
        }
    }
    let mut columns: Vec<String> = (0..feature_dim).map(|i| format!("f{i}")).collect();
    columns.push("domain".into());
    columns.push("label".into());
    let blob_name = format!(
        "{}.bin",
        stem.file_name().unwrap_or_default().to_string_lossy()
    );
    let header = EmbeddingHeader {
        schema_version: 1,
        n_rows,
        feature_dim,
        columns,
        blob: blob_name,
    };
    std::fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&header)?,
    )?;
    std::fs::write(stem.with_extension("bin"), blob)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force best-permutation accuracy (oracle for small sizes).
    fn exhaustive_accuracy(assignments: &[usize], labels: &[i32], n_clusters: usize) -> f64 {
        let n_classes = labels.iter().map(|&l| l as usize).max().unwrap() + 1;
        let k = n_clusters.max(n_classes);
        let mut counts = vec![vec![0usize; k]; k];
        for (&a, &l) in assignments.iter().zip(labels.iter()) {
            counts[a][l as usize] += 1;
        }
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = 0usize;
        permute(&mut perm, 0, &mut |p| {
            let score: usize = (0..k).map(|r| counts[r][p[r]]).sum();
            if score > best {
                best = score;
            }
        });
        best as f64 / assignments.len() as f64
    }

    fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            visit(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, visit);
            items.swap(k, i);
        }
    }

    #[test]
    fn permuted_labels_are_perfect() {
        let m = hungarian_accuracy(&[0, 0, 1, 1], &[1, 1, 0, 0], 2).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.matching, vec![Some(1), Some(0)]);
    }

    #[test]
    fn partial_match_against_exhaustive_oracle() {
        let assignments = [0usize, 0, 1, 2];
        let labels = [0i32, 1, 1, 2];
        let oracle = exhaustive_accuracy(&assignments, &labels, 3);
        assert_eq!(oracle, 0.75);
        let m = hungarian_accuracy(&assignments, &labels, 3).unwrap();
        assert_eq!(m.accuracy, oracle);
    }

    #[test]
    fn collapse_gets_majority_class_frequency() {
        let assignments = vec![0usize; 8];
        let labels = vec![0i32, 0, 1, 1, 2, 2, 3, 3];
        let m = hungarian_accuracy(&assignments, &labels, 4).unwrap();
        assert_eq!(m.accuracy, 0.25);
    }

    #[test]
    fn empty_input_errors() {
        assert!(matches!(
            hungarian_accuracy(&[], &[], 2),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn out_of_range_assignment_errors() {
        assert!(matches!(
            hungarian_accuracy(&[5], &[0], 2),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn accuracy_equals_trace_of_matched_confusion_over_n() {
        let assignments = [0usize, 1, 1, 2, 2, 2, 0];
        let labels = [1i32, 0, 0, 2, 2, 1, 1];
        let m = hungarian_accuracy(&assignments, &labels, 3).unwrap();
        let trace: usize = m
            .matching
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| m.confusion[r][c]))
            .sum();
        assert_eq!(m.accuracy, trace as f64 / m.n_samples as f64);
    }

    #[test]
    fn overclustering_maps_injectively() {
        // 4 clusters onto 2 classes: two clusters stay unmatched.
        let assignments = [0usize, 0, 1, 1, 2, 2, 3, 3];
        let labels = [0i32, 0, 0, 0, 1, 1, 1, 1];
        let m = hungarian_accuracy(&assignments, &labels, 4).unwrap();
        let matched: Vec<usize> = m.matching.iter().flatten().copied().collect();
        assert_eq!(matched.len(), 2);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn nmi_identical_labelings_is_one() {
        assert_eq!(nmi(&[0, 1, 0, 1, 2], &[0, 1, 0, 1, 2]).unwrap(), 1.0);
    }

    #[test]
    fn nmi_constant_labeling_is_zero() {
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn nmi_independent_balanced_pair_is_zero() {
        let v = nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn majority_vote_rule_is_available() {
        let assignments = [0usize, 0, 0, 1];
        let labels = [0i32, 0, 1, 1];
        let h = matched_accuracy(&assignments, &labels, 2, MatchingRule::Hungarian).unwrap();
        let v = matched_accuracy(&assignments, &labels, 2, MatchingRule::MajorityVote).unwrap();
        assert_eq!(h.accuracy, 0.75);
        assert_eq!(v.accuracy, 0.75);
    }

    proptest! {
        #[test]
        fn hungarian_matches_exhaustive_on_random_instances(
            assignments in proptest::collection::vec(0usize..5, 4..40),
            labels_raw in proptest::collection::vec(0i32..4, 4..40),
        ) {
            let n = assignments.len().min(labels_raw.len());
            let assignments = &assignments[..n];
            let labels = &labels_raw[..n];
            let n_clusters = 5;
            let m = hungarian_accuracy(assignments, labels, n_clusters).unwrap();
            let oracle = exhaustive_accuracy(assignments, labels, n_clusters);
            prop_assert!((m.accuracy - oracle).abs() < 1e-12,
                "hungarian {} vs oracle {}", m.accuracy, oracle);
        }

        #[test]
        fn accuracy_invariant_under_relabeling(
            assignments in proptest::collection::vec(0usize..4, 8..30),
            labels_raw in proptest::collection::vec(0i32..4, 8..30),
        ) {
            let n = assignments.len().min(labels_raw.len());
            let assignments = &assignments[..n];
            let labels = &labels_raw[..n];
            let base = hungarian_accuracy(assignments, labels, 4).unwrap().accuracy;
            // Cyclic relabeling of clusters.
            let relabeled: Vec<usize> = assignments.iter().map(|&a| (a + 1) % 4).collect();
            let shifted = hungarian_accuracy(&relabeled, labels, 4).unwrap().accuracy;
            prop_assert!((base - shifted).abs() < 1e-12);
            // Cyclic relabeling of classes.
            let classes: Vec<i32> = labels.iter().map(|&l| (l + 1) % 4).collect();
            let shifted = hungarian_accuracy(assignments, &classes, 4).unwrap().accuracy;
            prop_assert!((base - shifted).abs() < 1e-12);
        }

        #[test]
        fn accuracy_dominates_majority_class_frequency(
            assignments in proptest::collection::vec(0usize..4, 8..30),
            labels_raw in proptest::collection::vec(0i32..4, 8..30),
        ) {
            let n = assignments.len().min(labels_raw.len());
            let assignments = &assignments[..n];
            let labels = &labels_raw[..n];
            let mut counts = [0usize; 4];
            for &l in labels {
                counts[l as usize] += 1;
            }
            let max_freq = *counts.iter().max().unwrap() as f64 / n as f64;
            let acc = hungarian_accuracy(assignments, labels, 4).unwrap().accuracy;
            // The collapse mapping achieves max_freq only when everything
            // lands in one cluster; the optimal matching can do no worse
            // than the best single-cluster collapse of the same shape.
            let collapse = hungarian_accuracy(&vec![0usize; n], labels, 4).unwrap().accuracy;
            prop_assert!((collapse - max_freq).abs() < 1e-12);
            prop_assert!(acc >= 0.0 && acc <= 1.0);
        }

        #[test]
        fn nmi_is_symmetric(
            a in proptest::collection::vec(0usize..4, 6..30),
            b in proptest::collection::vec(0usize..4, 6..30),
        ) {
            let n = a.len().min(b.len());
            let x = nmi(&a[..n], &b[..n]).unwrap();
            let y = nmi(&b[..n], &a[..n]).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
