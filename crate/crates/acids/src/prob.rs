//! Joint-distribution estimation and mutual-information losses.
//!
//! Everything here exists in two layers. The tape layer (`*_node`
//! functions) builds differentiable graphs and is what the training and
//! adaptation loops consume. The value layer wraps the same graph
//! construction on a throwaway tape, so there is exactly one
//! implementation of each formula.
//!
//! Zero cells are handled by flooring every probability at [`MI_FLOOR`]
//! inside logarithms, which keeps MI finite and gradients bounded.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use ndarray::{Array1, Array2, Axis};

/// Floor applied to probabilities inside logarithms.
pub const MI_FLOOR: f64 = 1e-12;

/// Tolerance for "sums to one" invariants.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Soft cluster assignments for a batch of original/transformed pairs.
///
/// `z` holds predictions on the original samples, `z_prime` on their
/// transformed twins. Rows are probability vectors; `domain_ids[n]` is
/// the source domain of sample `n`.
#[derive(Debug, Clone)]
pub struct PredictionBatch {
    pub z: Array2<f64>,
    pub z_prime: Array2<f64>,
    pub domain_ids: Vec<usize>,
    pub n_domains: usize,
}

impl PredictionBatch {
    pub fn new(
        z: Array2<f64>,
        z_prime: Array2<f64>,
        domain_ids: Vec<usize>,
        n_domains: usize,
    ) -> Result<Self> {
        let batch = PredictionBatch {
            z,
            z_prime,
            domain_ids,
            n_domains,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn n_samples(&self) -> usize {
        self.z.nrows()
    }

    pub fn n_clusters(&self) -> usize {
        self.z.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.z.dim() != self.z_prime.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.z.dim(),
                got: self.z_prime.dim(),
            });
        }
        if self.domain_ids.len() != self.z.nrows() {
            return Err(Error::ShapeMismatch {
                expected: (self.z.nrows(), 1),
                got: (self.domain_ids.len(), 1),
            });
        }
        for m in [&self.z, &self.z_prime] {
            for (i, row) in m.rows().into_iter().enumerate() {
                let mut sum = 0.0;
                for &x in row.iter() {
                    if x < 0.0 {
                        return Err(Error::NotAProbabilityRow { row: i, sum: x });
                    }
                    sum += x;
                }
                if (sum - 1.0).abs() > SIMPLEX_TOL {
                    return Err(Error::NotAProbabilityRow { row: i, sum });
                }
            }
        }
        if self.domain_ids.iter().any(|&d| d >= self.n_domains) {
            return Err(Error::UnknownDomain(
                *self.domain_ids.iter().find(|&&d| d >= self.n_domains).unwrap(),
            ));
        }
        Ok(())
    }
}

/// A nonnegative matrix summing to one, with its marginals.
///
/// Square (clusters x clusters) for co-assignment joints, rectangular
/// (clusters x domains) for domain joints. Marginals are always the row
/// and column sums of `p`, by construction.
#[derive(Debug, Clone)]
pub struct JointDistribution {
    pub p: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
}

impl JointDistribution {
    pub fn from_matrix(p: Array2<f64>) -> Self {
        let row_marginal = p.sum_axis(Axis(1));
        let col_marginal = p.sum_axis(Axis(0));
        JointDistribution {
            p,
            row_marginal,
            col_marginal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p.iter().any(|&x| x < 0.0) {
            return Err(Error::NotAProbabilityRow { row: 0, sum: -1.0 });
        }
        let total = self.p.sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::NotAProbabilityRow { row: 0, sum: total });
        }
        Ok(())
    }
}

/// Moving-average state over joint estimates.
///
/// Holds the previous smoothed matrix, treated as a constant with respect
/// to gradients. Reset at every epoch start and at the source-to-target
/// boundary so estimates from a stale parameter regime never leak in.
#[derive(Debug, Clone)]
pub struct SmoothedJointState {
    pub alpha: f64,
    p_hat: Option<Array2<f64>>,
}

impl SmoothedJointState {
    pub fn new(alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
        SmoothedJointState { alpha, p_hat: None }
    }

    pub fn initialized(&self) -> bool {
        self.p_hat.is_some()
    }

    pub fn p_hat(&self) -> Option<&Array2<f64>> {
        self.p_hat.as_ref()
    }

    pub fn reset(&mut self) {
        self.p_hat = None;
    }

    /// Store a detached copy of the latest smoothed matrix.
    pub fn update(&mut self, smoothed: &Array2<f64>) {
        self.p_hat = Some(smoothed.clone());
    }

    pub(crate) fn restore(alpha: f64, p_hat: Option<Array2<f64>>) -> Self {
        SmoothedJointState { alpha, p_hat }
    }
}

// ---------------------------------------------------------------------------
// Tape layer
// ---------------------------------------------------------------------------

/// Joint co-assignment distribution `Z^T Z' / N` on the tape.
pub fn joint_node(tape: &mut Tape, z: Var, z_prime: Var, symmetrize: bool) -> Var {
    let n = tape.shape(z).0 as f64;
    let zt = tape.transpose(z);
    let p = tape.matmul(zt, z_prime);
    let p = tape.mul_scalar(p, 1.0 / n);
    if symmetrize {
        let pt = tape.transpose(p);
        let s = tape.add(p, pt);
        tape.mul_scalar(s, 0.5)
    } else {
        p
    }
}

/// Plug-in mutual information of a joint matrix node, in nats.
///
/// Marginals are recomputed inside as row and column sums so the gradient
/// flows through them.
pub fn mi_node(tape: &mut Tape, p: Var) -> Var {
    let r = tape.row_sum(p);
    let c = tape.col_sum(p);
    let ln_p = tape.ln_clamped(p, MI_FLOOR);
    let ln_r = tape.ln_clamped(r, MI_FLOOR);
    let ln_c = tape.ln_clamped(c, MI_FLOOR);
    let neg_ln_r = tape.neg(ln_r);
    let neg_ln_c = tape.neg(ln_c);
    let ratio = tape.add_broadcast(ln_p, neg_ln_r);
    let ratio = tape.add_broadcast(ratio, neg_ln_c);
    let terms = tape.mul(p, ratio);
    tape.sum_all(terms)
}

/// Cluster-domain joint `P(z, d)` as a clusters x domains node.
///
/// Column `s` is the mean prediction over samples of domain `s`, scaled by
/// the uniform domain prior `1/S` so the matrix sums to one.
pub fn domain_joint_node(
    tape: &mut Tape,
    z: Var,
    domain_ids: &[usize],
    n_domains: usize,
) -> Result<Var> {
    let n = tape.shape(z).0;
    assert_eq!(domain_ids.len(), n, "domain id count must match batch");
    let mut counts = vec![0usize; n_domains];
    for &d in domain_ids {
        counts[d] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyDomain(empty));
    }
    let mut selector = Array2::zeros((n, n_domains));
    for (row, &d) in domain_ids.iter().enumerate() {
        selector[(row, d)] = 1.0 / (counts[d] as f64 * n_domains as f64);
    }
    let sel = tape.leaf(selector);
    let zt = tape.transpose(z);
    Ok(tape.matmul(zt, sel))
}

/// `alpha * current + (1 - alpha) * p_hat`, with `p_hat` a gradient
/// constant. Uninitialized state passes `current` through unchanged.
/// The caller updates the state from the node value afterwards.
pub fn smooth_node(tape: &mut Tape, current: Var, state: &SmoothedJointState) -> Var {
    match state.p_hat() {
        None => current,
        Some(p_hat) => {
            let live = tape.mul_scalar(current, state.alpha);
            let frozen = tape.leaf(p_hat * (1.0 - state.alpha));
            tape.add(live, frozen)
        }
    }
}

/// Adaptation joint `sharpen(z)^T z' / N` (asymmetric by construction).
/// Returns the joint node and the fraction of confident rows.
pub fn adaptation_joint_node(
    tape: &mut Tape,
    z: Var,
    z_prime: Var,
    epsilon_conf: f64,
) -> (Var, f64) {
    let n = tape.shape(z).0;
    let (sharp, mask) = tape.sharpen(z, epsilon_conf);
    let st = tape.transpose(sharp);
    let p = tape.matmul(st, z_prime);
    let p = tape.mul_scalar(p, 1.0 / n as f64);
    let confident = mask.iter().filter(|&&m| m).count() as f64 / n as f64;
    (p, confident)
}

/// Mean row entropy `-sum z ln z / N`, restricted to rows where `include`
/// is true (all rows when `include` is `None`). Zero participating rows
/// yield a constant zero node.
pub fn mean_entropy_node(tape: &mut Tape, z: Var, include: Option<&[bool]>) -> Var {
    let n = tape.shape(z).0;
    let k = match include {
        None => n,
        Some(mask) => mask.iter().filter(|&&m| m).count(),
    };
    if k == 0 {
        return tape.leaf(Array2::zeros((1, 1)));
    }
    let weights = match include {
        None => Array2::from_elem((n, 1), -1.0 / n as f64),
        Some(mask) => {
            let mut w = Array2::zeros((n, 1));
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    w[(i, 0)] = -1.0 / k as f64;
                }
            }
            w
        }
    };
    let w = tape.leaf(weights);
    let ln_z = tape.ln_clamped(z, MI_FLOOR);
    let zlnz = tape.mul(z, ln_z);
    let weighted = tape.mul(zlnz, w);
    tape.sum_all(weighted)
}

// ---------------------------------------------------------------------------
// Value layer
// ---------------------------------------------------------------------------

/// Estimate the co-assignment joint from a prediction batch by averaging
/// per-sample outer products over all samples of all domains.
pub fn joint_from_predictions(
    batch: &PredictionBatch,
    symmetrize: bool,
) -> Result<JointDistribution> {
    if batch.n_samples() == 0 {
        return Err(Error::EmptyBatch);
    }
    if batch.z.dim() != batch.z_prime.dim() {
        return Err(Error::ShapeMismatch {
            expected: batch.z.dim(),
            got: batch.z_prime.dim(),
        });
    }
    let mut tape = Tape::new();
    let z = tape.leaf(batch.z.clone());
    let zp = tape.leaf(batch.z_prime.clone());
    let p = joint_node(&mut tape, z, zp, symmetrize);
    Ok(JointDistribution::from_matrix(tape.value(p).clone()))
}

/// Plug-in mutual information of a joint distribution, in nats.
pub fn mutual_information(joint: &JointDistribution) -> f64 {
    let mut tape = Tape::new();
    let p = tape.leaf(joint.p.clone());
    let mi = mi_node(&mut tape, p);
    tape.scalar(mi)
}

/// Cluster-domain joint from a stacked prediction matrix.
pub fn domain_joint(
    z: &Array2<f64>,
    domain_ids: &[usize],
    n_domains: usize,
) -> Result<JointDistribution> {
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let p = domain_joint_node(&mut tape, zv, domain_ids, n_domains)?;
    Ok(JointDistribution::from_matrix(tape.value(p).clone()))
}

/// Apply moving-average smoothing and advance the state.
pub fn smooth_joint(
    current: &JointDistribution,
    state: &mut SmoothedJointState,
) -> JointDistribution {
    let mut tape = Tape::new();
    let cur = tape.leaf(current.p.clone());
    let out = smooth_node(&mut tape, cur, state);
    let smoothed = tape.value(out).clone();
    state.update(&smoothed);
    JointDistribution::from_matrix(smoothed)
}

/// Replace rows with confidence at least `epsilon_conf` by the one-hot of
/// their argmax; ties break to the lowest cluster index.
pub fn sharpen_predictions(z: &Array2<f64>, epsilon_conf: f64) -> Array2<f64> {
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let (sharp, _) = tape.sharpen(zv, epsilon_conf);
    tape.value(sharp).clone()
}

/// Confidence-thresholded adaptation joint (no symmetrization; the
/// sharpened and plain branches play asymmetric roles).
pub fn adaptation_joint(
    z: &Array2<f64>,
    z_prime: &Array2<f64>,
    epsilon_conf: f64,
) -> Result<JointDistribution> {
    if z.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if z.dim() != z_prime.dim() {
        return Err(Error::ShapeMismatch {
            expected: z.dim(),
            got: z_prime.dim(),
        });
    }
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let zpv = tape.leaf(z_prime.clone());
    let (p, _) = adaptation_joint_node(&mut tape, zv, zpv, epsilon_conf);
    Ok(JointDistribution::from_matrix(tape.value(p).clone()))
}

/// Mean prediction entropy over all rows, in nats.
pub fn prediction_entropy(z: &Array2<f64>) -> f64 {
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let h = mean_entropy_node(&mut tape, zv, None);
    tape.scalar(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{finite_difference, max_relative_error};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    // -- independent oracles -------------------------------------------------

    /// Brute-force joint: explicit loop over per-sample outer products.
    fn oracle_joint(z: &Array2<f64>, zp: &Array2<f64>, symmetrize: bool) -> Array2<f64> {
        let (n, c) = z.dim();
        let mut p = Array2::zeros((c, c));
        for s in 0..n {
            for i in 0..c {
                for j in 0..c {
                    p[(i, j)] += z[(s, i)] * zp[(s, j)] / n as f64;
                }
            }
        }
        if symmetrize {
            let pt = p.t().to_owned();
            p = (&p + &pt) * 0.5;
        }
        p
    }

    /// Scalar-loop MI oracle, independent of the tape.
    fn oracle_mi(p: &Array2<f64>) -> f64 {
        let (r, c) = p.dim();
        let rows: Vec<f64> = (0..r).map(|i| p.row(i).sum()).collect();
        let cols: Vec<f64> = (0..c).map(|j| p.column(j).sum()).collect();
        let mut mi = 0.0;
        for i in 0..r {
            for j in 0..c {
                let pij = p[(i, j)].max(MI_FLOOR);
                mi += p[(i, j)] * (pij.ln() - rows[i].max(MI_FLOOR).ln() - cols[j].max(MI_FLOOR).ln());
            }
        }
        mi
    }

    fn batch(z: Array2<f64>, zp: Array2<f64>) -> PredictionBatch {
        let n = z.nrows();
        PredictionBatch::new(z, zp, vec![0; n], 1).unwrap()
    }

    // -- joint_from_predictions ----------------------------------------------

    #[test]
    fn joint_identity_one_hot() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let j = joint_from_predictions(&batch(z.clone(), z), true).unwrap();
        assert_abs_diff_eq!(j.p, array![[0.5, 0.0], [0.0, 0.5]], epsilon = 1e-12);
    }

    #[test]
    fn joint_independence_case() {
        let z = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let j = joint_from_predictions(&batch(z.clone(), z), false).unwrap();
        assert_abs_diff_eq!(j.p, Array2::from_elem((2, 2), 0.25), epsilon = 1e-12);
    }

    #[test]
    fn joint_matches_brute_force_oracle() {
        let z = array![[0.8, 0.2], [0.3, 0.7]];
        let zp = array![[0.9, 0.1], [0.2, 0.8]];
        let expect = oracle_joint(&z, &zp, true);
        // Frozen from the oracle.
        assert_abs_diff_eq!(expect, array![[0.39, 0.16], [0.16, 0.29]], epsilon = 1e-12);
        let j = joint_from_predictions(&batch(z, zp), true).unwrap();
        assert_abs_diff_eq!(j.p, expect, epsilon = 1e-12);
    }

    #[test]
    fn joint_empty_batch_errors() {
        let z: Array2<f64> = Array2::zeros((0, 2));
        let b = PredictionBatch {
            z: z.clone(),
            z_prime: z,
            domain_ids: vec![],
            n_domains: 1,
        };
        assert!(matches!(
            joint_from_predictions(&b, true),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn batch_shape_mismatch_errors() {
        let z = array![[1.0, 0.0]];
        let zp = array![[1.0, 0.0, 0.0]];
        assert!(matches!(
            PredictionBatch::new(z, zp, vec![0], 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn batch_rejects_non_simplex_rows() {
        let z = array![[0.9, 0.3]];
        assert!(matches!(
            PredictionBatch::new(z.clone(), z, vec![0], 1),
            Err(Error::NotAProbabilityRow { .. })
        ));
    }

    // -- mutual_information ----------------------------------------------------

    #[test]
    fn mi_of_identity_joint_is_ln_c() {
        let j = JointDistribution::from_matrix(array![[0.5, 0.0], [0.0, 0.5]]);
        assert_abs_diff_eq!(mutual_information(&j), 2f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn mi_of_uniform_joint_is_zero() {
        let j = JointDistribution::from_matrix(Array2::from_elem((3, 3), 1.0 / 9.0));
        assert_abs_diff_eq!(mutual_information(&j), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn mi_matches_scalar_oracle() {
        let p = array![[0.4, 0.1], [0.1, 0.4]];
        let expect = oracle_mi(&p);
        // Frozen from the oracle: 0.8 ln 1.6 + 0.2 ln 0.4.
        assert_abs_diff_eq!(expect, 0.19274475702175742, epsilon = 1e-12);
        let j = JointDistribution::from_matrix(p);
        assert_abs_diff_eq!(mutual_information(&j), expect, epsilon = 1e-9);
    }

    // -- domain_joint ----------------------------------------------------------

    #[test]
    fn domain_joint_independent_predictions_give_zero_mi() {
        let z = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let j = domain_joint(&z, &[0, 0, 1, 1], 2).unwrap();
        assert_abs_diff_eq!(mutual_information(&j), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn domain_joint_domain_pure_clusters() {
        let z = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let j = domain_joint(&z, &[0, 0, 1, 1], 2).unwrap();
        assert_abs_diff_eq!(j.p, array![[0.5, 0.0], [0.0, 0.5]], epsilon = 1e-12);
        assert_abs_diff_eq!(mutual_information(&j), 2f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn domain_joint_unbalanced_domains() {
        // Per-domain means [0.8, 0.2] and [0.2, 0.8], times the 1/2 prior.
        let z = array![[0.9, 0.1], [0.7, 0.3], [0.2, 0.8]];
        let j = domain_joint(&z, &[0, 0, 1], 2).unwrap();
        assert_abs_diff_eq!(j.p, array![[0.4, 0.1], [0.1, 0.4]], epsilon = 1e-12);
    }

    #[test]
    fn domain_joint_empty_domain_errors() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            domain_joint(&z, &[0, 0], 2),
            Err(Error::EmptyDomain(1))
        ));
    }

    // -- smooth_joint ------------------------------------------------------------

    #[test]
    fn smoothing_with_alpha_one_is_identity() {
        let current = JointDistribution::from_matrix(array![[0.5, 0.0], [0.0, 0.5]]);
        let mut state = SmoothedJointState::new(1.0);
        state.update(&Array2::from_elem((2, 2), 0.25));
        let out = smooth_joint(&current, &mut state);
        assert_abs_diff_eq!(out.p, current.p, epsilon = 1e-15);
    }

    #[test]
    fn smoothing_is_a_convex_combination() {
        let current = JointDistribution::from_matrix(array![[0.5, 0.0], [0.0, 0.5]]);
        let mut state = SmoothedJointState::new(0.7);
        state.update(&Array2::from_elem((2, 2), 0.25));
        let out = smooth_joint(&current, &mut state);
        assert_abs_diff_eq!(
            out.p,
            array![[0.425, 0.075], [0.075, 0.425]],
            epsilon = 1e-12
        );
        // State advanced to the returned matrix.
        assert_abs_diff_eq!(state.p_hat().unwrap(), &out.p, epsilon = 1e-15);
    }

    #[test]
    fn smoothing_first_call_initializes() {
        let current = JointDistribution::from_matrix(array![[0.4, 0.1], [0.1, 0.4]]);
        let mut state = SmoothedJointState::new(0.3);
        let out = smooth_joint(&current, &mut state);
        assert_abs_diff_eq!(out.p, current.p, epsilon = 1e-15);
        assert!(state.initialized());
    }

    #[test]
    fn smoothing_fixed_point_converges() {
        let current = JointDistribution::from_matrix(array![[0.4, 0.1], [0.1, 0.4]]);
        let mut state = SmoothedJointState::new(0.7);
        state.update(&Array2::from_elem((2, 2), 0.25));
        let mut out = smooth_joint(&current, &mut state);
        for _ in 0..200 {
            out = smooth_joint(&current, &mut state);
        }
        let diff = (&out.p - &current.p).mapv(f64::abs).sum();
        assert!(diff < 1e-6, "EMA did not converge: residual {diff}");
    }

    // -- sharpen -------------------------------------------------------------

    #[test]
    fn sharpen_confident_row() {
        let out = sharpen_predictions(&array![[0.95, 0.05]], 0.9);
        assert_abs_diff_eq!(out, array![[1.0, 0.0]], epsilon = 1e-15);
    }

    #[test]
    fn sharpen_leaves_unconfident_rows() {
        let out = sharpen_predictions(&array![[0.6, 0.4]], 0.9);
        assert_abs_diff_eq!(out, array![[0.6, 0.4]], epsilon = 1e-15);
    }

    #[test]
    fn sharpen_tie_breaks_low() {
        let out = sharpen_predictions(&array![[0.5, 0.5]], 0.5);
        assert_abs_diff_eq!(out, array![[1.0, 0.0]], epsilon = 1e-15);
    }

    // -- adaptation_joint ------------------------------------------------------

    #[test]
    fn adaptation_joint_confident_diagonal() {
        let z = array![[0.96, 0.04], [0.03, 0.97]];
        let zp = array![[1.0, 0.0], [0.0, 1.0]];
        let j = adaptation_joint(&z, &zp, 0.9).unwrap();
        assert_abs_diff_eq!(j.p, array![[0.5, 0.0], [0.0, 0.5]], epsilon = 1e-12);
        assert_abs_diff_eq!(mutual_information(&j), 2f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn adaptation_joint_unreachable_threshold_is_plain_joint() {
        let z = array![[0.8, 0.2], [0.3, 0.7]];
        let zp = array![[0.9, 0.1], [0.2, 0.8]];
        let plain = joint_from_predictions(&batch(z.clone(), zp.clone()), false).unwrap();
        let adapted = adaptation_joint(&z, &zp, 1.0 + 1e-9).unwrap();
        assert_abs_diff_eq!(adapted.p, plain.p, epsilon = 1e-15);
    }

    #[test]
    fn adaptation_joint_sharpened_outer_product() {
        let j = adaptation_joint(&array![[0.95, 0.05]], &array![[0.7, 0.3]], 0.9).unwrap();
        assert_abs_diff_eq!(j.p, array![[0.7, 0.3], [0.0, 0.0]], epsilon = 1e-12);
    }

    // -- prediction_entropy ------------------------------------------------------

    #[test]
    fn entropy_of_one_hots_is_zero() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        assert_abs_diff_eq!(prediction_entropy(&z), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn entropy_of_uniform_rows_is_ln_c() {
        let z = Array2::from_elem((4, 2), 0.5);
        assert_abs_diff_eq!(prediction_entropy(&z), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn entropy_matches_scalar_oracle() {
        let oracle = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert_abs_diff_eq!(oracle, 0.3250829733914482, epsilon = 1e-12);
        assert_abs_diff_eq!(
            prediction_entropy(&array![[0.9, 0.1]]),
            oracle,
            epsilon = 1e-12
        );
    }

    // -- gradients -----------------------------------------------------------

    #[test]
    fn mi_of_joint_gradient_matches_finite_differences() {
        // Random-ish 6x3 batch, rows normalized.
        let mut z = array![
            [0.3, 0.5, 0.2],
            [0.1, 0.2, 0.7],
            [0.6, 0.3, 0.1],
            [0.25, 0.5, 0.25],
            [0.4, 0.4, 0.2],
            [0.15, 0.35, 0.5]
        ];
        let mut zp = array![
            [0.2, 0.6, 0.2],
            [0.15, 0.25, 0.6],
            [0.5, 0.4, 0.1],
            [0.3, 0.45, 0.25],
            [0.35, 0.45, 0.2],
            [0.2, 0.3, 0.5]
        ];
        z.swap_axes(0, 0);
        zp.swap_axes(0, 0);

        let run = |flat: &[f64]| {
            let z = Array2::from_shape_vec((6, 3), flat[..18].to_vec()).unwrap();
            let zp = Array2::from_shape_vec((6, 3), flat[18..].to_vec()).unwrap();
            let mut tape = Tape::new();
            let zv = tape.leaf(z);
            let zpv = tape.leaf(zp);
            let p = joint_node(&mut tape, zv, zpv, true);
            let mi = mi_node(&mut tape, p);
            tape.scalar(mi)
        };
        let flat: Vec<f64> = z.iter().chain(zp.iter()).cloned().collect();

        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let zpv = tape.leaf(zp.clone());
        let p = joint_node(&mut tape, zv, zpv, true);
        let mi = mi_node(&mut tape, p);
        tape.backward(mi).unwrap();
        let analytic: Vec<f64> = tape
            .grad(zv)
            .into_iter()
            .chain(tape.grad(zpv))
            .collect();

        let numeric = finite_difference(run, &flat, 1e-6);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn adaptation_gradient_is_zero_on_sharpened_rows() {
        let z = array![[0.95, 0.03, 0.02], [0.4, 0.35, 0.25]];
        let zp = array![[0.7, 0.2, 0.1], [0.3, 0.4, 0.3]];
        let mut tape = Tape::new();
        let zv = tape.leaf(z);
        let zpv = tape.leaf(zp);
        let (p, frac) = adaptation_joint_node(&mut tape, zv, zpv, 0.9);
        assert_abs_diff_eq!(frac, 0.5, epsilon = 1e-12);
        let mi = mi_node(&mut tape, p);
        let loss = tape.neg(mi);
        tape.backward(loss).unwrap();
        let g = tape.grad(zv);
        assert!(g.row(0).iter().all(|&x| x == 0.0), "sharpened row leaked gradient");
        assert!(g.row(1).iter().any(|&x| x != 0.0));
    }

    // -- property tests ---------------------------------------------------------

    /// Strategy: a prediction matrix with `n` simplex rows of width `c`.
    fn simplex_matrix(n: usize, c: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(0.01f64..1.0, n * c).prop_map(move |raw| {
            let mut m = Array2::from_shape_vec((n, c), raw).unwrap();
            for mut row in m.rows_mut() {
                let s: f64 = row.iter().sum();
                row.mapv_inplace(|x| x / s);
            }
            m
        })
    }

    proptest! {
        #[test]
        fn joint_is_permutation_invariant(z in simplex_matrix(5, 3), zp in simplex_matrix(5, 3)) {
            let j1 = joint_from_predictions(&batch(z.clone(), zp.clone()), true).unwrap();
            // Reverse the sample order.
            let rev = |m: &Array2<f64>| {
                let mut r = m.clone();
                for (i, row) in m.rows().into_iter().enumerate() {
                    r.row_mut(m.nrows() - 1 - i).assign(&row);
                }
                r
            };
            let j2 = joint_from_predictions(&batch(rev(&z), rev(&zp)), true).unwrap();
            let diff = (&j1.p - &j2.p).mapv(f64::abs).sum();
            prop_assert!(diff < 1e-12);
        }

        #[test]
        fn symmetrized_joint_equals_its_transpose(z in simplex_matrix(4, 3), zp in simplex_matrix(4, 3)) {
            let j = joint_from_predictions(&batch(z, zp), true).unwrap();
            let diff = (&j.p - &j.p.t()).mapv(f64::abs).sum();
            prop_assert!(diff == 0.0);
        }

        #[test]
        fn mi_is_nonnegative(z in simplex_matrix(6, 3), zp in simplex_matrix(6, 3)) {
            let j = joint_from_predictions(&batch(z, zp), true).unwrap();
            prop_assert!(mutual_information(&j) >= -1e-9);
        }

        #[test]
        fn mi_invariant_under_simultaneous_permutation(z in simplex_matrix(6, 3), zp in simplex_matrix(6, 3)) {
            let j = joint_from_predictions(&batch(z, zp), true).unwrap();
            // Apply the cyclic permutation to rows and columns together.
            let c = j.p.ncols();
            let mut permuted = Array2::zeros((c, c));
            for i in 0..c {
                for k in 0..c {
                    permuted[((i + 1) % c, (k + 1) % c)] = j.p[(i, k)];
                }
            }
            let mi_a = mutual_information(&j);
            let mi_b = mutual_information(&JointDistribution::from_matrix(permuted));
            prop_assert!((mi_a - mi_b).abs() < 1e-12);
        }

        #[test]
        fn smoothing_preserves_simplex(z in simplex_matrix(5, 3), zp in simplex_matrix(5, 3), alpha in 0.05f64..1.0) {
            let current = joint_from_predictions(&batch(z.clone(), zp), true).unwrap();
            let mut state = SmoothedJointState::new(alpha);
            state.update(&Array2::from_elem((3, 3), 1.0 / 9.0));
            let out = smooth_joint(&current, &mut state);
            prop_assert!(out.validate().is_ok());
        }

        #[test]
        fn sharpen_is_idempotent(z in simplex_matrix(5, 4), eps in 0.3f64..1.0) {
            let once = sharpen_predictions(&z, eps);
            let twice = sharpen_predictions(&once, eps);
            prop_assert!(once == twice);
        }
    }
}
