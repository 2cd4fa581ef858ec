//! Source-phase training loop.
//!
//! Per step, each source domain contributes a paired batch; the total
//! objective is `-MI(z,z') + MI(z,d) + MI(z',d)` where the cluster MI is
//! estimated from the smoothed joint and the losses are averaged across
//! head replicas. Main and overclustering heads train in alternating
//! epochs, each with its own per-replica smoothing state that resets at
//! every epoch start. The per-image transform term is a one-sample
//! Monte-Carlo estimate of the transform-conditional alignment loss.

use crate::datagen::{self, Dataset, TransformPipeline};
use crate::encoder::{gradients, HeadKind, Model};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::prob::{self, SmoothedJointState};
use crate::tape::{Tape, Var};
use serde::{Deserialize, Serialize};

/// Table-style ablation switches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationSwitches {
    /// Pool all sources into one merged domain (single statistics bank).
    #[serde(default)]
    pub merged_source: bool,
    /// Train on exactly one source domain.
    #[serde(default)]
    pub single_source: Option<usize>,
    /// Drop both domain-MI alignment terms.
    #[serde(default)]
    pub no_domain_mi: bool,
    /// Shared BN statistics across domains (wired into the model config
    /// at init; recorded here so run configs stay self-describing).
    #[serde(default)]
    pub no_bn_alignment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Samples drawn from each source domain per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    /// Moving-average weight for the joint estimate, in (0, 1].
    pub alpha: f64,
    /// Symmetrize the co-assignment joint (original/transformed roles are
    /// exchangeable at training time).
    pub symmetrize: bool,
    /// Weight on both domain-alignment MI terms (1.0 reproduces the
    /// plain objective; exposed for study).
    pub lambda_domain: f64,
    pub ablation: AblationSwitches,
    pub transforms: TransformPipeline,
    /// Stop early when the trailing window of per-epoch mean cluster MI
    /// (main-head epochs) moves less than 1e-4.
    pub early_stop_window: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Loss components of one step, averaged over head replicas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mi_cluster: f64,
    pub mi_domain: f64,
    pub mi_domain_transformed: f64,
    pub total: f64,
}

/// One JSON-lines metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub head_kind: HeadKind,
    pub mi_cluster: f64,
    pub mi_domain: f64,
    pub mi_domain_transformed: f64,
    pub total: f64,
}

/// Per-domain prediction stacks for one step (one entry per replica).
pub struct DomainPredictions {
    pub domain_id: usize,
    pub preds: Vec<Var>,
    pub preds_prime: Vec<Var>,
}

/// Mutable training state carried across epochs (and checkpoints).
#[derive(Debug, Clone)]
pub struct TrainState {
    pub optimizer: Adam,
    pub smooth_main: Vec<SmoothedJointState>,
    pub smooth_over: Vec<SmoothedJointState>,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn fresh(model: &Model, config: &TrainConfig) -> Self {
        let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| p.dim()).collect();
        let s = model.config.n_head_replicas;
        TrainState {
            optimizer: Adam::new(config.optimizer, &shapes),
            smooth_main: (0..s).map(|_| SmoothedJointState::new(config.alpha)).collect(),
            smooth_over: (0..s).map(|_| SmoothedJointState::new(config.alpha)).collect(),
            epochs_done: 0,
        }
    }
}

pub struct TrainOutput {
    pub records: Vec<StepRecord>,
    pub state: TrainState,
}

/// Assemble the total objective on the tape from per-domain paired
/// predictions. Returns the scalar node to differentiate plus the
/// detached component values; advances the smoothing states.
pub fn assemble_loss(
    tape: &mut Tape,
    by_domain: &[DomainPredictions],
    smoothing: &mut [SmoothedJointState],
    config: &TrainConfig,
) -> Result<(LossBreakdown, Var)> {
    if by_domain.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let s = by_domain[0].preds.len();
    for d in by_domain {
        if d.preds.len() != s || d.preds_prime.len() != s {
            return Err(Error::MissingDomainBatch(d.domain_id));
        }
    }
    assert_eq!(smoothing.len(), s, "one smoothing state per replica");
    let n_domains = by_domain.len();

    // Stacked domain-id vector matching the concatenated rows.
    let mut domain_ids = Vec::new();
    for (slot, d) in by_domain.iter().enumerate() {
        domain_ids.extend(std::iter::repeat(slot).take(tape.shape(d.preds[0]).0));
    }

    let mut mi_cluster_terms = Vec::with_capacity(s);
    let mut mi_domain_terms = Vec::with_capacity(s);
    let mut mi_domain_t_terms = Vec::with_capacity(s);
    for r in 0..s {
        let mut z = by_domain[0].preds[r];
        let mut zp = by_domain[0].preds_prime[r];
        for d in &by_domain[1..] {
            z = tape.concat_rows(z, d.preds[r]);
            zp = tape.concat_rows(zp, d.preds_prime[r]);
        }
        let joint = prob::joint_node(tape, z, zp, config.symmetrize);
        let smoothed = prob::smooth_node(tape, joint, &smoothing[r]);
        smoothing[r].update(&tape.value(smoothed).clone());
        mi_cluster_terms.push(prob::mi_node(tape, smoothed));

        if !config.ablation.no_domain_mi && n_domains > 1 {
            let dj = prob::domain_joint_node(tape, z, &domain_ids, n_domains)?;
            mi_domain_terms.push(prob::mi_node(tape, dj));
            let djt = prob::domain_joint_node(tape, zp, &domain_ids, n_domains)?;
            mi_domain_t_terms.push(prob::mi_node(tape, djt));
        }
    }

    let mean = |tape: &mut Tape, terms: &[Var]| -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t);
        }
        tape.mul_scalar(acc, 1.0 / terms.len() as f64)
    };

    let mi_cluster = mean(tape, &mi_cluster_terms);
    let zero = tape.leaf(ndarray::Array2::zeros((1, 1)));
    let mi_domain = if mi_domain_terms.is_empty() {
        zero
    } else {
        mean(tape, &mi_domain_terms)
    };
    let mi_domain_t = if mi_domain_t_terms.is_empty() {
        zero
    } else {
        mean(tape, &mi_domain_t_terms)
    };

    let neg_cluster = tape.neg(mi_cluster);
    let weighted_d = tape.mul_scalar(mi_domain, config.lambda_domain);
    let weighted_dt = tape.mul_scalar(mi_domain_t, config.lambda_domain);
    let partial = tape.add(neg_cluster, weighted_d);
    let total = tape.add(partial, weighted_dt);

    Ok((
        LossBreakdown {
            mi_cluster: tape.scalar(mi_cluster),
            mi_domain: tape.scalar(mi_domain),
            mi_domain_transformed: tape.scalar(mi_domain_t),
            total: tape.scalar(total),
        },
        total,
    ))
}

/// Resolve the ablation switches into an effective dataset and source
/// list. Merged-source pools all sources into one synthetic domain.
fn effective_sources(
    data: &Dataset,
    sources: &[usize],
    config: &TrainConfig,
) -> Result<(Dataset, Vec<usize>)> {
    if sources.is_empty() {
        return Err(Error::InvalidConfig("no source domains".into()));
    }
    if let Some(single) = config.ablation.single_source {
        if !sources.contains(&single) {
            return Err(Error::UnknownDomain(single));
        }
        return Ok((data.clone(), vec![single]));
    }
    if config.ablation.merged_source {
        let merged_id = *sources.iter().min().unwrap();
        let merged = datagen::merge_domains(data, sources, merged_id)?;
        return Ok((merged, vec![merged_id]));
    }
    let mut sorted = sources.to_vec();
    sorted.sort_unstable();
    Ok((data.clone(), sorted))
}

/// Train on the source domains from a fresh state.
pub fn train_source(
    model: &mut Model,
    data: &Dataset,
    sources: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    let state = TrainState::fresh(model, config);
    run_epochs(model, data, sources, config, state)
}

/// Continue training from a restored state (checkpoint resume).
pub fn resume(
    model: &mut Model,
    state: TrainState,
    data: &Dataset,
    sources: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if state.optimizer.n_params() != model.params().len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "optimizer tracks {} parameters, model has {}",
            state.optimizer.n_params(),
            model.params().len()
        )));
    }
    if state.smooth_main.len() != model.config.n_head_replicas {
        return Err(Error::IncompatibleCheckpoint(
            "smoothing state replica count mismatch".into(),
        ));
    }
    run_epochs(model, data, sources, config, state)
}

fn run_epochs(
    model: &mut Model,
    data: &Dataset,
    sources: &[usize],
    config: &TrainConfig,
    mut state: TrainState,
) -> Result<TrainOutput> {
    let (data, sources) = effective_sources(data, sources, config)?;
    for &d in &sources {
        if !model.is_registered(d) {
            return Err(Error::UnknownDomain(d));
        }
    }
    let steps_per_epoch = sources
        .iter()
        .map(|&d| data.n_samples(d).map(|n| n / config.batch_size))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min()
        .unwrap_or(0);
    if steps_per_epoch == 0 {
        return Err(Error::InvalidConfig(format!(
            "batch_size {} exceeds the smallest source domain",
            config.batch_size
        )));
    }

    let mut records = Vec::new();
    let mut main_epoch_mi: Vec<f64> = Vec::new();
    let shape = data.manifest.sample_shape.clone();

    for epoch in state.epochs_done..config.epochs {
        let head_kind = if epoch % 2 == 0 {
            HeadKind::Main
        } else {
            HeadKind::Over
        };
        // Stale joints from a different parameter regime never leak in.
        let smoothing = match head_kind {
            HeadKind::Main => &mut state.smooth_main,
            HeadKind::Over => &mut state.smooth_over,
        };
        for s in smoothing.iter_mut() {
            s.reset();
        }

        let mut samplers = Vec::new();
        for &d in &sources {
            samplers.push(data.epoch_sampler(d, datagen::mix_seed(config.seed, epoch as u64, d as u64))?);
        }

        let mut epoch_mi_sum = 0.0;
        for step in 0..steps_per_epoch {
            let global_step = epoch * steps_per_epoch + step;
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let mut by_domain = Vec::new();
            for (slot, &d) in sources.iter().enumerate() {
                let (originals, _labels) = data.sample_batch(d, config.batch_size, &mut samplers[slot])?;
                let transformed = config.transforms.apply(
                    &originals,
                    &shape,
                    datagen::mix_seed(config.seed, 0x7f, d as u64),
                    global_step as u64,
                );
                let (preds, preds_prime) = model.paired_forward_bound(
                    &mut tape,
                    &binding,
                    &originals,
                    &transformed,
                    d,
                    head_kind,
                    true,
                )?;
                by_domain.push(DomainPredictions {
                    domain_id: d,
                    preds,
                    preds_prime,
                });
            }
            let smoothing = match head_kind {
                HeadKind::Main => &mut state.smooth_main,
                HeadKind::Over => &mut state.smooth_over,
            };
            let (breakdown, total) = assemble_loss(&mut tape, &by_domain, smoothing, config)?;
            if !breakdown.total.is_finite() {
                let dump = dump_joints(smoothing);
                return Err(Error::NonFiniteLoss {
                    step: global_step,
                    dump,
                });
            }
            let grads = gradients(&mut tape, total, &binding)?;
            state.optimizer.step(&mut model.params_mut(), &grads);

            epoch_mi_sum += breakdown.mi_cluster;
            records.push(StepRecord {
                step: global_step,
                epoch,
                head_kind,
                mi_cluster: breakdown.mi_cluster,
                mi_domain: breakdown.mi_domain,
                mi_domain_transformed: breakdown.mi_domain_transformed,
                total: breakdown.total,
            });
        }
        state.epochs_done = epoch + 1;

        // Convergence is tracked on main-head epochs.
        if head_kind == HeadKind::Main {
            main_epoch_mi.push(epoch_mi_sum / steps_per_epoch as f64);
            if let Some(window) = config.early_stop_window {
                if main_epoch_mi.len() >= window {
                    let tail = &main_epoch_mi[main_epoch_mi.len() - window..];
                    let spread = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                        - tail.iter().cloned().fold(f64::INFINITY, f64::min);
                    if spread < 1e-4 {
                        break;
                    }
                }
            }
        }
    }

    Ok(TrainOutput { records, state })
}

fn dump_joints(smoothing: &[SmoothedJointState]) -> String {
    let joints: Vec<Vec<Vec<f64>>> = smoothing
        .iter()
        .filter_map(|s| s.p_hat())
        .map(|p| p.rows().into_iter().map(|r| r.to_vec()).collect())
        .collect();
    serde_json::to_string(&joints).unwrap_or_else(|_| "[]".into())
}

/// Serialize records as JSON lines.
pub fn records_to_jsonl(records: &[StepRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable record"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DataMode, GeneratorSpec, StyleSpec};
    use crate::encoder::{init_model, InputMode, LayerSpec, ModelConfig};
    use crate::evaluator;
    use approx::assert_abs_diff_eq;

    fn toy_dataset(n_domains: usize) -> Dataset {
        let styles: Vec<StyleSpec> = (0..n_domains)
            .map(|d| StyleSpec::Vector {
                rotation: 0.3 * d as f64,
                scale: vec![1.0; 6],
                translation: vec![d as f64, 0.0, 0.0, 0.0, 0.0, 0.0],
                noise_level: 0.05,
            })
            .collect();
        generate(&GeneratorSpec {
            name: "toy".into(),
            mode: DataMode::Vector,
            n_classes: 3,
            dim: 6,
            image_size: 0,
            samples_per_domain: 24,
            styles,
            class_radius: 2.0,
            class_noise: 0.2,
            seed: 77,
        })
        .unwrap()
    }

    fn toy_model(n_clusters: usize, replicas: usize, seed: u64) -> Model {
        init_model(ModelConfig {
            input_mode: InputMode::Vector { dim: 6 },
            trunk: vec![LayerSpec::relu(8), LayerSpec::relu(8)],
            n_clusters,
            n_overclusters: 2 * n_clusters,
            n_head_replicas: replicas,
            n_domains_max: 6,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
            shared_bn: false,
            seed,
        })
        .unwrap()
    }

    fn toy_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs,
            optimizer: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            alpha: 0.7,
            symmetrize: true,
            lambda_domain: 1.0,
            ablation: AblationSwitches::default(),
            transforms: TransformPipeline::vector_default(),
            early_stop_window: None,
            seed: 5,
        }
    }

    #[test]
    fn loss_breakdown_identity_holds_every_step() {
        let data = toy_dataset(2);
        let mut model = toy_model(3, 2, 1);
        model.register_domain(0).unwrap();
        model.register_domain(1).unwrap();
        let out = train_source(&mut model, &data, &[0, 1], &toy_config(2)).unwrap();
        assert!(!out.records.is_empty());
        for r in &out.records {
            assert_abs_diff_eq!(
                r.total,
                -r.mi_cluster + r.mi_domain + r.mi_domain_transformed,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn no_domain_mi_pins_alignment_terms_to_zero() {
        let data = toy_dataset(2);
        let mut model = toy_model(3, 2, 1);
        model.register_domain(0).unwrap();
        model.register_domain(1).unwrap();
        let mut cfg = toy_config(2);
        cfg.ablation.no_domain_mi = true;
        let out = train_source(&mut model, &data, &[0, 1], &cfg).unwrap();
        for r in &out.records {
            assert_eq!(r.mi_domain, 0.0);
            assert_eq!(r.mi_domain_transformed, 0.0);
            assert_abs_diff_eq!(r.total, -r.mi_cluster, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_domain_has_zero_domain_mi() {
        let data = toy_dataset(1);
        let mut model = toy_model(3, 1, 1);
        model.register_domain(0).unwrap();
        let out = train_source(&mut model, &data, &[0], &toy_config(1)).unwrap();
        for r in &out.records {
            assert_eq!(r.mi_domain, 0.0);
            assert_eq!(r.mi_domain_transformed, 0.0);
        }
    }

    #[test]
    fn statistically_identical_domains_give_near_zero_domain_mi() {
        // Same style in both domains: predictions carry no domain signal,
        // so MI(z,d) starts near zero.
        let styles = vec![StyleSpec::vector_identity(6), StyleSpec::vector_identity(6)];
        let data = generate(&GeneratorSpec {
            name: "same".into(),
            mode: DataMode::Vector,
            n_classes: 3,
            dim: 6,
            image_size: 0,
            samples_per_domain: 120,
            styles,
            class_radius: 2.0,
            class_noise: 0.2,
            seed: 3,
        })
        .unwrap();
        let mut model = toy_model(3, 1, 1);
        model.register_domain(0).unwrap();
        model.register_domain(1).unwrap();
        let mut cfg = toy_config(1);
        cfg.batch_size = 60;
        let out = train_source(&mut model, &data, &[0, 1], &cfg).unwrap();
        assert!(
            out.records[0].mi_domain < 0.01,
            "aligned domains should have tiny MI(z,d), got {}",
            out.records[0].mi_domain
        );
    }

    #[test]
    fn epoch_parity_freezes_the_inactive_head_bank() {
        let data = toy_dataset(2);
        let mut model = toy_model(3, 2, 1);
        model.register_domain(0).unwrap();
        model.register_domain(1).unwrap();
        // Epoch 0 trains the main head only.
        let over_before: Vec<_> = model
            .params()
            .iter()
            .map(|p| (*p).clone())
            .collect();
        let _ = train_source(&mut model, &data, &[0, 1], &toy_config(1)).unwrap();
        let params_after = model.params();
        // Trunk parameters moved.
        assert_ne!(&over_before[0], params_after[0]);
        // Overclustering head replicas (last 2*replicas tensors) did not.
        let n = params_after.len();
        for i in (n - 4)..n {
            assert_eq!(&over_before[i], params_after[i], "over-head param {i} moved");
        }
    }

    #[test]
    fn merged_source_uses_one_bank_and_single_domain_loss() {
        let data = toy_dataset(3);
        let mut model = toy_model(3, 1, 1);
        model.register_domain(0).unwrap();
        let mut cfg = toy_config(2);
        cfg.ablation.merged_source = true;
        let out = train_source(&mut model, &data, &[0, 1, 2], &cfg).unwrap();
        for r in &out.records {
            assert_eq!(r.mi_domain, 0.0);
        }
        // Only one registered domain bank exists.
        assert_eq!(model.registered_domains(), vec![0]);
    }

    #[test]
    fn fixed_seed_runs_are_bit_identical() {
        let data = toy_dataset(2);
        let run = || {
            let mut model = toy_model(3, 2, 9);
            model.register_domain(0).unwrap();
            model.register_domain(1).unwrap();
            let out = train_source(&mut model, &data, &[0, 1], &toy_config(3)).unwrap();
            (records_to_jsonl(&out.records), model.weights_hash())
        };
        let (log_a, hash_a) = run();
        let (log_b, hash_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(hash_a, hash_b);
    }

    #[test]
    fn smoothing_resets_at_epoch_start() {
        // First step of each epoch: smoothed joint equals the raw batch
        // joint regardless of alpha, so mi_cluster at step 0 must be
        // identical across two configs differing only in alpha.
        let data = toy_dataset(2);
        let mi_first = |alpha: f64| {
            let mut model = toy_model(3, 1, 2);
            model.register_domain(0).unwrap();
            model.register_domain(1).unwrap();
            let mut cfg = toy_config(1);
            cfg.alpha = alpha;
            let out = train_source(&mut model, &data, &[0, 1], &cfg).unwrap();
            out.records[0].mi_cluster
        };
        assert_eq!(mi_first(1.0), mi_first(0.3));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let data = toy_dataset(2);
        let cfg = toy_config(4);

        let mut full = toy_model(3, 2, 13);
        full.register_domain(0).unwrap();
        full.register_domain(1).unwrap();
        let full_out = train_source(&mut full, &data, &[0, 1], &cfg).unwrap();

        let mut half = toy_model(3, 2, 13);
        half.register_domain(0).unwrap();
        half.register_domain(1).unwrap();
        let mut cfg_half = cfg.clone();
        cfg_half.epochs = 2;
        let half_out = train_source(&mut half, &data, &[0, 1], &cfg_half).unwrap();
        let resumed_out = resume(&mut half, half_out.state, &data, &[0, 1], &cfg).unwrap();

        assert_eq!(full.weights_hash(), half.weights_hash());
        let full_tail = &full_out.records[half_out.records.len()..];
        assert_eq!(full_tail.len(), resumed_out.records.len());
        for (a, b) in full_tail.iter().zip(resumed_out.records.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn resume_with_wrong_model_shape_is_incompatible() {
        let data = toy_dataset(2);
        let mut model = toy_model(3, 2, 1);
        model.register_domain(0).unwrap();
        model.register_domain(1).unwrap();
        let cfg = toy_config(1);
        let out = train_source(&mut model, &data, &[0, 1], &cfg).unwrap();
        let mut other = toy_model(4, 2, 1);
        other.register_domain(0).unwrap();
        other.register_domain(1).unwrap();
        assert!(matches!(
            resume(&mut other, out.state, &data, &[0, 1], &cfg),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        // One full-step objective (2 domains, C=3, N=6) differentiated
        // end to end: paired BN forward, softmax heads, symmetrized
        // smoothed joint, domain joints.
        use crate::check::{finite_difference, max_relative_error};
        use ndarray::Array2;

        let data = toy_dataset(2);
        let cfg = {
            let mut c = toy_config(1);
            c.batch_size = 6;
            c
        };
        let mut model = toy_model(3, 2, 21);
        model.register_domain(0).unwrap();
        model.register_domain(1).unwrap();

        // Fixed batches and transforms for the probe.
        let mut samplers = vec![
            data.epoch_sampler(0, 1).unwrap(),
            data.epoch_sampler(1, 2).unwrap(),
        ];
        let batches: Vec<(Array2<f64>, Array2<f64>)> = (0..2)
            .map(|d| {
                let (x, _) = data.sample_batch(d, 6, &mut samplers[d]).unwrap();
                let xp = cfg
                    .transforms
                    .apply(&x, &data.manifest.sample_shape, 99, d as u64);
                (x, xp)
            })
            .collect();
        let mut smooth_init = vec![
            SmoothedJointState::new(cfg.alpha),
            SmoothedJointState::new(cfg.alpha),
        ];
        // Give the smoothing a history so the constant branch is active.
        for s in smooth_init.iter_mut() {
            s.update(&Array2::from_elem((3, 3), 1.0 / 9.0));
        }

        let loss_of = |model: &mut Model| {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let mut by_domain = Vec::new();
            for (d, (x, xp)) in batches.iter().enumerate() {
                let (preds, preds_prime) = model
                    .paired_forward_bound(&mut tape, &binding, x, xp, d, HeadKind::Main, false)
                    .unwrap();
                by_domain.push(DomainPredictions {
                    domain_id: d,
                    preds,
                    preds_prime,
                });
            }
            let mut smoothing = smooth_init.clone();
            let (_, total) = assemble_loss(&mut tape, &by_domain, &mut smoothing, &cfg).unwrap();
            (tape, binding, total)
        };

        let (mut tape, binding, total) = loss_of(&mut model);
        let analytic: Vec<f64> = gradients(&mut tape, total, &binding)
            .unwrap()
            .iter()
            .flat_map(|g| g.iter().cloned().collect::<Vec<_>>())
            .collect();
        let flat: Vec<f64> = model
            .params()
            .iter()
            .flat_map(|p| p.iter().cloned().collect::<Vec<_>>())
            .collect();
        let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| p.dim()).collect();
        let f = |vals: &[f64]| {
            let mut m = model.clone();
            let mut offset = 0;
            for (p, &(r, c)) in m.params_mut().into_iter().zip(shapes.iter()) {
                *p = Array2::from_shape_vec((r, c), vals[offset..offset + r * c].to_vec()).unwrap();
                offset += r * c;
            }
            let (tape, _, total) = loss_of(&mut m);
            tape.scalar(total)
        };
        let numeric = finite_difference(f, &flat, 1e-5);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn training_improves_source_clustering() {
        // End-to-end sanity: accuracy on sources beats chance after a
        // short run on well-separated classes.
        let data = toy_dataset(2);
        let mut model = toy_model(3, 2, 4);
        model.register_domain(0).unwrap();
        model.register_domain(1).unwrap();
        let mut cfg = toy_config(20);
        cfg.batch_size = 12;
        let _ = train_source(&mut model, &data, &[0, 1], &cfg).unwrap();
        let metrics =
            evaluator::evaluate_model(&mut model, &data, &[0, 1], HeadKind::Main).unwrap();
        assert!(
            metrics.accuracy > 0.5,
            "expected better than chance (0.33), got {}",
            metrics.accuracy
        );
    }
}
