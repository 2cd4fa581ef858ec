//! Parametric encoder with domain-conditional batch normalization and
//! replicated softmax cluster heads.
//!
//! The trunk is a small configurable net: affine+BN+ReLU blocks in vector
//! mode, 3x3 conv+BN+ReLU+avgpool blocks in image mode. Every batch
//! normalization layer keeps one running mean/variance bank per
//! registered domain while the affine parameters gamma and beta are
//! shared across all domains. Heads are independent affine+softmax
//! replicas over the shared trunk feature; the overclustering bank has
//! its own, wider replicas.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Vector {
        dim: usize,
    },
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

/// One trunk block: affine or convolution width plus activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl LayerSpec {
    pub fn relu(width: usize) -> Self {
        LayerSpec {
            width,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_mode: InputMode,
    pub trunk: Vec<LayerSpec>,
    /// Main head output width (number of semantic clusters).
    pub n_clusters: usize,
    /// Overclustering head output width; at least `n_clusters`.
    pub n_overclusters: usize,
    /// Independent replicas per head bank.
    pub n_head_replicas: usize,
    /// Capacity of the per-domain BN statistic banks.
    pub n_domains_max: usize,
    /// Numerical stability constant inside the BN denominator.
    pub bn_epsilon: f64,
    /// EMA momentum for running-statistic updates.
    pub bn_momentum: f64,
    /// Collapse all domains onto a single statistics bank (removes the
    /// normalization-based alignment mechanism).
    pub shared_bn: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Two affine+BN+ReLU blocks of width 64 over vector inputs.
    pub fn vector_default(dim: usize, n_clusters: usize) -> Self {
        ModelConfig {
            input_mode: InputMode::Vector { dim },
            trunk: vec![LayerSpec::relu(64), LayerSpec::relu(64)],
            n_clusters,
            n_overclusters: 7 * n_clusters,
            n_head_replicas: 5,
            n_domains_max: 8,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
            shared_bn: false,
            seed: 0,
        }
    }

    /// Three conv+BN+ReLU+pool blocks of widths 16/32/64 over images.
    pub fn image_default(height: usize, width: usize, channels: usize, n_clusters: usize) -> Self {
        ModelConfig {
            input_mode: InputMode::Image {
                height,
                width,
                channels,
            },
            trunk: vec![
                LayerSpec::relu(16),
                LayerSpec::relu(32),
                LayerSpec::relu(64),
            ],
            n_clusters,
            n_overclusters: 7 * n_clusters,
            n_head_replicas: 5,
            n_domains_max: 8,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
            shared_bn: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 {
            return Err(Error::InvalidConfig(format!(
                "n_clusters must be >= 2, got {}",
                self.n_clusters
            )));
        }
        if self.n_overclusters < self.n_clusters {
            return Err(Error::InvalidConfig(format!(
                "n_overclusters ({}) must be >= n_clusters ({})",
                self.n_overclusters, self.n_clusters
            )));
        }
        if self.n_head_replicas < 1 {
            return Err(Error::InvalidConfig("n_head_replicas must be >= 1".into()));
        }
        if self.bn_epsilon <= 0.0 {
            return Err(Error::InvalidConfig("bn_epsilon must be > 0".into()));
        }
        if self.trunk.is_empty() {
            return Err(Error::InvalidConfig("trunk must have >= 1 layer".into()));
        }
        if self.n_domains_max < 1 {
            return Err(Error::InvalidConfig("n_domains_max must be >= 1".into()));
        }
        match self.input_mode {
            InputMode::Vector { dim } => {
                if dim == 0 {
                    return Err(Error::InvalidConfig("vector dim must be > 0".into()));
                }
            }
            InputMode::Image {
                height,
                width,
                channels,
            } => {
                if channels == 0 {
                    return Err(Error::InvalidConfig("image channels must be > 0".into()));
                }
                let min = 1usize << self.trunk.len();
                if height < min || width < min {
                    return Err(Error::InvalidConfig(format!(
                        "image {height}x{width} too small for {} pooling stages",
                        self.trunk.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Flat sample width as stored in dataset blobs.
    pub fn input_width(&self) -> usize {
        match self.input_mode {
            InputMode::Vector { dim } => dim,
            InputMode::Image {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }

    /// Trunk output dimension (what the heads and embedding export see).
    pub fn feature_dim(&self) -> usize {
        match self.input_mode {
            InputMode::Vector { .. } => self.trunk.last().unwrap().width,
            InputMode::Image { height, width, .. } => {
                let (mut h, mut w) = (height, width);
                for _ in &self.trunk {
                    h /= 2;
                    w /= 2;
                }
                self.trunk.last().unwrap().width * h * w
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Main,
    Over,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadKind::Main => write!(f, "main"),
            HeadKind::Over => write!(f, "over"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with current batch statistics; updates running statistics.
    Train,
    /// Normalize with stored running statistics; pure.
    Eval,
}

/// Running mean/variance for one BN layer and one domain bank.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Array2<f64>,
    pub var: Array2<f64>,
}

impl RunningStats {
    fn fresh(width: usize) -> Self {
        RunningStats {
            mean: Array2::zeros((1, width)),
            var: Array2::from_elem((1, width), 1.0),
        }
    }
}

/// Per-domain running statistics plus the shared affine parameters of one
/// normalization layer.
#[derive(Debug, Clone)]
pub struct DomainBnState {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
    pub momentum: f64,
    pub(crate) running: BTreeMap<usize, RunningStats>,
}

impl DomainBnState {
    fn new(width: usize, momentum: f64) -> Self {
        DomainBnState {
            gamma: Array2::from_elem((1, width), 1.0),
            beta: Array2::zeros((1, width)),
            momentum,
            running: BTreeMap::new(),
        }
    }

    pub fn stats(&self, bank: usize) -> Option<&RunningStats> {
        self.running.get(&bank)
    }

    fn update(&mut self, bank: usize, batch_mean: &Array2<f64>, batch_var: &Array2<f64>) {
        let m = self.momentum;
        let stats = self.running.get_mut(&bank).expect("bank registered");
        stats.mean = &stats.mean * (1.0 - m) + &(batch_mean * m);
        stats.var = &stats.var * (1.0 - m) + &(batch_var * m);
    }
}

#[derive(Debug, Clone)]
enum LayerGeom {
    Affine {
        #[allow(dead_code)]
        in_dim: usize,
    },
    Conv {
        in_ch: usize,
        in_h: usize,
        in_w: usize,
        out_ch: usize,
        // Spatial size after the 2x2 average pool.
        pool_h: usize,
        pool_w: usize,
    },
}

#[derive(Debug, Clone)]
struct TrunkLayer {
    weight: Array2<f64>,
    bias: Array2<f64>,
    bn: DomainBnState,
    geom: LayerGeom,
    activation: Activation,
}

#[derive(Debug, Clone)]
struct Head {
    weight: Array2<f64>,
    bias: Array2<f64>,
}

/// Tape handles for every trainable parameter, in declaration order.
#[derive(Debug, Clone)]
pub struct ParamBinding {
    trunk: Vec<[Var; 4]>, // weight, bias, gamma, beta
    pub(crate) main_heads: Vec<(Var, Var)>,
    pub(crate) over_heads: Vec<(Var, Var)>,
}

impl ParamBinding {
    /// All parameter nodes, aligned with [`Model::params`].
    pub fn all(&self) -> Vec<Var> {
        let mut vars = Vec::new();
        for t in &self.trunk {
            vars.extend_from_slice(t);
        }
        for &(w, b) in self.main_heads.iter().chain(self.over_heads.iter()) {
            vars.push(w);
            vars.push(b);
        }
        vars
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    trunk: Vec<TrunkLayer>,
    main_heads: Vec<Head>,
    over_heads: Vec<Head>,
    registered: BTreeSet<usize>,
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Deterministically initialize a model from its config.
pub fn init_model(config: ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trunk = Vec::new();

    match config.input_mode {
        InputMode::Vector { dim } => {
            let mut in_dim = dim;
            for spec in &config.trunk {
                trunk.push(TrunkLayer {
                    weight: uniform_init(&mut rng, in_dim, spec.width, in_dim),
                    bias: Array2::zeros((1, spec.width)),
                    bn: DomainBnState::new(spec.width, config.bn_momentum),
                    geom: LayerGeom::Affine { in_dim },
                    activation: spec.activation,
                });
                in_dim = spec.width;
            }
        }
        InputMode::Image {
            height,
            width,
            channels,
        } => {
            let (mut h, mut w, mut ch) = (height, width, channels);
            for spec in &config.trunk {
                let fan_in = ch * 9;
                trunk.push(TrunkLayer {
                    weight: uniform_init(&mut rng, fan_in, spec.width, fan_in),
                    bias: Array2::zeros((1, spec.width)),
                    bn: DomainBnState::new(spec.width, config.bn_momentum),
                    geom: LayerGeom::Conv {
                        in_ch: ch,
                        in_h: h,
                        in_w: w,
                        out_ch: spec.width,
                        pool_h: h / 2,
                        pool_w: w / 2,
                    },
                    activation: spec.activation,
                });
                h /= 2;
                w /= 2;
                ch = spec.width;
            }
        }
    }

    let feat = config.feature_dim();
    let head_bank = |rng: &mut ChaCha8Rng, out: usize, s: usize| -> Vec<Head> {
        (0..s)
            .map(|_| Head {
                weight: uniform_init(rng, feat, out, feat),
                bias: Array2::zeros((1, out)),
            })
            .collect()
    };
    let main_heads = head_bank(&mut rng, config.n_clusters, config.n_head_replicas);
    let over_heads = head_bank(&mut rng, config.n_overclusters, config.n_head_replicas);

    Ok(Model {
        config,
        trunk,
        main_heads,
        over_heads,
        registered: BTreeSet::new(),
    })
}

impl Model {
    /// Statistics bank backing a domain id.
    fn bank_of(&self, domain: usize) -> usize {
        if self.config.shared_bn {
            0
        } else {
            domain
        }
    }

    pub fn is_registered(&self, domain: usize) -> bool {
        self.registered.contains(&domain)
    }

    pub fn registered_domains(&self) -> Vec<usize> {
        self.registered.iter().copied().collect()
    }

    /// Allocate fresh running statistics (mean 0, variance 1) for a new
    /// domain in every BN layer. Shared gamma/beta are untouched.
    pub fn register_domain(&mut self, domain: usize) -> Result<()> {
        if self.registered.contains(&domain) {
            return Err(Error::DuplicateDomain(domain));
        }
        if self.registered.len() >= self.config.n_domains_max {
            return Err(Error::CapacityExceeded {
                requested: domain,
                capacity: self.config.n_domains_max,
            });
        }
        self.registered.insert(domain);
        let bank = self.bank_of(domain);
        for layer in &mut self.trunk {
            layer
                .bn
                .running
                .entry(bank)
                .or_insert_with(|| RunningStats::fresh(layer.bias.ncols()));
        }
        Ok(())
    }

    /// Running statistics of one BN layer for one domain, if registered.
    pub fn running_stats(&self, layer: usize, domain: usize) -> Option<&RunningStats> {
        let bank = self.bank_of(domain);
        self.trunk.get(layer).and_then(|l| l.bn.stats(bank))
    }

    pub fn n_trunk_layers(&self) -> usize {
        self.trunk.len()
    }

    /// Trainable parameters in declaration order: per trunk layer
    /// (weight, bias, gamma, beta), then main head replicas (weight,
    /// bias), then overclustering replicas.
    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for l in &self.trunk {
            out.push(&l.weight);
            out.push(&l.bias);
            out.push(&l.bn.gamma);
            out.push(&l.bn.beta);
        }
        for h in self.main_heads.iter().chain(self.over_heads.iter()) {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for l in &mut self.trunk {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            out.push(&mut l.bn.gamma);
            out.push(&mut l.bn.beta);
        }
        for h in self.main_heads.iter_mut().chain(self.over_heads.iter_mut()) {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    /// Hex digest over all trainable parameters; running statistics are
    /// excluded on purpose (statistics-only passes must not change it).
    pub fn weights_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.params() {
            for &x in p.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }

    /// Insert every parameter as a leaf on the tape.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        let trunk = self
            .trunk
            .iter()
            .map(|l| {
                [
                    tape.leaf(l.weight.clone()),
                    tape.leaf(l.bias.clone()),
                    tape.leaf(l.bn.gamma.clone()),
                    tape.leaf(l.bn.beta.clone()),
                ]
            })
            .collect();
        let bank = |heads: &[Head], tape: &mut Tape| {
            heads
                .iter()
                .map(|h| (tape.leaf(h.weight.clone()), tape.leaf(h.bias.clone())))
                .collect()
        };
        ParamBinding {
            trunk,
            main_heads: bank(&self.main_heads, tape),
            over_heads: bank(&self.over_heads, tape),
        }
    }

    fn check_domain_and_batch(&self, n: usize, domain: usize, mode: Mode) -> Result<()> {
        if !self.registered.contains(&domain) {
            return Err(Error::UnknownDomain(domain));
        }
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        Ok(())
    }

    /// Trunk forward on the tape. `update_stats` drives the running EMA
    /// from the batch statistics (train mode only).
    #[allow(clippy::too_many_arguments)]
    fn trunk_forward(
        &mut self,
        tape: &mut Tape,
        binding: &ParamBinding,
        inputs: Var,
        n_samples: usize,
        domain: usize,
        mode: Mode,
        update_stats: bool,
    ) -> Var {
        let bank = self.bank_of(domain);
        let eps = self.config.bn_epsilon;
        let mut x = inputs;

        // Image inputs arrive as N x (C*H*W); conv blocks operate on
        // (N*H*W) x C so that BN columns are channels.
        if let InputMode::Image {
            height,
            width,
            channels,
        } = self.config.input_mode
        {
            let idx = to_grid_indices(n_samples, channels, height, width);
            x = tape.gather(x, Arc::new(idx), n_samples * height * width, channels);
        }

        for (i, vars) in binding.trunk.iter().enumerate() {
            let [w, b, gamma, beta] = *vars;
            let geom = self.trunk[i].geom.clone();
            let pre_bn = match geom {
                LayerGeom::Affine { .. } => {
                    let h = tape.matmul(x, w);
                    tape.add_broadcast(h, b)
                }
                LayerGeom::Conv {
                    in_ch, in_h, in_w, ..
                } => {
                    let idx = im2col_indices(n_samples, in_ch, in_h, in_w);
                    let cols = tape.gather(x, Arc::new(idx), n_samples * in_h * in_w, in_ch * 9);
                    let h = tape.matmul(cols, w);
                    tape.add_broadcast(h, b)
                }
            };

            let normalized = match mode {
                Mode::Train => {
                    let rows = tape.shape(pre_bn).0 as f64;
                    let mean = tape.col_sum(pre_bn);
                    let mean = tape.mul_scalar(mean, 1.0 / rows);
                    let centered = tape.sub(pre_bn, mean);
                    let sq = tape.mul(centered, centered);
                    let var = tape.col_sum(sq);
                    let var = tape.mul_scalar(var, 1.0 / rows);
                    if update_stats {
                        let m = tape.value(mean).clone();
                        let v = tape.value(var).clone();
                        self.trunk[i].bn.update(bank, &m, &v);
                    }
                    let var_eps = tape.add_scalar(var, eps);
                    let inv_std = tape.pow_const(var_eps, -0.5);
                    tape.mul(centered, inv_std)
                }
                Mode::Eval => {
                    let stats = self.trunk[i].bn.stats(bank).expect("registered bank");
                    let mean = tape.leaf(stats.mean.clone());
                    let inv_std = tape.leaf(stats.var.mapv(|v| 1.0 / (v + eps).sqrt()));
                    let centered = tape.sub(pre_bn, mean);
                    tape.mul(centered, inv_std)
                }
            };
            let scaled = tape.mul(normalized, gamma);
            let shifted = tape.add_broadcast(scaled, beta);
            x = match self.trunk[i].activation {
                Activation::Relu => tape.relu(shifted),
                Activation::None => shifted,
            };

            // Average pool 2x2 and, after the last conv block, flatten
            // back to one row per sample.
            if let LayerGeom::Conv {
                in_h,
                in_w,
                out_ch,
                pool_h,
                pool_w,
                ..
            } = geom
            {
                let parts: Vec<Var> = (0..4)
                    .map(|corner| {
                        let idx = pool_indices(n_samples, out_ch, in_h, in_w, corner);
                        tape.gather(x, Arc::new(idx), n_samples * pool_h * pool_w, out_ch)
                    })
                    .collect();
                let sum01 = tape.add(parts[0], parts[1]);
                let sum23 = tape.add(parts[2], parts[3]);
                let sum = tape.add(sum01, sum23);
                x = tape.mul_scalar(sum, 0.25);
                if i + 1 == self.trunk.len() {
                    let idx = flatten_indices(n_samples, out_ch, pool_h, pool_w);
                    x = tape.gather(x, Arc::new(idx), n_samples, out_ch * pool_h * pool_w);
                }
            }
        }
        x
    }

    fn head_bank<'b>(&self, binding: &'b ParamBinding, kind: HeadKind) -> &'b [(Var, Var)] {
        match kind {
            HeadKind::Main => &binding.main_heads,
            HeadKind::Over => &binding.over_heads,
        }
    }

    /// Forward pass on the tape: one softmax output node per head replica.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_bound(
        &mut self,
        tape: &mut Tape,
        binding: &ParamBinding,
        inputs: &Array2<f64>,
        domain: usize,
        head_kind: HeadKind,
        mode: Mode,
        update_stats: bool,
    ) -> Result<Vec<Var>> {
        let n = inputs.nrows();
        self.check_domain_and_batch(n, domain, mode)?;
        let x = tape.leaf(inputs.clone());
        let feat = self.trunk_forward(tape, binding, x, n, domain, mode, update_stats);
        Ok(self
            .head_bank(binding, head_kind)
            .to_vec()
            .into_iter()
            .map(|(w, b)| {
                let logits = tape.matmul(feat, w);
                let logits = tape.add_broadcast(logits, b);
                tape.softmax_rows(logits)
            })
            .collect())
    }

    /// Paired forward: batch statistics are computed over the pooled
    /// original+transformed activations, then applied to both halves.
    /// Returns prediction stacks for the originals and the transforms.
    #[allow(clippy::too_many_arguments)]
    pub fn paired_forward_bound(
        &mut self,
        tape: &mut Tape,
        binding: &ParamBinding,
        originals: &Array2<f64>,
        transformed: &Array2<f64>,
        domain: usize,
        head_kind: HeadKind,
        update_stats: bool,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        if originals.dim() != transformed.dim() {
            return Err(Error::ShapeMismatch {
                expected: originals.dim(),
                got: transformed.dim(),
            });
        }
        let n = originals.nrows();
        self.check_domain_and_batch(2 * n, domain, Mode::Train)?;
        let a = tape.leaf(originals.clone());
        let b = tape.leaf(transformed.clone());
        let pooled = tape.concat_rows(a, b);
        let feat = self.trunk_forward(
            tape,
            binding,
            pooled,
            2 * n,
            domain,
            Mode::Train,
            update_stats,
        );
        let mut preds = Vec::new();
        let mut preds_prime = Vec::new();
        for (w, bias) in self.head_bank(binding, head_kind).to_vec() {
            let logits = tape.matmul(feat, w);
            let logits = tape.add_broadcast(logits, bias);
            let probs = tape.softmax_rows(logits);
            preds.push(tape.slice_rows(probs, 0, n));
            preds_prime.push(tape.slice_rows(probs, n, n));
        }
        Ok((preds, preds_prime))
    }

    /// Value-level forward (one probability matrix per replica).
    pub fn forward(
        &mut self,
        inputs: &Array2<f64>,
        domain: usize,
        head_kind: HeadKind,
        mode: Mode,
    ) -> Result<Vec<Array2<f64>>> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let update = mode == Mode::Train;
        let vars =
            self.forward_bound(&mut tape, &binding, inputs, domain, head_kind, mode, update)?;
        Ok(vars.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Value-level paired forward with pooled batch statistics.
    pub fn paired_forward(
        &mut self,
        originals: &Array2<f64>,
        transformed: &Array2<f64>,
        domain: usize,
        head_kind: HeadKind,
    ) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let (a, b) = self.paired_forward_bound(
            &mut tape, &binding, originals, transformed, domain, head_kind, true,
        )?;
        let take = |vars: Vec<Var>, tape: &Tape| {
            vars.into_iter()
                .map(|v| tape.value(v).clone())
                .collect::<Vec<_>>()
        };
        Ok((take(a, &tape), take(b, &tape)))
    }

    /// Eval-mode trunk features (input to the heads), for embedding export.
    pub fn trunk_features(&mut self, inputs: &Array2<f64>, domain: usize) -> Result<Array2<f64>> {
        let n = inputs.nrows();
        self.check_domain_and_batch(n, domain, Mode::Eval)?;
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let x = tape.leaf(inputs.clone());
        let feat = self.trunk_forward(&mut tape, &binding, x, n, domain, Mode::Eval, false);
        Ok(tape.value(feat).clone())
    }

    /// Update the running statistics of every BN layer for `domain` by an
    /// EMA over the stream's batch statistics. Weights are untouched.
    pub fn estimate_bn_statistics<I>(&mut self, stream: I, domain: usize) -> Result<()>
    where
        I: IntoIterator<Item = Array2<f64>>,
    {
        if !self.registered.contains(&domain) {
            return Err(Error::UnknownDomain(domain));
        }
        let mut saw_batch = false;
        for batch in stream {
            saw_batch = true;
            let mut tape = Tape::new();
            let binding = self.bind(&mut tape);
            let n = batch.nrows();
            self.check_domain_and_batch(n, domain, Mode::Train)?;
            let x = tape.leaf(batch);
            self.trunk_forward(&mut tape, &binding, x, n, domain, Mode::Train, true);
        }
        if !saw_batch {
            return Err(Error::EmptyStream);
        }
        Ok(())
    }

    // Checkpoint plumbing: flat views over the BN banks.
    pub(crate) fn bn_banks(&self) -> Vec<(usize, Vec<(usize, RunningStats)>)> {
        self.trunk
            .iter()
            .enumerate()
            .map(|(i, l)| {
                (
                    i,
                    l.bn.running.iter().map(|(&d, s)| (d, s.clone())).collect(),
                )
            })
            .collect()
    }

    pub(crate) fn restore_bn_banks(
        &mut self,
        banks: Vec<(usize, Vec<(usize, RunningStats)>)>,
        registered: Vec<usize>,
    ) {
        for (i, entries) in banks {
            self.trunk[i].bn.running = entries.into_iter().collect();
        }
        self.registered = registered.into_iter().collect();
    }
}

/// Gradients of every trainable parameter after one backward pass.
/// Fails with [`Error::GraphConsumed`] if the graph was already used.
pub fn gradients(tape: &mut Tape, loss: Var, binding: &ParamBinding) -> Result<Vec<Array2<f64>>> {
    tape.backward(loss)?;
    Ok(binding.all().iter().map(|&v| tape.grad(v)).collect())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Index builders for the gather-based conv machinery
// ---------------------------------------------------------------------------

/// N x (C*H*W) sample-major inputs -> (N*H*W) x C grid layout.
fn to_grid_indices(n: usize, ch: usize, h: usize, w: usize) -> Vec<i64> {
    let mut idx = Vec::with_capacity(n * h * w * ch);
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    idx.push((s * ch * h * w + c * h * w + y * w + x) as i64);
                }
            }
        }
    }
    idx
}

/// im2col for a 3x3, stride-1, pad-1 convolution over (N*H*W) x C input.
/// Output row (s, y, x); output col (c, ky, kx); -1 marks zero padding.
fn im2col_indices(n: usize, ch: usize, h: usize, w: usize) -> Vec<i64> {
    let mut idx = Vec::with_capacity(n * h * w * ch * 9);
    for s in 0..n {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for c in 0..ch {
                    for ky in -1..=1i64 {
                        for kx in -1..=1i64 {
                            let (yy, xx) = (y + ky, x + kx);
                            if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
                                idx.push(-1);
                            } else {
                                let row = s * h * w + yy as usize * w + xx as usize;
                                idx.push((row * ch + c) as i64);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

/// One corner of each 2x2 pooling window over (N*H*W) x C input.
fn pool_indices(n: usize, ch: usize, h: usize, w: usize, corner: usize) -> Vec<i64> {
    let (dy, dx) = [(0, 0), (0, 1), (1, 0), (1, 1)][corner];
    let (ph, pw) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(n * ph * pw * ch);
    for s in 0..n {
        for y in 0..ph {
            for x in 0..pw {
                let row = s * h * w + (2 * y + dy) * w + (2 * x + dx);
                for c in 0..ch {
                    idx.push((row * ch + c) as i64);
                }
            }
        }
    }
    idx
}

/// (N*H*W) x C grid layout -> N x (C*H*W) sample-major rows.
fn flatten_indices(n: usize, ch: usize, h: usize, w: usize) -> Vec<i64> {
    let mut idx = Vec::with_capacity(n * ch * h * w);
    for s in 0..n {
        for c in 0..ch {
            for y in 0..h {
                for x in 0..w {
                    let row = s * h * w + y * w + x;
                    idx.push((row * ch + c) as i64);
                }
            }
        }
    }
    idx
}
