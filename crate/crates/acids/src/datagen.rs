//! Deterministic synthetic multi-domain datasets.
//!
//! Semantic classes are crossed with per-domain styles: every domain
//! renders the same class prototypes under its own affine map and noise
//! (vector mode) or palette and stroke geometry (image mode). Styles are
//! class-independent by construction, so domain identity never encodes
//! the label.
//!
//! On-disk format: `manifest.json` plus one raw blob per domain
//! (little-endian float32 rows in vector mode, uint8 pixels in image
//! mode) and an int32 label blob. Labels ride along for evaluation only,
//! behind [`SealedLabels`].

use crate::error::{Error, Principal, Result};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Shape archetypes rendered in image mode, indexed by `class % 7`.
pub const SHAPE_NAMES: [&str; 7] = [
    "circle", "square", "triangle", "star", "cross", "bar", "ring",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    Vector,
    Image,
}

/// Per-domain rendering style. Parameters are class-independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StyleSpec {
    Vector {
        /// Rotation angle (radians) applied in the first coordinate plane.
        rotation: f64,
        /// Per-coordinate scale factors; 1.0 is identity.
        scale: Vec<f64>,
        /// Additive offset per coordinate.
        translation: Vec<f64>,
        /// Standard deviation of domain-specific additive noise.
        noise_level: f64,
    },
    Image {
        /// RGB background palette in [0, 1].
        background: [f64; 3],
        /// RGB foreground palette in [0, 1].
        foreground: [f64; 3],
        /// Relative stroke width for band shapes (cross, bar, ring).
        stroke_width: f64,
        /// Standard deviation of per-pixel texture noise.
        texture_noise: f64,
        /// Swap foreground and background.
        invert_polarity: bool,
    },
}

impl StyleSpec {
    /// Identity vector style: zero rotation/translation/noise, unit scale.
    pub fn vector_identity(dim: usize) -> Self {
        StyleSpec::Vector {
            rotation: 0.0,
            scale: vec![1.0; dim],
            translation: vec![0.0; dim],
            noise_level: 0.0,
        }
    }
}

/// Everything needed to synthesize a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub name: String,
    pub mode: DataMode,
    pub n_classes: usize,
    /// Vector mode: sample dimensionality.
    pub dim: usize,
    /// Image mode: square side length; images are 3-channel.
    pub image_size: usize,
    pub samples_per_domain: usize,
    /// One style per domain; the domain id is the index.
    pub styles: Vec<StyleSpec>,
    /// Radius of the class-prototype circle (vector mode).
    pub class_radius: f64,
    /// Class-conditional noise around each prototype (vector mode).
    pub class_noise: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidSpec("n_classes must be >= 2".into()));
        }
        if self.styles.is_empty() {
            return Err(Error::InvalidSpec("at least one domain style".into()));
        }
        if self.samples_per_domain < self.n_classes {
            return Err(Error::InvalidSpec(format!(
                "samples_per_domain ({}) must be >= n_classes ({})",
                self.samples_per_domain, self.n_classes
            )));
        }
        if self.samples_per_domain % self.n_classes != 0 {
            return Err(Error::InvalidSpec(format!(
                "samples_per_domain ({}) must be divisible by n_classes ({}) for exact class balance",
                self.samples_per_domain, self.n_classes
            )));
        }
        match self.mode {
            DataMode::Vector => {
                if self.dim < 2 {
                    return Err(Error::InvalidSpec("vector dim must be >= 2".into()));
                }
                for (d, s) in self.styles.iter().enumerate() {
                    match s {
                        StyleSpec::Vector {
                            scale, translation, ..
                        } => {
                            if scale.len() != self.dim || translation.len() != self.dim {
                                return Err(Error::InvalidSpec(format!(
                                    "style for domain {d}: scale/translation must have dim {}",
                                    self.dim
                                )));
                            }
                        }
                        StyleSpec::Image { .. } => {
                            return Err(Error::InvalidSpec(format!(
                                "style for domain {d} is an image style in vector mode"
                            )));
                        }
                    }
                }
            }
            DataMode::Image => {
                if self.image_size < 8 {
                    return Err(Error::InvalidSpec("image_size must be >= 8".into()));
                }
                if self
                    .styles
                    .iter()
                    .any(|s| matches!(s, StyleSpec::Vector { .. }))
                {
                    return Err(Error::InvalidSpec(
                        "vector style in image mode".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Flat width of one stored sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.mode {
            DataMode::Vector => vec![self.dim],
            DataMode::Image => vec![3, self.image_size, self.image_size],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub domain_id: usize,
    /// Sample count in the full blob (a subset view may use fewer).
    pub n_samples: usize,
    pub style: StyleSpec,
    pub data_blob: String,
    pub labels_blob: String,
    pub data_offset: u64,
    pub labels_offset: u64,
    /// Subset of blob sample indices; `None` means all samples.
    #[serde(default)]
    pub indices: Option<Vec<u32>>,
}

impl DomainEntry {
    /// Samples visible through this entry (subset-aware).
    pub fn len(&self) -> usize {
        match &self.indices {
            Some(idx) => idx.len(),
            None => self.n_samples,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub name: String,
    pub mode: DataMode,
    pub n_classes: usize,
    /// `[dim]` in vector mode, `[channels, height, width]` in image mode.
    pub sample_shape: Vec<usize>,
    pub seed: u64,
    pub labels_available: bool,
    pub domains: Vec<DomainEntry>,
}

impl DatasetManifest {
    pub fn sample_width(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn domain(&self, id: usize) -> Option<&DomainEntry> {
        self.domains.iter().find(|d| d.domain_id == id)
    }
}

/// Ground-truth labels, openable only by the evaluator principal.
#[derive(Debug, Clone)]
pub struct SealedLabels {
    labels: Arc<Vec<i32>>,
}

impl SealedLabels {
    pub fn seal(labels: Vec<i32>) -> Self {
        SealedLabels {
            labels: Arc::new(labels),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Unseal for scoring. Any non-evaluator principal is rejected.
    pub fn open(&self, who: Principal) -> Result<&[i32]> {
        match who {
            Principal::Evaluator => Ok(&self.labels),
            other => Err(Error::SealedLabelAccess(other)),
        }
    }

    /// Generator-side access, before the seal matters (stratified
    /// subsampling needs class membership).
    pub(crate) fn raw(&self) -> &[i32] {
        &self.labels
    }
}

#[derive(Debug, Clone)]
struct DomainData {
    /// Full blob bytes, shared across subset views.
    data_bytes: Arc<Vec<u8>>,
    label_bytes: Arc<Vec<u8>>,
    /// Materialized subset view.
    inputs: Array2<f64>,
    labels: SealedLabels,
}

/// A loaded (or freshly generated) dataset: manifest plus per-domain
/// sample matrices. Image samples are scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    domains: BTreeMap<usize, DomainData>,
}

impl Dataset {
    pub fn domain_ids(&self) -> Vec<usize> {
        self.domains.keys().copied().collect()
    }

    pub fn n_samples(&self, domain: usize) -> Result<usize> {
        Ok(self.domain_data(domain)?.inputs.nrows())
    }

    pub fn inputs(&self, domain: usize) -> Result<&Array2<f64>> {
        Ok(&self.domain_data(domain)?.inputs)
    }

    pub fn labels(&self, domain: usize) -> Result<&SealedLabels> {
        Ok(&self.domain_data(domain)?.labels)
    }

    fn domain_data(&self, domain: usize) -> Result<&DomainData> {
        self.domains
            .get(&domain)
            .ok_or(Error::UnknownDomain(domain))
    }

    /// Deterministic within-epoch sampler (a seeded permutation consumed
    /// without replacement).
    pub fn epoch_sampler(&self, domain: usize, seed: u64) -> Result<EpochSampler> {
        let n = self.n_samples(domain)?;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, domain as u64, 0x5a));
        // Fisher-Yates.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        Ok(EpochSampler { order, cursor: 0 })
    }

    /// Draw the next `n` samples of an epoch without replacement.
    pub fn sample_batch(
        &self,
        domain: usize,
        n: usize,
        sampler: &mut EpochSampler,
    ) -> Result<(Array2<f64>, SealedLabels)> {
        let data = self.domain_data(domain)?;
        let remaining = sampler.order.len() - sampler.cursor;
        if n > remaining {
            return Err(Error::Exhausted {
                domain,
                requested: n,
                remaining,
            });
        }
        let picks = &sampler.order[sampler.cursor..sampler.cursor + n];
        sampler.cursor += n;
        let width = data.inputs.ncols();
        let mut out = Array2::zeros((n, width));
        let mut labels = Vec::with_capacity(n);
        for (row, &i) in picks.iter().enumerate() {
            out.row_mut(row).assign(&data.inputs.row(i));
            labels.push(data.labels.raw()[i]);
        }
        Ok((out, SealedLabels::seal(labels)))
    }

    /// A view containing only the given domain (same blobs). This is the
    /// handle the adaptation phase receives; source domains are absent
    /// from it by construction.
    pub fn restrict_to_domain(&self, domain: usize) -> Result<Dataset> {
        let data = self.domain_data(domain)?.clone();
        let mut manifest = self.manifest.clone();
        manifest.domains.retain(|d| d.domain_id == domain);
        if manifest.domains.is_empty() {
            return Err(Error::UnknownDomain(domain));
        }
        let mut domains = BTreeMap::new();
        domains.insert(domain, data);
        Ok(Dataset { manifest, domains })
    }
}

/// Permutation cursor for sampling without replacement within an epoch.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    pub fn remaining(&self) -> usize {
        self.order.len() - self.cursor
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// SplitMix64-style mixing for derived seeds.
pub(crate) fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(b)
        .wrapping_mul(0xbf58476d1ce4e5b9)
        .wrapping_add(c);
    z ^= z >> 30;
    z = z.wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    z
}

/// Standard normal draw via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Synthesize a dataset in memory. Blob bytes are produced at their
/// storage precision, so the same seed gives bit-identical blobs.
pub fn generate(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let sample_shape = spec.sample_shape();
    let width = sample_shape.iter().product::<usize>();
    let mut domains = BTreeMap::new();
    let mut entries = Vec::new();

    for (domain_id, style) in spec.styles.iter().enumerate() {
        let n = spec.samples_per_domain;
        let mut labels = Vec::with_capacity(n);
        let mut data_bytes: Vec<u8> = Vec::with_capacity(n * width * 4);
        let mut inputs = Array2::zeros((n, width));

        for i in 0..n {
            let class = i % spec.n_classes;
            labels.push(class as i32);
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, domain_id as u64, i as u64));
            match spec.mode {
                DataMode::Vector => {
                    let x = render_vector(spec, style, class, &mut rng);
                    for (j, &v) in x.iter().enumerate() {
                        let q = v as f32;
                        data_bytes.extend_from_slice(&q.to_le_bytes());
                        inputs[(i, j)] = q as f64;
                    }
                }
                DataMode::Image => {
                    let pixels = render_image(spec, style, class, &mut rng);
                    for (j, &q) in pixels.iter().enumerate() {
                        data_bytes.push(q);
                        inputs[(i, j)] = q as f64 / 255.0;
                    }
                }
            }
        }

        let label_bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        entries.push(DomainEntry {
            domain_id,
            n_samples: n,
            style: style.clone(),
            data_blob: format!("domain_{domain_id}.bin"),
            labels_blob: format!("domain_{domain_id}_labels.bin"),
            data_offset: 0,
            labels_offset: 0,
            indices: None,
        });
        domains.insert(
            domain_id,
            DomainData {
                data_bytes: Arc::new(data_bytes),
                label_bytes: Arc::new(label_bytes),
                inputs,
                labels: SealedLabels::seal(labels),
            },
        );
    }

    Ok(Dataset {
        manifest: DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            name: spec.name.clone(),
            mode: spec.mode,
            n_classes: spec.n_classes,
            sample_shape,
            seed: spec.seed,
            labels_available: true,
            domains: entries,
        },
        domains,
    })
}

fn render_vector(
    spec: &GeneratorSpec,
    style: &StyleSpec,
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let StyleSpec::Vector {
        rotation,
        scale,
        translation,
        noise_level,
    } = style
    else {
        unreachable!("validated mode");
    };
    let dim = spec.dim;
    let angle = 2.0 * std::f64::consts::PI * class as f64 / spec.n_classes as f64;
    let mut x = vec![0.0; dim];
    x[0] = spec.class_radius * angle.cos();
    x[1] = spec.class_radius * angle.sin();
    // Class-conditional spread around the prototype.
    for v in x.iter_mut() {
        *v += spec.class_noise * normal(rng);
    }
    // Style: anisotropic scale, rotation in the (0,1) plane, translation.
    for (v, s) in x.iter_mut().zip(scale.iter()) {
        *v *= s;
    }
    let (c, s) = (rotation.cos(), rotation.sin());
    let (x0, x1) = (x[0], x[1]);
    x[0] = c * x0 - s * x1;
    x[1] = s * x0 + c * x1;
    for (v, t) in x.iter_mut().zip(translation.iter()) {
        *v += t;
    }
    for v in x.iter_mut() {
        *v += noise_level * normal(rng);
    }
    x
}

fn render_image(
    spec: &GeneratorSpec,
    style: &StyleSpec,
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let StyleSpec::Image {
        background,
        foreground,
        stroke_width,
        texture_noise,
        invert_polarity,
    } = style
    else {
        unreachable!("validated mode");
    };
    let size = spec.image_size;
    let (fg, bg) = if *invert_polarity {
        (background, foreground)
    } else {
        (foreground, background)
    };
    // Per-sample geometry jitter.
    let cx = 0.5 + 0.1 * (rng.gen_range(-1.0..1.0));
    let cy = 0.5 + 0.1 * (rng.gen_range(-1.0..1.0));
    let radius = rng.gen_range(0.28..0.38);
    let theta = rng.gen_range(0.0..(2.0 * std::f64::consts::PI));
    let stroke = stroke_width.clamp(0.05, 0.9);

    let shape = class % 7;
    let mut pixels = vec![0u8; 3 * size * size];
    let (sin_t, cos_t) = theta.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let px = (x as f64 + 0.5) / size as f64 - cx;
            let py = (y as f64 + 0.5) / size as f64 - cy;
            // Rotate into shape frame and normalize by the size.
            let u = (cos_t * px + sin_t * py) / radius;
            let v = (-sin_t * px + cos_t * py) / radius;
            let inside = shape_contains(shape, u, v, stroke);
            let base = if inside { fg } else { bg };
            for ch in 0..3 {
                let mut val = base[ch] + texture_noise * normal(rng);
                val = val.clamp(0.0, 1.0);
                pixels[ch * size * size + y * size + x] = (val * 255.0).round() as u8;
            }
        }
    }
    pixels
}

/// Shape membership in normalized coordinates (|u|,|v| <= 1 is the
/// archetype's bounding box).
fn shape_contains(shape: usize, u: f64, v: f64, stroke: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match shape {
        0 => r <= 1.0,                               // circle
        1 => u.abs() <= 0.85 && v.abs() <= 0.85,     // square
        2 => {
            // Upward triangle: y from -1 (base) to 1 (apex).
            let y = -v;
            y >= -0.8 && u.abs() <= 0.7 * (1.0 - (y + 0.8) / 1.8)
        }
        3 => {
            // Five-point star via angular radius modulation.
            let phi = v.atan2(u);
            let limit = 0.45 + 0.55 * (0.5 * (1.0 + (5.0 * phi).cos()));
            r <= limit
        }
        4 => (u.abs() <= stroke && v.abs() <= 1.0) || (v.abs() <= stroke && u.abs() <= 1.0), // cross
        5 => v.abs() <= stroke && u.abs() <= 1.0,    // bar
        6 => r <= 1.0 && r >= 1.0 - stroke,          // ring
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// Disk format
// ---------------------------------------------------------------------------

/// Write `manifest.json` and all referenced blobs into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest_json = serde_json::to_string_pretty(&dataset.manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest_json)?;
    for entry in &dataset.manifest.domains {
        let data = &dataset.domains[&entry.domain_id];
        std::fs::write(dir.join(&entry.data_blob), data.data_bytes.as_slice())?;
        std::fs::write(dir.join(&entry.labels_blob), data.label_bytes.as_slice())?;
    }
    Ok(())
}

/// Load a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::InvalidSpec(format!(
            "unsupported manifest schema version {}",
            manifest.schema_version
        )));
    }
    let width = manifest.sample_width();
    let mut domains = BTreeMap::new();
    for entry in &manifest.domains {
        let data_bytes = Arc::new(std::fs::read(dir.join(&entry.data_blob))?);
        let label_bytes = Arc::new(std::fs::read(dir.join(&entry.labels_blob))?);
        let domain =
            materialize_domain(&manifest, entry, width, data_bytes, label_bytes)?;
        domains.insert(entry.domain_id, domain);
    }
    Ok(Dataset { manifest, domains })
}

fn materialize_domain(
    manifest: &DatasetManifest,
    entry: &DomainEntry,
    width: usize,
    data_bytes: Arc<Vec<u8>>,
    label_bytes: Arc<Vec<u8>>,
) -> Result<DomainData> {
    let elem = match manifest.mode {
        DataMode::Vector => 4,
        DataMode::Image => 1,
    };
    let need = entry.data_offset as usize + entry.n_samples * width * elem;
    if data_bytes.len() < need {
        return Err(Error::InvalidSpec(format!(
            "blob {} too small: {} < {need}",
            entry.data_blob,
            data_bytes.len()
        )));
    }
    let lneed = entry.labels_offset as usize + entry.n_samples * 4;
    if label_bytes.len() < lneed {
        return Err(Error::InvalidSpec(format!(
            "label blob {} too small",
            entry.labels_blob
        )));
    }

    let view: Vec<usize> = match &entry.indices {
        None => (0..entry.n_samples).collect(),
        Some(idx) => {
            if idx.iter().any(|&i| i as usize >= entry.n_samples) {
                return Err(Error::InvalidSpec("subset index out of range".into()));
            }
            idx.iter().map(|&i| i as usize).collect()
        }
    };

    let mut inputs = Array2::zeros((view.len(), width));
    let mut labels = Vec::with_capacity(view.len());
    let dbase = entry.data_offset as usize;
    let lbase = entry.labels_offset as usize;
    for (row, &i) in view.iter().enumerate() {
        for j in 0..width {
            let v = match manifest.mode {
                DataMode::Vector => {
                    let o = dbase + (i * width + j) * 4;
                    f32::from_le_bytes(data_bytes[o..o + 4].try_into().unwrap()) as f64
                }
                DataMode::Image => data_bytes[dbase + i * width + j] as f64 / 255.0,
            };
            inputs[(row, j)] = v;
        }
        let o = lbase + i * 4;
        let label = i32::from_le_bytes(label_bytes[o..o + 4].try_into().unwrap());
        if label < 0 || label as usize >= manifest.n_classes {
            return Err(Error::LabelOutOfRange {
                label: label as i64,
                bound: manifest.n_classes,
            });
        }
        labels.push(label);
    }
    Ok(DomainData {
        data_bytes,
        label_bytes,
        inputs,
        labels: SealedLabels::seal(labels),
    })
}

// ---------------------------------------------------------------------------
// Subsampling
// ---------------------------------------------------------------------------

/// Per-class stratified subset of every domain in the dataset. The new
/// manifest references the same blobs through an index list.
pub fn subsample_target(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidSpec(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut manifest = dataset.manifest.clone();
    let mut domains = BTreeMap::new();
    for entry in manifest.domains.iter_mut() {
        let data = &dataset.domains[&entry.domain_id];
        let full: Vec<usize> = match &entry.indices {
            None => (0..entry.n_samples).collect(),
            Some(idx) => idx.iter().map(|&i| i as usize).collect(),
        };
        // Bucket visible samples by class.
        let mut by_class: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (row, &blob_idx) in full.iter().enumerate() {
            by_class
                .entry(data.labels.raw()[row])
                .or_default()
                .push(blob_idx);
        }
        let mut keep: Vec<u32> = Vec::new();
        for (&class, members) in by_class.iter() {
            let k = (members.len() as f64 * fraction + 1e-9).floor() as usize;
            if k < 1 {
                return Err(Error::FractionTooSmall {
                    class: class as usize,
                    fraction,
                });
            }
            let mut order = members.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                seed,
                entry.domain_id as u64,
                class as u64,
            ));
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            keep.extend(order[..k].iter().map(|&i| i as u32));
        }
        keep.sort_unstable();
        entry.indices = Some(keep);
        let rebuilt = materialize_domain(
            &manifest_probe(&dataset.manifest, entry),
            entry,
            dataset.manifest.sample_width(),
            data.data_bytes.clone(),
            data.label_bytes.clone(),
        )?;
        domains.insert(entry.domain_id, rebuilt);
    }
    Ok(Dataset { manifest, domains })
}

// materialize_domain only reads mode/n_classes from the manifest.
fn manifest_probe<'a>(m: &'a DatasetManifest, _entry: &DomainEntry) -> &'a DatasetManifest {
    m
}

/// Pool several domains into a single synthetic domain (used by the
/// merged-source training variant). Blob bytes are concatenated so the
/// merged dataset still round-trips through disk.
pub fn merge_domains(dataset: &Dataset, ids: &[usize], new_id: usize) -> Result<Dataset> {
    if ids.is_empty() {
        return Err(Error::InvalidSpec("merge of zero domains".into()));
    }
    let mut data_bytes = Vec::new();
    let mut label_bytes = Vec::new();
    let mut indices: Vec<u32> = Vec::new();
    let mut any_subset = false;
    let mut total_blob_samples = 0usize;
    let mut rows = 0usize;
    let width = dataset.manifest.sample_width();

    for &id in ids {
        let entry = dataset
            .manifest
            .domain(id)
            .ok_or(Error::UnknownDomain(id))?;
        let data = dataset.domain_data(id)?;
        data_bytes.extend_from_slice(&data.data_bytes[entry.data_offset as usize..]);
        label_bytes.extend_from_slice(&data.label_bytes[entry.labels_offset as usize..]);
        match &entry.indices {
            Some(idx) => {
                any_subset = true;
                indices.extend(idx.iter().map(|&i| i + total_blob_samples as u32));
            }
            None => {
                indices.extend(
                    (0..entry.n_samples).map(|i| (i + total_blob_samples) as u32),
                );
            }
        }
        total_blob_samples += entry.n_samples;
        rows += entry.len();
    }

    let entry = DomainEntry {
        domain_id: new_id,
        n_samples: total_blob_samples,
        style: dataset.manifest.domains[0].style.clone(),
        data_blob: format!("merged_{new_id}.bin"),
        labels_blob: format!("merged_{new_id}_labels.bin"),
        data_offset: 0,
        labels_offset: 0,
        indices: if any_subset || rows != total_blob_samples {
            Some(indices)
        } else {
            None
        },
    };
    let mut manifest = dataset.manifest.clone();
    manifest.domains = vec![entry.clone()];
    let data = materialize_domain(
        &manifest,
        &entry,
        width,
        Arc::new(data_bytes),
        Arc::new(label_bytes),
    )?;
    let mut domains = BTreeMap::new();
    domains.insert(new_id, data);
    Ok(Dataset { manifest, domains })
}

// ---------------------------------------------------------------------------
// Transform pipeline
// ---------------------------------------------------------------------------

/// Stochastic label-preserving transforms. Sampling is deterministic
/// given (seed, step, sample index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TransformPipeline {
    Vector {
        /// Additive Gaussian jitter sigma.
        jitter_sigma: f64,
        /// Per-coordinate scale drawn from [1-a, 1+a].
        scale_amplitude: f64,
        /// Probability of zeroing each coordinate.
        dropout_prob: f64,
    },
    Image {
        /// Smallest crop fraction; 1.0 disables cropping.
        crop_min_fraction: f64,
        flip_prob: f64,
        hue_jitter: f64,
        saturation_jitter: f64,
        brightness_jitter: f64,
    },
}

impl TransformPipeline {
    pub fn vector_default() -> Self {
        TransformPipeline::Vector {
            jitter_sigma: 0.15,
            scale_amplitude: 0.15,
            dropout_prob: 0.1,
        }
    }

    pub fn image_default() -> Self {
        TransformPipeline::Image {
            crop_min_fraction: 0.75,
            flip_prob: 0.5,
            hue_jitter: 0.1,
            saturation_jitter: 0.2,
            brightness_jitter: 0.2,
        }
    }

    /// Pipeline whose every magnitude is zero (exact identity).
    pub fn identity(mode: DataMode) -> Self {
        match mode {
            DataMode::Vector => TransformPipeline::Vector {
                jitter_sigma: 0.0,
                scale_amplitude: 0.0,
                dropout_prob: 0.0,
            },
            DataMode::Image => TransformPipeline::Image {
                crop_min_fraction: 1.0,
                flip_prob: 0.0,
                hue_jitter: 0.0,
                saturation_jitter: 0.0,
                brightness_jitter: 0.0,
            },
        }
    }

    pub fn default_for(mode: DataMode) -> Self {
        match mode {
            DataMode::Vector => Self::vector_default(),
            DataMode::Image => Self::image_default(),
        }
    }

    /// One independently sampled transform composition per row.
    pub fn apply(
        &self,
        inputs: &Array2<f64>,
        sample_shape: &[usize],
        seed: u64,
        step: u64,
    ) -> Array2<f64> {
        let mut out = inputs.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0xac1d5, step, i as u64));
            match self {
                TransformPipeline::Vector {
                    jitter_sigma,
                    scale_amplitude,
                    dropout_prob,
                } => {
                    for v in row.iter_mut() {
                        if *scale_amplitude > 0.0 {
                            *v *= rng.gen_range(1.0 - scale_amplitude..1.0 + scale_amplitude);
                        }
                        if *jitter_sigma > 0.0 {
                            *v += jitter_sigma * normal(&mut rng);
                        }
                        if *dropout_prob > 0.0 && rng.gen_range(0.0..1.0) < *dropout_prob {
                            *v = 0.0;
                        }
                    }
                }
                TransformPipeline::Image {
                    crop_min_fraction,
                    flip_prob,
                    hue_jitter,
                    saturation_jitter,
                    brightness_jitter,
                } => {
                    let (ch, h, w) = (sample_shape[0], sample_shape[1], sample_shape[2]);
                    let buf = row.as_slice_mut().expect("contiguous row");
                    if *crop_min_fraction < 1.0 {
                        let f = rng.gen_range(*crop_min_fraction..=1.0);
                        let max_off = 1.0 - f;
                        let ox = rng.gen_range(0.0..=max_off);
                        let oy = rng.gen_range(0.0..=max_off);
                        crop_resize(buf, ch, h, w, f, ox, oy);
                    }
                    if *flip_prob > 0.0 && rng.gen_range(0.0..1.0) < *flip_prob {
                        flip_horizontal(buf, ch, h, w);
                    }
                    if *hue_jitter > 0.0 || *saturation_jitter > 0.0 || *brightness_jitter > 0.0 {
                        let dh = rng.gen_range(-hue_jitter..=*hue_jitter);
                        let ds = 1.0 + rng.gen_range(-saturation_jitter..=*saturation_jitter);
                        let dv = 1.0 + rng.gen_range(-brightness_jitter..=*brightness_jitter);
                        color_jitter(buf, ch, h, w, dh, ds, dv);
                    }
                }
            }
        }
        out
    }
}

/// In-place horizontal mirror of a channel-major image buffer.
pub fn flip_horizontal(buf: &mut [f64], ch: usize, h: usize, w: usize) {
    for c in 0..ch {
        for y in 0..h {
            let base = c * h * w + y * w;
            for x in 0..w / 2 {
                buf.swap(base + x, base + w - 1 - x);
            }
        }
    }
}

/// Crop a window of relative size `f` at relative offset (ox, oy) and
/// bilinearly resize back to the full resolution.
fn crop_resize(buf: &mut [f64], ch: usize, h: usize, w: usize, f: f64, ox: f64, oy: f64) {
    let src = buf.to_vec();
    for c in 0..ch {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                // Position inside the crop window, in source pixels.
                let sx = (ox + f * (x as f64 + 0.5) / w as f64) * w as f64 - 0.5;
                let sy = (oy + f * (y as f64 + 0.5) / h as f64) * h as f64 - 0.5;
                let x0 = sx.floor().clamp(0.0, (w - 1) as f64) as usize;
                let y0 = sy.floor().clamp(0.0, (h - 1) as f64) as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let tx = (sx - x0 as f64).clamp(0.0, 1.0);
                let ty = (sy - y0 as f64).clamp(0.0, 1.0);
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                buf[c * h * w + y * w + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
}

/// Hue rotation, saturation and brightness scaling in HSV space.
/// Only meaningful for 3-channel images; fewer channels get brightness only.
fn color_jitter(buf: &mut [f64], ch: usize, h: usize, w: usize, dh: f64, ds: f64, dv: f64) {
    if ch < 3 {
        for v in buf.iter_mut() {
            *v = (*v * dv).clamp(0.0, 1.0);
        }
        return;
    }
    let plane = h * w;
    for i in 0..plane {
        let (r, g, b) = (buf[i], buf[plane + i], buf[2 * plane + i]);
        let (mut hh, mut ss, mut vv) = rgb_to_hsv(r, g, b);
        hh = (hh + dh).rem_euclid(1.0);
        ss = (ss * ds).clamp(0.0, 1.0);
        vv = (vv * dv).clamp(0.0, 1.0);
        let (r, g, b) = hsv_to_rgb(hh, ss, vv);
        buf[i] = r;
        buf[plane + i] = g;
        buf[2 * plane + i] = b;
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h * 6.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}
