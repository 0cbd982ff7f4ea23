//! Synthetic class-conditional patch datasets and split protocols.
//!
//! Every class of a world (fixed by `world_seed`) owns a prototype patch
//! grid: a background pattern shared by all classes plus a class-specific
//! component on a few foreground patches. Samples add Gaussian noise to the
//! prototype. Prototypes depend only on `(world_seed, class id)`, so any two
//! datasets from the same world agree on what each class looks like.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::hex;
use crate::container::{self, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::substream;

pub const DATASET_MAGIC: &[u8; 8] = b"SEPDATA1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Multiplies every feature.
    pub scale: f64,
    /// Standard deviation of the per-coordinate offset added after scaling.
    pub offset: f64,
    /// Extra noise, as a multiple of the dataset's intra-class noise.
    pub noise_inflation: f64,
}

impl DomainShift {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            offset: 0.0,
            noise_inflation: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub world_seed: u64,
    /// Global id of the first class; ids are `first_class..first_class + n_classes`.
    pub first_class: usize,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    /// Patches carrying the class-specific component.
    pub foreground_patches: usize,
    /// Standard deviation of the shared background pattern.
    pub background: f64,
    /// Typical distance between two class prototypes.
    pub separation: f64,
    /// Intra-class noise standard deviation.
    pub noise: f64,
    pub domain_shift: Option<DomainShift>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            world_seed: 7,
            first_class: 0,
            n_classes: 20,
            samples_per_class: 64,
            n_patches: 16,
            patch_dim: 12,
            foreground_patches: 4,
            background: 1.0,
            separation: 6.0,
            noise: 0.5,
            domain_shift: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 || self.samples_per_class == 0 || self.n_patches == 0 || self.patch_dim == 0 {
            return fail("class, sample, patch counts and patch_dim must be positive".into());
        }
        if self.foreground_patches == 0 || self.foreground_patches > self.n_patches {
            return fail(format!(
                "foreground_patches must be in 1..={}, got {}",
                self.n_patches, self.foreground_patches
            ));
        }
        if !(self.noise > 0.0) || !(self.separation > 0.0) || !(self.background >= 0.0) {
            return fail("noise and separation must be positive, background non-negative".into());
        }
        Ok(())
    }

    pub fn classes(&self) -> Vec<usize> {
        (self.first_class..self.first_class + self.n_classes).collect()
    }

    pub fn sample_len(&self) -> usize {
        self.n_patches * self.patch_dim
    }

    /// Background shared by every class of the world, `[n_patches · patch_dim]`.
    fn background_pattern(&self) -> Vec<f64> {
        let mut rng = substream(self.world_seed, "world/background");
        gaussian(&mut rng, self.sample_len(), self.background)
    }

    /// Prototype of global class `class`.
    pub fn prototype(&self, class: usize) -> Vec<f64> {
        let mut proto = self.background_pattern();
        let mut rng = substream(self.world_seed, &format!("world/class/{class}"));
        let patches = index::sample(&mut rng, self.n_patches, self.foreground_patches).into_vec();
        let mut part = gaussian(&mut rng, self.foreground_patches * self.patch_dim, 1.0);
        let norm = part.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        // Two independent directions of norm s/√2 lie about s apart.
        let target = self.separation / std::f64::consts::SQRT_2;
        part.iter_mut().for_each(|v| *v *= target / norm);
        for (slot, &p) in patches.iter().enumerate() {
            let src = &part[slot * self.patch_dim..(slot + 1) * self.patch_dim];
            for (dst, s) in proto[p * self.patch_dim..(p + 1) * self.patch_dim].iter_mut().zip(src) {
                *dst += s;
            }
        }
        proto
    }
}

fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// Patch features `[N, n_patches, patch_dim]` (values exactly representable
/// in f32) with one global class id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.spec.classes()
    }

    /// Rows `ids` as a `[ids.len(), n_patches, patch_dim]` batch.
    pub fn batch(&self, ids: &[usize]) -> Result<Tensor> {
        let per = self.spec.sample_len();
        let mut data = Vec::with_capacity(ids.len() * per);
        for &i in ids {
            if i >= self.len() {
                return Err(Error::Bounds {
                    op: "Dataset::batch",
                    start: i,
                    end: i + 1,
                    extent: self.len(),
                });
            }
            data.extend_from_slice(&self.features.data()[i * per..(i + 1) * per]);
        }
        Tensor::new(&[ids.len(), self.spec.n_patches, self.spec.patch_dim], data)
    }

    pub fn labels_of(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.labels[i]).collect()
    }

    /// SHA-256 over the spec, seed, feature bits and labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        h.update(self.seed.to_le_bytes());
        for v in self.features.data() {
            h.update((*v as f32).to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u32).to_le_bytes());
        }
        hex(&h.finalize())
    }
}

/// Prototype plus noise for every class; the spec's domain shift, if any,
/// is applied on top with the same seed.
pub fn generate_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = substream(seed, "samples");
    let per = spec.sample_len();
    let n = spec.n_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for class in spec.classes() {
        let proto = spec.prototype(class);
        for _ in 0..spec.samples_per_class {
            for &p in &proto {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(f64::from((p + spec.noise * z) as f32));
            }
            labels.push(class);
        }
    }
    let features = Tensor::new(&[n, spec.n_patches, spec.patch_dim], data)?;
    let clean = SyntheticSpec {
        domain_shift: None,
        ..spec.clone()
    };
    let dataset = Dataset {
        spec: clean,
        seed,
        features,
        labels,
    };
    match &spec.domain_shift {
        Some(shift) => domain_shift_variant(&dataset, shift, seed),
        None => Ok(dataset),
    }
}

/// `scale · x + offset + extra noise`, with the offset vector shared by every
/// sample. Labels are untouched; the identity shift returns the input.
pub fn domain_shift_variant(dataset: &Dataset, shift: &DomainShift, seed: u64) -> Result<Dataset> {
    if shift.is_identity() {
        return Ok(dataset.clone());
    }
    if !(shift.scale.is_finite() && shift.offset >= 0.0 && shift.noise_inflation >= 0.0) {
        return Err(Error::Config(format!("invalid domain shift {shift:?}")));
    }
    let per = dataset.spec.sample_len();
    let offset = gaussian(&mut substream(seed, "shift/offset"), per, shift.offset);
    let mut rng = substream(seed, "shift/noise");
    let extra = dataset.spec.noise * shift.noise_inflation;
    let data = dataset
        .features
        .data()
        .chunks(per)
        .flat_map(|row| {
            row.iter()
                .zip(&offset)
                .map(|(x, o)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    f64::from((shift.scale * x + o + extra * z) as f32)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(Dataset {
        spec: SyntheticSpec {
            domain_shift: Some(shift.clone()),
            ..dataset.spec.clone()
        },
        seed: dataset.seed,
        features: Tensor::new(dataset.features.shape(), data)?,
        labels: dataset.labels.clone(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataHeader {
    version: u32,
    spec: SyntheticSpec,
    seed: u64,
    count: usize,
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let header = DataHeader {
        version: FORMAT_VERSION,
        spec: dataset.spec.clone(),
        seed: dataset.seed,
        count: dataset.len(),
    };
    let mut payload = Vec::with_capacity(dataset.features.len() * 4 + dataset.len() * 4);
    for v in dataset.features.data() {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for &y in &dataset.labels {
        payload.extend_from_slice(&(y as u32).to_le_bytes());
    }
    container::write(path, DATASET_MAGIC, &header, &payload)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (header, payload): (DataHeader, _) = container::read(path, DATASET_MAGIC)?;
    container::check_version(path, header.version)?;
    let spec = header.spec;
    let per = spec.sample_len();
    let n_features = header.count * per;
    if payload.len() != (n_features + header.count) * 4 {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, header implies {}", payload.len(), (n_features + header.count) * 4),
        ));
    }
    let data: Vec<f64> = container::f32_values(&payload[..n_features * 4]).map(f64::from).collect();
    let labels: Vec<usize> = payload[n_features * 4..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let classes = spec.first_class..spec.first_class + spec.n_classes;
    if let Some(bad) = labels.iter().find(|y| !classes.contains(y)) {
        return Err(Error::format(path, format!("label {bad} outside {classes:?}")));
    }
    let features = Tensor::new(&[header.count, spec.n_patches, spec.patch_dim], data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Dataset {
        spec,
        seed: header.seed,
        features,
        labels,
    })
}

/// Which classes are trained on and which example ids serve as training
/// pool and test set for each class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub base: Vec<usize>,
    pub new: Vec<usize>,
    pub train: BTreeMap<usize, Vec<usize>>,
    pub test: BTreeMap<usize, Vec<usize>>,
    /// Training examples per class when subsampled.
    pub shots: Option<usize>,
}

impl SplitManifest {
    pub fn train_ids(&self, classes: &[usize]) -> Vec<usize> {
        classes.iter().flat_map(|c| self.train[c].iter().copied()).collect()
    }

    pub fn test_ids(&self, classes: &[usize]) -> Vec<usize> {
        classes.iter().flat_map(|c| self.test[c].iter().copied()).collect()
    }

    /// Checks disjointness of base/new and of train/test.
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.base.iter().find(|c| self.new.contains(c)) {
            return Err(Error::Contract(format!("class {c} is both base and new")));
        }
        for (c, train) in &self.train {
            let test = self.test.get(c).map(Vec::as_slice).unwrap_or_default();
            if let Some(id) = train.iter().find(|id| test.contains(id)) {
                return Err(Error::Contract(format!("example {id} of class {c} is in train and test")));
            }
        }
        Ok(())
    }
}

/// Per class, a seeded half of the examples forms the training pool and the
/// rest the test set. The first `⌈fraction · N_c⌉` classes of a seeded
/// shuffle are base, the remainder new.
pub fn base_new_split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<SplitManifest> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("base fraction must be in (0, 1), got {fraction}")));
    }
    let mut classes = dataset.classes();
    if classes.len() < 2 {
        return Err(Error::Contract("a base/new split needs at least two classes".into()));
    }
    classes.shuffle(&mut substream(seed, "split/classes"));
    let n_base = (fraction * classes.len() as f64).ceil() as usize;
    let mut base = classes[..n_base].to_vec();
    let mut new = classes[n_base..].to_vec();
    base.sort_unstable();
    new.sort_unstable();
    let mut manifest = train_test_split(dataset, seed);
    manifest.base = base;
    manifest.new = new;
    Ok(manifest)
}

/// Every class is base; used by the few-shot and transfer protocols.
pub fn train_test_split(dataset: &Dataset, seed: u64) -> SplitManifest {
    let mut rng = substream(seed, "split/examples");
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    for (c, mut ids) in by_class {
        ids.shuffle(&mut rng);
        let cut = ids.len().div_ceil(2);
        let mut tr = ids[..cut].to_vec();
        let mut te = ids[cut..].to_vec();
        tr.sort_unstable();
        te.sort_unstable();
        train.insert(c, tr);
        test.insert(c, te);
    }
    SplitManifest {
        base: dataset.classes(),
        new: Vec::new(),
        train,
        test,
        shots: None,
    }
}

/// Keeps exactly `k` seeded training examples per class.
pub fn few_shot_sample(manifest: &SplitManifest, k: usize, seed: u64) -> Result<SplitManifest> {
    if k == 0 {
        return Err(Error::Config("shots must be >= 1".into()));
    }
    let mut rng = substream(seed, "split/shots");
    let mut train = BTreeMap::new();
    for (&c, ids) in &manifest.train {
        if ids.len() < k {
            return Err(Error::Contract(format!(
                "class {c} has {} training examples, {k} shots requested",
                ids.len()
            )));
        }
        let mut picked: Vec<usize> = index::sample(&mut rng, ids.len(), k).into_iter().map(|j| ids[j]).collect();
        picked.sort_unstable();
        train.insert(c, picked);
    }
    Ok(SplitManifest {
        train,
        shots: Some(k),
        ..manifest.clone()
    })
}
