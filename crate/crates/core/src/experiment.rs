//! Run configuration and the end-to-end protocols built from it: dataset
//! and backbone resolution, per-seed tuning, the four evaluation modes and
//! the ablation grid.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::backbone::{
    contrastive_pretrain, hex, load_checkpoint, Backbone, BackboneConfig, BackboneWeights, PretrainConfig, PretrainReport,
};
use crate::data::{
    base_new_split, domain_shift_variant, few_shot_sample, generate_dataset, load_dataset, train_test_split, Dataset,
    DomainShift, SplitManifest, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{accuracy, base_to_new_eval, EvalReport, SeedResult};
use crate::gradcheck::{check_gradients, DEFAULT_STEP};
use crate::objectives::{full_objective, LossWeights};
use crate::sep::{encode_images, encode_text_classes, load_prompts, Fusion, PromptMode, PromptParams, Selection, SepConfig};
use crate::tensor::Tensor;
use crate::training::{stream, substream, tune, Stream, TrainConfig, TrainSet, TuneOutcome};

pub const CONFIG_VERSION: u32 = 1;

/// Depth the ablation layer sets are written for.
pub const REFERENCE_DEPTH: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainStage {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub batch_classes: usize,
    pub corpus: SyntheticSpec,
}

impl Default for PretrainStage {
    fn default() -> Self {
        let optimizer = PretrainConfig::default();
        Self {
            seed: 100,
            steps: optimizer.steps,
            lr: optimizer.lr,
            batch_classes: optimizer.batch_classes,
            corpus: SyntheticSpec {
                n_classes: 40,
                samples_per_class: 32,
                domain_shift: Some(DomainShift {
                    scale: 0.8,
                    offset: 0.5,
                    noise_inflation: 0.0,
                }),
                ..SyntheticSpec::default()
            },
        }
    }
}

impl PretrainStage {
    pub fn optimizer(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch_classes: self.batch_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSpec {
    pub name: String,
    pub spec: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedShift {
    pub name: String,
    pub shift: DomainShift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationTable {
    /// SEP or IVLP prompting on each encoder.
    Prompting,
    /// Layers after which fusion runs.
    Insertion,
    /// Token selection strategy per encoder.
    Selection,
    /// Fusion operator.
    Fusion,
    /// Weight of the visual knowledge-guidance term.
    OmegaV,
}

impl AblationTable {
    pub const ALL: [AblationTable; 5] = [
        AblationTable::Prompting,
        AblationTable::Insertion,
        AblationTable::Selection,
        AblationTable::Fusion,
        AblationTable::OmegaV,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationTable::Prompting => "prompting",
            AblationTable::Insertion => "insertion",
            AblationTable::Selection => "selection",
            AblationTable::Fusion => "fusion",
            AblationTable::OmegaV => "omega_v",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub tables: Vec<AblationTable>,
    pub seeds: Vec<u64>,
    /// Layer sets at the reference depth, rescaled to the backbone depth.
    pub layer_sets: Vec<Vec<usize>>,
    pub omega_v: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            tables: AblationTable::ALL.to_vec(),
            seeds: vec![1],
            layer_sets: vec![
                vec![4],
                vec![8],
                vec![10],
                vec![4, 8],
                vec![4, 8, 10],
                vec![3, 6, 9],
                vec![2, 4, 6, 8, 10],
                (1..=11).collect(),
            ],
            omega_v: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Frozen backbone checkpoint; pretrained in process when absent.
    pub backbone: Option<PathBuf>,
    /// Benchmark dataset file; generated from `benchmark` when absent.
    pub benchmark: Option<PathBuf>,
    /// Directory holding `prompts_seed{N}.ckpt` from a tuning run.
    pub prompts: Option<PathBuf>,
}

fn default_data_seed() -> u64 {
    1
}

fn default_base_fraction() -> f64 {
    0.5
}

fn default_few_shot() -> usize {
    4
}

fn default_targets() -> Vec<NamedSpec> {
    let base = SyntheticSpec::default();
    vec![
        NamedSpec {
            name: "target_a".into(),
            spec: SyntheticSpec {
                first_class: 20,
                n_classes: 10,
                ..base.clone()
            },
        },
        NamedSpec {
            name: "target_b".into(),
            spec: SyntheticSpec {
                first_class: 30,
                n_classes: 10,
                ..base
            },
        },
    ]
}

fn default_shifts() -> Vec<NamedShift> {
    vec![
        NamedShift {
            name: "mild".into(),
            shift: DomainShift {
                scale: 0.9,
                offset: 0.3,
                noise_inflation: 0.3,
            },
        },
        NamedShift {
            name: "strong".into(),
            shift: DomainShift {
                scale: 0.75,
                offset: 0.6,
                noise_inflation: 0.6,
            },
        },
    ]
}

/// Everything a command needs; a run directory stores the resolved copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub pretrain: PretrainStage,
    #[serde(default)]
    pub benchmark: SyntheticSpec,
    /// Seeds benchmark sampling and the base/new and train/test splits.
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
    #[serde(default = "default_base_fraction")]
    pub base_fraction: f64,
    #[serde(default = "default_targets")]
    pub transfer_targets: Vec<NamedSpec>,
    #[serde(default = "default_shifts")]
    pub domain_shifts: Vec<NamedShift>,
    /// Shots per class in the few-shot protocol.
    #[serde(default = "default_few_shot")]
    pub few_shot: usize,
    #[serde(default)]
    pub sep: SepConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            backbone: BackboneConfig::default(),
            pretrain: PretrainStage::default(),
            benchmark: SyntheticSpec::default(),
            data_seed: default_data_seed(),
            base_fraction: default_base_fraction(),
            transfer_targets: default_targets(),
            domain_shifts: default_shifts(),
            few_shot: default_few_shot(),
            sep: SepConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON, naming the offending field path on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at {path}: {}", e.into_inner()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.backbone.validate()?;
        self.sep.validate(&self.backbone)?;
        self.loss.validate()?;
        self.train.validate()?;
        self.benchmark.validate()?;
        self.pretrain.corpus.validate()?;
        if !(self.base_fraction > 0.0 && self.base_fraction < 1.0) {
            return Err(Error::Config(format!("base_fraction must be in (0, 1), got {}", self.base_fraction)));
        }
        if self.few_shot == 0 {
            return Err(Error::Config("few_shot must be >= 1".into()));
        }
        let vocab = self.backbone.n_classes();
        for (name, spec) in std::iter::once(("benchmark", &self.benchmark))
            .chain(std::iter::once(("pretrain.corpus", &self.pretrain.corpus)))
            .chain(self.transfer_targets.iter().map(|t| (t.name.as_str(), &t.spec)))
        {
            spec.validate()?;
            if spec.first_class + spec.n_classes > vocab {
                return Err(Error::Config(format!(
                    "{name} uses classes up to {} but the vocabulary holds {vocab}",
                    spec.first_class + spec.n_classes - 1
                )));
            }
        }
        Ok(())
    }

    pub fn benchmark_dataset(&self) -> Result<Dataset> {
        match &self.paths.benchmark {
            Some(path) => load_dataset(path),
            None => generate_dataset(&self.benchmark, self.data_seed),
        }
    }

    pub fn pretrain_corpus(&self) -> Result<Dataset> {
        generate_dataset(&self.pretrain.corpus, self.pretrain.seed)
    }

    pub fn transfer_datasets(&self) -> Result<Vec<(String, Dataset)>> {
        self.transfer_targets
            .iter()
            .map(|t| Ok((t.name.clone(), generate_dataset(&t.spec, self.data_seed)?)))
            .collect()
    }

    pub fn split(&self, benchmark: &Dataset) -> Result<SplitManifest> {
        base_new_split(benchmark, self.base_fraction, self.data_seed)
    }

    /// Loads the configured checkpoint, or pretrains from scratch.
    pub fn frozen_backbone(&self) -> Result<Backbone> {
        match &self.paths.backbone {
            Some(path) => {
                let backbone = load_checkpoint(path)?;
                if backbone.config != self.backbone {
                    return Err(Error::Config(format!(
                        "checkpoint {} was built for a different backbone config",
                        path.display()
                    )));
                }
                if !backbone.is_frozen() {
                    return Err(Error::Contract(format!("checkpoint {} is not frozen", path.display())));
                }
                Ok(backbone)
            }
            None => Ok(self.pretrain_backbone()?.0),
        }
    }

    /// Contrastive pretraining on the corpus, then freeze.
    pub fn pretrain_backbone(&self) -> Result<(Backbone, PretrainReport)> {
        let corpus = self.pretrain_corpus()?;
        let initial = Backbone::init(self.backbone.clone(), &mut stream(self.pretrain.seed, Stream::Init))?;
        let mut rng = substream(self.pretrain.seed, "pretrain/batches");
        let (params, report) = contrastive_pretrain(
            &initial,
            &corpus.features,
            &corpus.labels,
            &self.pretrain.optimizer(),
            &mut rng,
        )?;
        // Store exactly what a checkpoint would hold.
        let params = params.map(&mut Tensor::round_to_f32);
        Ok((Backbone::from_params(self.backbone.clone(), params, true), report))
    }
}

/// Short SHA-256 over any serializable value.
pub fn fingerprint(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    hex(&Sha256::digest(bytes))[..16].to_string()
}

/// Tunes fresh prompts on `k` shots per class of `classes`. Only training
/// examples from the split ever reach the optimizer.
#[allow(clippy::too_many_arguments)]
pub fn tune_seed(
    backbone: &Backbone,
    dataset: &Dataset,
    split: &SplitManifest,
    classes: &[usize],
    sep: &SepConfig,
    loss: &LossWeights,
    train: &TrainConfig,
    shots: usize,
    seed: u64,
) -> Result<(TuneOutcome, Vec<usize>)> {
    let sampled = few_shot_sample(split, shots, seed)?;
    let ids = sampled.train_ids(classes);
    let images = dataset.batch(&ids)?;
    let labels = dataset.labels_of(&ids);
    let init = PromptParams::init(sep, backbone, &mut stream(seed, Stream::Init))?;
    let set = TrainSet {
        images: &images,
        labels: &labels,
        classes,
    };
    Ok((tune(backbone, &init, sep, loss, set, train, seed)?, ids))
}

/// Prompts with every encoder frozen, i.e. plain zero-shot classification.
pub fn zero_shot(backbone: &Backbone) -> Result<(SepConfig, PromptParams<Tensor>)> {
    let sep = SepConfig {
        visual_mode: PromptMode::Frozen,
        text_mode: PromptMode::Frozen,
        ..SepConfig::default()
    };
    let prompts = PromptParams::init(&sep, backbone, &mut stream(0, Stream::Init))?;
    Ok((sep, prompts))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    BaseToNew,
    CrossDataset,
    DomainShift,
    FewShot,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::BaseToNew => "base-to-new",
            EvalMode::CrossDataset => "cross-dataset",
            EvalMode::DomainShift => "domain-shift",
            EvalMode::FewShot => "few-shot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::BaseToNew, Self::CrossDataset, Self::DomainShift, Self::FewShot]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

/// Accuracy of one seed on one named target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub seed: u64,
    pub target: String,
    pub accuracy: f64,
}

pub const TARGET_HEADER: &str = "key,seed,target,accuracy";

/// Per-seed rows followed by seed-mean rows per target, for each keyed
/// group in order.
pub fn targets_csv(groups: &[(String, Vec<TargetResult>)]) -> String {
    let mut out = format!("{TARGET_HEADER}\n");
    for (key, rows) in groups {
        let mut order: Vec<&str> = Vec::new();
        let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for r in rows {
            out.push_str(&format!("{key},{},{},{:.2}\n", r.seed, r.target, r.accuracy));
            if !order.contains(&r.target.as_str()) {
                order.push(&r.target);
            }
            let e = sums.entry(&r.target).or_default();
            e.0 += r.accuracy;
            e.1 += 1;
        }
        for t in order {
            let (s, n) = sums[t];
            out.push_str(&format!("{key},mean,{t},{:.2}\n", s / n as f64));
        }
    }
    out
}

/// Output of one evaluation mode.
#[derive(Clone, Debug)]
pub enum ModeOutput {
    BaseToNew(EvalReport),
    Targets(Vec<TargetResult>),
}

/// Per-seed tuning traces produced while evaluating.
pub type Traces = Vec<(u64, TuneOutcome)>;

/// Where an evaluation gets its prompts.
pub enum PromptSource<'a> {
    /// Tune per seed under the mode's protocol.
    Tune,
    /// Prompts tuned on base classes by an earlier run, keyed by seed.
    Loaded(&'a BTreeMap<u64, PromptParams<Tensor>>),
    /// Zero-shot: every encoder frozen.
    ZeroShot,
}

pub struct Context {
    pub config: RunConfig,
    pub backbone: Backbone,
    pub benchmark: Dataset,
    pub split: SplitManifest,
}

impl Context {
    pub fn prepare(config: RunConfig) -> Result<Self> {
        let backbone = config.frozen_backbone()?;
        Self::with_backbone(config, backbone)
    }

    pub fn with_backbone(config: RunConfig, backbone: Backbone) -> Result<Self> {
        let benchmark = config.benchmark_dataset()?;
        let split = config.split(&benchmark)?;
        Ok(Self {
            config,
            backbone,
            benchmark,
            split,
        })
    }

    /// Base-to-new tuning for one seed (what `tune` runs).
    pub fn tune_base(&self, sep: &SepConfig, loss: &LossWeights, seed: u64) -> Result<TuneOutcome> {
        let c = &self.config;
        let (outcome, _) = tune_seed(
            &self.backbone,
            &self.benchmark,
            &self.split,
            &self.split.base,
            sep,
            loss,
            &c.train,
            c.train.shots,
            seed,
        )?;
        Ok(outcome)
    }

    pub fn base_to_new(&self, sep: &SepConfig, prompts: &PromptParams<Tensor>, seed: u64, started: Instant) -> Result<SeedResult> {
        let (base, new, _) = base_to_new_eval(&self.backbone, prompts, sep, &self.benchmark, &self.split)?;
        Ok(SeedResult::new(seed, base, new, started.elapsed().as_secs_f64()))
    }

    /// Runs `mode` for every configured seed.
    pub fn evaluate(&self, mode: EvalMode, source: PromptSource<'_>) -> Result<(ModeOutput, Traces)> {
        let c = &self.config;
        let mut traces = Vec::new();
        let all = self.benchmark.classes();
        let full_split = train_test_split(&self.benchmark, c.data_seed);
        let zero = zero_shot(&self.backbone)?;
        let seeds: Vec<u64> = match source {
            PromptSource::ZeroShot => vec![c.train.seeds[0]],
            _ => c.train.seeds.clone(),
        };
        let mut seed_results = Vec::new();
        let mut targets = Vec::new();
        let transfer = if mode == EvalMode::CrossDataset {
            c.transfer_datasets()?
        } else {
            Vec::new()
        };
        for &seed in &seeds {
            let started = Instant::now();
            let (train_classes, split, shots) = match mode {
                EvalMode::BaseToNew => (self.split.base.clone(), &self.split, c.train.shots),
                EvalMode::FewShot => (all.clone(), &full_split, c.few_shot),
                _ => (all.clone(), &full_split, c.train.shots),
            };
            let (sep, prompts) = match source {
                PromptSource::ZeroShot => zero.clone(),
                PromptSource::Loaded(map) => {
                    let p = map
                        .get(&seed)
                        .ok_or_else(|| Error::Config(format!("no tuned prompts for seed {seed}")))?;
                    (c.sep.clone(), p.clone())
                }
                PromptSource::Tune => {
                    let (outcome, _) = tune_seed(
                        &self.backbone,
                        &self.benchmark,
                        split,
                        &train_classes,
                        &c.sep,
                        &c.loss,
                        &c.train,
                        shots,
                        seed,
                    )?;
                    let prompts = outcome.prompts.clone();
                    traces.push((seed, outcome));
                    (c.sep.clone(), prompts)
                }
            };
            let acc = |dataset: &Dataset, ids: &[usize], classes: &[usize]| {
                accuracy(&self.backbone, &prompts, &sep, dataset, ids, classes)
            };
            let mut push = |target: &str, accuracy: f64| {
                targets.push(TargetResult {
                    seed,
                    target: target.to_string(),
                    accuracy,
                })
            };
            let test_all = full_split.test_ids(&all);
            match mode {
                EvalMode::BaseToNew => seed_results.push(self.base_to_new(&sep, &prompts, seed, started)?),
                EvalMode::FewShot => push("benchmark", acc(&self.benchmark, &test_all, &all)?),
                EvalMode::CrossDataset => {
                    push("source", acc(&self.benchmark, &test_all, &all)?);
                    let mut sum = 0.0;
                    for (name, d) in &transfer {
                        let a = acc(d, &(0..d.len()).collect::<Vec<_>>(), &d.classes())?;
                        sum += a;
                        push(name, a);
                    }
                    if !transfer.is_empty() {
                        push("average", sum / transfer.len() as f64);
                    }
                }
                EvalMode::DomainShift => {
                    push("source", acc(&self.benchmark, &test_all, &all)?);
                    let mut sum = 0.0;
                    for (i, s) in c.domain_shifts.iter().enumerate() {
                        let shifted = domain_shift_variant(&self.benchmark, &s.shift, c.data_seed + 1 + i as u64)?;
                        let a = acc(&shifted, &test_all, &all)?;
                        sum += a;
                        push(&s.name, a);
                    }
                    if !c.domain_shifts.is_empty() {
                        push("average", sum / c.domain_shifts.len() as f64);
                    }
                }
            }
        }
        let output = match mode {
            EvalMode::BaseToNew => {
                let key = match source {
                    PromptSource::ZeroShot => "zero_shot".to_string(),
                    _ => sep_key(&c.sep),
                };
                ModeOutput::BaseToNew(EvalReport::from_seeds(key, self.fingerprint(&c.sep, &c.loss), seed_results)?)
            }
            _ => ModeOutput::Targets(targets),
        };
        Ok((output, traces))
    }

    pub fn fingerprint(&self, sep: &SepConfig, loss: &LossWeights) -> String {
        fingerprint(&(
            sep,
            loss,
            &self.config.train,
            self.backbone.checksum(),
            self.benchmark.checksum(),
        ))
    }
}

/// Loads `prompts_seed{N}.ckpt` for every configured seed from `dir`.
pub fn load_seed_prompts(dir: &Path, config: &RunConfig) -> Result<BTreeMap<u64, PromptParams<Tensor>>> {
    let mut out = BTreeMap::new();
    for &seed in &config.train.seeds {
        let path = dir.join(prompt_file(seed));
        let (prompts, sep, backbone) = load_prompts(&path)?;
        if sep != config.sep || backbone != config.backbone {
            return Err(Error::Config(format!("{} was tuned under a different config", path.display())));
        }
        out.insert(seed, prompts);
    }
    Ok(out)
}

pub fn prompt_file(seed: u64) -> String {
    format!("prompts_seed{seed}.ckpt")
}

/// Compact description of a prompting config.
pub fn sep_key(sep: &SepConfig) -> String {
    let mode = |m: PromptMode| match m {
        PromptMode::Sep => "sep",
        PromptMode::Ivlp => "ivlp",
        PromptMode::Frozen => "frozen",
    };
    format!("visual={};text={}", mode(sep.visual_mode), mode(sep.text_mode))
}

/// Maps each layer of `set` from the reference depth to `n_layers`, keeping
/// the fraction of depth; results are clamped to valid insertion layers.
pub fn rescale_layers(set: &[usize], n_layers: usize) -> BTreeSet<usize> {
    let top = n_layers.saturating_sub(1).max(1);
    set.iter()
        .map(|&l| ((l * n_layers) as f64 / REFERENCE_DEPTH as f64).round() as usize)
        .map(|l| l.clamp(1, top))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub table: AblationTable,
    pub key: String,
    pub sep: SepConfig,
    pub loss: LossWeights,
}

fn join(set: impl IntoIterator<Item = usize>) -> String {
    set.into_iter().map(|l| l.to_string()).collect::<Vec<_>>().join("+")
}

/// Cells for the requested tables, each a single override of the base
/// prompting and loss config.
pub fn ablation_grid(config: &RunConfig) -> Vec<AblationCell> {
    let base = &config.sep;
    let loss = &config.loss;
    let n_layers = config.backbone.n_layers;
    let mut cells = Vec::new();
    let mut cell = |table, key: String, sep: SepConfig, loss: LossWeights| {
        cells.push(AblationCell { table, key, sep, loss })
    };
    for &table in &config.ablation.tables {
        match table {
            AblationTable::Prompting => {
                for visual in [PromptMode::Ivlp, PromptMode::Sep] {
                    for text in [PromptMode::Ivlp, PromptMode::Sep] {
                        let sep = SepConfig {
                            visual_mode: visual,
                            text_mode: text,
                            ..base.clone()
                        };
                        cell(table, sep_key(&sep), sep, loss.clone());
                    }
                }
            }
            AblationTable::Insertion => {
                for set in &config.ablation.layer_sets {
                    let layers = rescale_layers(set, n_layers);
                    let key = format!("reference={};layers={}", join(set.iter().copied()), join(layers.iter().copied()));
                    let sep = SepConfig {
                        insertion_layers: Some(layers),
                        ..base.clone()
                    };
                    cell(table, key, sep, loss.clone());
                }
            }
            AblationTable::Selection => {
                for visual in [Selection::Activation, Selection::Front] {
                    for text in [Selection::Activation, Selection::Front] {
                        let name = |s: Selection| match s {
                            Selection::Activation => "activation",
                            Selection::Front => "front",
                        };
                        let sep = SepConfig {
                            selection_visual: visual,
                            selection_text: text,
                            ..base.clone()
                        };
                        cell(table, format!("visual={};text={}", name(visual), name(text)), sep, loss.clone());
                    }
                }
            }
            AblationTable::Fusion => {
                for (fusion, name) in [(Fusion::Add, "add"), (Fusion::Mlp, "mlp"), (Fusion::Tfm, "tfm")] {
                    let sep = SepConfig { fusion, ..base.clone() };
                    cell(table, name.into(), sep, loss.clone());
                }
            }
            AblationTable::OmegaV => {
                for &omega_v in &config.ablation.omega_v {
                    let l = LossWeights {
                        omega_v,
                        ..loss.clone()
                    };
                    cell(table, format!("omega_v={omega_v}"), base.clone(), l);
                }
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: AblationTable,
    pub key: String,
    pub seed: u64,
    pub base: Option<f64>,
    pub new: Option<f64>,
    pub h: Option<f64>,
    /// `ok`, or the failure message.
    pub status: String,
    pub dataset_sha256: String,
    pub runtime_s: f64,
}

/// One tune + base-to-new evaluation per cell and seed. Cells whose
/// resolved configs coincide share one computation; a failing cell is
/// recorded and the grid continues.
pub fn ablation_runner(ctx: &Context, cells: &[AblationCell], seeds: &[u64], mut log: impl FnMut(&AblationRow)) -> Vec<AblationRow> {
    let checksum = ctx.benchmark.checksum();
    let mut done: BTreeMap<String, std::result::Result<SeedResult, String>> = BTreeMap::new();
    let mut rows = Vec::new();
    for cell in cells {
        for &seed in seeds {
            let mut resolved = cell.sep.clone();
            resolved.insertion_layers = Some(cell.sep.schedule(ctx.backbone.config.n_layers).into_iter().collect());
            let memo = fingerprint(&(&resolved, &cell.loss, seed));
            let result = done
                .entry(memo)
                .or_insert_with(|| {
                    let started = Instant::now();
                    cell.sep
                        .validate(&ctx.backbone.config)
                        .and_then(|_| ctx.tune_base(&cell.sep, &cell.loss, seed))
                        .and_then(|outcome| ctx.base_to_new(&cell.sep, &outcome.prompts, seed, started))
                        .map_err(|e| e.to_string())
                })
                .clone();
            let row = match result {
                Ok(r) => AblationRow {
                    table: cell.table,
                    key: cell.key.clone(),
                    seed,
                    base: Some(r.base),
                    new: Some(r.new),
                    h: Some(r.h),
                    status: "ok".into(),
                    dataset_sha256: checksum.clone(),
                    runtime_s: r.runtime_s,
                },
                Err(reason) => AblationRow {
                    table: cell.table,
                    key: cell.key.clone(),
                    seed,
                    base: None,
                    new: None,
                    h: None,
                    status: format!("failed: {reason}"),
                    dataset_sha256: checksum.clone(),
                    runtime_s: 0.0,
                },
            };
            log(&row);
            rows.push(row);
        }
    }
    rows
}

pub const ABLATION_HEADER: &str = "table,key,seed,base,new,h,status,dataset_sha256";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let num = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_default();
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.table.name(),
            r.key,
            r.seed,
            num(r.base),
            num(r.new),
            num(r.h),
            r.status.replace(',', ";"),
            r.dataset_sha256
        ));
    }
    out
}

/// Finite-difference audit of the full objective on a small instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradAudit {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Tensor name and flat element index of the largest relative error.
    pub worst: Option<String>,
    pub checked: usize,
    pub learnable_tensors: usize,
    pub frozen_tensors: usize,
    /// Frozen tensors that nevertheless received a gradient.
    pub frozen_with_grad: Vec<String>,
}

impl GradAudit {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance && self.frozen_with_grad.is_empty()
    }
}

/// Relative-error bound the audit is held to.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Builds a randomly initialized frozen backbone and prompts from `config`,
/// draws the benchmark, and compares every learnable gradient of the full
/// objective against central differences.
pub fn gradient_audit(config: &RunConfig, seed: u64) -> Result<GradAudit> {
    let mut backbone = Backbone::init(config.backbone.clone(), &mut stream(seed, Stream::Init))?;
    backbone.freeze();
    let dataset = generate_dataset(&config.benchmark, config.data_seed)?;
    let classes = dataset.classes();
    let labels: Vec<usize> = dataset
        .labels
        .iter()
        .map(|y| classes.iter().position(|c| c == y).expect("own class"))
        .collect();
    let sep = &config.sep;
    let prompts = PromptParams::init(sep, &backbone, &mut substream(seed, "gradcheck/prompts"))?;
    let tau = config.loss.tau_or(backbone.config.tau);
    let w_clip = backbone.encode_frozen_text(&classes)?;
    let f = backbone.encode_frozen_image(&dataset.features)?;

    let objective = |tape: &mut Tape, p: &PromptParams<Var>| -> Result<(Var, BackboneWeights<Var>)> {
        let w = backbone.bind(tape);
        let x = tape.constant(dataset.features.clone());
        let f_hat = encode_images(tape, &w, &backbone.config, sep, &p.visual, x)?;
        let w_sep = encode_text_classes(tape, &w, &backbone.config, sep, &p.text, &classes)?;
        let f_v = tape.constant(f.clone());
        let w_clip_v = tape.constant(w_clip.clone());
        let (loss, _) = full_objective(tape, f_hat, w_sep, f_v, w_clip_v, &labels, &config.loss, tau)?;
        Ok((loss, w))
    };
    let rebuild = |vars: &[Var]| {
        let mut it = vars.iter();
        prompts.map(&mut |_| *it.next().expect("one var per tensor"))
    };

    let flat = prompts.flatten();
    let report = check_gradients(&flat, DEFAULT_STEP, |tape, vars| Ok(objective(tape, &rebuild(vars))?.0))?;

    let mut tape = Tape::new();
    let vars: Vec<Var> = flat.iter().map(|t| tape.param(t.clone())).collect();
    let (loss, w) = objective(&mut tape, &rebuild(&vars))?;
    tape.backward(loss)?;
    let mut frozen_tensors = 0;
    let mut frozen_with_grad = Vec::new();
    w.for_each(&mut |name, v| {
        frozen_tensors += 1;
        if tape.grad(*v).is_some() {
            frozen_with_grad.push(name);
        }
    });
    let mut names = Vec::new();
    prompts.for_each(&mut |name, _| names.push(name));
    Ok(GradAudit {
        max_rel_error: report.max_rel_error,
        max_abs_error: report.max_abs_error,
        worst: report.worst.map(|(i, j)| format!("{}[{j}]", names[i])),
        checked: report.checked,
        learnable_tensors: flat.len(),
        frozen_tensors,
        frozen_with_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescaled_layer_sets() {
        let sets: Vec<Vec<usize>> = AblationConfig::default().layer_sets;
        let got: Vec<Vec<usize>> = sets.iter().map(|s| rescale_layers(s, 6).into_iter().collect()).collect();
        assert_eq!(
            got,
            vec![
                vec![2],
                vec![4],
                vec![5],
                vec![2, 4],
                vec![2, 4, 5],
                vec![2, 3, 5],
                vec![1, 2, 3, 4, 5],
                vec![1, 2, 3, 4, 5],
            ]
        );
        // Every layer of the full set survives at the reference depth.
        assert_eq!(rescale_layers(&sets[7], 12), (1..=11).collect());
    }

    #[test]
    fn grid_shape() {
        let config = RunConfig::default();
        let cells = ablation_grid(&config);
        let count = |t| cells.iter().filter(|c| c.table == t).count();
        assert_eq!(count(AblationTable::Prompting), 4);
        assert_eq!(count(AblationTable::Insertion), 8);
        assert_eq!(count(AblationTable::Selection), 4);
        assert_eq!(count(AblationTable::Fusion), 3);
        assert_eq!(count(AblationTable::OmegaV), 6);
        let fusion: Vec<&str> = cells
            .iter()
            .filter(|c| c.table == AblationTable::Fusion)
            .map(|c| c.key.as_str())
            .collect();
        assert_eq!(fusion, ["add", "mlp", "tfm"]);
        for c in &cells {
            c.sep.validate(&config.backbone).unwrap();
        }
    }

    #[test]
    fn config_parsing() {
        let c = RunConfig::from_json(r#"{"version": 1}"#).unwrap();
        assert_eq!(c, RunConfig::default());
        let c = RunConfig::from_json(r#"{"version": 1, "train": {"epochs": 3}, "sep": {"fusion": "mlp"}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.sep.fusion, Fusion::Mlp);

        let err = RunConfig::from_json(r#"{"version": 1, "train": {"epoch": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("train.epoch"), "{err}");
        assert!(matches!(RunConfig::from_json(r#"{"train": {}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"version": 2}"#), Err(Error::Config(_))));
        let err = RunConfig::from_json(r#"{"version": 1, "benchmark": {"first_class": 40}}"#).unwrap_err();
        assert!(err.to_string().contains("vocabulary"), "{err}");

        let round = RunConfig::from_json(&RunConfig::default().to_json()).unwrap();
        assert_eq!(round, RunConfig::default());
    }

    #[test]
    fn shipped_toy_config_passes_the_gradient_audit() {
        let config = RunConfig::from_json(include_str!("../../../configs/gradcheck.json")).unwrap();
        let audit = gradient_audit(&config, 1).unwrap();
        assert!(audit.passes(GRADCHECK_TOLERANCE), "{audit:?}");
        assert!(audit.frozen_tensors > 0 && audit.learnable_tensors > 2);
    }

    #[test]
    fn mode_names() {
        for m in [EvalMode::BaseToNew, EvalMode::CrossDataset, EvalMode::DomainShift, EvalMode::FewShot] {
            assert_eq!(EvalMode::parse(m.name()), Some(m));
        }
        assert_eq!(EvalMode::parse("zero"), None);
    }

    #[test]
    fn target_csv_means() {
        let rows = [
            TargetResult {
                seed: 1,
                target: "a".into(),
                accuracy: 50.0,
            },
            TargetResult {
                seed: 2,
                target: "a".into(),
                accuracy: 60.0,
            },
        ];
        assert_eq!(targets_csv(&[("k".into(), rows.to_vec())]), "key,seed,target,accuracy\nk,1,a,50.00\nk,2,a,60.00\nk,mean,a,55.00\n");
    }
}
