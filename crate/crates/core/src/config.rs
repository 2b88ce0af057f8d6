//! Run configuration: a TOML document covering data, model, schedule,
//! clustering, distillation and probing. Unknown keys are rejected and every
//! violation is reported at once.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentDistribution;
use crate::data::{load_dataset, synth_curated, Dataset, ImageSpec, Prototypes, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{Layer, ModelConfig};
use crate::rng::derive_seed;
use crate::schedule::ScheduleSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Directory corpus (kind = "directory").
    pub path: Option<PathBuf>,
    /// Labelled probe sets for directory corpora.
    pub probe_train: Option<PathBuf>,
    pub probe_test: Option<PathBuf>,
    pub num_classes: usize,
    pub total: usize,
    /// 0 gives a balanced corpus.
    pub zipf_exponent: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_separation: f32,
    pub noise_std: f32,
    pub coarse_groups: Option<usize>,
    pub probe_train_per_class: usize,
    pub probe_test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synthetic,
            path: None,
            probe_train: None,
            probe_test: None,
            num_classes: 10,
            total: 2000,
            zipf_exponent: 1.0,
            height: 32,
            width: 32,
            channels: 3,
            class_separation: 1.0,
            noise_std: 0.08,
            coarse_groups: None,
            probe_train_per_class: 50,
            probe_test_per_class: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Square network input side; defaults to the image height.
    pub view_size: Option<usize>,
    pub crop_area_min: f64,
    /// Scales brightness, contrast, saturation and hue jitter together.
    pub color_jitter_strength: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            view_size: None,
            crop_area_min: 0.08,
            color_jitter_strength: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub layer: Layer,
    pub sample_size: Option<usize>,
    pub max_iters: usize,
    pub n_init: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            layer: Layer::Hidden,
            sample_size: None,
            max_iters: 100,
            n_init: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherInput {
    Augmented,
    CenterCrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillTargets {
    Both,
    BaseOnly,
    ExpertsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub teacher_input: TeacherInput,
    pub targets: DistillTargets,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            teacher_input: TeacherInput::Augmented,
            targets: DistillTargets::Both,
        }
    }
}

/// How stage-2 training data is split among experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// k-means clusters of the base model's representations.
    Clustered,
    /// Uniformly random labels with the clustered sizes' expectation.
    Random,
    /// Every expert trains on the whole corpus (an ensemble).
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub partition: PartitionMode,
    /// Disable the momentum network: both views go through the online network.
    pub simclr: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            partition: PartitionMode::Clustered,
            simclr: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rates (per 256 examples) swept on the validation split.
    pub lr_grid: Vec<f64>,
    pub val_fraction: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 60,
            batch_size: 256,
            lr_grid: vec![1.0, 0.6, 0.4, 0.2, 0.1],
            val_fraction: 0.2,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub augment: AugmentConfig,
    pub cluster: ClusterConfig,
    pub distill: DistillConfig,
    pub method: MethodConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            seed: 0,
            output_dir: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleSpec::default(),
            augment: AugmentConfig::default(),
            cluster: ClusterConfig::default(),
            distill: DistillConfig::default(),
            method: MethodConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

const TOY_UNCURATED: &str = include_str!("presets/toy-uncurated.toml");
const TOY_CURATED: &str = include_str!("presets/toy-curated.toml");

/// Names of the bundled presets.
pub const PRESETS: &[&str] = &["toy-uncurated", "toy-curated"];

/// All datasets a run needs.
#[derive(Debug, Clone)]
pub struct RunData {
    pub corpus: Dataset,
    pub probe_train: Dataset,
    pub probe_test: Dataset,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "toy-uncurated" => TOY_UNCURATED,
            "toy-curated" => TOY_CURATED,
            _ => {
                return Err(Error::Config(vec![format!(
                    "unknown preset `{name}` (available: {})",
                    PRESETS.join(", ")
                )]))
            }
        };
        Self::from_toml(text)
    }

    /// Parse and validate. Unknown keys and invalid values are collected and
    /// reported together.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        let mut problems = unknown_keys(&table);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        problems.extend(cfg.violations());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The fully expanded configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let d = &self.data;
        match d.kind {
            DataKind::Synthetic => {
                if d.num_classes < 2 {
                    v.push("data.num_classes must be at least 2".into());
                }
                if d.total < d.num_classes {
                    v.push("data.total must be at least data.num_classes".into());
                }
                if !(d.zipf_exponent.is_finite() && d.zipf_exponent >= 0.0) {
                    v.push("data.zipf_exponent must be nonnegative".into());
                }
                if d.height < 8 || d.width < 8 {
                    v.push("data.height and data.width must be at least 8".into());
                }
                if !matches!(d.channels, 1 | 3) {
                    v.push("data.channels must be 1 or 3".into());
                }
                if !(d.class_separation.is_finite() && d.class_separation >= 0.0) {
                    v.push("data.class_separation must be nonnegative".into());
                }
                if !(d.noise_std.is_finite() && d.noise_std >= 0.0) {
                    v.push("data.noise_std must be nonnegative".into());
                }
                if let Some(g) = d.coarse_groups {
                    if g == 0 || g > d.num_classes {
                        v.push("data.coarse_groups must lie in [1, num_classes]".into());
                    }
                }
                if d.probe_train_per_class < 2 || d.probe_test_per_class < 1 {
                    v.push("data.probe_train_per_class must be >= 2 and probe_test_per_class >= 1".into());
                }
            }
            DataKind::Directory => {
                if d.path.is_none() {
                    v.push("data.path is required when data.kind = \"directory\"".into());
                }
            }
        }
        if self.model.encoder.widths.is_empty() || self.model.encoder.widths.contains(&0) {
            v.push("model.encoder.widths must be nonempty and positive".into());
        }
        if self.model.encoder.blocks_per_stage == 0 {
            v.push("model.encoder.blocks_per_stage must be positive".into());
        }
        if !matches!(self.model.encoder.input_channels, 1 | 3) {
            v.push("model.encoder.input_channels must be 1 or 3".into());
        } else if d.kind == DataKind::Synthetic && self.model.encoder.input_channels != d.channels {
            v.push("model.encoder.input_channels must equal data.channels".into());
        }
        if self.model.head.hidden_dim == 0 || self.model.head.output_dim == 0 {
            v.push("model.head dimensions must be positive".into());
        }
        v.extend(self.schedule.violations("schedule."));
        let s = &self.schedule;
        if s.batch_size >= 2 && s.reference_size >= 1 {
            for (name, x) in [("n1", s.n1), ("n3", s.n3)] {
                if x.is_finite() && s.steps_for_epochs(x) == 0 {
                    v.push(format!("schedule.{name} must give at least one optimizer step"));
                }
            }
        }
        if !(s.n2 > 0.0) {
            v.push("schedule.n2 must be positive".into());
        }
        if let Some(s) = self.augment.view_size {
            if s < 8 {
                v.push("augment.view_size must be at least 8".into());
            }
        }
        if !(self.augment.crop_area_min > 0.0 && self.augment.crop_area_min <= 1.0) {
            v.push("augment.crop_area_min must lie in (0, 1]".into());
        }
        // Scaled jitter factors must stay within their valid ranges.
        let base = AugmentDistribution::view_t((8, 8));
        let js = self.augment.color_jitter_strength;
        let widest = base.brightness.max(base.contrast).max(base.saturation);
        if !(js.is_finite() && js >= 0.0 && js * widest <= 1.0 && js * base.hue <= 0.5) {
            v.push(format!(
                "augment.color_jitter_strength must lie in [0, {}]",
                (1.0 / widest).min(0.5 / base.hue)
            ));
        }
        if self.cluster.max_iters == 0 || self.cluster.n_init == 0 {
            v.push("cluster.max_iters and cluster.n_init must be positive".into());
        }
        if self.cluster.sample_size == Some(0) {
            v.push("cluster.sample_size must be positive".into());
        }
        let p = &self.probe;
        if p.epochs == 0 || p.batch_size == 0 {
            v.push("probe.epochs and probe.batch_size must be positive".into());
        }
        if p.lr_grid.is_empty() || p.lr_grid.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
            v.push("probe.lr_grid must be a nonempty list of positive rates".into());
        }
        if !(p.val_fraction > 0.0 && p.val_fraction < 1.0) {
            v.push("probe.val_fraction must lie in (0, 1)".into());
        }
        if !(0.0..1.0).contains(&p.momentum) {
            v.push("probe.momentum must lie in [0, 1)".into());
        }
        if !(p.weight_decay.is_finite() && p.weight_decay >= 0.0) {
            v.push("probe.weight_decay must be nonnegative".into());
        }
        v
    }

    pub fn view_size(&self) -> usize {
        self.augment.view_size.unwrap_or(self.data.height)
    }

    pub fn views(&self) -> (AugmentDistribution, AugmentDistribution) {
        let s = self.view_size();
        let mut t = AugmentDistribution::view_t((s, s));
        let mut tp = AugmentDistribution::view_t_prime((s, s));
        for v in [&mut t, &mut tp] {
            v.crop_area_range.0 = self.augment.crop_area_min;
            let js = self.augment.color_jitter_strength;
            v.brightness *= js;
            v.contrast *= js;
            v.saturation *= js;
            v.hue *= js;
        }
        (t, tp)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_classes: self.data.num_classes,
            image: ImageSpec {
                height: self.data.height,
                width: self.data.width,
                channels: self.data.channels,
            },
            class_separation: self.data.class_separation,
            noise_std: self.data.noise_std,
            coarse_groups: self.data.coarse_groups,
        }
    }

    /// Build or load the corpus and the probe sets. Synthetic sets share one
    /// prototype family so the probe task matches the pretraining classes.
    pub fn materialize(&self) -> Result<RunData> {
        match self.data.kind {
            DataKind::Synthetic => {
                let spec = self.synth_spec();
                let protos = Prototypes::generate(&spec, derive_seed(self.seed, "prototypes", 0))?;
                let corpus = protos.uncurated(
                    self.data.total,
                    self.data.zipf_exponent,
                    derive_seed(self.seed, "corpus", 0),
                )?;
                Ok(RunData {
                    corpus,
                    probe_train: protos
                        .curated(self.data.probe_train_per_class, derive_seed(self.seed, "probe-train", 0))?,
                    probe_test: protos
                        .curated(self.data.probe_test_per_class, derive_seed(self.seed, "probe-test", 0))?,
                })
            }
            DataKind::Directory => {
                let path = self.data.path.as_ref().ok_or_else(|| {
                    Error::Config(vec!["data.path is required when data.kind = \"directory\"".into()])
                })?;
                let corpus = load_dataset(path)?;
                let probe_train = match &self.data.probe_train {
                    Some(p) => load_dataset(p)?,
                    None => corpus.clone(),
                };
                let probe_test = match &self.data.probe_test {
                    Some(p) => load_dataset(p)?,
                    None => probe_train.clone(),
                };
                Ok(RunData {
                    corpus,
                    probe_train,
                    probe_test,
                })
            }
        }
    }

    /// Digests of the inputs of each stage; a stage's digest covers its own
    /// settings and those of every upstream stage.
    pub fn stage_digests(&self) -> StageDigests {
        let s = &self.schedule;
        let shared = serde_json::json!({
            "seed": self.seed,
            "data": self.data,
            "model": self.model,
            "augment": self.augment,
            "simclr": self.method.simclr,
            "optim": [s.batch_size as f64, s.base_lr, s.warmup_epochs, s.weight_decay,
                      s.momentum, s.trust_coefficient, s.tau_base, s.temperature, s.reference_size as f64],
        });
        let base = sha256_hex(&serde_json::json!({"shared": shared, "n1": s.n1}));
        let clusters = sha256_hex(&serde_json::json!({"up": base, "cluster": self.cluster, "k": s.k}));
        let experts = sha256_hex(&serde_json::json!({
            "up": clusters, "n2": s.n2, "partition": self.method.partition,
        }));
        let distilled = sha256_hex(&serde_json::json!({
            "up": experts, "n3": s.n3, "distill": self.distill,
        }));
        let moclr = sha256_hex(&serde_json::json!({
            "shared": shared, "epochs": s.n1 + s.n2 + s.n3,
        }));
        StageDigests {
            base,
            clusters,
            experts,
            distilled,
            moclr,
        }
    }

    /// Digest of the whole resolved configuration, output location excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        sha256_hex(&serde_json::to_value(&c).expect("config serialises"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageDigests {
    pub base: String,
    pub clusters: String,
    pub experts: String,
    pub distilled: String,
    pub moclr: String,
}

fn sha256_hex(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

fn unknown_keys(table: &toml::Table) -> Vec<String> {
    let sections: &[(&str, &[&str])] = &[
        ("", &["name", "seed", "output_dir", "data", "model", "schedule", "augment", "cluster", "distill", "method", "probe"]),
        ("data", &[
            "kind", "path", "probe_train", "probe_test", "num_classes", "total", "zipf_exponent", "height",
            "width", "channels", "class_separation", "noise_std", "coarse_groups", "probe_train_per_class",
            "probe_test_per_class",
        ]),
        ("model", &["encoder", "head"]),
        ("model.encoder", &["input_channels", "widths", "blocks_per_stage"]),
        ("model.head", &["hidden_dim", "output_dim", "final_norm"]),
        ("schedule", &[
            "n1", "n2", "n3", "k", "batch_size", "base_lr", "warmup_epochs", "weight_decay", "momentum",
            "trust_coefficient", "tau_base", "temperature", "reference_size",
        ]),
        ("augment", &["view_size", "crop_area_min", "color_jitter_strength"]),
        ("cluster", &["layer", "sample_size", "max_iters", "n_init"]),
        ("distill", &["teacher_input", "targets"]),
        ("method", &["partition", "simclr"]),
        ("probe", &["epochs", "batch_size", "lr_grid", "val_fraction", "momentum", "weight_decay"]),
    ];
    let mut out = Vec::new();
    fn walk(t: &toml::Table, path: &str, sections: &[(&str, &[&str])], out: &mut Vec<String>) {
        let known: BTreeSet<&str> = sections
            .iter()
            .find(|(p, _)| *p == path)
            .map(|(_, k)| k.iter().copied().collect())
            .unwrap_or_default();
        for (key, value) in t {
            let full = if path.is_empty() {
                key.clone()
            } else {
                format!("{path}.{key}")
            };
            if !known.contains(key.as_str()) {
                out.push(format!("unknown key `{full}`"));
            } else if let toml::Value::Table(sub) = value {
                walk(sub, &full, sections, out);
            }
        }
    }
    walk(table, "", sections, &mut out);
    out
}

/// A balanced labelled set drawn from the configured synthetic classes, used
/// by `dnc synth`.
pub fn synth_balanced(cfg: &RunConfig, per_class: usize, seed: u64) -> Result<Dataset> {
    synth_curated(&cfg.synth_spec(), per_class, seed)
}
