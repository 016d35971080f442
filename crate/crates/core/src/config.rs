//! Run configuration. The on-disk form is a flat `key = value` text file
//! whose keys are exactly the field names of [`AdaptationConfig`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Environment variable naming the data root when the config leaves it unset.
pub const DATA_ROOT_ENV: &str = "SHOT_DATA_ROOT";

pub const DEFAULT_SEEDS: [u64; 3] = [2019, 2020, 2021];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    Closed,
    Partial,
    MultiSource,
    SemiSupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Benchmark {
    Digits,
    Office,
    OfficeHome,
    VisdaC,
    OfficeCaltech,
    Pacs,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    /// LeNet-5 variant for USPS <-> MNIST (1x28x28).
    LeNet,
    /// Deeper LeNet variant with batch norm for SVHN -> MNIST (3x32x32).
    Dtn,
    ResNet18,
    ResNet34,
    ResNet50,
    ResNet101,
    /// Two-layer perceptron over flattened pixels; used for synthetic tasks.
    Mlp,
}

/// How the classifier rows are kept at equal norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScaleMode {
    /// One learnable magnitude shared by every row.
    Shared,
    /// One learnable magnitude per row.
    PerRow,
}

/// What to do with non-square images before rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SquarePolicy {
    Reject,
    PadZero,
    CenterCrop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationConfig {
    pub task: String,
    pub benchmark: Benchmark,
    pub backbone: BackboneKind,
    pub scenario: Scenario,
    pub source: Option<String>,
    pub sources: Vec<String>,
    pub target: Option<String>,
    pub data_root: Option<PathBuf>,

    /// Label-smoothing factor of the source objective.
    pub smoothing: f64,
    /// Weight of the diversity term.
    pub beta: f64,
    /// Weight of the pseudo-label cross-entropy.
    pub gamma1: f64,
    /// Weight of the relative-rotation cross-entropy.
    pub gamma2: f64,
    /// Refined centroids with fewer members than this are dropped (partial-set only).
    pub tiny_centroid_threshold: usize,

    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub batch_size: usize,
    pub source_epochs: usize,
    pub adapt_epochs: usize,
    pub source_val_ratio: f64,

    pub mixmatch_alpha: f64,
    pub mixmatch_epochs: usize,
    pub mixmatch_augmentations: usize,
    pub mixmatch_temperature: f64,
    pub mixmatch_unlabeled_weight: f64,

    pub seeds: Vec<u64>,
    pub seed: u64,

    pub bottleneck_dim: usize,
    pub classifier_scale: ScaleMode,
    pub pretrained: bool,
    pub backbone_weights: Option<PathBuf>,
    /// Network input side length.
    pub image_size: usize,
    /// Side length images are resized to on load (crop happens afterwards).
    pub resize_size: usize,
    pub mlp_hidden: usize,
    pub square_policy: SquarePolicy,
    pub update_bn_in_full_pass: bool,

    /// Labeled:unlabeled batch-size ratio for semi-supervised adaptation.
    pub ssda_labeled_ratio: f64,
    /// Labeled target samples per class for semi-supervised adaptation.
    pub ssda_shots: usize,
    /// Fraction of every domain kept after loading (stratified).
    pub subsample: f64,
}

impl AdaptationConfig {
    /// Defaults for a benchmark family.
    pub fn for_benchmark(benchmark: Benchmark) -> Self {
        let mut c = Self {
            task: "task".into(),
            benchmark,
            backbone: BackboneKind::ResNet50,
            scenario: Scenario::Closed,
            source: None,
            sources: Vec::new(),
            target: None,
            data_root: None,
            smoothing: 0.1,
            beta: 1.0,
            gamma1: 0.3,
            gamma2: 0.6,
            tiny_centroid_threshold: 10,
            base_lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-3,
            nesterov: true,
            batch_size: 64,
            source_epochs: 30,
            adapt_epochs: 15,
            source_val_ratio: 0.9,
            mixmatch_alpha: 0.75,
            mixmatch_epochs: 15,
            mixmatch_augmentations: 2,
            mixmatch_temperature: 0.5,
            mixmatch_unlabeled_weight: 75.0,
            seeds: DEFAULT_SEEDS.to_vec(),
            seed: DEFAULT_SEEDS[0],
            bottleneck_dim: 256,
            classifier_scale: ScaleMode::Shared,
            pretrained: true,
            backbone_weights: None,
            image_size: 224,
            resize_size: 256,
            mlp_hidden: 64,
            square_policy: SquarePolicy::Reject,
            update_bn_in_full_pass: false,
            ssda_labeled_ratio: 1.0,
            ssda_shots: 1,
            subsample: 1.0,
        };
        match benchmark {
            Benchmark::Digits => {
                c.backbone = BackboneKind::LeNet;
                c.pretrained = false;
                c.gamma1 = 0.1;
                c.gamma2 = 0.2;
                c.mixmatch_alpha = 0.1;
                c.mixmatch_unlabeled_weight = 25.0;
                c.source_epochs = 30;
                c.image_size = 28;
                c.resize_size = 28;
            }
            Benchmark::Office | Benchmark::OfficeCaltech => c.source_epochs = 100,
            Benchmark::OfficeHome | Benchmark::Pacs => c.source_epochs = 50,
            Benchmark::VisdaC => {
                c.backbone = BackboneKind::ResNet101;
                c.base_lr = 1e-3;
                c.source_epochs = 10;
            }
            Benchmark::Custom => {}
        }
        c
    }

    /// Parses `key = value` text. Blank lines and `#` comments are ignored.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        Self::from_map(&parse_kv(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_kv_str(&text)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        for key in map.keys() {
            if !KEYS.contains(&key.as_str()) {
                return Err(Error::UnknownKey(key.clone()));
            }
        }
        let benchmark = match map.get("benchmark") {
            Some(v) => parse_value("benchmark", v)?,
            None => Benchmark::Custom,
        };
        let mut c = Self::for_benchmark(benchmark);
        for (key, value) in map {
            c.set(key, value)?;
        }
        if !map.contains_key("mixmatch_epochs") {
            c.mixmatch_epochs = c.adapt_epochs;
        }
        if !map.contains_key("resize_size") && map.contains_key("image_size") {
            c.resize_size = match c.benchmark {
                Benchmark::Digits => c.image_size,
                _ => c.image_size * 8 / 7,
            };
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => self.task = v.to_string(),
            "benchmark" => self.benchmark = parse_value(key, v)?,
            "backbone" => self.backbone = parse_value(key, v)?,
            "scenario" => self.scenario = parse_value(key, v)?,
            "source" => self.source = non_empty(v),
            "sources" => self.sources = split_list(v),
            "target" => self.target = non_empty(v),
            "data_root" => self.data_root = non_empty(v).map(PathBuf::from),
            "smoothing" => self.smoothing = parse_value(key, v)?,
            "beta" => self.beta = parse_value(key, v)?,
            "gamma1" => self.gamma1 = parse_value(key, v)?,
            "gamma2" => self.gamma2 = parse_value(key, v)?,
            "tiny_centroid_threshold" => self.tiny_centroid_threshold = parse_value(key, v)?,
            "base_lr" => self.base_lr = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "nesterov" => self.nesterov = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "source_epochs" => self.source_epochs = parse_value(key, v)?,
            "adapt_epochs" => self.adapt_epochs = parse_value(key, v)?,
            "source_val_ratio" => self.source_val_ratio = parse_value(key, v)?,
            "mixmatch_alpha" => self.mixmatch_alpha = parse_value(key, v)?,
            "mixmatch_epochs" => self.mixmatch_epochs = parse_value(key, v)?,
            "mixmatch_augmentations" => self.mixmatch_augmentations = parse_value(key, v)?,
            "mixmatch_temperature" => self.mixmatch_temperature = parse_value(key, v)?,
            "mixmatch_unlabeled_weight" => self.mixmatch_unlabeled_weight = parse_value(key, v)?,
            "seeds" => {
                self.seeds = split_list(v)
                    .iter()
                    .map(|s| parse_value::<u64>(key, s))
                    .collect::<Result<_>>()?
            }
            "seed" => self.seed = parse_value(key, v)?,
            "bottleneck_dim" => self.bottleneck_dim = parse_value(key, v)?,
            "classifier_scale" => self.classifier_scale = parse_value(key, v)?,
            "pretrained" => self.pretrained = parse_value(key, v)?,
            "backbone_weights" => self.backbone_weights = non_empty(v).map(PathBuf::from),
            "image_size" => self.image_size = parse_value(key, v)?,
            "resize_size" => self.resize_size = parse_value(key, v)?,
            "mlp_hidden" => self.mlp_hidden = parse_value(key, v)?,
            "square_policy" => self.square_policy = parse_value(key, v)?,
            "update_bn_in_full_pass" => self.update_bn_in_full_pass = parse_value(key, v)?,
            "ssda_labeled_ratio" => self.ssda_labeled_ratio = parse_value(key, v)?,
            "ssda_shots" => self.ssda_shots = parse_value(key, v)?,
            "subsample" => self.subsample = parse_value(key, v)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Checks ranges and applies the partial-set override of `beta`.
    pub fn validate(&mut self) -> Result<()> {
        let non_negative = [
            ("beta", self.beta),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
            ("mixmatch_unlabeled_weight", self.mixmatch_unlabeled_weight),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(key, "must be a finite value >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(invalid("smoothing", "must lie in [0, 1)"));
        }
        if !(self.base_lr > 0.0) {
            return Err(invalid("base_lr", "must be > 0"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch_size", "must be >= 2 (batch statistics need two samples)"));
        }
        if !(self.source_val_ratio > 0.0 && self.source_val_ratio < 1.0) {
            return Err(invalid("source_val_ratio", "must lie in (0, 1)"));
        }
        if !(self.mixmatch_alpha > 0.0) {
            return Err(invalid("mixmatch_alpha", "must be > 0"));
        }
        if !(self.mixmatch_temperature > 0.0) {
            return Err(invalid("mixmatch_temperature", "must be > 0"));
        }
        if self.mixmatch_augmentations == 0 {
            return Err(invalid("mixmatch_augmentations", "must be >= 1"));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(invalid("subsample", "must lie in (0, 1]"));
        }
        if !(self.ssda_labeled_ratio > 0.0) {
            return Err(invalid("ssda_labeled_ratio", "must be > 0"));
        }
        if self.bottleneck_dim == 0 || self.image_size == 0 || self.mlp_hidden == 0 {
            return Err(invalid("bottleneck_dim", "dimensions must be positive"));
        }
        if self.resize_size < self.image_size {
            return Err(invalid("resize_size", "must be >= image_size"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        if self.scenario == Scenario::Partial && self.beta != 0.0 {
            log::warn!("partial-set scenario: forcing beta = 0 (was {})", self.beta);
            self.beta = 0.0;
        }
        Ok(())
    }

    /// The data root from the config, falling back to `SHOT_DATA_ROOT`.
    pub fn resolved_data_root(&self) -> Option<PathBuf> {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }

    pub fn require_source(&self) -> Result<&str> {
        self.source.as_deref().ok_or_else(|| Error::MissingKey("source".into()))
    }

    pub fn require_target(&self) -> Result<&str> {
        self.target.as_deref().ok_or_else(|| Error::MissingKey("target".into()))
    }

    /// Whether tiny-centroid filtering is active.
    pub fn filters_tiny_centroids(&self) -> bool {
        self.scenario == Scenario::Partial
    }

    /// Serialises every field back to `key = value` text.
    pub fn to_kv_string(&self) -> String {
        let opt = |o: &Option<String>| o.clone().unwrap_or_default();
        let path = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let entries: Vec<(&str, String)> = vec![
            ("task", self.task.clone()),
            ("benchmark", self.benchmark.to_string()),
            ("backbone", self.backbone.to_string()),
            ("scenario", self.scenario.to_string()),
            ("source", opt(&self.source)),
            ("sources", self.sources.join(",")),
            ("target", opt(&self.target)),
            ("data_root", path(&self.data_root)),
            ("smoothing", self.smoothing.to_string()),
            ("beta", self.beta.to_string()),
            ("gamma1", self.gamma1.to_string()),
            ("gamma2", self.gamma2.to_string()),
            ("tiny_centroid_threshold", self.tiny_centroid_threshold.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("nesterov", self.nesterov.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("source_epochs", self.source_epochs.to_string()),
            ("adapt_epochs", self.adapt_epochs.to_string()),
            ("source_val_ratio", self.source_val_ratio.to_string()),
            ("mixmatch_alpha", self.mixmatch_alpha.to_string()),
            ("mixmatch_epochs", self.mixmatch_epochs.to_string()),
            ("mixmatch_augmentations", self.mixmatch_augmentations.to_string()),
            ("mixmatch_temperature", self.mixmatch_temperature.to_string()),
            ("mixmatch_unlabeled_weight", self.mixmatch_unlabeled_weight.to_string()),
            ("seeds", seeds.join(",")),
            ("seed", self.seed.to_string()),
            ("bottleneck_dim", self.bottleneck_dim.to_string()),
            ("classifier_scale", self.classifier_scale.to_string()),
            ("pretrained", self.pretrained.to_string()),
            ("backbone_weights", path(&self.backbone_weights)),
            ("image_size", self.image_size.to_string()),
            ("resize_size", self.resize_size.to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("square_policy", self.square_policy.to_string()),
            ("update_bn_in_full_pass", self.update_bn_in_full_pass.to_string()),
            ("ssda_labeled_ratio", self.ssda_labeled_ratio.to_string()),
            ("ssda_shots", self.ssda_shots.to_string()),
            ("subsample", self.subsample.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self::for_benchmark(Benchmark::Custom)
    }
}

/// Every accepted key, in field order.
pub const KEYS: &[&str] = &[
    "task",
    "benchmark",
    "backbone",
    "scenario",
    "source",
    "sources",
    "target",
    "data_root",
    "smoothing",
    "beta",
    "gamma1",
    "gamma2",
    "tiny_centroid_threshold",
    "base_lr",
    "momentum",
    "weight_decay",
    "nesterov",
    "batch_size",
    "source_epochs",
    "adapt_epochs",
    "source_val_ratio",
    "mixmatch_alpha",
    "mixmatch_epochs",
    "mixmatch_augmentations",
    "mixmatch_temperature",
    "mixmatch_unlabeled_weight",
    "seeds",
    "seed",
    "bottleneck_dim",
    "classifier_scale",
    "pretrained",
    "backbone_weights",
    "image_size",
    "resize_size",
    "mlp_hidden",
    "square_policy",
    "update_bn_in_full_pass",
    "ssda_labeled_ratio",
    "ssda_shots",
    "subsample",
];

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::InvalidValue {
            key: format!("line {}", lineno + 1),
            reason: "expected `key = value`".into(),
        })?;
        let key = k.trim().to_string();
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::InvalidValue { key, reason: "duplicate key".into() });
        }
    }
    Ok(map)
}

fn invalid(key: &str, reason: &str) -> Error {
    Error::InvalidValue { key: key.into(), reason: reason.into() }
}

fn non_empty(v: &str) -> Option<String> {
    (!v.is_empty()).then(|| v.to_string())
}

fn split_list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::InvalidValue { key: key.into(), reason: e.to_string() })
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok(<$ty>::$variant),)+
                    other => Err(format!(
                        "`{other}` is not one of: {}",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(<$ty>::$variant => $text,)+ })
            }
        }
    };
}

text_enum!(Scenario {
    Closed => "closed",
    Partial => "partial",
    MultiSource => "multi-source",
    SemiSupervised => "semi-supervised",
});

text_enum!(Benchmark {
    Digits => "digits",
    Office => "office",
    OfficeHome => "office-home",
    VisdaC => "visda-c",
    OfficeCaltech => "office-caltech",
    Pacs => "pacs",
    Custom => "custom",
});

text_enum!(BackboneKind {
    LeNet => "lenet",
    Dtn => "dtn",
    ResNet18 => "resnet18",
    ResNet34 => "resnet34",
    ResNet50 => "resnet50",
    ResNet101 => "resnet101",
    Mlp => "mlp",
});

text_enum!(ScaleMode {
    Shared => "shared",
    PerRow => "per-row",
});

text_enum!(SquarePolicy {
    Reject => "reject",
    PadZero => "pad",
    CenterCrop => "crop",
});
