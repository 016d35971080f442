//! The three-part network: encoder (backbone + bottleneck), a norm-constrained
//! linear classifier (the hypothesis), and an optional relative-rotation head.

mod backbone;
mod layers;
mod params;

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;

pub use backbone::{Backbone, ResNetDepth};
pub use layers::{dropout, dropout2d, no_grad, BatchNorm, BnInit, Conv, Dense, DenseInit, Mode, WeightNormLinear};
pub use params::{Init, ParamStore};

use crate::config::{AdaptationConfig, BackboneKind, ScaleMode};
use crate::data::ImageShape;
use crate::error::{contract, Error, Result};
use crate::optim::ParamGroup;

/// Number of relative-rotation classes (0°, 90°, 180°, 270°).
pub const ROTATION_CLASSES: usize = 4;

/// Everything needed to rebuild a network of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub backbone: BackboneKind,
    pub input: ImageShape,
    pub num_classes: usize,
    pub bottleneck_dim: usize,
    pub scale_mode: ScaleMode,
    pub mlp_hidden: usize,
    /// Backbone weights come from a pretrained model (10x smaller learning rate).
    pub pretrained: bool,
}

impl ArchitectureSpec {
    pub fn from_config(config: &AdaptationConfig, input: ImageShape, num_classes: usize) -> Self {
        Self {
            backbone: config.backbone,
            input,
            num_classes,
            bottleneck_dim: config.bottleneck_dim,
            scale_mode: config.classifier_scale,
            mlp_hidden: config.mlp_hidden,
            pretrained: config.pretrained && config.backbone_weights.is_some(),
        }
    }

    fn to_metadata(&self) -> HashMap<String, String> {
        let mut m = HashMap::new();
        m.insert("backbone".into(), self.backbone.to_string());
        m.insert("channels".into(), self.input.channels.to_string());
        m.insert("height".into(), self.input.height.to_string());
        m.insert("width".into(), self.input.width.to_string());
        m.insert("num_classes".into(), self.num_classes.to_string());
        m.insert("bottleneck_dim".into(), self.bottleneck_dim.to_string());
        m.insert("scale_mode".into(), self.scale_mode.to_string());
        m.insert("mlp_hidden".into(), self.mlp_hidden.to_string());
        m.insert("pretrained".into(), self.pretrained.to_string());
        m
    }

    fn from_metadata(m: &HashMap<String, String>) -> std::result::Result<Self, String> {
        fn get<T: std::str::FromStr>(m: &HashMap<String, String>, k: &str) -> std::result::Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            m.get(k)
                .ok_or_else(|| format!("missing metadata `{k}`"))?
                .parse()
                .map_err(|e: T::Err| format!("metadata `{k}`: {e}"))
        }
        Ok(Self {
            backbone: get(m, "backbone")?,
            input: ImageShape::new(get(m, "channels")?, get(m, "height")?, get(m, "width")?),
            num_classes: get(m, "num_classes")?,
            bottleneck_dim: get(m, "bottleneck_dim")?,
            scale_mode: get(m, "scale_mode")?,
            mlp_hidden: get(m, "mlp_hidden")?,
            pretrained: get(m, "pretrained")?,
        })
    }
}

struct Bottleneck {
    fc: Dense,
    bn: BatchNorm,
}

pub struct ModelBundle {
    spec: ArchitectureSpec,
    device: Device,
    backbone: Backbone,
    bottleneck: Bottleneck,
    classifier: WeightNormLinear,
    rotation_head: Option<Dense>,
    backbone_store: ParamStore,
    bottleneck_store: ParamStore,
    classifier_store: ParamStore,
    rotation_store: Option<ParamStore>,
    frozen_digest: Option<String>,
}

fn part_rng(seed: u64, part: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(part);
    rng
}

impl ModelBundle {
    /// Fresh network with every parameter drawn from `seed`.
    pub fn new(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(contract("a classifier needs at least two classes"));
        }
        let device = Device::Cpu;
        let mut backbone_store = ParamStore::new();
        let mut rng = part_rng(seed, 1);
        let backbone = {
            let mut init = Init { rng: &mut rng, device: &device };
            Backbone::build(spec.backbone, spec.input, spec.mlp_hidden, &mut backbone_store, &mut init)?
        };
        let mut bottleneck_store = ParamStore::new();
        let mut rng = part_rng(seed, 2);
        let bottleneck = {
            let mut init = Init { rng: &mut rng, device: &device };
            let fc = Dense::new(
                &mut bottleneck_store,
                &mut init,
                "fc",
                backbone.out_dim(),
                spec.bottleneck_dim,
                DenseInit::Xavier,
            )?;
            let bn = BatchNorm::new(&mut bottleneck_store, &mut init, "bn", spec.bottleneck_dim, BnInit::Jitter)?;
            Bottleneck { fc, bn }
        };
        let (classifier, classifier_store) = Self::build_classifier(&spec, &device, seed)?;
        Ok(Self {
            spec,
            device,
            backbone,
            bottleneck,
            classifier,
            rotation_head: None,
            backbone_store,
            bottleneck_store,
            classifier_store,
            rotation_store: None,
            frozen_digest: None,
        })
    }

    fn build_classifier(spec: &ArchitectureSpec, device: &Device, seed: u64) -> Result<(WeightNormLinear, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = part_rng(seed, 3);
        let mut init = Init { rng: &mut rng, device };
        let c = WeightNormLinear::new(&mut store, &mut init, "fc", spec.bottleneck_dim, spec.num_classes, spec.scale_mode)?;
        Ok((c, store))
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Feature dimension d.
    pub fn feature_dim(&self) -> usize {
        self.spec.bottleneck_dim
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// The encoder g: backbone followed by the bottleneck (dense + batch norm).
    pub fn encode(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let h = self.backbone.forward(x, mode)?;
        let f = self.bottleneck.fc.forward(&h)?;
        self.bottleneck.bn.forward(&f, mode)
    }

    /// The hypothesis h: features to raw class scores.
    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        self.classifier.forward(features)
    }

    /// The full predictor f = h ∘ g.
    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        self.classify(&self.encode(x, mode)?)
    }

    pub fn has_rotation_head(&self) -> bool {
        self.rotation_head.is_some()
    }

    /// Adds a fresh linear rotation head taking the 2d-wide concatenation.
    pub fn attach_rotation_head(&mut self, seed: u64) -> Result<()> {
        let mut store = ParamStore::new();
        let mut rng = part_rng(seed, 4);
        let mut init = Init { rng: &mut rng, device: &self.device };
        let head = Dense::new(&mut store, &mut init, "fc", 2 * self.feature_dim(), ROTATION_CLASSES, DenseInit::Xavier)?;
        self.rotation_head = Some(head);
        self.rotation_store = Some(store);
        Ok(())
    }

    pub fn detach_rotation_head(&mut self) {
        self.rotation_head = None;
        self.rotation_store = None;
    }

    /// Rotation scores from `[original features, rotated features]`, in that order.
    pub fn rotation_logits(&self, original: &Tensor, rotated: &Tensor) -> Result<Tensor> {
        let head = self
            .rotation_head
            .as_ref()
            .ok_or_else(|| contract("rotation head is not attached"))?;
        let joint = Tensor::cat(&[original, rotated], 1)?;
        head.forward(&joint)
    }

    /// Excludes the classifier from all later optimizer steps and records its digest.
    pub fn freeze_classifier(&mut self) -> Result<()> {
        if self.frozen_digest.is_none() {
            self.frozen_digest = Some(self.classifier_store.digest()?);
        }
        Ok(())
    }

    pub fn is_classifier_frozen(&self) -> bool {
        self.frozen_digest.is_some()
    }

    /// Digest recorded when the classifier was frozen.
    pub fn frozen_digest(&self) -> Option<&str> {
        self.frozen_digest.as_deref()
    }

    pub fn classifier_digest(&self) -> Result<String> {
        self.classifier_store.digest()
    }

    pub fn encoder_digest(&self) -> Result<String> {
        let mut tensors = self.backbone_store.digest()?;
        tensors.push_str(&self.bottleneck_store.digest()?);
        Ok(tensors)
    }

    /// Replaces the classifier with a freshly initialised, trainable one.
    pub fn reset_classifier(&mut self, seed: u64) -> Result<()> {
        let (c, store) = Self::build_classifier(&self.spec, &self.device, seed ^ 0x5eed)?;
        self.classifier = c;
        self.classifier_store = store;
        self.frozen_digest = None;
        Ok(())
    }

    /// Norm of every effective classifier row.
    pub fn classifier_row_norms(&self) -> Result<Vec<f64>> {
        self.classifier.row_norms()
    }

    /// Optimizer groups. Newly added layers (bottleneck, classifier, rotation
    /// head) run at the base rate; a pretrained backbone at a tenth of it.
    /// A frozen classifier contributes nothing.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let backbone_mult = if self.spec.pretrained { 0.1 } else { 1.0 };
        let mut groups = vec![
            ParamGroup::new(self.backbone_store.trainable(), backbone_mult),
            ParamGroup::new(self.bottleneck_store.trainable(), 1.0),
        ];
        if !self.is_classifier_frozen() {
            groups.push(ParamGroup::new(self.classifier_store.trainable(), 1.0));
        }
        if let Some(store) = &self.rotation_store {
            groups.push(ParamGroup::new(store.trainable(), 1.0));
        }
        groups
    }

    /// Loads backbone weights by name from a safetensors file (torchvision names).
    pub fn load_backbone_weights(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::Data { path: path.into(), reason: e.to_string() })?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Malformed { path: path.into(), reason: e.to_string() })?;
        let mut map = HashMap::new();
        for (name, view) in st.tensors() {
            map.insert(name, candle_core::safetensors::Load::load(&view, &self.device)?);
        }
        self.backbone_store.load(&map, false)?;
        self.spec.pretrained = true;
        Ok(())
    }

    fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        let mut v = vec![
            ("backbone", &self.backbone_store),
            ("bottleneck", &self.bottleneck_store),
            ("classifier", &self.classifier_store),
        ];
        if let Some(r) = &self.rotation_store {
            v.push(("rotation", r));
        }
        v
    }

    /// All tensors under `part.name` keys.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.stores()
            .into_iter()
            .flat_map(|(part, s)| s.named_tensors().into_iter().map(move |(n, t)| (format!("{part}.{n}"), t)))
            .collect()
    }

    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.named_tensors().into_iter().map(|(n, t)| Ok((n, t.copy()?))).collect()
    }

    pub fn restore(&self, snapshot: &[(String, Tensor)]) -> Result<()> {
        let map: HashMap<String, Tensor> = snapshot.iter().cloned().collect();
        self.load_map(&map)
    }

    fn load_map(&self, map: &HashMap<String, Tensor>) -> Result<()> {
        for (part, store) in self.stores() {
            let prefix = format!("{part}.");
            let sub: HashMap<String, Tensor> = map
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(&prefix).map(|n| (n.to_string(), t.clone())))
                .collect();
            store.load(&sub, false)?;
        }
        Ok(())
    }

    /// Independent copy with identical values (rotation head included).
    pub fn try_clone(&self) -> Result<Self> {
        let mut copy = Self::new(self.spec.clone(), 0)?;
        if self.has_rotation_head() {
            copy.attach_rotation_head(0)?;
        }
        copy.restore(&self.snapshot()?)?;
        copy.frozen_digest = self.frozen_digest.clone();
        Ok(copy)
    }

    /// Writes a safetensors checkpoint with the architecture in its metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.named_tensors();
        let mut meta = self.spec.to_metadata();
        meta.insert("rotation_head".into(), self.has_rotation_head().to_string());
        if let Some(d) = &self.frozen_digest {
            meta.insert("frozen_digest".into(), d.clone());
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        safetensors::serialize_to_file(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(meta), path)
            .map_err(|e| Error::Malformed { path: path.into(), reason: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        let malformed = |reason: String| Error::Malformed { path: path.into(), reason };
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| malformed(e.to_string()))?;
        let meta = header.metadata().clone().ok_or_else(|| malformed("no metadata".into()))?;
        let spec = ArchitectureSpec::from_metadata(&meta).map_err(malformed)?;
        let mut model = Self::new(spec, 0)?;
        if meta.get("rotation_head").map(String::as_str) == Some("true") {
            model.attach_rotation_head(0)?;
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| malformed(e.to_string()))?;
        let mut map = HashMap::new();
        for (name, view) in st.tensors() {
            map.insert(name, candle_core::safetensors::Load::load(&view, &model.device)?);
        }
        model.load_map(&map)?;
        model.frozen_digest = meta.get("frozen_digest").cloned();
        Ok(model)
    }
}

/// Freezes the hypothesis. Idempotent: the digest from the first call is kept.
pub fn freeze_classifier(mut model: ModelBundle) -> Result<ModelBundle> {
    model.freeze_classifier()?;
    Ok(model)
}

/// `<task>_<seed>_<stage>.ckpt`
pub fn checkpoint_name(task: &str, seed: u64, stage: &str) -> String {
    format!("{task}_{seed}_{stage}.ckpt")
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    pub(crate) fn tiny_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            backbone: BackboneKind::Mlp,
            input: ImageShape::new(1, 4, 4),
            num_classes: 3,
            bottleneck_dim: 8,
            scale_mode: ScaleMode::Shared,
            mlp_hidden: 12,
            pretrained: false,
        }
    }

    #[test]
    fn same_seed_same_network() {
        let a = ModelBundle::new(tiny_spec(), 5).unwrap();
        let b = ModelBundle::new(tiny_spec(), 5).unwrap();
        let c = ModelBundle::new(tiny_spec(), 6).unwrap();
        assert_eq!(a.encoder_digest().unwrap(), b.encoder_digest().unwrap());
        assert_ne!(a.encoder_digest().unwrap(), c.encoder_digest().unwrap());
    }

    #[test]
    fn freeze_is_idempotent_and_drops_classifier_group() {
        let m = ModelBundle::new(tiny_spec(), 1).unwrap();
        let groups_before = m.param_groups().len();
        let m = freeze_classifier(m).unwrap();
        let d = m.frozen_digest().unwrap().to_string();
        let m = freeze_classifier(m).unwrap();
        assert_eq!(m.frozen_digest().unwrap(), d);
        assert_eq!(d, m.classifier_digest().unwrap());
        assert_eq!(m.param_groups().len(), groups_before - 1);
    }

    #[test]
    fn rotation_head_requires_attachment() {
        let mut m = ModelBundle::new(tiny_spec(), 1).unwrap();
        let f = Tensor::zeros((2, 8), DType::F32, m.device()).unwrap();
        assert!(m.rotation_logits(&f, &f).is_err());
        m.attach_rotation_head(1).unwrap();
        assert_eq!(m.rotation_logits(&f, &f).unwrap().dims(), &[2, 4]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ModelBundle::new(tiny_spec(), 9).unwrap();
        m.attach_rotation_head(3).unwrap();
        let m = freeze_classifier(m).unwrap();
        let path = dir.path().join(checkpoint_name("t", 9, "source"));
        m.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.encoder_digest().unwrap(), m.encoder_digest().unwrap());
        assert_eq!(back.classifier_digest().unwrap(), m.classifier_digest().unwrap());
        assert!(back.has_rotation_head());
        assert!(back.is_classifier_frozen());
        assert!(matches!(
            ModelBundle::load(&dir.path().join("missing.ckpt")),
            Err(Error::MissingCheckpoint(_))
        ));
    }

    #[test]
    fn clone_is_independent() {
        let m = ModelBundle::new(tiny_spec(), 2).unwrap();
        let c = m.try_clone().unwrap();
        assert_eq!(m.encoder_digest().unwrap(), c.encoder_digest().unwrap());
        let v = &c.bottleneck_store.trainable()[0];
        v.set(&v.as_tensor().affine(2.0, 1.0).unwrap()).unwrap();
        assert_ne!(m.encoder_digest().unwrap(), c.encoder_digest().unwrap());
    }
}
