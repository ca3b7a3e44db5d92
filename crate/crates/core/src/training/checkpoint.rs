//! Single-file model archive: magic, format version, JSON header, raw
//! little-endian tensors and a trailing SHA-256 of everything before it.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelMut, TrainConfig, TrainMode};
use crate::backbone::{Architecture, BackboneSpec, Extractor, Head, HeadSpec, SingleViewModel};
use crate::error::{Error, Result};
use crate::evaluation::write_atomic;
use crate::fusion::{FusionStrategy, MultiViewModel};
use crate::nn::{Param, Parameters};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STONEVW\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SingleView,
    MultiView,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelKind,
    pub dtype: String,
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    pub fusion: Option<FusionStrategy>,
    pub trained_on: Option<TrainMode>,
    pub config_fingerprint: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    /// Short description such as `tiny-att-on-mixed` or `tiny-att-on-mv-concat`.
    pub fn model_tag(&self) -> String {
        let att = if self.backbone.attention_enabled { "on" } else { "off" };
        let what = match (self.model, self.fusion, self.trained_on) {
            (ModelKind::MultiView, Some(f), _) => format!("mv-{}", f.as_str()),
            (_, _, Some(TrainMode::SingleViewSurface)) => "surface".into(),
            (_, _, Some(TrainMode::SingleViewSection)) => "section".into(),
            _ => "mixed".into(),
        };
        format!("{}-att-{att}-{what}", self.backbone.architecture.as_str())
    }
}

pub enum LoadedModel<T> {
    Single(SingleViewModel<T>),
    Multi(MultiViewModel<T>),
}

impl<T> LoadedModel<T> {
    pub fn as_mut(&mut self) -> ModelMut<'_, T> {
        match self {
            LoadedModel::Single(m) => ModelMut::Single(m),
            LoadedModel::Multi(m) => ModelMut::Multi(m),
        }
    }

    pub fn into_single(self) -> Result<SingleViewModel<T>> {
        match self {
            LoadedModel::Single(m) => Ok(m),
            LoadedModel::Multi(_) => Err(Error::CheckpointMismatch("expected a single-view model, found multi-view".into())),
        }
    }

    pub fn into_multi(self) -> Result<MultiViewModel<T>> {
        match self {
            LoadedModel::Multi(m) => Ok(m),
            LoadedModel::Single(_) => Err(Error::CheckpointMismatch("expected a multi-view model, found single-view".into())),
        }
    }
}

fn collect<T: Scalar, M: Parameters<T> + ?Sized>(m: &M) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    m.visit("", &mut |name, p| {
        entries.push(TensorEntry { name: name.to_string(), shape: p.value.shape().to_vec() });
        for &v in p.value.iter() {
            v.write_le(&mut data);
        }
    });
    (entries, data)
}

/// Writes a model with its architecture, head, fusion rule and optional config fingerprint.
pub fn save_checkpoint<T: Scalar>(model: ModelMut<'_, T>, config: Option<&TrainConfig>, path: &Path) -> Result<()> {
    let (header, data) = match model {
        ModelMut::Single(m) => {
            let (tensors, data) = collect::<T, _>(m);
            let header = CheckpointHeader {
                model: ModelKind::SingleView,
                dtype: T::DTYPE.into(),
                backbone: m.extractor.spec.clone(),
                head: m.head.spec.clone(),
                fusion: None,
                trained_on: m.trained_on,
                config_fingerprint: config.map(TrainConfig::fingerprint),
                tensors,
            };
            (header, data)
        }
        ModelMut::Multi(m) => {
            let (tensors, data) = collect::<T, _>(m);
            let header = CheckpointHeader {
                model: ModelKind::MultiView,
                dtype: T::DTYPE.into(),
                backbone: m.surface_extractor.spec.clone(),
                head: m.head.spec.clone(),
                fusion: Some(m.strategy),
                trained_on: Some(TrainMode::MultiView),
                config_fingerprint: config.map(TrainConfig::fingerprint),
                tensors,
            };
            (header, data)
        }
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(8 + 4 + 8 + json.len() + data.len() + DIGEST_LEN);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&data);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    write_atomic(path, &bytes)
}

fn corrupted(path: &Path, why: &str) -> Error {
    Error::CheckpointCorrupted(format!("{}: {why}", path.display()))
}

/// Verifies framing, version and digest; returns the header and the tensor bytes.
fn read_raw(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupted(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupted(path, "checksum mismatch"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    if 20 + header_len > body.len() {
        return Err(corrupted(path, "truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[20..20 + header_len]).map_err(|e| corrupted(path, &e.to_string()))?;
    Ok((header, body[20 + header_len..].to_vec()))
}

/// Decodes the tensor section into named arrays.
fn decode<T: Scalar>(header: &CheckpointHeader, data: &[u8], path: &Path) -> Result<HashMap<String, ArrayD<T>>> {
    if header.dtype != T::DTYPE {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {} values, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut out = HashMap::new();
    let mut offset = 0;
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let end = offset + n * T::BYTES;
        if end > data.len() {
            return Err(corrupted(path, "tensor data truncated"));
        }
        let values: Vec<T> = data[offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        out.insert(t.name.clone(), ArrayD::from_shape_vec(IxDyn(&t.shape), values).expect("sized"));
        offset = end;
    }
    if offset != data.len() {
        return Err(corrupted(path, "trailing tensor bytes"));
    }
    Ok(out)
}

/// Copies every named tensor into `model`; the name sets and shapes must match exactly.
fn assign<T: Scalar, M: Parameters<T> + ?Sized>(model: &mut M, mut tensors: HashMap<String, ArrayD<T>>) -> Result<()> {
    let mut problem = None;
    model.visit_mut("", &mut |name, p: &mut Param<T>| {
        if problem.is_some() {
            return;
        }
        match tensors.remove(name) {
            Some(v) if v.shape() == p.value.shape() => p.value = v,
            Some(v) => {
                problem = Some(format!("{name}: shape {:?} in file, model expects {:?}", v.shape(), p.value.shape()))
            }
            None => problem = Some(format!("{name} missing from checkpoint")),
        }
    });
    if let Some(p) = problem {
        return Err(Error::CheckpointMismatch(p));
    }
    if let Some(extra) = tensors.keys().min() {
        return Err(Error::CheckpointMismatch(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

/// Reads a checkpoint. With `expected` set, a different backbone architecture is an error.
pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<Architecture>) -> Result<(CheckpointHeader, LoadedModel<T>)> {
    let (header, data) = read_raw(path)?;
    if let Some(arch) = expected {
        if arch != header.backbone.architecture {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint was built for {}, requested {}",
                header.backbone.architecture.as_str(),
                arch.as_str()
            )));
        }
    }
    let tensors = decode::<T>(&header, &data, path)?;
    let extractor = Extractor::<T>::new(&header.backbone)?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 1);
    let model = match header.model {
        ModelKind::SingleView => {
            let head = Head::new(extractor.feature_dim(), &header.head, &mut rng)?;
            let mut m = SingleViewModel { extractor, head, frozen: false, trained_on: header.trained_on };
            assign(&mut m, tensors)?;
            LoadedModel::Single(m)
        }
        ModelKind::MultiView => {
            let strategy = header
                .fusion
                .ok_or_else(|| corrupted(path, "multi-view checkpoint without fusion strategy"))?;
            let head = Head::new(strategy.fused_width(extractor.feature_dim()), &header.head, &mut rng)?;
            let mut m = MultiViewModel { surface_extractor: extractor.clone(), section_extractor: extractor, strategy, head };
            assign(&mut m, tensors)?;
            LoadedModel::Multi(m)
        }
    };
    Ok((header, model))
}

/// Initializes an extractor's convolution and normalization tensors from a
/// single-view checkpoint of the same architecture. Attention tensors are not
/// touched, so attention may be added on top of weights trained without it.
pub fn load_pretrained_into<T: Scalar>(extractor: &mut Extractor<T>, path: &Path) -> Result<()> {
    let (header, data) = read_raw(path)?;
    if header.backbone.architecture != extractor.spec.architecture || header.backbone.input_size != extractor.spec.input_size {
        return Err(Error::CheckpointMismatch(format!(
            "pretrained weights are for {} at {} px, extractor is {} at {} px",
            header.backbone.architecture.as_str(),
            header.backbone.input_size,
            extractor.spec.architecture.as_str(),
            extractor.spec.input_size
        )));
    }
    let mut tensors = decode::<T>(&header, &data, path)?;
    let mut loaded = 0usize;
    let mut problem = None;
    extractor.visit_mut("", &mut |name, p| {
        if name.contains("attention.") || problem.is_some() {
            return;
        }
        match tensors.remove(&format!("extractor.{name}")) {
            Some(v) if v.shape() == p.value.shape() => {
                p.value = v;
                loaded += 1;
            }
            Some(v) => problem = Some(format!("{name}: shape {:?} vs {:?}", v.shape(), p.value.shape())),
            None => problem = Some(format!("{name} missing from pretrained weights")),
        }
    });
    match problem {
        Some(p) => Err(Error::CheckpointMismatch(p)),
        None if loaded == 0 => Err(Error::CheckpointMismatch("no extractor tensors in pretrained file".into())),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_model;
    use crate::fusion::build_multiview;
    use crate::nn::Pass;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch() -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Array4::from_shape_fn((4, 3, 32, 32), |_| rng.gen_range(-1.0..1.0))
    }

    fn trained(seed: u64) -> SingleViewModel<f32> {
        let mut m = build_model::<f32>(&BackboneSpec::tiny(true).with_seed(seed), &HeadSpec::default()).unwrap();
        // one training-mode pass moves the running statistics away from their defaults
        m.forward(&batch(), Pass::TRAIN).unwrap();
        m.trained_on = Some(TrainMode::SingleViewMixed);
        m
    }

    #[test]
    fn single_view_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = trained(1);
        save_checkpoint(ModelMut::Single(&mut m), Some(&TrainConfig::default()), &path).unwrap();
        let (header, loaded) = load_checkpoint::<f32>(&path, Some(Architecture::Tiny)).unwrap();
        let mut l = loaded.into_single().unwrap();
        assert_eq!(header.config_fingerprint, Some(TrainConfig::default().fingerprint()));
        assert_eq!(l.trained_on, Some(TrainMode::SingleViewMixed));
        assert_eq!(l.checksum(), m.checksum());
        let a = m.forward(&batch(), Pass::EVAL).unwrap();
        let b = l.forward(&batch(), Pass::EVAL).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn multiview_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mv.ckpt");
        let base = trained(2);
        let mut mv = build_multiview(&base, FusionStrategy::Concatenation, &HeadSpec::default(), 5).unwrap();
        save_checkpoint(ModelMut::Multi(&mut mv), None, &path).unwrap();
        let (header, loaded) = load_checkpoint::<f32>(&path, None).unwrap();
        assert_eq!(header.fusion, Some(FusionStrategy::Concatenation));
        let l = loaded.into_multi().unwrap();
        assert_eq!(l.checksum(), mv.checksum());
    }

    #[test]
    fn guards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = trained(1);
        save_checkpoint(ModelMut::Single(&mut m), None, &path).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path, Some(Architecture::Resnet50)),
            Err(Error::CheckpointMismatch(_))
        ));
        assert!(matches!(load_checkpoint::<f64>(&path, None), Err(Error::CheckpointMismatch(_))));

        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() - 100;
        bytes[mid] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path, None), Err(Error::CheckpointCorrupted(_))));

        bytes[mid] ^= 0x01;
        bytes[8] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path, None),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));

        fs::write(&path, b"hello").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path, None), Err(Error::CheckpointCorrupted(_))));
    }

    #[test]
    fn pretrained_weights_skip_attention() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.ckpt");
        let mut plain = build_model::<f32>(&BackboneSpec::tiny(false).with_seed(9), &HeadSpec::default()).unwrap();
        plain.forward(&batch(), Pass::TRAIN).unwrap();
        save_checkpoint(ModelMut::Single(&mut plain), None, &path).unwrap();

        let spec = BackboneSpec {
            pretrained_init: crate::backbone::PretrainedInit::Imagenet,
            pretrained_path: Some(path.clone()),
            ..BackboneSpec::tiny(true).with_seed(4)
        };
        let with_att = build_model::<f32>(&spec, &HeadSpec::default()).unwrap();
        let mut source = HashMap::new();
        plain.extractor.visit("", &mut |n, p| {
            source.insert(n.to_string(), p.value.clone());
        });
        with_att.extractor.visit("", &mut |n, p| {
            if !n.contains("attention.") {
                assert_eq!(source[n], p.value, "{n}");
            }
        });
        let wrong = BackboneSpec { input_size: 64, ..spec };
        assert!(build_model::<f32>(&wrong, &HeadSpec::default()).is_err());
    }
}
