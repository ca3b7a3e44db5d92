use ndarray::{Array2, Axis};

use crate::backbone::SingleViewModel;
use crate::dataset::PatchRecord;
use crate::error::{Error, Result};
use crate::fusion::{fuse_batch, MultiViewModel, ViewPair};
use crate::scalar::Scalar;
use crate::training::ModelMut;

const EMBED_BATCH: usize = 64;

/// Feature rows with aligned labels and optional 3-D coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub coords3d: Option<Array2<f64>>,
    pub source_model: String,
}

pub enum EmbeddingInput<'a> {
    Patches(&'a [PatchRecord]),
    /// Pairs index into the patch slice.
    Pairs(&'a [PatchRecord], &'a [ViewPair]),
}

fn single<T: Scalar>(model: &mut SingleViewModel<T>, patches: &[PatchRecord]) -> Result<Array2<f64>> {
    let refs: Vec<&PatchRecord> = patches.iter().collect();
    Ok(model.extractor.features_of(&refs, EMBED_BATCH)?.mapv(|v| v.as_f64()))
}

fn multi<T: Scalar>(model: &mut MultiViewModel<T>, patches: &[PatchRecord], pairs: &[ViewPair]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((0, model.fused_width()));
    for chunk in pairs.chunks(EMBED_BATCH) {
        let get = |i: usize| patches.get(i).ok_or_else(|| Error::Data(format!("pair index {i} out of range")));
        let sur = chunk.iter().map(|p| get(p.surface)).collect::<Result<Vec<_>>>()?;
        let sec = chunk.iter().map(|p| get(p.section)).collect::<Result<Vec<_>>>()?;
        let fs = model.surface_extractor.features_of(&sur, EMBED_BATCH)?;
        let fe = model.section_extractor.features_of(&sec, EMBED_BATCH)?;
        let fused = fuse_batch(&fs, &fe, model.strategy)?;
        out.append(Axis(0), fused.mapv(|v| v.as_f64()).view()).expect("matching width");
    }
    Ok(out)
}

/// Pre-head representation of every input in inference mode. Single-view
/// models take patches; multi-view models take pairs and yield the fused vector.
pub fn extract_embeddings<T: Scalar>(model: ModelMut<'_, T>, input: EmbeddingInput<'_>, tag: &str) -> Result<EmbeddingSet> {
    let (features, labels) = match (model, input) {
        (ModelMut::Single(m), EmbeddingInput::Patches(p)) => (single(m, p)?, p.iter().map(|r| r.class().index()).collect()),
        (ModelMut::Multi(m), EmbeddingInput::Pairs(p, pairs)) => {
            (multi(m, p, pairs)?, pairs.iter().map(|q| q.label.index()).collect())
        }
        (ModelMut::Single(_), EmbeddingInput::Pairs(..)) => {
            return Err(Error::InvalidConfig("single-view model cannot embed view pairs".into()))
        }
        (ModelMut::Multi(_), EmbeddingInput::Patches(_)) => {
            return Err(Error::InvalidConfig("multi-view model needs view pairs, got patches".into()))
        }
    };
    Ok(EmbeddingSet { features, labels, coords3d: None, source_model: tag.to_string() })
}
