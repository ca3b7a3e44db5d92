//! Late fusion of two frozen, parameter-identical extractors.
//!
//! The surface and section patches of a pair go through their own copy of the
//! extractor; the pooled feature vectors are merged by elementwise max or by
//! concatenation (surface first) and classified by a freshly initialized head.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array1, Array2, Array4, ArrayView1, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Extractor, Head, HeadSpec, SingleViewModel};
use crate::dataset::{PatchRecord, StoneClass, View};
use crate::error::{Error, Result};
use crate::nn::{join, Param, Parameters, Pass};
use crate::scalar::Scalar;
use crate::training::TrainMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    MaxPool,
    Concatenation,
}

impl FusionStrategy {
    pub fn fused_width(self, feature_dim: usize) -> usize {
        match self {
            FusionStrategy::MaxPool => feature_dim,
            FusionStrategy::Concatenation => 2 * feature_dim,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::MaxPool => "max_pool",
            FusionStrategy::Concatenation => "concatenation",
        }
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" | "max_pool" => Ok(FusionStrategy::MaxPool),
            "concat" | "concatenation" => Ok(FusionStrategy::Concatenation),
            other => Err(Error::InvalidConfig(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

/// Merges one surface and one section feature vector.
pub fn fuse<T: Scalar>(surface: ArrayView1<'_, T>, section: ArrayView1<'_, T>, strategy: FusionStrategy) -> Result<Array1<T>> {
    if surface.len() != section.len() {
        return Err(Error::Shape(format!(
            "cannot fuse feature vectors of widths {} and {}",
            surface.len(),
            section.len()
        )));
    }
    Ok(match strategy {
        FusionStrategy::MaxPool => Zip::from(&surface).and(&section).map_collect(|&a, &b| a.max(b)),
        FusionStrategy::Concatenation => concatenate(Axis(0), &[surface, section]).expect("same rank"),
    })
}

/// Row-wise [`fuse`] over a batch of feature pairs.
pub fn fuse_batch<T: Scalar>(surface: &Array2<T>, section: &Array2<T>, strategy: FusionStrategy) -> Result<Array2<T>> {
    if surface.dim() != section.dim() {
        return Err(Error::Shape(format!(
            "cannot fuse feature batches {:?} and {:?}",
            surface.dim(),
            section.dim()
        )));
    }
    Ok(match strategy {
        FusionStrategy::MaxPool => Zip::from(surface).and(section).map_collect(|&a, &b| a.max(b)),
        FusionStrategy::Concatenation => concatenate(Axis(1), &[surface.view(), section.view()]).expect("same rows"),
    })
}

/// Two frozen extractor copies, a fusion rule and a trainable head.
#[derive(Clone, Debug)]
pub struct MultiViewModel<T> {
    pub surface_extractor: Extractor<T>,
    pub section_extractor: Extractor<T>,
    pub strategy: FusionStrategy,
    pub head: Head<T>,
}

/// Freezes and duplicates the extractor of a mixed-view model and attaches a fresh head.
pub fn build_multiview<T: Scalar>(
    base: &SingleViewModel<T>,
    strategy: FusionStrategy,
    head: &HeadSpec,
    seed: u64,
) -> Result<MultiViewModel<T>> {
    match base.trained_on {
        None => return Err(Error::InvalidConfig("base model has not been trained".into())),
        Some(TrainMode::SingleViewMixed) => {}
        Some(other) => {
            return Err(Error::InvalidConfig(format!(
                "multi-view models need a mixed-view base, got one trained in {} mode",
                other.as_str()
            )))
        }
    }
    let width = strategy.fused_width(base.extractor.feature_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = Head::new(width, head, &mut rng)?;
    Ok(MultiViewModel {
        surface_extractor: base.extractor.clone(),
        section_extractor: base.extractor.clone(),
        strategy,
        head,
    })
}

impl<T: Scalar> MultiViewModel<T> {
    pub fn feature_dim(&self) -> usize {
        self.surface_extractor.feature_dim()
    }

    pub fn fused_width(&self) -> usize {
        self.strategy.fused_width(self.feature_dim())
    }

    /// Fused pre-head representation; extractors always run in inference mode.
    pub fn fused_features(&mut self, surface: &Array4<T>, section: &Array4<T>) -> Result<Array2<T>> {
        if surface.dim() != section.dim() {
            return Err(Error::Shape(format!(
                "view batches differ: {:?} vs {:?}",
                surface.dim(),
                section.dim()
            )));
        }
        let fs = self.surface_extractor.forward(surface, Pass::EVAL)?;
        let fe = self.section_extractor.forward(section, Pass::EVAL)?;
        fuse_batch(&fs, &fe, self.strategy)
    }

    pub fn forward(&mut self, surface: &Array4<T>, section: &Array4<T>, pass: Pass) -> Result<Array2<T>> {
        let fused = self.fused_features(surface, section)?;
        self.head.forward(&fused, pass)
    }

    /// SHA-256 over both extractors' weights and buffers.
    pub fn extractor_checksum(&self) -> String {
        ExtractorPair(self).checksum()
    }
}

struct ExtractorPair<'a, T>(&'a MultiViewModel<T>);

impl<T: Scalar> Parameters<T> for ExtractorPair<'_, T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.0.surface_extractor.visit(&join(prefix, "surface"), f);
        self.0.section_extractor.visit(&join(prefix, "section"), f);
    }

    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {
        unreachable!("read-only view")
    }
}

/// Logits `head(fuse(extract(surface), extract(section)))` in inference mode; `B×6`.
pub fn forward_multiview<T: Scalar>(model: &mut MultiViewModel<T>, surface: &Array4<T>, section: &Array4<T>) -> Result<Array2<T>> {
    model.forward(surface, section, Pass::EVAL)
}

impl<T: Scalar> Parameters<T> for MultiViewModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.surface_extractor.visit(&join(prefix, "surface"), f);
        self.section_extractor.visit(&join(prefix, "section"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.surface_extractor.visit_mut(&join(prefix, "surface"), f);
        self.section_extractor.visit_mut(&join(prefix, "section"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// One surface patch and one section patch of the same class, by index into a patch list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewPair {
    pub surface: usize,
    pub section: usize,
    pub label: StoneClass,
}

/// Seeded within-class matching of surface and section patches for one epoch.
///
/// Each class yields `max(#surface, #section)` pairs; both lists are shuffled
/// and the shorter one is cycled, so every patch appears at least once. The
/// returned pairs are shuffled across classes.
pub fn pair_views(patches: &[PatchRecord], seed: u64) -> Result<Vec<ViewPair>> {
    let mut by_class: BTreeMap<StoneClass, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, p) in patches.iter().enumerate() {
        let entry = by_class.entry(p.class()).or_default();
        match p.view() {
            View::Surface => entry.0.push(i),
            View::Section => entry.1.push(i),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (class, (mut sur, mut sec)) in by_class {
        if sur.is_empty() || sec.is_empty() {
            let missing = if sur.is_empty() { View::Surface } else { View::Section };
            return Err(Error::Data(format!("class {} has no {} patches to pair", class.as_str(), missing.as_str())));
        }
        sur.shuffle(&mut rng);
        sec.shuffle(&mut rng);
        let n = sur.len().max(sec.len());
        pairs.extend((0..n).map(|i| ViewPair { surface: sur[i % sur.len()], section: sec[i % sec.len()], label: class }));
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn max_and_concat_definitions() {
        let a = array![1.0, 3.0];
        let b = array![2.0, 2.0];
        assert_eq!(fuse(a.view(), b.view(), FusionStrategy::MaxPool).unwrap(), array![2.0, 3.0]);
        assert_eq!(fuse(a.view(), b.view(), FusionStrategy::Concatenation).unwrap(), array![1.0, 3.0, 2.0, 2.0]);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let a = array![1.0, 3.0];
        let b = array![2.0];
        assert!(fuse(a.view(), b.view(), FusionStrategy::MaxPool).is_err());
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("max".parse::<FusionStrategy>().unwrap(), FusionStrategy::MaxPool);
        assert_eq!("concat".parse::<FusionStrategy>().unwrap(), FusionStrategy::Concatenation);
        assert!("sum".parse::<FusionStrategy>().is_err());
        assert_eq!(FusionStrategy::Concatenation.fused_width(2048), 4096);
        assert_eq!(FusionStrategy::MaxPool.fused_width(2048), 2048);
    }
}
