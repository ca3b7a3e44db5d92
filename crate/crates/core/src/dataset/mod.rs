//! Image manifests, patch extraction and preprocessing, and the synthetic
//! paired-view generator.

mod augment;
mod balance;
mod cache;
mod manifest;
mod patches;
mod split;
mod synth;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use augment::{augment, augment_with, Augmentation};
pub use balance::balance;
pub use cache::{read_patch_cache, write_patch_cache, PatchIndexEntry, PATCH_INDEX_FILE};
pub use manifest::{load_manifest, write_manifest, ClassViewCounts};
pub use patches::{extract_patches, patch_offsets, whiten, WHITEN_EPS};
pub use split::split;
pub use synth::{synth_generate, synth_write, SynthConfig, SynthImage, SECTION_HUES, SURFACE_PERIODS};

pub const DEFAULT_PATCH_SIZE: usize = 256;
pub const DEFAULT_MAX_OVERLAP: usize = 20;
pub const DEFAULT_PATCH_BUDGET: usize = 1000;

/// Six stone types, in class-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StoneClass {
    WW,
    WD,
    AU,
    STR,
    BRU,
    CYS,
}

impl StoneClass {
    pub const ALL: [StoneClass; 6] =
        [StoneClass::WW, StoneClass::WD, StoneClass::AU, StoneClass::STR, StoneClass::BRU, StoneClass::CYS];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<StoneClass> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StoneClass::WW => "WW",
            StoneClass::WD => "WD",
            StoneClass::AU => "AU",
            StoneClass::STR => "STR",
            StoneClass::BRU => "BRU",
            StoneClass::CYS => "CYS",
        }
    }
}

impl FromStr for StoneClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown stone class {s:?}")))
    }
}

impl fmt::Display for StoneClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Surface,
    Section,
}

impl View {
    pub const ALL: [View; 2] = [View::Surface, View::Section];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Surface => "surface",
            View::Section => "section",
        }
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "surface" => Ok(View::Surface),
            "section" => Ok(View::Section),
            other => Err(Error::Data(format!("unknown view {other:?}"))),
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }

    fn is_unassigned(&self) -> bool {
        *self == Split::Unassigned
    }
}

/// One source image and its provenance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_path: String,
    #[serde(rename = "class")]
    pub stone_class: StoneClass,
    pub view: View,
    pub stone_id: String,
    #[serde(default, skip_serializing_if = "Split::is_unassigned")]
    pub split: Split,
}

impl ImageRecord {
    /// File stem of the image path; unique per image in a manifest.
    pub fn source_id(&self) -> String {
        Path::new(&self.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_path.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub patch_size: usize,
    pub max_overlap: usize,
    /// Patches per class and view; the mixed set holds twice this per class.
    pub per_class_patch_budget: usize,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            records: Vec::new(),
            patch_size: DEFAULT_PATCH_SIZE,
            max_overlap: DEFAULT_MAX_OVERLAP,
            per_class_patch_budget: DEFAULT_PATCH_BUDGET,
        }
    }
}

impl DatasetManifest {
    pub fn counts(&self) -> ClassViewCounts {
        ClassViewCounts::from_records(&self.records)
    }
}

/// Stored pixel values, channel-first (`3×P×P`).
#[derive(Clone, Debug, PartialEq)]
pub enum PatchPixels {
    Raw(Array3<u8>),
    Whitened(Array3<f32>),
}

impl PatchPixels {
    pub fn dim(&self) -> (usize, usize, usize) {
        match self {
            PatchPixels::Raw(a) => a.dim(),
            PatchPixels::Whitened(a) => a.dim(),
        }
    }

    pub fn to_f32(&self) -> Array3<f32> {
        match self {
            PatchPixels::Raw(a) => a.mapv(f32::from),
            PatchPixels::Whitened(a) => a.clone(),
        }
    }
}

/// A square training sample cut from a source image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub pixels: PatchPixels,
    pub source: ImageRecord,
    /// `(x, y)` of the top-left corner in the source image.
    pub origin: (usize, usize),
    /// `"none"` or the descriptor of the applied transform.
    pub augmentation_tag: String,
}

impl PatchRecord {
    pub fn class(&self) -> StoneClass {
        self.source.stone_class
    }

    pub fn view(&self) -> View {
        self.source.view
    }

    pub fn size(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn is_augmented(&self) -> bool {
        self.augmentation_tag != "none"
    }
}

/// Whitens each patch and stacks them into an `N×3×P×P` tensor.
pub fn patches_to_tensor<T: Scalar>(patches: &[&PatchRecord]) -> Result<Array4<T>> {
    let size = patches.first().map_or(0, |p| p.size());
    let mut out = Array4::<T>::zeros((patches.len(), 3, size, size));
    for (i, p) in patches.iter().enumerate() {
        if p.pixels.dim() != (3, size, size) {
            return Err(Error::Shape(format!(
                "patch {i} has shape {:?}, expected 3×{size}×{size}",
                p.pixels.dim()
            )));
        }
        let w = whiten(p);
        let PatchPixels::Whitened(px) = &w.pixels else { unreachable!("whiten returns real pixels") };
        out.index_axis_mut(ndarray::Axis(0), i).zip_mut_with(px, |o, &v| *o = T::lit(v as f64));
    }
    Ok(out)
}

/// Stable 64-bit mixing of a base seed with extra words.
pub(crate) fn derive_seed(base: u64, words: &[u64]) -> u64 {
    let mut z = base ^ 0x9e37_79b9_7f4a_7c15;
    for &w in words {
        z = splitmix(z ^ w);
    }
    splitmix(z)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_tokens_round_trip() {
        for c in StoneClass::ALL {
            assert_eq!(c.as_str().parse::<StoneClass>().unwrap(), c);
            assert_eq!(StoneClass::from_index(c.index()), Some(c));
        }
        assert!("XX".parse::<StoneClass>().is_err());
        assert!("profile".parse::<View>().is_err());
    }

    #[test]
    fn record_json_uses_class_key() {
        let r = ImageRecord {
            image_path: "a/b/img_01.png".into(),
            stone_class: StoneClass::BRU,
            view: View::Section,
            stone_id: "s1".into(),
            split: Split::Unassigned,
        };
        let j = serde_json::to_string(&r).unwrap();
        assert_eq!(j, r#"{"image_path":"a/b/img_01.png","class":"BRU","view":"section","stone_id":"s1"}"#);
        assert_eq!(r.source_id(), "img_01");
    }
}
