use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{ImageRecord, PatchPixels, PatchRecord, Split};
use crate::error::{Error, Result};

/// Name of the index file at the root of a patch cache.
pub const PATCH_INDEX_FILE: &str = "index.jsonl";

/// One line of the patch index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchIndexEntry {
    /// Path relative to the cache root.
    pub patch_path: String,
    pub source: ImageRecord,
    pub x: usize,
    pub y: usize,
    pub augmentation_tag: String,
}

fn relative_path(p: &PatchRecord) -> String {
    let aug = if p.is_augmented() { format!("_aug-{}", p.augmentation_tag) } else { String::new() };
    let split = match p.source.split {
        Split::Unassigned => "all",
        s => s.as_str(),
    };
    format!(
        "patches/{split}/{}/{}/{}_{}_{}{aug}.png",
        p.class().as_str(),
        p.view().as_str(),
        p.source.source_id(),
        p.origin.0,
        p.origin.1
    )
}

/// Writes raw patches as PNG files plus an index under `root`.
pub fn write_patch_cache(root: &Path, patches: &[PatchRecord]) -> Result<Vec<PatchIndexEntry>> {
    let mut entries = Vec::with_capacity(patches.len());
    for p in patches {
        let PatchPixels::Raw(px) = &p.pixels else {
            return Err(Error::Data("only raw patches can be cached".into()));
        };
        let (_, h, w) = px.dim();
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb([0, 1, 2].map(|c| px[[c, y as usize, x as usize]]))
        });
        let rel = relative_path(p);
        let path = root.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        img.save(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
        entries.push(PatchIndexEntry {
            patch_path: rel,
            source: p.source.clone(),
            x: p.origin.0,
            y: p.origin.1,
            augmentation_tag: p.augmentation_tag.clone(),
        });
    }
    let index = root.join(PATCH_INDEX_FILE);
    let file = fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    let mut out = BufWriter::new(file);
    for e in &entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").map_err(|err| Error::io(&index, err))?;
    }
    out.flush().map_err(|e| Error::io(&index, e))?;
    Ok(entries)
}

/// Loads every patch listed in the index under `root`.
pub fn read_patch_cache(root: &Path) -> Result<Vec<PatchRecord>> {
    let index: PathBuf = root.join(PATCH_INDEX_FILE);
    let file = fs::File::open(&index).map_err(|e| Error::io(&index, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&index, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: PatchIndexEntry = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: index.clone(),
            line: n + 1,
            message: e.to_string(),
        })?;
        let path = root.join(&entry.patch_path);
        let img = image::open(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let px = Array3::from_shape_fn((3, h, w), |(c, y, x)| img.get_pixel(x as u32, y as u32)[c]);
        out.push(PatchRecord {
            pixels: PatchPixels::Raw(px),
            source: entry.source,
            origin: (entry.x, entry.y),
            augmentation_tag: entry.augmentation_tag,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{StoneClass, View};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let source = ImageRecord {
            image_path: "img/WD_7.png".into(),
            stone_class: StoneClass::WD,
            view: View::Section,
            stone_id: "7".into(),
            split: Split::Train,
        };
        let px = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c * 50 + y * 4 + x) as u8);
        let patches = vec![
            PatchRecord { pixels: PatchPixels::Raw(px.clone()), source: source.clone(), origin: (0, 4), augmentation_tag: "none".into() },
            PatchRecord { pixels: PatchPixels::Raw(px), source, origin: (0, 4), augmentation_tag: "hflip".into() },
        ];
        let entries = write_patch_cache(dir.path(), &patches).unwrap();
        assert_eq!(entries[0].patch_path, "patches/train/WD/section/WD_7_0_4.png");
        assert_eq!(entries[1].patch_path, "patches/train/WD/section/WD_7_0_4_aug-hflip.png");
        assert_eq!(read_patch_cache(dir.path()).unwrap(), patches);
    }
}
