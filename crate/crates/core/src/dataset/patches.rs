use image::RgbImage;
use ndarray::Array3;

use super::{ImageRecord, PatchPixels, PatchRecord};
use crate::error::{Error, Result};

/// Divisor floor for zero-variance channels.
pub const WHITEN_EPS: f64 = 1e-8;

/// Patch offsets along one axis of length `len`.
///
/// Places the largest number of patches whose pairwise overlap stays within
/// `max_overlap`, anchored at 0 and flush with the far border, spaced as evenly
/// as integer offsets allow. Regions that cannot be covered within the bound
/// are left out.
pub fn patch_offsets(len: usize, patch: usize, max_overlap: usize) -> Result<Vec<usize>> {
    if patch == 0 || max_overlap >= patch {
        return Err(Error::InvalidConfig(format!(
            "max overlap {max_overlap} must be smaller than patch size {patch}"
        )));
    }
    if len < patch {
        return Err(Error::Data(format!("image side {len} is smaller than patch size {patch}")));
    }
    let stride = patch - max_overlap;
    let count = (len - max_overlap) / stride;
    if count == 1 {
        return Ok(vec![0]);
    }
    let span = len - patch;
    Ok((0..count).map(|i| i * span / (count - 1)).collect())
}

/// Cuts a deterministic grid of square patches out of an RGB image.
pub fn extract_patches(
    image: &RgbImage,
    source: &ImageRecord,
    patch_size: usize,
    max_overlap: usize,
) -> Result<Vec<PatchRecord>> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w < patch_size || h < patch_size {
        return Err(Error::Data(format!(
            "{}: image {w}×{h} is smaller than patch size {patch_size}",
            source.image_path
        )));
    }
    let xs = patch_offsets(w, patch_size, max_overlap)?;
    let ys = patch_offsets(h, patch_size, max_overlap)?;
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let px = Array3::from_shape_fn((3, patch_size, patch_size), |(c, i, j)| {
                image.get_pixel((x + j) as u32, (y + i) as u32)[c]
            });
            out.push(PatchRecord {
                pixels: PatchPixels::Raw(px),
                source: source.clone(),
                origin: (x, y),
                augmentation_tag: "none".into(),
            });
        }
    }
    Ok(out)
}

/// Per-channel standardization to zero mean and unit variance.
pub fn whiten(patch: &PatchRecord) -> PatchRecord {
    let px = match &patch.pixels {
        PatchPixels::Raw(a) => a.mapv(f64::from),
        PatchPixels::Whitened(a) => a.mapv(f64::from),
    };
    let mut out = Array3::<f32>::zeros(px.raw_dim());
    for (c, plane) in px.outer_iter().enumerate() {
        let n = plane.len() as f64;
        let mean = plane.sum() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = 1.0 / var.sqrt().max(WHITEN_EPS);
        out.index_axis_mut(ndarray::Axis(0), c)
            .zip_mut_with(&plane, |o, &v| *o = ((v - mean) * scale) as f32);
    }
    PatchRecord {
        pixels: PatchPixels::Whitened(out),
        source: patch.source.clone(),
        origin: patch.origin,
        augmentation_tag: patch.augmentation_tag.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Split, StoneClass, View};

    fn record() -> ImageRecord {
        ImageRecord {
            image_path: "img.png".into(),
            stone_class: StoneClass::WW,
            view: View::Surface,
            stone_id: "s".into(),
            split: Split::Unassigned,
        }
    }

    /// All admissible offset sets (pairwise spacing ≥ patch − overlap); returns
    /// the largest count and, among sets of that count, the best minimum spacing.
    fn oracle(len: usize, patch: usize, overlap: usize) -> (usize, usize) {
        fn rec(pos: usize, last: Option<usize>, max_pos: usize, step: usize, chosen: &mut Vec<usize>, best: &mut (usize, usize)) {
            if pos > max_pos {
                if chosen.is_empty() {
                    return;
                }
                let min_gap = chosen.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(usize::MAX);
                if chosen.len() > best.0 || (chosen.len() == best.0 && min_gap > best.1) {
                    *best = (chosen.len(), min_gap);
                }
                return;
            }
            if last.map_or(true, |l| pos - l >= step) {
                chosen.push(pos);
                rec(pos + 1, Some(pos), max_pos, step, chosen, best);
                chosen.pop();
            }
            rec(pos + 1, last, max_pos, step, chosen, best);
        }
        let mut best = (0, 0);
        rec(0, None, len - patch, patch - overlap, &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn offsets_match_enumeration_oracle() {
        for len in 8..=34 {
            let got = patch_offsets(len, 8, 2).unwrap();
            let (count, min_gap) = oracle(len, 8, 2);
            assert_eq!(got.len(), count, "len {len}");
            assert_eq!(got[0], 0);
            if count > 1 {
                assert_eq!(*got.last().unwrap(), len - 8);
            }
            let gap = got.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(usize::MAX);
            assert_eq!(gap, min_gap, "len {len}");
        }
    }

    #[test]
    fn documented_examples() {
        assert_eq!(patch_offsets(512, 256, 20).unwrap(), vec![0, 256]);
        assert_eq!(oracle(512, 256, 20), (2, 256));
        assert_eq!(patch_offsets(256, 256, 20).unwrap(), vec![0]);
        assert_eq!(patch_offsets(492, 256, 20).unwrap(), vec![0, 236]);
        assert!(patch_offsets(200, 256, 20).is_err());
        assert!(patch_offsets(300, 256, 256).is_err());
    }

    #[test]
    fn extract_grid_and_bounds() {
        let img = RgbImage::from_fn(492, 256, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        let p = extract_patches(&img, &record(), 256, 20).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].origin, (0, 0));
        assert_eq!(p[1].origin, (236, 0));
        let PatchPixels::Raw(px) = &p[1].pixels else { panic!() };
        assert_eq!(px[[0, 0, 0]], 236);
        assert_eq!(px[[1, 5, 0]], 5);
        let small = RgbImage::new(100, 300);
        assert!(extract_patches(&small, &record(), 256, 20).is_err());
    }

    fn raw(f: impl Fn(usize, usize, usize) -> u8) -> PatchRecord {
        PatchRecord {
            pixels: PatchPixels::Raw(Array3::from_shape_fn((3, 4, 4), |(c, i, j)| f(c, i, j))),
            source: record(),
            origin: (0, 0),
            augmentation_tag: "none".into(),
        }
    }

    #[test]
    fn whiten_constant_patch_is_zero() {
        let w = whiten(&raw(|_, _, _| 127));
        let PatchPixels::Whitened(px) = w.pixels else { panic!() };
        assert!(px.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whiten_half_zero_half_two() {
        let w = whiten(&raw(|_, i, _| if i < 2 { 0 } else { 2 }));
        let PatchPixels::Whitened(px) = &w.pixels else { panic!() };
        for ((_, i, _), &v) in px.indexed_iter() {
            let want = if i < 2 { -1.0 } else { 1.0 };
            assert!((v - want).abs() < 1e-6);
        }
        let again = whiten(&w);
        let PatchPixels::Whitened(px2) = &again.pixels else { panic!() };
        for (a, b) in px.iter().zip(px2.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
