use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{augment_with, derive_seed, Augmentation, PatchRecord, StoneClass, View};
use crate::error::{Error, Result};

/// Brings every `(class, view)` group to exactly `budget` patches.
///
/// Larger groups are subsampled without replacement (kept patches stay in
/// input order); smaller groups keep all originals and are topped up with
/// augmented copies drawn round-robin from the originals, never with the
/// identity transform. Every view present in the input must cover all six
/// classes. Output is grouped by `(class, view)`.
pub fn balance(patches: Vec<PatchRecord>, budget: usize, seed: u64) -> Result<Vec<PatchRecord>> {
    if budget == 0 {
        return Err(Error::InvalidConfig("patch budget must be positive".into()));
    }
    let views: BTreeSet<View> = patches.iter().map(|p| p.view()).collect();
    let mut groups: BTreeMap<(StoneClass, View), Vec<PatchRecord>> = BTreeMap::new();
    for v in &views {
        for c in StoneClass::ALL {
            groups.insert((c, *v), Vec::new());
        }
    }
    for p in patches {
        groups.get_mut(&(p.class(), p.view())).expect("registered").push(p);
    }
    let mut out = Vec::with_capacity(groups.len() * budget);
    for ((class, view), group) in groups {
        if group.is_empty() {
            return Err(Error::Data(format!("no source patches for class {class} in view {view}")));
        }
        let group_seed = derive_seed(seed, &[class.index() as u64, view as u64]);
        let n = group.len();
        if n >= budget {
            let mut rng = ChaCha8Rng::seed_from_u64(group_seed);
            let mut keep = sample(&mut rng, n, budget).into_vec();
            keep.sort_unstable();
            let mut group: Vec<Option<PatchRecord>> = group.into_iter().map(Some).collect();
            out.extend(keep.into_iter().map(|i| group[i].take().expect("unique index")));
        } else {
            let copies: Vec<PatchRecord> = (0..budget - n)
                .map(|k| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(group_seed, &[k as u64]));
                    augment_with(&group[k % n], Augmentation::sample_non_identity(&mut rng))
                })
                .collect();
            out.extend(group);
            out.extend(copies);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageRecord, PatchPixels, Split};
    use ndarray::Array3;

    fn patches(class: StoneClass, view: View, n: usize) -> Vec<PatchRecord> {
        (0..n)
            .map(|i| PatchRecord {
                pixels: PatchPixels::Raw(Array3::from_shape_fn((3, 4, 4), |(c, a, b)| (i + c + a * 3 + b) as u8)),
                source: ImageRecord {
                    image_path: format!("{class}-{view}-{}.png", i / 4),
                    stone_class: class,
                    view,
                    stone_id: format!("{}", i / 4),
                    split: Split::Unassigned,
                },
                origin: (i % 4, 0),
                augmentation_tag: "none".into(),
            })
            .collect()
    }

    fn group_counts(ps: &[PatchRecord]) -> BTreeMap<(StoneClass, View), (usize, usize)> {
        let mut m = BTreeMap::new();
        for p in ps {
            let e = m.entry((p.class(), p.view())).or_insert((0, 0));
            e.0 += 1;
            if p.is_augmented() {
                e.1 += 1;
            }
        }
        m
    }

    #[test]
    fn mixed_budget_gives_twelve_thousand() {
        let mut all = Vec::new();
        for (k, c) in StoneClass::ALL.iter().enumerate() {
            all.extend(patches(*c, View::Surface, 300 + 200 * k));
            all.extend(patches(*c, View::Section, 1500 - 150 * k));
        }
        let out = balance(all, 1000, 7).unwrap();
        assert_eq!(out.len(), 12_000);
        for ((c, v), (n, aug)) in group_counts(&out) {
            assert_eq!(n, 1000);
            let originals = match v {
                View::Surface => 300 + 200 * c.index(),
                View::Section => 1500 - 150 * c.index(),
            };
            assert_eq!(aug, 1000 - originals.min(1000));
        }
    }

    #[test]
    fn group_at_budget_is_unchanged() {
        let mut all = Vec::new();
        for c in StoneClass::ALL {
            all.extend(patches(c, View::Surface, 10));
        }
        let out = balance(all.clone(), 10, 3).unwrap();
        assert_eq!(out, all);
    }

    #[test]
    fn deficit_is_topped_with_augmented_copies() {
        let mut all = Vec::new();
        for c in StoneClass::ALL {
            all.extend(patches(c, View::Section, 250));
        }
        let out = balance(all, 1000, 11).unwrap();
        let wd: Vec<_> = out.iter().filter(|p| p.class() == StoneClass::WD).collect();
        assert_eq!(wd.len(), 1000);
        assert_eq!(wd.iter().filter(|p| !p.is_augmented()).count(), 250);
        assert_eq!(wd.iter().filter(|p| p.is_augmented()).count(), 750);
        assert!(wd.iter().all(|p| p.augmentation_tag != "none" || p.origin.1 == 0));
    }

    #[test]
    fn missing_class_is_an_error() {
        let all = patches(StoneClass::WW, View::Surface, 5);
        assert!(matches!(balance(all, 5, 0), Err(Error::Data(_))));
    }

    #[test]
    fn deterministic() {
        let mut all = Vec::new();
        for c in StoneClass::ALL {
            all.extend(patches(c, View::Surface, 37));
        }
        assert_eq!(balance(all.clone(), 20, 5).unwrap(), balance(all.clone(), 20, 5).unwrap());
        assert_eq!(balance(all.clone(), 50, 5).unwrap(), balance(all, 50, 5).unwrap());
    }
}
