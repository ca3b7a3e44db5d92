use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, PatchRecord, Split, StoneClass, View};
use crate::error::{Error, Result};

/// Assigns whole source images to train or test, per `(class, view)` group.
///
/// Images are shuffled with the seed and added to the training side while the
/// running patch count stays closest to `train_fraction` of the group. Each
/// group needs at least two images so that both sides are populated. The
/// returned patches carry the assigned split in `source.split`.
pub fn split(
    patches: Vec<PatchRecord>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<PatchRecord>, Vec<PatchRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    // (class, view) -> image path -> patch count, in first-seen order
    let mut groups: BTreeMap<(StoneClass, View), Vec<(String, usize)>> = BTreeMap::new();
    let mut position: HashMap<String, usize> = HashMap::new();
    for p in &patches {
        let g = groups.entry((p.class(), p.view())).or_default();
        match position.get(&p.source.image_path) {
            Some(&i) => g[i].1 += 1,
            None => {
                position.insert(p.source.image_path.clone(), g.len());
                g.push((p.source.image_path.clone(), 1));
            }
        }
    }
    let mut assignment: HashMap<String, Split> = HashMap::new();
    for ((class, view), mut images) in groups {
        if images.len() < 2 {
            return Err(Error::Data(format!(
                "class {class} view {view} has {} source image(s); both splits need at least one",
                images.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[class.index() as u64, view as u64]));
        images.shuffle(&mut rng);
        let total: usize = images.iter().map(|(_, n)| n).sum();
        let target = train_fraction * total as f64;
        let mut train_count = 0usize;
        let mut sides = Vec::with_capacity(images.len());
        for (_, n) in &images {
            let with = (train_count + n) as f64 - target;
            let without = train_count as f64 - target;
            if with.abs() <= without.abs() {
                train_count += n;
                sides.push(Split::Train);
            } else {
                sides.push(Split::Test);
            }
        }
        if !sides.contains(&Split::Test) {
            *sides.last_mut().expect("non-empty") = Split::Test;
        }
        if !sides.contains(&Split::Train) {
            sides[0] = Split::Train;
        }
        for ((path, _), side) in images.into_iter().zip(sides) {
            assignment.insert(path, side);
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut p in patches {
        let side = assignment[&p.source.image_path];
        p.source.split = side;
        match side {
            Split::Train => train.push(p),
            _ => test.push(p),
        }
    }
    Ok((train, test))
}
