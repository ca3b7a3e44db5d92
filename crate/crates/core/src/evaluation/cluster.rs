use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Compactness and separation of labelled feature rows (Euclidean).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    /// Mean distance of each point to its class centroid.
    pub mean_intra: f64,
    /// Mean pairwise distance between class centroids.
    pub mean_inter: f64,
    /// `mean_inter / mean_intra`; `+inf` when every class is a point mass.
    #[serde(serialize_with = "ser_ratio", deserialize_with = "de_ratio")]
    pub ratio: f64,
    pub silhouette: f64,
}

fn ser_ratio<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("+inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_ratio<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum R {
        Num(f64),
        Str(String),
    }
    match R::deserialize(d)? {
        R::Num(v) => Ok(v),
        R::Str(s) if s == "+inf" => Ok(f64::INFINITY),
        R::Str(s) => Err(serde::de::Error::custom(format!("bad ratio {s:?}"))),
    }
}

fn dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn groups(labels: &[usize], n: usize) -> Result<BTreeMap<usize, Vec<usize>>> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} feature rows for {} labels", labels.len())));
    }
    let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        g.entry(l).or_default().push(i);
    }
    if g.len() < 2 {
        return Err(Error::Data("cluster statistics need at least two classes".into()));
    }
    if let Some((l, _)) = g.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::Data(format!("class {l} has fewer than two points")));
    }
    Ok(g)
}

pub fn cluster_stats(features: &Array2<f64>, labels: &[usize]) -> Result<ClusterStats> {
    let g = groups(labels, features.nrows())?;
    let centroids: Vec<Array1<f64>> = g
        .values()
        .map(|idx| features.select(Axis(0), idx).mean_axis(Axis(0)).expect("non-empty"))
        .collect();
    let mut intra = 0.0;
    for (c, idx) in g.values().enumerate() {
        for &i in idx {
            intra += dist(features.row(i), centroids[c].view());
        }
    }
    let mean_intra = intra / features.nrows() as f64;
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            inter += dist(centroids[a].view(), centroids[b].view());
            pairs += 1;
        }
    }
    let mean_inter = inter / pairs as f64;
    let ratio = if mean_intra == 0.0 { f64::INFINITY } else { mean_inter / mean_intra };
    Ok(ClusterStats { mean_intra, mean_inter, ratio, silhouette: silhouette(features, labels)? })
}

/// Mean silhouette coefficient over all points.
pub fn silhouette(features: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let g = groups(labels, features.nrows())?;
    let n = features.nrows();
    let classes: Vec<usize> = g.keys().copied().collect();
    let slot: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(s, &c)| (c, s)).collect();
    let mut total = 0.0;
    let mut sums = vec![0.0; classes.len()];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[slot[&labels[j]]] += dist(features.row(i), features.row(j));
            }
        }
        let own = slot[&labels[i]];
        let a = sums[own] / (g[&labels[i]].len() - 1) as f64;
        let b = classes
            .iter()
            .enumerate()
            .filter(|&(s, _)| s != own)
            .map(|(s, c)| sums[s] / g[c].len() as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, d: usize, gap: f64, sigma: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let labels: Vec<usize> = (0..2 * n).map(|i| i / n).collect();
        let x = Array2::from_shape_fn((2 * n, d), |(i, j)| {
            let centre = if j == 0 && labels[i] == 1 { gap } else { 0.0 };
            centre + noise.sample(&mut rng)
        });
        (x, labels)
    }

    #[test]
    fn point_masses_give_infinite_ratio() {
        let x = ndarray::array![[0.0], [0.0], [1.0], [1.0]];
        let s = cluster_stats(&x, &[0, 0, 1, 1]).unwrap();
        assert_eq!(s.mean_intra, 0.0);
        assert_eq!(s.mean_inter, 1.0);
        assert!(s.ratio.is_infinite());
        assert_eq!(s.silhouette, 1.0);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"ratio\":\"+inf\""), "{json}");
        assert_eq!(serde_json::from_str::<ClusterStats>(&json).unwrap(), s);
    }

    #[test]
    fn separated_blobs() {
        // In two dimensions the mean distance to the centroid is σ·√(π/2) ≈ 0.125, so the ratio is near 80.
        let (x, l) = blobs(100, 2, 10.0, 0.1, 3);
        let s = cluster_stats(&x, &l).unwrap();
        assert!(s.ratio > 50.0 && s.ratio < 150.0, "{s:?}");
        assert!(s.silhouette > 0.9, "{s:?}");
    }

    #[test]
    fn shuffled_labels_have_no_structure() {
        let (x, mut l) = blobs(150, 4, 10.0, 0.1, 5);
        l.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let s = silhouette(&x, &l).unwrap();
        assert!(s.abs() < 0.1, "{s}");
    }

    #[test]
    fn silhouette_hand_case() {
        // Points 0, 1 | 4, 6 on a line.
        let x = ndarray::array![[0.0], [1.0], [4.0], [6.0]];
        let s = silhouette(&x, &[0, 0, 1, 1]).unwrap();
        let expect = [(5.0 - 1.0) / 5.0, (4.0 - 1.0) / 4.0, (3.5 - 2.0) / 3.5, (5.5 - 2.0) / 5.5];
        assert!((s - expect.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let x = ndarray::array![[0.0], [1.0], [2.0]];
        assert!(cluster_stats(&x, &[0, 0, 0]).is_err());
        assert!(cluster_stats(&x, &[0, 0, 1]).is_err());
        assert!(cluster_stats(&x, &[0, 1]).is_err());
    }
}
