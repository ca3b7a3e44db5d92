use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EmbeddingSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UmapConfig {
    /// Neighborhood size, counting the point itself.
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub n_epochs: usize,
    pub negative_sample_rate: usize,
    pub learning_rate: f64,
}

impl Default for UmapConfig {
    fn default() -> Self {
        UmapConfig { n_neighbors: 15, min_dist: 0.1, spread: 1.0, n_epochs: 200, negative_sample_rate: 5, learning_rate: 1.0 }
    }
}

/// Fits `1 / (1 + a·x^{2b})` to the offset-exponential target curve by Levenberg–Marquardt.
pub fn fit_ab(spread: f64, min_dist: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / spread).exp() }).collect();
    let sse = |a: f64, b: f64| {
        xs.iter().zip(&ys).map(|(&x, &y)| (1.0 / (1.0 + a * x.powf(2.0 * b)) - y).powi(2)).sum::<f64>()
    };
    let (mut a, mut b, mut lambda) = (1.0, 1.0, 1e-3);
    let mut err = sse(a, b);
    for _ in 0..500 {
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let den = (1.0 + a * p).powi(2);
            let j = [-p / den, -a * p * 2.0 * x.ln() / den];
            let r = 1.0 / (1.0 + a * p) - y;
            for u in 0..2 {
                jtr[u] += j[u] * r;
                for v in 0..2 {
                    jtj[u][v] += j[u] * j[v];
                }
            }
        }
        let m = [[jtj[0][0] * (1.0 + lambda), jtj[0][1]], [jtj[1][0], jtj[1][1] * (1.0 + lambda)]];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let da = -(m[1][1] * jtr[0] - m[0][1] * jtr[1]) / det;
        let db = -(m[0][0] * jtr[1] - m[1][0] * jtr[0]) / det;
        let (na, nb) = (a + da, b + db);
        let ne = if na > 0.0 && nb > 0.0 { sse(na, nb) } else { f64::INFINITY };
        if ne < err {
            let done = (err - ne) < 1e-15;
            (a, b, err, lambda) = (na, nb, ne, lambda * 0.3);
            if done {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    (a, b)
}

fn sq_dist(x: &Array2<f64>, i: usize, j: usize) -> f64 {
    x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Symmetric fuzzy neighbor graph as `(i, j, weight)` with `i < j`.
fn fuzzy_graph(x: &Array2<f64>, k: usize) -> Vec<(usize, usize, f64)> {
    let n = x.nrows();
    let target = (k as f64).log2();
    let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mean_all = {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += sq_dist(x, i, j).sqrt();
            }
        }
        s / (n * n) as f64
    };
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (sq_dist(x, i, j).sqrt(), j)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(k - 1);
        let rho = d.iter().map(|p| p.0).find(|&v| v > 0.0).unwrap_or(0.0);
        let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
        for _ in 0..64 {
            let psum: f64 = d.iter().map(|&(v, _)| (-(v - rho).max(0.0) / mid).exp()).sum();
            if (psum - target).abs() < 1e-5 {
                break;
            }
            if psum > target {
                hi = mid;
                mid = (lo + hi) / 2.0;
            } else {
                lo = mid;
                mid = if hi.is_infinite() { mid * 2.0 } else { (lo + hi) / 2.0 };
            }
        }
        let mean_i = d.iter().map(|p| p.0).sum::<f64>() / d.len() as f64;
        let floor = 1e-3 * if rho > 0.0 { mean_i } else { mean_all };
        let sigma = mid.max(floor);
        for &(v, j) in &d {
            directed.insert((i, j), (-(v - rho).max(0.0) / sigma).exp());
        }
    }
    let mut undirected: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&(i, j), &w) in &directed {
        let (a, b) = (i.min(j), i.max(j));
        if undirected.contains_key(&(a, b)) {
            continue;
        }
        let back = directed.get(&(j, i)).copied().unwrap_or(0.0);
        undirected.insert((a, b), w + back - w * back);
    }
    undirected.into_iter().map(|((i, j), w)| (i, j, w)).collect()
}

fn clip(v: f64) -> f64 {
    v.clamp(-4.0, 4.0)
}

/// Seeded UMAP embedding of the rows of `x` into `dims` dimensions.
pub fn umap(x: &Array2<f64>, dims: usize, config: &UmapConfig, seed: u64) -> Result<Array2<f64>> {
    let n = x.nrows();
    if config.n_neighbors < 2 || n < config.n_neighbors {
        return Err(Error::Data(format!(
            "projection needs at least {} points, got {n}",
            config.n_neighbors.max(2)
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature values".into()));
    }
    let (a, b) = fit_ab(config.spread, config.min_dist);
    let mut edges = fuzzy_graph(x, config.n_neighbors);
    let max_w = edges.iter().map(|e| e.2).fold(0.0, f64::max);
    let epochs = config.n_epochs as f64;
    edges.retain(|e| e.2 >= max_w / epochs);
    let per_sample: Vec<f64> = edges.iter().map(|e| max_w / e.2).collect();
    let rate = config.negative_sample_rate.max(1) as f64;
    let per_negative: Vec<f64> = per_sample.iter().map(|e| e / rate).collect();
    let mut next_sample = per_sample.clone();
    let mut next_negative = per_negative.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Array2::from_shape_fn((n, dims), |_| rng.gen_range(-10.0..10.0));
    let mut yi = vec![0.0; dims];
    for epoch in 0..config.n_epochs {
        let e = epoch as f64;
        let alpha = config.learning_rate * (1.0 - e / epochs);
        for (k, &(i, j, _)) in edges.iter().enumerate() {
            if next_sample[k] > e {
                continue;
            }
            let d2 = sq_dist(&y, i, j);
            let coeff = if d2 > 0.0 { -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0) } else { 0.0 };
            for d in 0..dims {
                let g = clip(coeff * (y[[i, d]] - y[[j, d]])) * alpha;
                y[[i, d]] += g;
                y[[j, d]] -= g;
            }
            next_sample[k] += per_sample[k];
            let negatives = ((e - next_negative[k]) / per_negative[k]).floor().max(0.0) as usize;
            for _ in 0..negatives {
                let m = rng.gen_range(0..n);
                if m == i {
                    continue;
                }
                let d2 = sq_dist(&y, i, m);
                let coeff = if d2 > 0.0 { 2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0)) } else { 0.0 };
                for (d, slot) in yi.iter_mut().enumerate() {
                    *slot = if coeff > 0.0 { clip(coeff * (y[[i, d]] - y[[m, d]])) } else { 4.0 };
                }
                for (d, g) in yi.iter().enumerate() {
                    y[[i, d]] += g * alpha;
                }
            }
            next_negative[k] += negatives as f64 * per_negative[k];
        }
    }
    Ok(y)
}

/// Adds 3-D UMAP coordinates (default settings) to an embedding set.
pub fn project_3d(set: &EmbeddingSet, seed: u64) -> Result<EmbeddingSet> {
    let coords = umap(&set.features, 3, &UmapConfig::default(), seed)?;
    Ok(EmbeddingSet { coords3d: Some(coords), ..set.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::silhouette;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn curve_fit_matches_reference_constants() {
        let (a, b) = fit_ab(1.0, 0.1);
        assert!((a - 1.577).abs() < 0.02 && (b - 0.895).abs() < 0.01, "a={a} b={b}");
    }

    fn blobs() -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let labels: Vec<usize> = (0..80).map(|i| i / 40).collect();
        let x = Array2::from_shape_fn((80, 32), |(i, j)| {
            noise.sample(&mut rng) + if labels[i] == 1 && j < 4 { 8.0 } else { 0.0 }
        });
        (x, labels)
    }

    #[test]
    fn separated_blobs_stay_separated() {
        let (x, labels) = blobs();
        let set = EmbeddingSet { features: x, labels: labels.clone(), coords3d: None, source_model: "blobs".into() };
        let p = project_3d(&set, 7).unwrap();
        let c = p.coords3d.as_ref().unwrap();
        assert_eq!(c.dim(), (80, 3));
        assert!(c.iter().all(|v| v.is_finite()));
        assert!(silhouette(c, &labels).unwrap() > 0.5);
        let again = project_3d(&set, 7).unwrap();
        assert_eq!(again.coords3d, p.coords3d);
    }

    #[test]
    fn too_few_points() {
        let x = Array2::zeros((5, 3));
        assert!(umap(&x, 3, &UmapConfig::default(), 0).is_err());
    }
}
