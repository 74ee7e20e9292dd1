use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::Representation;
use crate::error::{Error, Result};
use crate::geogrid::Tile;

const MIN_POINTS: usize = 5;
const MIN_GAIN: f64 = 0.01;
const P_FLOOR: f64 = 1e-12;

/// Exact t-SNE settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    /// Upper bound; lowered to `(n − 1) / 3` for small inputs.
    pub perplexity: f64,
    pub n_iter: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            n_iter: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub tile_id: String,
    pub x: f64,
    pub y: f64,
}

fn squared_distances(x: &[&[f64]]) -> Array2<f64> {
    let n = x.len();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x[i].iter().zip(x[j]).map(|(a, b)| (a - b).powi(2)).sum();
            d[[i, j]] = s;
            d[[j, i]] = s;
        }
    }
    d
}

/// Conditional affinities with per-point Gaussian precision found by bisection
/// so that each row's entropy matches `ln(perplexity)`.
fn conditional_affinities(d: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d.nrows();
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        // Shift by the nearest neighbour distance so exp() cannot underflow to all zeros.
        let dmin = (0..n)
            .filter(|&j| j != i)
            .map(|j| d[[i, j]])
            .fold(f64::INFINITY, f64::min);
        let mut row = vec![0.0; n];
        for _ in 0..200 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(d[[i, j]] - dmin) * beta).exp() };
                sum += row[j];
                weighted += row[j] * (d[[i, j]] - dmin);
            }
            let entropy = sum.ln() + beta * weighted / sum;
            let diff = entropy - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            p[[i, j]] = row[j] / sum;
        }
    }
    p
}

/// Exact t-SNE projection to two dimensions, in input order.
pub fn project_embeddings(reps: &[Representation], cfg: &TsneConfig) -> Result<Vec<EmbeddingPoint>> {
    let n = reps.len();
    if n < MIN_POINTS {
        return Err(Error::InvalidArgument(format!(
            "t-SNE needs at least {MIN_POINTS} representations, got {n}"
        )));
    }
    let mut seen = HashSet::new();
    for r in reps {
        if !seen.insert(r.tile_id.as_str()) {
            return Err(Error::DuplicateTile(r.tile_id.clone()));
        }
    }
    let dim = reps[0].vector.len();
    if let Some(r) = reps.iter().find(|r| r.vector.len() != dim) {
        return Err(Error::Shape(format!(
            "representation `{}` has {} dimensions, expected {dim}",
            r.tile_id,
            r.vector.len()
        )));
    }
    if reps.iter().any(|r| r.vector.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("representations must be finite".into()));
    }
    if !(cfg.perplexity > 0.0) || !(cfg.early_exaggeration >= 1.0) {
        return Err(Error::InvalidArgument(
            "perplexity must be positive and exaggeration at least 1".into(),
        ));
    }

    let x: Vec<&[f64]> = reps.iter().map(|r| r.vector.as_slice()).collect();
    let d = squared_distances(&x);
    let perplexity = cfg.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let cond = conditional_affinities(&d, perplexity);
    let p = ((&cond + &cond.t()) / (2.0 * n as f64)).mapv(|v| v.max(P_FLOOR));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut rng));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let lr = (n as f64 / cfg.early_exaggeration / 4.0).max(50.0);

    let mut q_num = Array2::<f64>::zeros((n, n));
    for iter in 0..cfg.n_iter {
        let exaggerate = iter < cfg.exaggeration_iters;
        let momentum = if exaggerate { 0.5 } else { 0.8 };
        let scale = if exaggerate { cfg.early_exaggeration } else { 1.0 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dy0 = y[[i, 0]] - y[[j, 0]];
                let dy1 = y[[i, 1]] - y[[j, 1]];
                let q = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                q_num[[i, j]] = q;
                q_num[[j, i]] = q;
                z += 2.0 * q;
            }
        }
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = q_num[[i, j]];
                let coeff = 4.0 * (scale * p[[i, j]] - q / z) * q;
                grad[[i, 0]] += coeff * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += coeff * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        for ((g, u), gain) in grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) { *gain + 0.2 } else { (*gain * 0.8).max(MIN_GAIN) };
            *u = momentum * *u - lr * *gain * g;
        }
        y += &update;
        let mean = y.mean_axis(ndarray::Axis(0)).expect("non-empty");
        y -= &mean;
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss("t-SNE optimisation diverged".into()));
    }
    Ok(reps
        .iter()
        .enumerate()
        .map(|(i, r)| EmbeddingPoint {
            tile_id: r.tile_id.clone(),
            x: y[[i, 0]],
            y: y[[i, 1]],
        })
        .collect())
}

#[derive(Serialize)]
struct EmbeddingRow<'a> {
    tile_id: &'a str,
    x: f64,
    y: f64,
    population: Option<f64>,
    region_key: Option<&'a str>,
}

/// CSV `tile_id,x,y,population,region_key`, with the last two taken from
/// `tiles` when the tile is known there.
pub fn write_embedding_csv(path: &Path, points: &[EmbeddingPoint], tiles: &[Tile]) -> Result<()> {
    let by_id: BTreeMap<&str, &Tile> = tiles.iter().map(|t| (t.tile_id.as_str(), t)).collect();
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        let tile = by_id.get(p.tile_id.as_str());
        w.serialize(EmbeddingRow {
            tile_id: &p.tile_id,
            x: p.x,
            y: p.y,
            population: tile.and_then(|t| t.population),
            region_key: tile.map(|t| t.region_key.as_str()),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rep(id: &str, v: Vec<f64>) -> Representation {
        Representation {
            tile_id: id.into(),
            vector: v,
            encoder_fingerprint: "f".into(),
        }
    }

    fn blobs(seed: u64) -> Vec<Representation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..40)
            .map(|i| {
                let centre = if i < 20 { 0.0 } else { 20.0 };
                rep(&format!("t{i}"), (0..10).map(|_| centre + rng.random_range(-1.0..1.0)).collect())
            })
            .collect()
    }

    #[test]
    fn conditional_rows_hit_target_perplexity() {
        let reps = blobs(3);
        let x: Vec<&[f64]> = reps.iter().map(|r| r.vector.as_slice()).collect();
        let p = conditional_affinities(&squared_distances(&x), 10.0);
        for row in p.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            let h: f64 = row.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
            assert!((h.exp() - 10.0).abs() < 1e-2, "perplexity {}", h.exp());
        }
    }

    #[test]
    fn separated_blobs_stay_separated() {
        let pts = project_embeddings(&blobs(1), &TsneConfig::default()).unwrap();
        let centroid = |s: &[EmbeddingPoint]| {
            let n = s.len() as f64;
            (s.iter().map(|p| p.x).sum::<f64>() / n, s.iter().map(|p| p.y).sum::<f64>() / n)
        };
        let diameter = |s: &[EmbeddingPoint]| {
            let mut m = 0.0f64;
            for a in s {
                for b in s {
                    m = m.max(((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt());
                }
            }
            m
        };
        let (a, b) = pts.split_at(20);
        let (ca, cb) = (centroid(a), centroid(b));
        let gap = ((ca.0 - cb.0).powi(2) + (ca.1 - cb.1).powi(2)).sqrt();
        assert!(gap > diameter(a) && gap > diameter(b));
    }

    #[test]
    fn seeded_and_duplicates_coincide() {
        let mut reps = blobs(2);
        let dup = reps[3].vector.clone();
        reps.push(rep("dup", dup));
        let cfg = TsneConfig { seed: 9, ..TsneConfig::default() };
        let a = project_embeddings(&reps, &cfg).unwrap();
        let b = project_embeddings(&reps, &cfg).unwrap();
        assert_eq!(a, b);
        let xs: Vec<f64> = a.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = a.iter().map(|p| p.y).collect();
        let range = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        let r = range(&xs).max(range(&ys));
        let d = ((a[3].x - a[40].x).powi(2) + (a[3].y - a[40].y).powi(2)).sqrt();
        assert!(d < 1e-3 * r, "distance {d} vs range {r}");
    }

    #[test]
    fn argument_errors() {
        let few: Vec<_> = (0..4).map(|i| rep(&format!("t{i}"), vec![i as f64])).collect();
        assert!(project_embeddings(&few, &TsneConfig::default()).is_err());
        let mut dup: Vec<_> = (0..6).map(|i| rep(&format!("t{i}"), vec![i as f64])).collect();
        dup[5].tile_id = "t0".into();
        assert!(matches!(project_embeddings(&dup, &TsneConfig::default()), Err(Error::DuplicateTile(_))));
    }
}
