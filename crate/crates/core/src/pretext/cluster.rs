use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::network::{accumulate, to_channel_major};
use crate::encoder::optim::{Adam, StageOptimizers};
use crate::encoder::{extract, Encoder};
use crate::error::{Error, Result};
use crate::imagery::Chip;

/// k-means state carried between DeepCluster epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub k: usize,
    pub centroids: Array2<f64>,
    pub assignments: BTreeMap<String, usize>,
    pub iteration: usize,
    /// Within-cluster sum of squares after every k-means iteration of the
    /// latest epoch.
    pub wcss_history: Vec<f64>,
}

impl ClusterState {
    /// No centroids yet; the first epoch seeds them with k-means++.
    pub fn new(k: usize) -> Self {
        ClusterState {
            k,
            centroids: Array2::zeros((0, 0)),
            assignments: BTreeMap::new(),
            iteration: 0,
            wcss_history: Vec::new(),
        }
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in self.assignments.values() {
            sizes[a] += 1;
        }
        sizes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    pub wcss_history: Vec<f64>,
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: ndarray::ArrayView1<'_, f64>, centroids: &Array2<f64>) -> (usize, f64) {
    centroids
        .outer_iter()
        .enumerate()
        .map(|(j, c)| (j, sq_dist(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// k-means++ seeding.
pub fn kmeans_pp<R: Rng + ?Sized>(points: ArrayView2<'_, f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = points.outer_iter().map(|p| sq_dist(p, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

/// Lloyd iterations from `init` until assignments stop changing or
/// `max_iter` is reached. An emptied cluster is re-seeded at the point
/// farthest from its current centroid.
pub fn kmeans(points: ArrayView2<'_, f64>, init: Array2<f64>, max_iter: usize) -> KMeans {
    let k = init.nrows();
    let mut centroids = init;
    let mut labels = vec![usize::MAX; points.nrows()];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut dist = vec![0.0; points.nrows()];
        let mut changed = false;
        for (i, p) in points.outer_iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            changed |= labels[i] != j;
            labels[i] = j;
            dist[i] = d;
        }
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        for (i, p) in points.outer_iter().enumerate() {
            counts[labels[i]] += 1;
            sums.row_mut(labels[i]).scaled_add(1.0, &p);
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.nrows())
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    let old = labels[i];
                    counts[old] -= 1;
                    sums.row_mut(old).scaled_add(-1.0, &points.row(i));
                    labels[i] = j;
                    dist[i] = 0.0;
                    counts[j] = 1;
                    sums.row_mut(j).assign(&points.row(i));
                    changed = true;
                }
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let mean = &sums.row(j) / counts[j] as f64;
                centroids.row_mut(j).assign(&mean);
            }
        }
        let wcss: f64 = points
            .outer_iter()
            .zip(&labels)
            .map(|(p, &l)| sq_dist(p, centroids.row(l)))
            .sum();
        history.push(wcss);
        if !changed {
            break;
        }
    }
    KMeans {
        centroids,
        labels,
        wcss_history: history,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeepClusterConfig {
    pub k: usize,
    pub batch_size: usize,
    /// Learning rate for the encoder stages and the classifier; 0 freezes both.
    pub lr: f64,
    pub max_kmeans_iter: usize,
}

impl Default for DeepClusterConfig {
    fn default() -> Self {
        DeepClusterConfig {
            k: 8,
            batch_size: 16,
            lr: 1e-3,
            max_kmeans_iter: 100,
        }
    }
}

/// Softmax cross-entropy of `logits` against `label` and the gradient
/// with respect to the logits.
fn cross_entropy(logits: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|v| (v - m).exp());
    let z = exp.sum();
    let p = exp / z;
    let loss = -(p[label].max(f64::MIN_POSITIVE)).ln();
    let mut grad = p;
    grad[label] -= 1.0;
    (loss, grad)
}

#[derive(Clone, Debug)]
pub struct DeepClusterEpoch {
    pub encoder: Encoder,
    pub state: ClusterState,
    /// Mean cross-entropy over the pseudo-labelled batches.
    pub loss: f64,
}

/// Extracts representations, clusters them (warm-started from the previous
/// centroids when available, k-means++ otherwise), then trains a freshly
/// initialized linear classifier and the encoder for one epoch on the
/// resulting pseudo-labels.
pub fn deepcluster_epoch(
    encoder: &Encoder,
    chips: &[Chip],
    state: &ClusterState,
    cfg: &DeepClusterConfig,
    seed: u64,
) -> Result<DeepClusterEpoch> {
    let k = state.k;
    if k == 0 || k > chips.len() {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in 1..={}", chips.len())));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::InvalidArgument("invalid DeepCluster config".into()));
    }
    let reps = extract(encoder, chips)?;
    let d = encoder.repr_dim();
    let points = Array2::from_shape_fn((chips.len(), d), |(i, j)| reps[i].vector[j]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = if state.centroids.dim() == (k, d) {
        state.centroids.clone()
    } else {
        kmeans_pp(points.view(), k, &mut rng)
    };
    let km = kmeans(points.view(), init, cfg.max_kmeans_iter);

    let mut enc = encoder.clone();
    let mut w = Array2::<f64>::zeros((k, d));
    let mut b = Array1::<f64>::zeros(k);
    let (mut adam_w, mut adam_b) = (Adam::new(k * d), Adam::new(k));
    let mut stage_opt = StageOptimizers::new(&enc);
    let lrs = vec![cfg.lr; enc.n_stages()];
    let mut order: Vec<usize> = (0..chips.len()).collect();
    order.shuffle(&mut rng);
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let n = chunk.len() as f64;
        let mut grads = vec![None; enc.n_stages()];
        let mut gw = Array2::<f64>::zeros((k, d));
        let mut gb = Array1::<f64>::zeros(k);
        for &i in chunk {
            let (x, side) = to_channel_major(enc.model_array(&chips[i])?.view());
            let trace = enc.forward_trace(&x, side, None);
            let logits = w.dot(&trace.repr) + &b;
            let (loss, dl) = cross_entropy(&logits, km.labels[i]);
            total += loss;
            let dl = dl / n;
            gw += &dl
                .view()
                .insert_axis(Axis(1))
                .dot(&trace.repr.view().insert_axis(Axis(0)));
            gb += &dl;
            if cfg.lr > 0.0 {
                accumulate(&mut grads, enc.backward_trace(&trace, &w.t().dot(&dl), 0));
            }
        }
        if cfg.lr > 0.0 {
            stage_opt.step(&mut enc, &grads, &lrs);
            adam_w.step(&mut w, &gw, cfg.lr);
            adam_b.step(&mut b, &gb, cfg.lr);
        }
    }
    let loss = total / chips.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("pseudo-label cross-entropy {loss}")));
    }
    enc.refresh_fingerprint();
    let state = ClusterState {
        k,
        centroids: km.centroids,
        assignments: chips
            .iter()
            .zip(&km.labels)
            .map(|(c, &l)| (c.tile_id.clone(), l))
            .collect(),
        iteration: state.iteration + 1,
        wcss_history: km.wcss_history,
    };
    Ok(DeepClusterEpoch { encoder: enc, state, loss })
}
