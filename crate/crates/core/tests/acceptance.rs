//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3};
use popgrid_core::encoder::{finetune, load_encoder, predict_mc_dropout, Encoder, EncoderManifest, FinetuneConfig};
use popgrid_core::evalx::{compute_metrics, crossvalidate, Pipeline, PredictionEntry, PredictionSet};
use popgrid_core::explain::{activation_map_from_features, regression_activation_map};
use popgrid_core::geogrid::{make_spatial_folds, FoldSpec, GridDef, Tile, TileStatus};
use popgrid_core::imagery::{apply_dihedral, Chip, DihedralTransform};
use popgrid_core::mapgen::{census_check, compare_products, generate_map, PopulationRaster};
use popgrid_core::pipeline::{encoder_forest_cv, prepare_chips, EncoderForestConfig, HeadPredictor, NullPipeline};
use popgrid_core::pretext::{barlow_loss, barlow_loss_grad, deepcluster_epoch, kmeans, kmeans_pp, ClusterState, DeepClusterConfig};
use popgrid_core::regress::{fit, predict_with_uncertainty, FeatureSource, FeatureTable, RFConfig};
use popgrid_core::synth::{generate, SynthConfig, SynthDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a.is_nan() && b.is_nan()) || (a - b).abs() <= tol * b.abs().max(1.0)
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------------------
// Brute-force oracles

fn oracle_sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    // insertion sort, independent of the library's sort
    for i in 1..s.len() {
        let mut j = i;
        while j > 0 && s[j - 1] > s[j] {
            s.swap(j - 1, j);
            j -= 1;
        }
    }
    s
}

fn oracle_quantile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let s = oracle_sorted(v);
    let h = (s.len() - 1) as f64 * q;
    let lo = h.floor();
    let i = lo as usize;
    if i + 1 >= s.len() {
        s[i]
    } else {
        s[i] + (h - lo) * (s[i + 1] - s[i])
    }
}

fn oracle_median(v: &[f64]) -> f64 {
    let s = oracle_sorted(v);
    match s.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => s[n / 2],
        n => (s[n / 2 - 1] + s[n / 2]) / 2.0,
    }
}

struct OracleMetrics {
    r2: f64,
    meae: f64,
    meape: f64,
    iqr: f64,
    aggpe: f64,
}

fn oracle_metrics(e: &[PredictionEntry]) -> OracleMetrics {
    let n = e.len() as f64;
    let mean = e.iter().map(|x| x.y).sum::<f64>() / n;
    let mut ss_tot = 0.0;
    let mut ss_res = 0.0;
    for x in e {
        ss_tot += (x.y - mean) * (x.y - mean);
        ss_res += (x.y - x.y_hat) * (x.y - x.y_hat);
    }
    let r2 = if e.len() > 1 && ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN };
    let abs: Vec<f64> = e.iter().map(|x| (x.y_hat - x.y).abs()).collect();
    let ape: Vec<f64> = e.iter().filter(|x| x.y != 0.0).map(|x| (x.y_hat - x.y).abs() / x.y).collect();
    let mut regions: Vec<String> = e.iter().map(|x| x.region_key.clone()).collect();
    regions.sort();
    regions.dedup();
    let mut region_err = Vec::new();
    for r in &regions {
        let obs: f64 = e.iter().filter(|x| &x.region_key == r).map(|x| x.y).sum();
        let est: f64 = e.iter().filter(|x| &x.region_key == r).map(|x| x.y_hat).sum();
        if obs != 0.0 {
            region_err.push((est - obs).abs() / obs);
        }
    }
    OracleMetrics {
        r2,
        meae: oracle_median(&abs),
        meape: oracle_median(&ape),
        iqr: if abs.is_empty() { f64::NAN } else { oracle_quantile(&abs, 0.75) - oracle_quantile(&abs, 0.25) },
        aggpe: oracle_median(&region_err),
    }
}

fn oracle_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    num / (da * db).sqrt()
}

/// Average ranks by counting, O(n^2).
fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Fixtures

fn surveyed_tiles(grid: &GridDef, pops: &[f64]) -> Vec<Tile> {
    pops.iter()
        .enumerate()
        .map(|(i, &p)| Tile {
            population: Some(p),
            status: TileStatus::Surveyed,
            ..Tile::unlabelled(grid, i / grid.n_cols, i % grid.n_cols)
        })
        .collect()
}

fn fine_tuned_encoder() -> Result<(Encoder, SynthDataset), String> {
    let data = generate(&SynthConfig { n_rows: 4, n_cols: 4, seed: 11, ..SynthConfig::default() }).map_err(e)?;
    let base = load_encoder(&EncoderManifest::tiny(3)).map_err(e)?;
    let pairs: Vec<(Chip, f64)> = data
        .chips
        .iter()
        .cloned()
        .zip(data.tiles.iter().map(|t| t.population.unwrap_or(0.0)))
        .collect();
    let cfg = FinetuneConfig { head_epochs: 2, max_epochs: 2, batch_size: 8, ..FinetuneConfig::default() };
    let (enc, _) = finetune(&base, &pairs, &cfg).map_err(e)?;
    Ok((enc, data))
}

// ---------------------------------------------------------------------------
// Criteria

fn metric_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for set_no in 0..1000 {
        let n = rng.random_range(1..=50);
        let n_regions = rng.random_range(1..=5);
        let entries: Vec<PredictionEntry> = (0..n)
            .map(|i| PredictionEntry {
                tile_id: format!("t{i}"),
                y: if rng.random_bool(0.15) { 0.0 } else { f64::from(rng.random_range(0..40u32)) },
                y_hat: rng.random_range(0.0..45.0),
                region_key: format!("r{}", rng.random_range(0..n_regions)),
                fold: None,
            })
            .collect();
        let o = oracle_metrics(&entries);
        let m = compute_metrics(&PredictionSet::new(entries).map_err(e)?);
        for (name, got, want) in [
            ("R2", m.r2, o.r2),
            ("MeAE", m.meae, o.meae),
            ("MeAPE", m.meape, o.meape),
            ("IQR", m.iqr_abs_err, o.iqr),
            ("AggPE", m.aggpe, o.aggpe),
        ] {
            ensure(close(got, want, 1e-9), || format!("set {set_no}: {name} {got} vs oracle {want}"))?;
        }
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(10), || format!("took {t:?}"))?;
    Ok(format!("1000 sets agree within 1e-9 in {:.2}s", t.as_secs_f64()))
}

fn null_identity() -> Check {
    let grid = GridDef::new(0.0, 1000.0, 100.0, 6, 6, "EPSG:32736", "N").map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pops: Vec<f64> = (0..36).map(|_| rng.random_range(0.0..60.0)).collect();
    let tiles = surveyed_tiles(&grid, &pops);
    let mut null = NullPipeline::default();
    null.fit(&tiles).map_err(e)?;
    let preds = null.predict(&tiles).map_err(e)?;
    let set = PredictionSet::new(
        tiles
            .iter()
            .zip(preds)
            .map(|(t, y_hat)| PredictionEntry {
                tile_id: t.tile_id.clone(),
                y: t.population.unwrap(),
                y_hat,
                region_key: t.region_key.clone(),
                fold: None,
            })
            .collect(),
    )
    .map_err(e)?;
    let r2 = compute_metrics(&set).r2;
    ensure(r2.abs() <= 1e-12, || format!("R2 = {r2:e}"))?;
    Ok(format!("R2 = {r2:e}"))
}

fn hadamard(n: usize) -> Array2<f64> {
    let mut h = Array2::from_elem((1, 1), 1.0);
    while h.nrows() < n {
        let k = h.nrows();
        h = Array2::from_shape_fn((2 * k, 2 * k), |(i, j)| {
            let v = h[[i % k, j % k]];
            if i >= k && j >= k { -v } else { v }
        });
    }
    h
}

fn barlow_identities() -> Check {
    let h = hadamard(8);
    // Columns other than the first are zero-mean and mutually orthogonal.
    let za = h.slice(ndarray::s![.., 1..4]).to_owned();
    let zb = za.mapv(|v| 2.5 * v + 3.0);
    let perfect = barlow_loss(za.view(), zb.view(), 5e-3).map_err(e)?.loss;
    ensure(perfect < 1e-6, || format!("correlated views: loss {perfect:e}"))?;

    let zc = h.slice(ndarray::s![.., 4..7]).to_owned();
    let zero = barlow_loss(za.view(), zc.view(), 5e-3).map_err(e)?.loss;
    ensure(zero == 3.0, || format!("uncorrelated views: loss {zero} != D = 3"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for &lambda in &[5e-3, 0.5] {
        for _ in 0..10 {
            let a = Array2::from_shape_fn((4, 3), |_| rng.random_range(-2.0..2.0));
            let b = Array2::from_shape_fn((4, 3), |_| rng.random_range(-2.0..2.0));
            let (_, ga, gb) = barlow_loss_grad(a.view(), b.view(), lambda).map_err(e)?;
            let step = 1e-6;
            for (which, analytic) in [(0, &ga), (1, &gb)] {
                let mut numeric = Array2::<f64>::zeros((4, 3));
                for idx in ndarray::indices((4, 3)) {
                    let eval = |delta: f64| {
                        let (mut a2, mut b2) = (a.clone(), b.clone());
                        let m = if which == 0 { &mut a2 } else { &mut b2 };
                        m[idx] += delta;
                        barlow_loss(a2.view(), b2.view(), lambda).unwrap().loss
                    };
                    numeric[idx] = (eval(step) - eval(-step)) / (2.0 * step);
                }
                let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
                let err = (analytic - &numeric).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale;
                worst = worst.max(err);
            }
        }
    }
    ensure(worst < 1e-4, || format!("gradient relative error {worst:e}"))?;
    Ok(format!("loss {perfect:.1e} / {zero}; max gradient rel. error {worst:.1e}"))
}

fn deepcluster_small() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for instance in 0..20 {
        let n = rng.random_range(6..=16);
        let pts = Array2::from_shape_fn((n, 2), |(i, d)| {
            let centre = if i < n / 2 { 0.0 } else { 8.0 } + d as f64;
            centre + rng.random_range(-1.0..1.0)
        });
        let init = kmeans_pp(pts.view(), 2, &mut rng);
        let km = kmeans(pts.view(), init, 100);
        for w in km.wcss_history.windows(2) {
            ensure(w[1] <= w[0] + 1e-12, || format!("instance {instance}: WCSS rose {} -> {}", w[0], w[1]))?;
        }
        // exhaustive search over bipartitions
        let wcss = |mask: u32| {
            let mut total = 0.0;
            for side in [0, 1] {
                let members: Vec<usize> = (0..n).filter(|&i| ((mask >> i) & 1) as usize == side).collect();
                if members.is_empty() {
                    continue;
                }
                for d in 0..2 {
                    let m = members.iter().map(|&i| pts[[i, d]]).sum::<f64>() / members.len() as f64;
                    total += members.iter().map(|&i| (pts[[i, d]] - m).powi(2)).sum::<f64>();
                }
            }
            total
        };
        let best = (1u32..(1 << (n - 1)))
            .min_by(|&a, &b| wcss(a).total_cmp(&wcss(b)))
            .expect("non-empty");
        for i in 0..n {
            for j in 0..n {
                let same_oracle = ((best >> i) & 1) == ((best >> j) & 1);
                let same_km = km.labels[i] == km.labels[j];
                ensure(same_oracle == same_km, || format!("instance {instance}: points {i},{j} disagree"))?;
            }
        }
    }

    let data = generate(&SynthConfig { n_rows: 2, n_cols: 3, seed: 5, ..SynthConfig::default() }).map_err(e)?;
    let enc = load_encoder(&EncoderManifest::tiny(1)).map_err(e)?;
    let cfg = DeepClusterConfig { k: 2, lr: 0.0, ..DeepClusterConfig::default() };
    let out = deepcluster_epoch(&enc, &data.chips, &ClusterState::new(2), &cfg, 9).map_err(e)?;
    for w in out.state.wcss_history.windows(2) {
        ensure(w[1] <= w[0] + 1e-12, || format!("epoch WCSS rose {} -> {}", w[0], w[1]))?;
    }
    Ok("20 instances match exhaustive k-means; WCSS non-increasing".into())
}

fn dihedral_laws() -> Check {
    let start = Instant::now();
    let img = Array3::from_shape_fn((5, 5, 2), |(i, j, c)| (i * 10 + j + 100 * c) as u16);
    let all: Vec<DihedralTransform> = DihedralTransform::all().collect();
    let images: BTreeSet<Vec<u16>> = all.iter().map(|t| t.apply_array(img.view()).into_raw_vec_and_offset().0).collect();
    ensure(images.len() == 8, || format!("{} distinct images", images.len()))?;
    for &a in &all {
        for &b in &all {
            let ab = a.compose(b);
            ensure(all.contains(&ab), || "composition left the group".into())?;
            let seq = a.apply_array(b.apply_array(img.view()).view());
            ensure(seq == ab.apply_array(img.view()), || format!("{a:?} after {b:?} != {ab:?}"))?;
        }
    }
    let r = DihedralTransform::ROT90;
    ensure(r.compose(r).compose(r).compose(r) == DihedralTransform::IDENTITY, || "r90^4 != e".into())?;
    let mut x = img.clone();
    for _ in 0..4 {
        x = r.apply_array(x.view());
    }
    ensure(x == img, || "four quarter turns changed the image".into())?;

    let chip = Chip::new("D:0:0", Array3::from_shape_fn((200, 200, 3), |(i, j, c)| ((i * 7 + j * 3 + c) % 251) as u8))
        .map_err(e)?;
    let hist = |c: &Chip| {
        let mut h = [0usize; 256];
        c.pixels_raw.iter().for_each(|&v| h[v as usize] += 1);
        h
    };
    for &t in &all {
        let out = apply_dihedral(&chip, t);
        ensure(out.tile_id == chip.tile_id && hist(&out) == hist(&chip), || format!("{t:?} changed identity"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("8x8 table closed and consistent in {:.1} ms", elapsed.as_secs_f64() * 1e3))
}

fn ram_conservation(enc: &Encoder, data: &SynthDataset) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let (c, h, w) = (rng.random_range(1..8), rng.random_range(1..9), rng.random_range(1..9));
        let f = Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.0..3.0));
        let weight = Array1::from_shape_fn(c, |_| rng.random_range(-2.0..2.0));
        let bias = rng.random_range(-5.0..5.0);
        let map = activation_map_from_features(format!("m{i}"), f.view(), &weight, bias).map_err(e)?;
        let gap: f64 = (0..c).map(|k| weight[k] * f.index_axis(ndarray::Axis(0), k).sum() / (h * w) as f64).sum();
        worst = worst.max((map.heat.mean().unwrap() + map.bias - map.prediction).abs());
        worst = worst.max((map.prediction - (gap + bias)).abs());
    }
    for chip in &data.chips[..8] {
        let map = regression_activation_map(enc, chip).map_err(e)?;
        let head = enc.head_output(&enc.represent(chip).map_err(e)?).map_err(e)?;
        worst = worst.max((map.heat.mean().unwrap() + map.bias - map.prediction).abs());
        worst = worst.max((map.prediction - head).abs());
    }
    ensure(worst < 1e-5, || format!("max discrepancy {worst:e}"))?;
    Ok(format!("100 random maps + 8 fine-tuned chips, max discrepancy {worst:.1e}"))
}

fn cv_integrity() -> Check {
    let data = generate(&SynthConfig::default()).map_err(e)?;
    let folds = make_spatial_folds(&data.tiles, 4).map_err(e)?;
    let mut seen = BTreeMap::new();
    for f in 0..folds.n_folds() {
        let members = folds.members(f);
        ensure(!members.is_empty(), || format!("fold {f} is empty"))?;
        for id in members {
            ensure(seen.insert(id.to_string(), f).is_none(), || format!("`{id}` in two folds"))?;
        }
    }
    let ids: BTreeSet<String> = data.tiles.iter().map(|t| t.tile_id.clone()).collect();
    ensure(seen.keys().cloned().collect::<BTreeSet<_>>() == ids, || "folds do not cover the tiles".into())?;

    let (pred, _) = crossvalidate(&mut NullPipeline::default(), &data.tiles, &folds).map_err(e)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in pred.entries() {
        *counts.entry(p.tile_id.as_str()).or_default() += 1;
        ensure(p.fold == seen.get(&p.tile_id).copied(), || format!("`{}` predicted outside its fold", p.tile_id))?;
    }
    ensure(counts.len() == ids.len() && counts.values().all(|&c| c == 1), || "pooled predictions not 1:1".into())?;

    let mut text = serde_json::to_string(&folds).map_err(e)?;
    text.truncate(text.len() - 1);
    let first = data.tiles[0].tile_id.clone();
    text.push_str(&format!(",\"{first}\":{}}}", (seen[&first] + 1) % 4));
    let corrupted = FoldSpec::from_json_str(&text);
    ensure(matches!(corrupted, Err(popgrid_core::Error::Leakage(_))), || format!("corrupted fold file gave {corrupted:?}"))?;

    let mut partial = folds.assignment().clone();
    partial.remove(&first);
    let partial = FoldSpec::new(4, partial).map_err(e)?;
    ensure(crossvalidate(&mut NullPipeline::default(), &data.tiles, &partial).is_err(), || {
        "missing tile accepted".into()
    })?;
    Ok(format!("{} tiles in 4 disjoint folds; duplicate entry rejected as leakage", ids.len()))
}

fn synthetic_end_to_end() -> Check {
    let start = Instant::now();
    let data = generate(&SynthConfig::default()).map_err(e)?;
    let folds = make_spatial_folds(&data.tiles, 4).map_err(e)?;
    let (_, null) = crossvalidate(&mut NullPipeline::default(), &data.tiles, &folds).map_err(e)?;
    let base = load_encoder(&EncoderManifest::tiny(0)).map_err(e)?;
    let chips = prepare_chips(&base, data.chips.clone()).map_err(e)?;
    let cfg = EncoderForestConfig {
        finetune: FinetuneConfig { max_epochs: 10, ..FinetuneConfig::default() },
        ..EncoderForestConfig::default()
    };
    let report = encoder_forest_cv(&base, &data.tiles, &chips, &folds, &cfg).map_err(e)?;
    let elapsed = start.elapsed();
    let m = &report.metrics;
    let grid_points = report.grid.as_ref().map_or(0, |g| g.scores.len());
    let summary = format!(
        "R2 {:.3}, MeAE {:.3} vs null {:.3} ({:.0}% better), {grid_points}-point grid, {:.0}s",
        m.r2,
        m.meae,
        null.meae,
        100.0 * (1.0 - m.meae / null.meae),
        elapsed.as_secs_f64()
    );
    ensure(m.n == 400 && grid_points == 20, || format!("unexpected shape: {summary}"))?;
    ensure(m.r2 >= 0.5, || summary.clone())?;
    ensure(m.meae <= 0.7 * null.meae, || summary.clone())?;
    ensure(elapsed < Duration::from_secs(15 * 60), || summary.clone())?;
    Ok(summary)
}

fn uncertainty(enc: &Encoder, data: &SynthDataset) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows: BTreeMap<String, Vec<f64>> =
        (0..40).map(|i| (format!("t{i}"), (0..4).map(|_| rng.random::<f64>()).collect())).collect();
    let labels: BTreeMap<String, f64> = rows.iter().map(|(k, r)| (k.clone(), 10.0 * r[0] + r[1])).collect();
    let table = FeatureTable::new((0..4).map(|i| format!("f{i}")).collect(), rows, FeatureSource::Representation)
        .map_err(e)?;
    let model = fit(&table, &labels, &RFConfig { num_estimators: 1, ..RFConfig::default() }).map_err(e)?;
    let preds = predict_with_uncertainty(&model, &table).map_err(e)?;
    ensure(preds.values().all(|p| p.std == 0.0), || "single-tree std is not zero".into())?;

    let chips = &data.chips[..6];
    let zero = predict_mc_dropout(enc, chips, 30, 0.0, 1).map_err(e)?;
    ensure(zero.iter().all(|p| p.std == 0.0), || "p = 0 gave non-zero std".into())?;
    let a = predict_mc_dropout(enc, chips, 30, 0.1, 42).map_err(e)?;
    let b = predict_mc_dropout(enc, chips, 30, 0.1, 42).map_err(e)?;
    ensure(a == b, || "MC dropout not reproducible under a fixed seed".into())?;
    ensure(a.iter().any(|p| p.std > 0.0), || "p = 0.1 gave no spread".into())?;
    Ok("single tree and p = 0 give std 0; p = 0.1 x 30 repeats bit-for-bit".into())
}

fn raster_round_trip(enc: &Encoder) -> Check {
    let data = generate(&SynthConfig { n_rows: 5, n_cols: 5, seed: 8, ..SynthConfig::default() }).map_err(e)?;
    let mosaic = data.mosaic().map_err(e)?;
    // One column wider than the imagery, so the last column is nodata.
    let grid = GridDef { n_cols: 6, ..data.grid.clone() };
    let predictor = HeadPredictor { encoder: enc, mc_dropout: Some((30, 0.1, 5)) };
    let out = generate_map(&predictor, &grid, &mosaic).map_err(e)?;
    ensure(out.report.n_nodata == 5 && out.report.n_valid == 25, || format!("{:?}", out.report))?;

    let dir = tempfile::tempdir().map_err(e)?;
    let path = dir.path().join("map.tif");
    out.raster.write_geotiff(&path).map_err(e)?;
    let back = PopulationRaster::read_geotiff(&path, &grid.district_id).map_err(e)?;
    let bits = |a: &Array2<f32>| a.iter().map(|v| if v.is_nan() { u32::MAX } else { v.to_bits() }).collect::<Vec<_>>();
    ensure(back.grid == out.raster.grid, || "grid changed".into())?;
    ensure(bits(&back.values) == bits(&out.raster.values), || "values changed".into())?;
    let (u0, u1) = (out.raster.uncertainty.as_ref(), back.uncertainty.as_ref());
    ensure(u0.is_some() && u0.map(bits) == u1.map(bits), || "uncertainty band changed".into())?;
    ensure(back.provenance == out.raster.provenance, || "provenance changed".into())?;

    let logged: f64 = out.predictions.iter().map(|p| p.mean).sum();
    let total = back.total();
    let rel = (total - logged).abs() / logged.abs().max(f64::MIN_POSITIVE);
    ensure(rel <= 1e-6, || format!("raster total {total} vs logged {logged}"))?;
    Ok(format!("bit-exact round trip; total {total:.3} vs logged {logged:.3} (rel {rel:.1e})"))
}

fn product_comparison() -> Check {
    let grid = GridDef::new(0.0, 1000.0, 100.0, 10, 10, "EPSG:32736", "C").map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..50 {
        let mut raster = |nan_rate: f64| {
            let v = Array2::from_shape_fn((10, 10), |_| {
                if rng.random_bool(nan_rate) {
                    f32::NAN
                } else if rng.random_bool(0.2) {
                    rng.random_range(0..4u8) as f32
                } else {
                    rng.random_range(0.0f32..100.0)
                }
            });
            PopulationRaster::new(grid.clone(), v, None, "random").unwrap()
        };
        let (a, b) = (raster(0.1), raster(0.1));
        let cmp = compare_products(&a, &b).map_err(e)?;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            if !x.is_nan() && !y.is_nan() {
                xs.push(f64::from(*x));
                ys.push(f64::from(*y));
            }
        }
        let pearson = oracle_pearson(&xs, &ys);
        let spearman = oracle_pearson(&oracle_ranks(&xs), &oracle_ranks(&ys));
        ensure(cmp.n_cells == xs.len(), || format!("trial {trial}: {} common cells, expected {}", cmp.n_cells, xs.len()))?;
        ensure(close(cmp.pearson, pearson, 1e-9), || format!("trial {trial}: Pearson {} vs {pearson}", cmp.pearson))?;
        ensure(close(cmp.spearman, spearman, 1e-9), || format!("trial {trial}: Spearman {} vs {spearman}", cmp.spearman))?;
    }
    let mut v = Array2::<f32>::zeros((10, 10));
    v[[3, 4]] = 129.0;
    let ours = PopulationRaster::new(grid, v, None, "census").map_err(e)?;
    let rel = census_check(&ours, 100.0).map_err(e)?;
    ensure((rel - 0.29).abs() < 1e-12, || format!("census_check(129, 100) = {rel}"))?;
    Ok(format!("50 random pairs match within 1e-9; census_check(129, 100) = {rel:+.2}"))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Check)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Check| {
        let r = f();
        let line = match &r {
            Ok(d) => format!("PASS {name}: {d}"),
            Err(d) => format!("FAIL {name}: {d}"),
        };
        println!("{line}");
        results.push((name, r));
    };

    run("metric oracle equivalence", &metric_oracle);
    run("null-model identity", &null_identity);
    run("Barlow Twins loss identities", &barlow_identities);
    run("DeepCluster small-instance equivalence", &deepcluster_small);
    run("dihedral group laws", &dihedral_laws);
    match fine_tuned_encoder() {
        Ok((enc, data)) => {
            run("RAM conservation", &|| ram_conservation(&enc, &data));
            run("uncertainty sanity", &|| uncertainty(&enc, &data));
            run("raster round-trip", &|| raster_round_trip(&enc));
        }
        Err(err) => {
            for name in ["RAM conservation", "uncertainty sanity", "raster round-trip"] {
                run(name, &|| Err(format!("could not fine-tune the test encoder: {err}")));
            }
        }
    }
    run("spatial CV integrity", &cv_integrity);
    run("product comparison oracle", &product_comparison);
    run("synthetic end-to-end", &synthetic_end_to_end);

    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
