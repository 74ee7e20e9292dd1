use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::imagery::{encode_png, resize_bilinear, Chip};

/// Side of the display heat map, matching the encoder input.
pub const DISPLAY_SIDE: usize = 224;

/// Per-location contributions of the final feature map to the head output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub tile_id: String,
    /// `heat[u][v] = Σ_c w_c F_c(u, v)` at feature-map resolution.
    pub heat: Array2<f64>,
    pub bias: f64,
    /// `mean(heat) + bias`, the head output before clamping.
    pub prediction: f64,
}

#[derive(Serialize)]
struct RamJson<'a> {
    tile_id: &'a str,
    bias: f64,
    prediction: f64,
    source: &'static str,
    heat: Vec<Vec<f64>>,
}

/// Builds the map from a `(channels, h, w)` feature map and linear head.
pub fn activation_map_from_features(
    tile_id: impl Into<String>,
    features: ArrayView3<'_, f64>,
    weight: &Array1<f64>,
    bias: f64,
) -> Result<ActivationMap> {
    let (c, h, w) = features.dim();
    if weight.len() != c {
        return Err(Error::Shape(format!(
            "head has {} weights for {c} feature channels",
            weight.len()
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape("empty feature map".into()));
    }
    let heat = features
        .axis_iter(Axis(0))
        .zip(weight.iter())
        .fold(Array2::zeros((h, w)), |acc, (fc, &wc)| acc + &(&fc * wc));
    let prediction = heat.mean().expect("non-empty heat map") + bias;
    Ok(ActivationMap {
        tile_id: tile_id.into(),
        heat,
        bias,
        prediction,
    })
}

/// Activation map of `chip` under the encoder's linear regression head.
pub fn regression_activation_map(encoder: &Encoder, chip: &Chip) -> Result<ActivationMap> {
    let (weight, bias) = encoder.linear_head().ok_or(Error::NotLinearHead)?;
    let (features, _) = encoder.feature_map(chip)?;
    activation_map_from_features(chip.tile_id.clone(), features.view(), weight, bias)
}

impl ActivationMap {
    /// Bilinear upsampling of the heat map to `side`×`side`.
    pub fn upsampled(&self, side: usize) -> Array2<f64> {
        let (h, w) = self.heat.dim();
        let src = self.heat.view().into_shape_with_order((h, w, 1)).expect("contiguous heat");
        resize_bilinear(src, side, side)
            .into_shape_with_order((side, side))
            .expect("single band")
    }

    /// Heat upsampled to the chip side, min-max scaled and blended in red
    /// over a grayscale copy of the chip.
    pub fn overlay_png(&self, chip: &Chip) -> Result<Vec<u8>> {
        let (h, w, _) = chip.pixels_raw.dim();
        if h != w {
            return Err(Error::Shape(format!("chip `{}` is not square", chip.tile_id)));
        }
        let (h0, w0) = self.heat.dim();
        let src = self.heat.view().into_shape_with_order((h0, w0, 1)).expect("contiguous heat");
        let heat = resize_bilinear(src, h, w);
        let lo = heat.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = heat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let px = Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
            let rgb = chip.pixels_raw.slice(ndarray::s![i, j, ..]);
            let gray = 0.299 * f64::from(rgb[0]) + 0.587 * f64::from(rgb[1]) + 0.114 * f64::from(rgb[2]);
            let t = (heat[[i, j, 0]] - lo) / span;
            let tint = [255.0 * t, 64.0 * t, 0.0][c];
            (0.5 * gray + 0.5 * tint).round().clamp(0.0, 255.0) as u8
        });
        encode_png(&px)
    }

    /// JSON with the raw heat map as nested arrays.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let doc = RamJson {
            tile_id: &self.tile_id,
            bias: self.bias,
            prediction: self.prediction,
            source: "linear regression head of the fine-tuned encoder",
            heat: self.heat.outer_iter().map(|r| r.to_vec()).collect(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &doc)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes `<stem>.png` and `<stem>.json` into `dir`.
    pub fn export(&self, chip: &Chip, dir: &Path, stem: &str) -> Result<()> {
        let png = dir.join(format!("{stem}.png"));
        std::fs::write(&png, self.overlay_png(chip)?).map_err(|e| Error::io(&png, e))?;
        self.write_json(&dir.join(format!("{stem}.json")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_features_give_constant_heat() {
        let f = Array3::from_shape_fn((3, 5, 5), |(c, _, _)| c as f64 + 0.5);
        let w = Array1::from(vec![1.0, -2.0, 0.25]);
        let m = activation_map_from_features("t", f.view(), &w, 3.0).unwrap();
        let expected = 0.5 - 2.0 * 1.5 + 0.25 * 2.5;
        assert!(m.heat.iter().all(|&h| (h - expected).abs() < 1e-12));
        assert!((m.prediction - (expected + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_weights() {
        let f = Array3::from_shape_fn((4, 3, 3), |(c, i, j)| (c * 9 + i * 3 + j) as f64);
        let m = activation_map_from_features("t", f.view(), &Array1::zeros(4), -1.5).unwrap();
        assert!(m.heat.iter().all(|&h| h == 0.0));
        assert_eq!(m.prediction, -1.5);
    }

    #[test]
    fn channel_count_must_match() {
        let f = Array3::<f64>::zeros((4, 3, 3));
        assert!(activation_map_from_features("t", f.view(), &Array1::zeros(3), 0.0).is_err());
    }

    #[test]
    fn upsampled_argmax_stays_in_its_cell() {
        let mut heat = Array2::zeros((4, 4));
        heat[[2, 1]] = 5.0;
        let m = ActivationMap { tile_id: "t".into(), heat, bias: 0.0, prediction: 0.3125 };
        let up = m.upsampled(DISPLAY_SIDE);
        let (arg, _) = up
            .indexed_iter()
            .fold(((0, 0), f64::NEG_INFINITY), |best, (ij, &v)| if v > best.1 { (ij, v) } else { best });
        let cell = DISPLAY_SIDE / 4;
        assert!((arg.0 / cell).abs_diff(2) <= 1 && (arg.1 / cell).abs_diff(1) <= 1);
    }
}
