use ndarray::{s, Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imagery::{prepare_for_model, resize_bilinear, standardize, Chip, NormalizationStats, MODEL_SIDE};

/// Distortions available to the self-supervised view generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augmentation {
    CropResize,
    HorizontalFlip,
    ColorJitter,
    Grayscale,
    GaussianBlur,
    Solarization,
}

impl Augmentation {
    pub const ALL: [Augmentation; 6] = [
        Augmentation::CropResize,
        Augmentation::HorizontalFlip,
        Augmentation::ColorJitter,
        Augmentation::Grayscale,
        Augmentation::GaussianBlur,
        Augmentation::Solarization,
    ];
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Applies `augs` in order to a `(row, col, band)` image on the `[0, 1]` scale.
///
/// Crop-resize keeps 20-100% of the area at an aspect ratio in `[3/4, 4/3]`,
/// horizontal flip fires with probability 1/2, colour jitter scales brightness,
/// contrast and saturation by factors in `[0.6, 1.4]`, blur uses a Gaussian
/// with sigma in `[0.1, 2]`, and solarization inverts values at or above 1/2.
pub fn augment<R: Rng + ?Sized>(img: &Array3<f64>, augs: &[Augmentation], rng: &mut R) -> Array3<f64> {
    let mut x = img.clone();
    for aug in augs {
        x = match aug {
            Augmentation::CropResize => crop_resize(&x, rng),
            Augmentation::HorizontalFlip => {
                if rng.random_bool(0.5) {
                    x.slice(s![.., ..;-1, ..]).to_owned()
                } else {
                    x
                }
            }
            Augmentation::ColorJitter => color_jitter(x, rng),
            Augmentation::Grayscale => grayscale(x),
            Augmentation::GaussianBlur => gaussian_blur(&x, rng.random_range(0.1..=2.0)),
            Augmentation::Solarization => x.mapv(|v| if v >= 0.5 { 1.0 - v } else { v }),
        };
    }
    x
}

fn crop_resize<R: Rng + ?Sized>(img: &Array3<f64>, rng: &mut R) -> Array3<f64> {
    let (h, w, _) = img.dim();
    let area = rng.random_range(0.2..=1.0) * (h * w) as f64;
    let log_ratio = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
    let ratio = log_ratio.exp();
    let cw = ((area * ratio).sqrt().round() as usize).clamp(1, w);
    let ch = ((area / ratio).sqrt().round() as usize).clamp(1, h);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    resize_bilinear(img.slice(s![y0..y0 + ch, x0..x0 + cw, ..]), h, w)
}

fn color_jitter<R: Rng + ?Sized>(mut x: Array3<f64>, rng: &mut R) -> Array3<f64> {
    let brightness = rng.random_range(0.6..=1.4);
    let contrast = rng.random_range(0.6..=1.4);
    let saturation = rng.random_range(0.6..=1.4);
    x.mapv_inplace(|v| (v * brightness).clamp(0.0, 1.0));
    let mean_gray = luma(&x).mean().unwrap_or(0.0);
    x.mapv_inplace(|v| ((v - mean_gray) * contrast + mean_gray).clamp(0.0, 1.0));
    let gray = luma(&x);
    Zip::indexed(&mut x).for_each(|(i, j, _), v| {
        let g = gray[[i, j]];
        *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
    });
    x
}

fn luma(x: &Array3<f64>) -> ndarray::Array2<f64> {
    let (h, w, _) = x.dim();
    ndarray::Array2::from_shape_fn((h, w), |(i, j)| (0..3).map(|c| LUMA[c] * x[[i, j, c]]).sum())
}

fn grayscale(x: Array3<f64>) -> Array3<f64> {
    let g = luma(&x);
    Array3::from_shape_fn(x.dim(), |(i, j, _)| g[[i, j]])
}

fn gaussian_blur(x: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / total).collect();
    let (h, w, c) = x.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array3::<f64>::zeros((h, w, c));
    Zip::indexed(&mut tmp).for_each(|(i, j, ch), out: &mut f64| {
        *out = kernel
            .iter()
            .enumerate()
            .map(|(k, wgt)| wgt * x[[i, clamp(j as isize + k as isize - radius, w), ch]])
            .sum();
    });
    let mut out = Array3::<f64>::zeros((h, w, c));
    Zip::indexed(&mut out).for_each(|(i, j, ch), o: &mut f64| {
        *o = kernel
            .iter()
            .enumerate()
            .map(|(k, wgt)| wgt * tmp[[clamp(i as isize + k as isize - radius, h), j, ch]])
            .sum();
    });
    out
}

/// Two independently augmented, model-ready views of `chip`, both drawn from
/// the stream seeded by `seed`.
pub fn make_views(
    chip: &Chip,
    augs: &[Augmentation],
    stats: &NormalizationStats,
    seed: u64,
) -> Result<(Chip, Chip)> {
    let prepared = prepare_for_model(chip, stats)?;
    if augs.is_empty() {
        return Ok((prepared.clone(), prepared));
    }
    let raw = chip.pixels_raw.mapv(|v| f64::from(v) / 255.0);
    let base = resize_bilinear(raw.view(), MODEL_SIDE, MODEL_SIDE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut view = || {
        let v = augment(&base, augs, &mut rng).mapv(|p| p * 255.0);
        let mut c = prepared.clone();
        c.pixels_model = Some(standardize(&v, stats));
        c
    };
    let a = view();
    let b = view();
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    fn chip() -> Chip {
        Chip::new(
            "v",
            Array3::from_shape_fn((200, 200, 3), |(i, j, c)| ((i * 3 + j * 5 + c * 70) % 256) as u8),
        )
        .unwrap()
    }

    #[test]
    fn empty_list_returns_input() {
        let stats = NormalizationStats::default();
        let (a, b) = make_views(&chip(), &[], &stats, 1).unwrap();
        let expected = prepare_for_model(&chip(), &stats).unwrap();
        assert_eq!(a, expected);
        assert_eq!(b, expected);
    }

    #[test]
    fn seeded_views_repeat() {
        let stats = NormalizationStats::default();
        let x = make_views(&chip(), &Augmentation::ALL, &stats, 5).unwrap();
        let y = make_views(&chip(), &Augmentation::ALL, &stats, 5).unwrap();
        assert_eq!(x, y);
        assert_ne!(x.0, x.1);
        assert_eq!(x.0.model_pixels().unwrap().dim(), (224, 224, 3));
    }

    #[test]
    fn grayscale_views_have_equal_bands() {
        // Identity statistics so the equality survives standardization.
        let stats = NormalizationStats { mean: [0.0; 3], std: [1.0; 3] };
        let (a, b) = make_views(&chip(), &[Augmentation::Grayscale], &stats, 2).unwrap();
        for v in [a, b] {
            for px in v.model_pixels().unwrap().lanes(Axis(2)) {
                assert_eq!(px[0], px[1]);
                assert_eq!(px[1], px[2]);
            }
        }
    }

    #[test]
    fn blur_preserves_constant_images_and_solarize_is_bounded() {
        let flat = Array3::from_elem((12, 12, 3), 0.3);
        let blurred = gaussian_blur(&flat, 1.5);
        assert!(blurred.iter().all(|v| (v - 0.3).abs() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Array3::from_shape_fn((8, 8, 3), |(i, j, _)| (i * 8 + j) as f64 / 63.0);
        let sol = augment(&img, &[Augmentation::Solarization], &mut rng);
        assert!(sol.iter().all(|&v| (0.0..=0.5).contains(&v)));
    }
}
