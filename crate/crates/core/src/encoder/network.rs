//! Convolutional stages with per-channel affine normalization, forward and
//! backward passes. Activations are `(channels, height * width)` matrices so that
//! every convolution is a single matrix product over an im2col buffer.

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Geometry of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl StageSpec {
    /// Odd kernels are zero-padded to keep `ceil(size / stride)`; even kernels
    /// (patch embeddings) are not padded.
    pub fn padding(&self) -> usize {
        if self.kernel % 2 == 1 {
            self.kernel / 2
        } else {
            0
        }
    }

    pub fn output_side(&self, input: usize) -> usize {
        (input + 2 * self.padding() - self.kernel) / self.stride + 1
    }
}

/// Convolution, frozen-statistics normalization (a per-channel affine map) and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    pub spec: StageSpec,
    pub in_channels: usize,
    /// `(out, in * k * k)`, input-channel-major then kernel row then kernel column.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct StageGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl StageGrads {
    pub fn add_assign(&mut self, other: &StageGrads) {
        self.weight += &other.weight;
        self.bias += &other.bias;
        self.scale += &other.scale;
        self.shift += &other.shift;
    }
}

/// Adds per-stage gradients into an accumulator of the same length.
pub(crate) fn accumulate(acc: &mut [Option<StageGrads>], grads: Vec<Option<StageGrads>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        if let Some(g) = g {
            match a {
                Some(a) => a.add_assign(&g),
                None => *a = Some(g),
            }
        }
    }
}

/// Everything the backward pass of one stage needs.
pub(crate) struct StageCache {
    in_side: usize,
    out_side: usize,
    cols: Array2<f64>,
    conv: Array2<f64>,
    normed: Array2<f64>,
    mask: Option<Array2<f64>>,
}

impl ConvStage {
    pub fn init<R: Rng + ?Sized>(spec: StageSpec, in_channels: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * spec.kernel * spec.kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        ConvStage {
            spec,
            in_channels,
            weight: Array2::from_shape_simple_fn((spec.out_channels, fan_in), || normal.sample(rng)),
            bias: Array1::zeros(spec.out_channels),
            scale: Array1::ones(spec.out_channels),
            shift: Array1::zeros(spec.out_channels),
        }
    }

    /// `input` is `(in_channels, side * side)`.
    pub(crate) fn forward(
        &self,
        input: &Array2<f64>,
        in_side: usize,
        dropout: Option<(&mut dyn FnMut() -> f64, f64)>,
    ) -> (Array2<f64>, StageCache) {
        let out_side = self.spec.output_side(in_side);
        let cols = im2col(input, self.in_channels, in_side, &self.spec, out_side);
        let mut conv = self.weight.dot(&cols);
        conv += &self.bias.view().insert_axis(Axis(1));
        let mut normed = conv.clone();
        for (mut row, (&a, &b)) in normed
            .outer_iter_mut()
            .zip(self.scale.iter().zip(self.shift.iter()))
        {
            row.mapv_inplace(|v| v * a + b);
        }
        let mut act = normed.mapv(|v| v.max(0.0));
        let mask = dropout.and_then(|(draw, p)| {
            if p <= 0.0 {
                return None;
            }
            let keep = 1.0 / (1.0 - p);
            let m = Array2::from_shape_simple_fn(act.raw_dim(), || if draw() < p { 0.0 } else { keep });
            act *= &m;
            Some(m)
        });
        (
            act,
            StageCache {
                in_side,
                out_side,
                cols,
                conv,
                normed,
                mask,
            },
        )
    }

    /// Returns parameter gradients and, when requested, the gradient with
    /// respect to the stage input.
    pub(crate) fn backward(
        &self,
        cache: &StageCache,
        d_act: &Array2<f64>,
        need_input_grad: bool,
    ) -> (StageGrads, Option<Array2<f64>>) {
        let mut d_normed = d_act.clone();
        if let Some(mask) = &cache.mask {
            d_normed *= mask;
        }
        ndarray::Zip::from(&mut d_normed)
            .and(&cache.normed)
            .for_each(|d, &n| {
                if n <= 0.0 {
                    *d = 0.0;
                }
            });
        let d_scale = (&d_normed * &cache.conv).sum_axis(Axis(1));
        let d_shift = d_normed.sum_axis(Axis(1));
        let mut d_conv = d_normed;
        for (mut row, &a) in d_conv.outer_iter_mut().zip(self.scale.iter()) {
            row *= a;
        }
        let d_weight = d_conv.dot(&cache.cols.t());
        let d_bias = d_conv.sum_axis(Axis(1));
        let d_input = need_input_grad.then(|| {
            let d_cols = self.weight.t().dot(&d_conv);
            col2im(&d_cols, self.in_channels, cache.in_side, &self.spec, cache.out_side)
        });
        (
            StageGrads {
                weight: d_weight,
                bias: d_bias,
                scale: d_scale,
                shift: d_shift,
            },
            d_input,
        )
    }
}

fn im2col(
    input: &Array2<f64>,
    channels: usize,
    side: usize,
    spec: &StageSpec,
    out_side: usize,
) -> Array2<f64> {
    let k = spec.kernel;
    let pad = spec.padding() as isize;
    let mut cols = Array2::zeros((channels * k * k, out_side * out_side));
    for c in 0..channels {
        let plane = input.row(c);
        for ky in 0..k {
            for kx in 0..k {
                let mut dst = cols.row_mut((c * k + ky) * k + kx);
                for oy in 0..out_side {
                    let iy = (oy * spec.stride + ky) as isize - pad;
                    if iy < 0 || iy >= side as isize {
                        continue;
                    }
                    let base = iy as usize * side;
                    for ox in 0..out_side {
                        let ix = (ox * spec.stride + kx) as isize - pad;
                        if ix >= 0 && (ix as usize) < side {
                            dst[oy * out_side + ox] = plane[base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    channels: usize,
    side: usize,
    spec: &StageSpec,
    out_side: usize,
) -> Array2<f64> {
    let k = spec.kernel;
    let pad = spec.padding() as isize;
    let mut out = Array2::zeros((channels, side * side));
    for c in 0..channels {
        let mut plane = out.row_mut(c);
        for ky in 0..k {
            for kx in 0..k {
                let src = cols.row((c * k + ky) * k + kx);
                for oy in 0..out_side {
                    let iy = (oy * spec.stride + ky) as isize - pad;
                    if iy < 0 || iy >= side as isize {
                        continue;
                    }
                    let base = iy as usize * side;
                    for ox in 0..out_side {
                        let ix = (ox * spec.stride + kx) as isize - pad;
                        if ix >= 0 && (ix as usize) < side {
                            plane[base + ix as usize] += src[oy * out_side + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Converts `(row, col, band)` model pixels into a `(band, row * col)` matrix.
pub(crate) fn to_channel_major(img: ArrayView3<'_, f32>) -> (Array2<f64>, usize) {
    let (h, w, c) = img.dim();
    debug_assert_eq!(h, w);
    let mut out = Array2::zeros((c, h * w));
    for ((y, x, ch), &v) in img.indexed_iter() {
        out[[ch, y * w + x]] = f64::from(v);
    }
    (out, h)
}

/// Final feature map as `(channels, side, side)`.
pub(crate) fn to_feature_map(act: &Array2<f64>, side: usize) -> Array3<f64> {
    act.clone()
        .into_shape_with_order((act.nrows(), side, side))
        .expect("activation holds side * side columns")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn output_sides() {
        let patch = StageSpec { out_channels: 4, kernel: 8, stride: 8 };
        assert_eq!(patch.output_side(224), 28);
        let down = StageSpec { out_channels: 4, kernel: 3, stride: 2 };
        assert_eq!(down.output_side(28), 14);
        let same = StageSpec { out_channels: 4, kernel: 3, stride: 1 };
        assert_eq!(same.output_side(14), 14);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let spec = StageSpec { out_channels: 2, kernel: 3, stride: 2 };
        let (c, side) = (2, 7);
        let out_side = spec.output_side(side);
        let x = Array2::from_shape_simple_fn((c, side * side), || rng.random::<f64>() - 0.5);
        let y = Array2::from_shape_simple_fn((c * 9, out_side * out_side), || rng.random::<f64>() - 0.5);
        let lhs = (im2col(&x, c, side, &spec, out_side) * &y).sum();
        let rhs = (&x * &col2im(&y, c, side, &spec, out_side)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn stage_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let spec = StageSpec { out_channels: 3, kernel: 3, stride: 2 };
        let mut stage = ConvStage::init(spec, 2, &mut rng);
        stage.scale.mapv_inplace(|_| 0.7);
        stage.shift.mapv_inplace(|_| 0.1);
        let side = 6;
        let x = Array2::from_shape_simple_fn((2, side * side), || rng.random::<f64>() - 0.3);
        let upstream = Array2::from_shape_simple_fn((3, spec.output_side(side).pow(2)), || rng.random::<f64>() - 0.5);
        let loss = |s: &ConvStage, x: &Array2<f64>| (s.forward(x, side, None).0 * &upstream).sum();

        let (_, cache) = stage.forward(&x, side, None);
        let (g, dx) = stage.backward(&cache, &upstream, true);
        let dx = dx.unwrap();
        let h = 1e-6;
        for idx in [(0, 0), (1, 5), (2, 17)] {
            let mut p = stage.clone();
            p.weight[idx] += h;
            let mut m = stage.clone();
            m.weight[idx] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - g.weight[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "w{idx:?}: {fd} vs {}", g.weight[idx]);
        }
        for ch in 0..3 {
            let mut p = stage.clone();
            p.scale[ch] += h;
            let mut m = stage.clone();
            m.scale[ch] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - g.scale[ch]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        for idx in [(0, 0), (1, 20), (0, 35)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&stage, &xp) - loss(&stage, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
