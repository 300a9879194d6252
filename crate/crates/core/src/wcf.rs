//! Wavelet complexity field: a small strided CNN over the SWT feature stack,
//! instance-normalized to a low-resolution field `c_hat`, sliced into nested
//! per-band masks by strictly ordered thresholds, and reused as the
//! importance map for geometry-stage sampling.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::raster::{bilinear_axis, node_coord, Grid};
use crate::rng::SeededRng;
use crate::wavelet::{SwtFeatures, FEATURE_CHANNELS};

pub const DECODER_HIDDEN: usize = 48;
pub const DECODER_STRIDES: [usize; 3] = [2, 2, 1];
pub const KERNEL: usize = 3;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;
/// Floor of the rectified complexity in the sampling mixture.
pub const SAMPLING_EPS: f64 = 0.01;

/// One 3x3 convolution with zero "same" padding (pad 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `(out_channels, in_channels * 9)`, column index `c * 9 + ky * 3 + kx`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

impl ConvLayer {
    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / (KERNEL * KERNEL)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }
}

/// Spatial map stored as `(positions, channels)`, positions row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn from_features(f: &SwtFeatures) -> Self {
        let p = f.width * f.height;
        let mut data = Array2::zeros((p, f.channels.len()));
        for (c, ch) in f.channels.iter().enumerate() {
            for (i, v) in ch.data.iter().enumerate() {
                data[[i, c]] = *v;
            }
        }
        FeatureMap {
            width: f.width,
            height: f.height,
            data,
        }
    }
}

#[inline]
pub fn conv_out_len(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

fn im2col(input: &FeatureMap, stride: usize) -> (Array2<f64>, usize, usize) {
    let (w, h) = (input.width, input.height);
    let ch = input.data.ncols();
    let (ow, oh) = (conv_out_len(w, stride), conv_out_len(h, stride));
    let mut cols = Array2::zeros((ow * oh, ch * KERNEL * KERNEL));
    for oy in 0..oh {
        for ox in 0..ow {
            let p = oy * ow + ox;
            let mut row = cols.row_mut(p);
            for ky in 0..KERNEL {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = input.data.row(iy as usize * w + ix as usize);
                    for c in 0..ch {
                        row[c * 9 + ky * 3 + kx] = src[c];
                    }
                }
            }
        }
    }
    (cols, ow, oh)
}

fn col2im(dcols: &Array2<f64>, w: usize, h: usize, ch: usize, stride: usize) -> Array2<f64> {
    let (ow, oh) = (conv_out_len(w, stride), conv_out_len(h, stride));
    let mut out = Array2::zeros((w * h, ch));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = dcols.row(oy * ow + ox);
            for ky in 0..KERNEL {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let mut dst = out.row_mut(iy as usize * w + ix as usize);
                    for c in 0..ch {
                        dst[c] += row[c * 9 + ky * 3 + kx];
                    }
                }
            }
        }
    }
    out
}

/// 3-layer decoder `7 -> 48 -> 48 -> 1`, strides 2-2-1, ReLU between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct WcfDecoder {
    pub layers: Vec<ConvLayer>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    cols: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    dims: Vec<(usize, usize)>,
    pub out_width: usize,
    pub out_height: usize,
}

impl WcfDecoder {
    /// He-uniform weights `U(+-sqrt(6 / fan_in))`, zero biases.
    pub fn new(seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let chans = [FEATURE_CHANNELS, DECODER_HIDDEN, DECODER_HIDDEN, 1];
        let layers = (0..3)
            .map(|i| {
                let fan_in = chans[i] * KERNEL * KERNEL;
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((chans[i + 1], fan_in), |_| {
                    rng.uniform_in(-bound, bound)
                });
                ConvLayer {
                    weight,
                    bias: Array1::zeros(chans[i + 1]),
                    stride: DECODER_STRIDES[i],
                }
            })
            .collect();
        WcfDecoder { layers }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Raw decoder output `c` on the low-resolution grid.
    pub fn forward(&self, input: &FeatureMap) -> (Grid, DecoderCache) {
        let mut cols = Vec::new();
        let mut pre = Vec::new();
        let mut dims = Vec::new();
        let mut x = input.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            dims.push((x.width, x.height));
            let (c, ow, oh) = im2col(&x, layer.stride);
            let mut z = Array2::zeros((c.nrows(), layer.out_channels()));
            general_mat_mul(1.0, &c, &layer.weight.t(), 0.0, &mut z);
            z += &layer.bias;
            let act = if i < last {
                z.mapv(|v| v.max(0.0))
            } else {
                z.clone()
            };
            cols.push(c);
            pre.push(z);
            x = FeatureMap {
                width: ow,
                height: oh,
                data: act,
            };
        }
        let out = Grid {
            width: x.width,
            height: x.height,
            data: x.data.column(0).to_vec(),
        };
        let cache = DecoderCache {
            cols,
            pre,
            dims,
            out_width: x.width,
            out_height: x.height,
        };
        (out, cache)
    }

    /// Parameter gradients given `dL/dc` on the output grid.
    pub fn backward(&self, cache: &DecoderCache, d_out: &[f64]) -> Vec<ConvLayer> {
        let mut grads: Vec<ConvLayer> = self
            .layers
            .iter()
            .map(|l| ConvLayer {
                weight: Array2::zeros(l.weight.raw_dim()),
                bias: Array1::zeros(l.bias.len()),
                stride: l.stride,
            })
            .collect();
        let mut delta =
            Array2::from_shape_vec((d_out.len(), 1), d_out.to_vec()).expect("output grid shape");
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i < last {
                // ReLU gate
                ndarray::Zip::from(&mut delta)
                    .and(&cache.pre[i])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            general_mat_mul(1.0, &delta.t(), &cache.cols[i], 0.0, &mut grads[i].weight);
            grads[i].bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut dcols = Array2::zeros(cache.cols[i].raw_dim());
                general_mat_mul(1.0, &delta, &layer.weight, 0.0, &mut dcols);
                let (w, h) = cache.dims[i];
                delta = col2im(&dcols, w, h, layer.in_channels(), layer.stride);
            }
        }
        grads
    }
}

/// Instance-normalized complexity field on the decoder's output grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityField {
    pub c_hat: Grid,
    pub mu_c: f64,
    pub sigma_c: f64,
    pub eps: f64,
}

impl ComplexityField {
    pub fn from_raw(c: &Grid) -> Self {
        let n = c.len() as f64;
        let mu = c.data.iter().sum::<f64>() / n;
        let sigma = (c.data.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
        let c_hat = Grid {
            width: c.width,
            height: c.height,
            data: c
                .data
                .iter()
                .map(|v| (v - mu) / (sigma + INSTANCE_NORM_EPS))
                .collect(),
        };
        ComplexityField {
            c_hat,
            mu_c: mu,
            sigma_c: sigma,
            eps: INSTANCE_NORM_EPS,
        }
    }

    /// Bilinear lookup at a normalized coordinate.
    pub fn value_at(&self, xy: [f64; 2]) -> f64 {
        self.c_hat.sample_bilinear(xy[0], xy[1])
    }

    /// Field resampled (bilinearly, corner-aligned) onto a `w x h` grid.
    pub fn upsample(&self, w: usize, h: usize) -> Grid {
        Grid::from_fn(w, h, |c, r| {
            self.value_at([node_coord(c, w), node_coord(r, h)])
        })
    }
}

/// `dL/dc` from `dL/dc_hat` through the instance normalization.
pub fn instance_norm_backward(c: &Grid, field: &ComplexityField, d_hat: &[f64]) -> Vec<f64> {
    let n = c.len() as f64;
    let denom = field.sigma_c + field.eps;
    let mean_d = d_hat.iter().sum::<f64>() / n;
    let centered: Vec<f64> = c.data.iter().map(|v| v - field.mu_c).collect();
    let proj: f64 = d_hat.iter().zip(&centered).map(|(d, x)| d * x).sum();
    let sigma_term = if field.sigma_c > 0.0 {
        proj / (denom * denom * n * field.sigma_c)
    } else {
        0.0
    };
    d_hat
        .iter()
        .zip(&centered)
        .map(|(d, x)| (d - mean_d) / denom - sigma_term * x)
        .collect()
}

pub fn decode_complexity(decoder: &WcfDecoder, features: &SwtFeatures) -> Result<ComplexityField> {
    if features.channels.len() != FEATURE_CHANNELS {
        return Err(Error::DimMismatch(format!(
            "{} feature channels, decoder expects {FEATURE_CHANNELS}",
            features.channels.len()
        )));
    }
    let (c, _) = decoder.forward(&FeatureMap::from_features(features));
    Ok(ComplexityField::from_raw(&c))
}

// --- thresholds and masks ---------------------------------------------------

#[inline]
pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cumulative-softplus parameterization of `K` strictly increasing thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSet {
    pub tau1: f64,
    /// `delta_2 .. delta_K`.
    pub deltas: Vec<f64>,
}

impl ThresholdSet {
    /// `tau1 = -1.5`, unit gaps: `(-1.5, -0.5, 0.5, 1.5)` for `K = 4`.
    pub fn initial(k: usize) -> Self {
        assert!(k >= 1);
        ThresholdSet {
            tau1: -1.5,
            deltas: vec![(std::f64::consts::E - 1.0).ln(); k - 1],
        }
    }

    pub fn count(&self) -> usize {
        self.deltas.len() + 1
    }

    pub fn taus(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        let mut t = self.tau1;
        out.push(t);
        for &d in &self.deltas {
            t += softplus(d);
            out.push(t);
        }
        out
    }

    /// Pulls `dL/dtau_i` back to `(dL/dtau1, dL/ddelta_i)`.
    pub fn backward(&self, d_taus: &[f64]) -> (f64, Vec<f64>) {
        let d_tau1 = d_taus.iter().sum();
        // delta_i feeds every tau_j with j >= i
        let d_deltas = self
            .deltas
            .iter()
            .enumerate()
            .map(|(i, &d)| sigmoid(d) * d_taus[i + 1..].iter().sum::<f64>())
            .collect();
        (d_tau1, d_deltas)
    }
}

pub fn thresholds(ts: &ThresholdSet) -> Vec<f64> {
    ts.taus()
}

/// `m_i = sigmoid(c_hat(xy) - tau_i)` for `i = 1..K`.
pub fn band_masks(field: &ComplexityField, ts: &ThresholdSet, xy: [f64; 2]) -> Vec<f64> {
    let c = field.value_at(xy);
    ts.taus().iter().map(|t| sigmoid(c - t)).collect()
}

/// Tiles band masks across neurons; band 0 stays fully open.
pub fn tile_masks(band_ranges: &[Range<usize>], masks: &[f64], out: &mut [f64]) {
    for (b, range) in band_ranges.iter().enumerate() {
        let m = if b == 0 { 1.0 } else { masks[b - 1] };
        out[range.clone()].fill(m);
    }
}

/// Per-point band masks `(rows, K)` for a batch of coordinates.
pub fn band_mask_matrix(
    field: &ComplexityField,
    ts: &ThresholdSet,
    coords: &[[f64; 2]],
) -> Array2<f64> {
    let taus = ts.taus();
    let mut out = Array2::zeros((coords.len(), taus.len()));
    for (i, &xy) in coords.iter().enumerate() {
        let c = field.value_at(xy);
        for (k, t) in taus.iter().enumerate() {
            out[[i, k]] = sigmoid(c - t);
        }
    }
    out
}

/// Per-neuron masks `(rows, n)` from per-band masks `(rows, K)`.
pub fn neuron_mask_matrix(band_ranges: &[Range<usize>], bands: &Array2<f64>) -> Array2<f64> {
    let n = band_ranges.last().map_or(0, |r| r.end);
    let mut out = Array2::zeros((bands.nrows(), n));
    for (i, row) in bands.outer_iter().enumerate() {
        let masks = row.to_vec();
        tile_masks(
            band_ranges,
            &masks,
            out.row_mut(i).as_slice_mut().expect("contiguous row"),
        );
    }
    out
}

/// Given `dL/dm` per point and band, returns `dL/dc_hat` on the field grid and
/// `dL/dtau`.
pub fn masks_backward(
    field: &ComplexityField,
    bands: &Array2<f64>,
    coords: &[[f64; 2]],
    d_bands: &Array2<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let g = &field.c_hat;
    let mut d_field = vec![0.0; g.len()];
    let mut d_taus = vec![0.0; bands.ncols()];
    for (i, &xy) in coords.iter().enumerate() {
        let mut d_c = 0.0;
        for k in 0..bands.ncols() {
            let m = bands[[i, k]];
            let d = d_bands[[i, k]] * m * (1.0 - m);
            d_c += d;
            d_taus[k] -= d;
        }
        if d_c == 0.0 {
            continue;
        }
        let (c0, c1, tx) = bilinear_axis(xy[0], g.width);
        let (r0, r1, ty) = bilinear_axis(xy[1], g.height);
        d_field[r0 * g.width + c0] += d_c * (1.0 - tx) * (1.0 - ty);
        d_field[r0 * g.width + c1] += d_c * tx * (1.0 - ty);
        d_field[r1 * g.width + c0] += d_c * (1.0 - tx) * ty;
        d_field[r1 * g.width + c1] += d_c * tx * ty;
    }
    (d_field, d_taus)
}

// --- sampling ---------------------------------------------------------------

/// Mixture `p = (1 - alpha)/N + alpha * c_plus / sum(c_plus)` over the cells
/// of a `dims` grid, `c_plus = max(upsampled c_hat, eps_s)`.
pub fn sampling_distribution(
    field: &ComplexityField,
    alpha: f64,
    eps_s: f64,
    dims: (usize, usize),
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in [0,1], got {alpha}"
        )));
    }
    if !(eps_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps_s must be > 0, got {eps_s}"
        )));
    }
    let up = field.upsample(dims.0, dims.1);
    let rect: Vec<f64> = up.data.iter().map(|v| v.max(eps_s)).collect();
    Ok(mixture(&rect, alpha))
}

/// Uniform/importance mixture over non-negative weights.
pub fn mixture(weights: &[f64], alpha: f64) -> Vec<f64> {
    let n = weights.len() as f64;
    let total: f64 = weights.iter().sum();
    weights
        .iter()
        .map(|w| (1.0 - alpha) / n + alpha * w / total)
        .collect()
}

/// Inverse-CDF sampler over a fixed probability vector.
#[derive(Clone, Debug)]
pub struct CdfSampler {
    cdf: Vec<f64>,
}

impl CdfSampler {
    pub fn new(p: &[f64]) -> Self {
        let mut acc = 0.0;
        let cdf = p
            .iter()
            .map(|v| {
                acc += v;
                acc
            })
            .collect();
        CdfSampler { cdf }
    }

    pub fn draw(&self, rng: &mut SeededRng) -> usize {
        let total = *self.cdf.last().expect("non-empty distribution");
        let u = rng.uniform() * total;
        self.cdf
            .partition_point(|&c| c <= u)
            .min(self.cdf.len() - 1)
    }

    pub fn draw_many(&self, rng: &mut SeededRng, count: usize) -> Vec<usize> {
        (0..count).map(|_| self.draw(rng)).collect()
    }
}

/// `count` i.i.d. draws with replacement.
pub fn draw_samples(p: &[f64], count: usize, seed: u64) -> Vec<usize> {
    let mut rng = SeededRng::new(seed);
    CdfSampler::new(p).draw_many(&mut rng, count)
}
