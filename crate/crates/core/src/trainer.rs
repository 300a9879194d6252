//! Two-phase fitting: the shape stage on the smoothed half-resolution target
//! (value + gradient matching), then the geometry stage on the normalized
//! residual with complexity masks and complexity-guided sampling.
//!
//! Parameter gradients are hand-derived. For the gradient-matching term the
//! forward pass carries input tangents `da/dx`, `da/dy` through every layer;
//! the reverse pass then propagates adjoints of both activations and tangents.
//! Per sine layer `a' = sin z`, `t' = cos(z) * zdot`:
//!
//! ```text
//! zbar    = abar' * cos z - sum_k tbar'_k * sin z * zdot_k
//! zdotbar = tbar'_k * cos z
//! ```

use std::io::Write;
use std::ops::Range;
use std::time::Instant;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{grid_coords, TerrainModel, TileMeta};
use crate::raster::{
    finite_diff_gradients, gaussian_smooth, normalize, resample_bilinear, DemTile, Grid,
    NormalizedTile,
};
use crate::rng::SeededRng;
use crate::siren::{build_frequency_table, Dense, ForwardCache, FrequencyConfig, SirenStage, Want};
use crate::wavelet::build_features;
use crate::wcf::{
    band_mask_matrix, instance_norm_backward, masks_backward, neuron_mask_matrix,
    sampling_distribution, CdfSampler, ComplexityField, ConvLayer, DecoderCache, FeatureMap,
    ThresholdSet, WcfDecoder, SAMPLING_EPS,
};

/// Rows per forward/backward chunk inside one loss evaluation.
const TRAIN_BLOCK: usize = 4096;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub shape_iters: usize,
    pub geom_iters: usize,
    pub lr: f64,
    pub lambda_grad: f64,
    /// Gradient-matching coordinates per iteration (capped at the node count).
    pub grad_samples: usize,
    pub shape_subsample_frac: f64,
    /// Geometry batch as a fraction of the grid; `>= 1` trains on every node.
    pub geom_sample_frac: f64,
    pub alpha: f64,
    pub sigma_smooth: f64,
    pub omega0_shape: f64,
    pub omega0_geom: f64,
    pub width: usize,
    pub hidden_layers: usize,
    pub use_masks: bool,
    pub shape_freq: FrequencyConfig,
    pub geom_freq: FrequencyConfig,
    /// Frequency tables and initial weights derive from this.
    pub init_seed: u64,
    /// Per-iteration coordinate draws derive from this.
    pub sample_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            shape_iters: 3000,
            geom_iters: 2000,
            lr: 1e-4,
            lambda_grad: 0.1,
            grad_samples: 10_000,
            shape_subsample_frac: 0.25,
            geom_sample_frac: 0.25,
            alpha: 0.75,
            sigma_smooth: 4.0,
            omega0_shape: 30.0,
            omega0_geom: 150.0,
            width: 128,
            hidden_layers: 3,
            use_masks: true,
            shape_freq: FrequencyConfig::shape_default(),
            geom_freq: FrequencyConfig::geometry_default(),
            init_seed: 0,
            sample_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.shape_subsample_frac > 0.0 && self.shape_subsample_frac <= 1.0) {
            return bad(format!(
                "shape_subsample_frac must be in (0,1], got {}",
                self.shape_subsample_frac
            ));
        }
        if !(self.geom_sample_frac > 0.0) {
            return bad(format!(
                "geom_sample_frac must be > 0, got {}",
                self.geom_sample_frac
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must be in [0,1], got {}", self.alpha));
        }
        if self.shape_iters == 0 || self.geom_iters == 0 {
            return bad("iteration counts must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(self.lambda_grad >= 0.0) || self.grad_samples == 0 {
            return bad("lr and grad_samples must be positive, lambda_grad >= 0".into());
        }
        if !(self.sigma_smooth > 0.0) || self.width == 0 {
            return bad("sigma_smooth and width must be positive".into());
        }
        if self.shape_freq.gated_bands() != 0 {
            return bad("the shape stage has no gated bands".into());
        }
        Ok(())
    }
}

/// splitmix64 of `base ^ tag`; keeps the per-purpose streams independent.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z =
        (base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

mod tag {
    pub const SHAPE_FREQ: u64 = 1;
    pub const SHAPE_INIT: u64 = 2;
    pub const GEOM_FREQ: u64 = 3;
    pub const GEOM_INIT: u64 = 4;
    pub const DECODER: u64 = 5;
    pub const SHAPE_DRAWS: u64 = 6;
    pub const GEOM_DRAWS: u64 = 7;
}

// --- parameter vectors -------------------------------------------------------

fn layers(stage: &SirenStage) -> impl Iterator<Item = &Dense> {
    stage.hidden.iter().chain(std::iter::once(&stage.output))
}

fn flatten_dense<'a>(it: impl Iterator<Item = &'a Dense>, out: &mut Vec<f64>) {
    for l in it {
        out.extend(l.weight.iter());
        out.extend(l.bias.iter());
    }
}

/// Trainable parameters in a fixed order: per layer, weights row-major then bias.
pub fn stage_params(stage: &SirenStage) -> Vec<f64> {
    let mut out = Vec::with_capacity(stage.parameter_count());
    flatten_dense(layers(stage), &mut out);
    out
}

/// Inverse of [`stage_params`]; returns the number of values consumed.
pub fn set_stage_params(stage: &mut SirenStage, values: &[f64]) -> usize {
    let mut i = 0;
    for l in stage
        .hidden
        .iter_mut()
        .chain(std::iter::once(&mut stage.output))
    {
        for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            *v = values[i];
            i += 1;
        }
    }
    i
}

fn decoder_params(dec: &WcfDecoder, out: &mut Vec<f64>) {
    for l in &dec.layers {
        out.extend(l.weight.iter());
        out.extend(l.bias.iter());
    }
}

fn set_decoder_params(dec: &mut WcfDecoder, values: &[f64]) -> usize {
    let mut i = 0;
    for l in &mut dec.layers {
        for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            *v = values[i];
            i += 1;
        }
    }
    i
}

/// Gradients shaped like a stage's trainable layers.
#[derive(Clone, Debug, PartialEq)]
pub struct StageGrads {
    pub hidden: Vec<Dense>,
    pub output: Dense,
}

impl StageGrads {
    pub fn zeros_like(stage: &SirenStage) -> Self {
        StageGrads {
            hidden: stage
                .hidden
                .iter()
                .map(|l| Dense::zeros(l.fan_out(), l.fan_in()))
                .collect(),
            output: Dense::zeros(1, stage.output.fan_in()),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        flatten_dense(
            self.hidden.iter().chain(std::iter::once(&self.output)),
            &mut out,
        );
        out
    }
}

/// Geometry-phase parameters flattened as stage, decoder, `tau1`, deltas.
pub fn geometry_params(stage: &SirenStage, dec: &WcfDecoder, ts: &ThresholdSet) -> Vec<f64> {
    let mut out = stage_params(stage);
    decoder_params(dec, &mut out);
    out.push(ts.tau1);
    out.extend(&ts.deltas);
    out
}

pub fn set_geometry_params(
    stage: &mut SirenStage,
    dec: &mut WcfDecoder,
    ts: &mut ThresholdSet,
    values: &[f64],
) {
    let mut i = set_stage_params(stage, values);
    i += set_decoder_params(dec, &values[i..]);
    ts.tau1 = values[i];
    let k = ts.deltas.len();
    ts.deltas.copy_from_slice(&values[i + 1..i + 1 + k]);
}

// --- adam --------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update in place. Non-finite gradients are rejected
/// before any state changes.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::DimMismatch(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
    Ok(())
}

// --- stage losses --------------------------------------------------------------

/// Frozen first-layer activations at every node of a training grid.
#[derive(Clone, Debug)]
pub struct FirstLayerTable {
    pub sin: Array2<f64>,
    pub cos: Array2<f64>,
}

impl FirstLayerTable {
    pub fn new(stage: &SirenStage, coords: &[[f64; 2]]) -> Self {
        let (sin, cos) = stage.first_layer(coords);
        FirstLayerTable { sin, cos }
    }

    fn gather(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (self.sin.select(Axis(0), idx), self.cos.select(Axis(0), idx))
    }
}

/// Where a term's first layer comes from: computed from `coords`, or gathered
/// from a table by node index (`idx[i]` is the node of `coords[i]`).
#[derive(Clone, Copy)]
pub struct NodeRows<'a> {
    pub table: &'a FirstLayerTable,
    pub idx: &'a [usize],
}

fn first_rows(
    stage: &SirenStage,
    coords: &[[f64; 2]],
    nodes: Option<NodeRows>,
    range: Range<usize>,
) -> (Array2<f64>, Array2<f64>) {
    match nodes {
        Some(n) => n.table.gather(&n.idx[range]),
        None => stage.first_layer(&coords[range]),
    }
}

/// Value supervision `(1/N) sum (f - y)^2`.
pub struct ValueTerm<'a> {
    pub coords: &'a [[f64; 2]],
    pub targets: &'a [f64],
    /// Per-neuron first-layer masks `(N, n)`.
    pub masks: Option<ArrayView2<'a, f64>>,
    pub nodes: Option<NodeRows<'a>>,
}

/// Gradient supervision `lambda * (1/M) sum |grad f - g|^2`.
pub struct GradTerm<'a> {
    pub coords: &'a [[f64; 2]],
    pub targets: &'a [[f64; 2]],
    pub lambda: f64,
    pub nodes: Option<NodeRows<'a>>,
}

#[derive(Clone, Debug)]
pub struct StageLoss {
    /// `mse + lambda * grad_loss`.
    pub loss: f64,
    pub mse: f64,
    pub grad_loss: f64,
    pub grads: StageGrads,
    /// `dL/dmask`, present when the value term carries masks.
    pub d_masks: Option<Array2<f64>>,
}

fn outer(col: ndarray::ArrayView1<f64>, row: ndarray::ArrayView1<f64>) -> Array2<f64> {
    let c = col.insert_axis(Axis(1));
    let r = row.insert_axis(Axis(0));
    &c * &r
}

fn mul(a: &Array2<f64>, b: &Array2<f64>, scale: f64) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(scale, a, b, 0.0, &mut c);
    c
}

/// Reverse pass over one cached forward. `f_bar` is `dL/df` per row, `g_bar`
/// the `(rows, 2)` adjoint of the input gradient (needs tangents in the cache).
/// Returns the adjoints of the first-layer activation and its tangents when
/// `want_first` is set.
#[allow(clippy::type_complexity)]
fn backward_stage(
    stage: &SirenStage,
    cache: &ForwardCache,
    f_bar: &Array1<f64>,
    g_bar: Option<&Array2<f64>>,
    want_first: bool,
    grads: &mut StageGrads,
) -> Option<(Array2<f64>, Option<[Array2<f64>; 2]>)> {
    let om = stage.omega0;
    let w_out = stage.output.weight.row(0);
    let top = cache.acts.last().expect("at least one activation");
    {
        let mut gw = grads.output.weight.row_mut(0);
        gw += &top.t().dot(f_bar);
        grads.output.bias[0] += f_bar.sum();
    }
    let mut a_bar = outer(f_bar.view(), w_out);
    let mut t_bar: Option<[Array2<f64>; 2]> = None;
    if let Some(gb) = g_bar {
        let ts = cache.tangents.as_ref().expect("tangents for gradient term");
        let top_t = ts.last().expect("tangent per layer");
        let mut gw = grads.output.weight.row_mut(0);
        for k in 0..2 {
            gw += &top_t[k].t().dot(&gb.column(k));
        }
        t_bar = Some([outer(gb.column(0), w_out), outer(gb.column(1), w_out)]);
    }
    for l in (0..stage.hidden.len()).rev() {
        let layer = &stage.hidden[l];
        let cos = &cache.cos[l];
        let sin = &cache.acts[l + 1];
        let a_in = &cache.acts[l];
        let need_input = l > 0 || want_first;
        let mut z_bar = &a_bar * cos;
        let mut next_t = None;
        if let Some(tb) = t_bar.take() {
            let t_in = &cache.tangents.as_ref().expect("tangents")[l];
            let zdots = &cache.zdots.as_ref().expect("tangents")[l];
            let mut nt: [Array2<f64>; 2] = [Array2::zeros((0, 0)), Array2::zeros((0, 0))];
            for k in 0..2 {
                ndarray::Zip::from(&mut z_bar)
                    .and(&tb[k])
                    .and(sin)
                    .and(&zdots[k])
                    .for_each(|zb, &t, &s, &zd| *zb -= t * s * zd);
                let zd_bar = &tb[k] * cos;
                general_mat_mul(om, &zd_bar.t(), &t_in[k], 1.0, &mut grads.hidden[l].weight);
                if need_input {
                    nt[k] = mul(&zd_bar, &layer.weight, om);
                }
            }
            next_t = Some(nt);
        }
        general_mat_mul(om, &z_bar.t(), a_in, 1.0, &mut grads.hidden[l].weight);
        grads.hidden[l]
            .bias
            .scaled_add(om, &z_bar.sum_axis(Axis(0)));
        if need_input {
            a_bar = mul(&z_bar, &layer.weight, om);
        }
        t_bar = next_t;
    }
    want_first.then_some((a_bar, t_bar))
}

/// `dL/dmask` from first-layer adjoints: `a0 = sin(z0) * m`,
/// `t0_k = cos(z0) * m * 2 pi omega_k`.
fn mask_adjoint(
    stage: &SirenStage,
    cache: &ForwardCache,
    a_bar: &Array2<f64>,
    t_bar: Option<&[Array2<f64>; 2]>,
) -> Array2<f64> {
    let mut d = a_bar * &cache.first_sin;
    if let Some(tb) = t_bar {
        for (j, w) in stage.freq.rows.iter().enumerate() {
            let scale = [
                std::f64::consts::TAU * w[0] as f64,
                std::f64::consts::TAU * w[1] as f64,
            ];
            let mut col = d.column_mut(j);
            for k in 0..2 {
                ndarray::Zip::from(&mut col)
                    .and(tb[k].column(j))
                    .and(cache.first_cos.column(j))
                    .for_each(|v, &t, &c| *v += t * c * scale[k]);
            }
        }
    }
    d
}

/// Loss and exact parameter gradients of `mse + lambda * grad_loss`. Either
/// term may be absent; a zero `lambda` skips the gradient pass entirely.
pub fn stage_loss_and_grads(
    stage: &SirenStage,
    value: Option<&ValueTerm>,
    grad: Option<&GradTerm>,
) -> StageLoss {
    let mut grads = StageGrads::zeros_like(stage);
    let mut mse = 0.0;
    let mut grad_loss = 0.0;
    let mut d_masks = None;

    if let Some(vt) = value {
        let n = vt.coords.len();
        assert_eq!(vt.targets.len(), n, "value targets");
        let mut dm = vt.masks.as_ref().map(|m| Array2::zeros(m.raw_dim()));
        for start in (0..n).step_by(TRAIN_BLOCK) {
            let end = (start + TRAIN_BLOCK).min(n);
            let mask = vt.masks.as_ref().map(|m| m.slice(s![start..end, ..]));
            let (fs, fc) = first_rows(stage, vt.coords, vt.nodes, start..end);
            let cache = stage.forward_from_first(fs, fc, mask, false);
            let resid = &cache.values - &Array1::from(vt.targets[start..end].to_vec());
            mse += resid.iter().map(|r| r * r).sum::<f64>();
            let f_bar = resid * (2.0 / n as f64);
            let first = backward_stage(stage, &cache, &f_bar, None, dm.is_some(), &mut grads);
            if let (Some(dm), Some((a_bar, _))) = (dm.as_mut(), first) {
                let d = mask_adjoint(stage, &cache, &a_bar, None);
                dm.slice_mut(s![start..end, ..]).assign(&d);
            }
        }
        mse /= n.max(1) as f64;
        d_masks = dm;
    }

    let mut lambda = 0.0;
    if let Some(gt) = grad.filter(|g| g.lambda != 0.0) {
        lambda = gt.lambda;
        let m = gt.coords.len();
        assert_eq!(gt.targets.len(), m, "gradient targets");
        for start in (0..m).step_by(TRAIN_BLOCK) {
            let end = (start + TRAIN_BLOCK).min(m);
            let (fs, fc) = first_rows(stage, gt.coords, gt.nodes, start..end);
            let cache = stage.forward_from_first(fs, fc, None, true);
            let g = cache.grads.as_ref().expect("tangent pass yields grads");
            let mut g_bar = Array2::zeros((end - start, 2));
            for i in 0..end - start {
                for k in 0..2 {
                    let d = g[[i, k]] - gt.targets[start + i][k];
                    grad_loss += d * d;
                    g_bar[[i, k]] = 2.0 * lambda * d / m as f64;
                }
            }
            let f_bar = Array1::zeros(end - start);
            backward_stage(stage, &cache, &f_bar, Some(&g_bar), false, &mut grads);
        }
        grad_loss /= m.max(1) as f64;
    }

    StageLoss {
        loss: mse + lambda * grad_loss,
        mse,
        grad_loss,
        grads,
        d_masks,
    }
}

// --- geometry loss ----------------------------------------------------------------

/// Decoder output for the current parameters, kept for back-propagation.
#[derive(Clone, Debug)]
pub struct DecodedField {
    pub raw: Grid,
    pub cache: DecoderCache,
    pub field: ComplexityField,
}

pub fn decode_field(decoder: &WcfDecoder, features: &FeatureMap) -> DecodedField {
    let (raw, cache) = decoder.forward(features);
    let field = ComplexityField::from_raw(&raw);
    DecodedField { raw, cache, field }
}

#[derive(Clone, Debug)]
pub struct GeometryGrads {
    pub stage: StageGrads,
    pub decoder: Vec<ConvLayer>,
    pub tau1: f64,
    pub deltas: Vec<f64>,
}

impl GeometryGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.stage.flatten();
        for l in &self.decoder {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out.push(self.tau1);
        out.extend(&self.deltas);
        out
    }
}

/// Sum of per-neuron mask adjoints over each gated band, `(rows, K)`.
fn band_adjoints(ranges: &[Range<usize>], d_masks: &Array2<f64>) -> Array2<f64> {
    let k = ranges.len() - 1;
    let mut out = Array2::zeros((d_masks.nrows(), k));
    for (b, r) in ranges.iter().enumerate().skip(1) {
        let sums = d_masks.slice(s![.., r.clone()]).sum_axis(Axis(1));
        out.column_mut(b - 1).assign(&sums);
    }
    out
}

/// Masked-geometry MSE and gradients for the stage, the decoder and the
/// thresholds. With `use_masks == false` masks are fixed at 1 and the decoder
/// and thresholds receive zero gradient.
pub fn geometry_loss_and_grads(
    stage: &SirenStage,
    decoder: &WcfDecoder,
    ts: &ThresholdSet,
    decoded: &DecodedField,
    coords: &[[f64; 2]],
    targets: &[f64],
    nodes: Option<NodeRows>,
    use_masks: bool,
) -> (f64, GeometryGrads) {
    let zero_decoder: Vec<ConvLayer> = decoder
        .layers
        .iter()
        .map(|l| ConvLayer {
            weight: Array2::zeros(l.weight.raw_dim()),
            bias: Array1::zeros(l.bias.len()),
            stride: l.stride,
        })
        .collect();
    if !use_masks {
        let vt = ValueTerm {
            coords,
            targets,
            masks: None,
            nodes,
        };
        let sl = stage_loss_and_grads(stage, Some(&vt), None);
        return (
            sl.loss,
            GeometryGrads {
                stage: sl.grads,
                decoder: zero_decoder,
                tau1: 0.0,
                deltas: vec![0.0; ts.deltas.len()],
            },
        );
    }
    let ranges = stage.freq.band_ranges();
    assert_eq!(ts.count(), ranges.len() - 1, "one threshold per gated band");
    let bands = band_mask_matrix(&decoded.field, ts, coords);
    let masks = neuron_mask_matrix(&ranges, &bands);
    let vt = ValueTerm {
        coords,
        targets,
        masks: Some(masks.view()),
        nodes,
    };
    let sl = stage_loss_and_grads(stage, Some(&vt), None);
    let d_masks = sl.d_masks.expect("masked value term");
    let d_bands = band_adjoints(&ranges, &d_masks);
    let (d_hat, d_taus) = masks_backward(&decoded.field, &bands, coords, &d_bands);
    let d_raw = instance_norm_backward(&decoded.raw, &decoded.field, &d_hat);
    let dec_grads = decoder.backward(&decoded.cache, &d_raw);
    let (tau1, deltas) = ts.backward(&d_taus);
    (
        sl.loss,
        GeometryGrads {
            stage: sl.grads,
            decoder: dec_grads,
            tau1,
            deltas,
        },
    )
}

// --- logging -------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub iter: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

/// Line-delimited JSON training log; every `every`-th iteration and the last.
pub struct TrainLog<'a> {
    sink: Option<&'a mut dyn Write>,
    every: usize,
}

impl<'a> TrainLog<'a> {
    pub fn none() -> Self {
        TrainLog {
            sink: None,
            every: 1,
        }
    }

    pub fn to(sink: &'a mut dyn Write, every: usize) -> Self {
        TrainLog {
            sink: Some(sink),
            every: every.max(1),
        }
    }

    fn record(&mut self, phase: &str, iter: usize, last: bool, loss: f64, start: Instant) {
        let Some(sink) = self.sink.as_mut() else {
            return;
        };
        if iter % self.every != 0 && !last {
            return;
        }
        let rec = LogRecord {
            phase: phase.to_string(),
            iter,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if let Ok(line) = serde_json::to_string(&rec) {
            // the log is advisory; a closed pipe must not abort training
            let _ = writeln!(sink, "{line}");
        }
    }
}

fn check_loss(loss: f64, phase: &str, iter: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{phase} loss at iteration {iter}"
        )))
    }
}

// --- phases -----------------------------------------------------------------------------

/// Normalized tile smoothed with `sigma` and downsampled to half resolution.
pub fn shape_target(norm: &NormalizedTile, sigma: f64) -> Result<NormalizedTile> {
    let smooth = gaussian_smooth(norm, sigma)?;
    resample_bilinear(&smooth, norm.width().div_ceil(2), norm.height().div_ceil(2))
}

pub fn new_shape_stage(cfg: &TrainConfig) -> Result<SirenStage> {
    let freq = build_frequency_table(derive_seed(cfg.init_seed, tag::SHAPE_FREQ), &cfg.shape_freq)?;
    Ok(SirenStage::new(
        freq,
        cfg.omega0_shape,
        cfg.width,
        cfg.hidden_layers,
        derive_seed(cfg.init_seed, tag::SHAPE_INIT),
    ))
}

pub fn new_geometry_stage(cfg: &TrainConfig) -> Result<SirenStage> {
    let freq = build_frequency_table(derive_seed(cfg.init_seed, tag::GEOM_FREQ), &cfg.geom_freq)?;
    Ok(SirenStage::new(
        freq,
        cfg.omega0_geom,
        cfg.width,
        cfg.hidden_layers,
        derive_seed(cfg.init_seed, tag::GEOM_INIT),
    ))
}

/// Fits the shape stage to a (smoothed, half-resolution) target with value
/// and gradient supervision at grid nodes.
pub fn fit_shape(
    target: &NormalizedTile,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<SirenStage> {
    cfg.validate()?;
    let g = &target.grid;
    let grads = finite_diff_gradients(g)?;
    let coords = grid_coords(g.width, g.height);
    let n = coords.len();
    let n_mse = ((cfg.shape_subsample_frac * n as f64).floor() as usize).clamp(1, n);
    let n_gm = cfg.grad_samples.min(n);
    let mut stage = new_shape_stage(cfg)?;
    let table = FirstLayerTable::new(&stage, &coords);
    let mut params = stage_params(&stage);
    let mut adam = AdamState::new(params.len());
    let mut rng = SeededRng::new(derive_seed(cfg.sample_seed, tag::SHAPE_DRAWS));
    let start = Instant::now();
    for it in 0..cfg.shape_iters {
        let mse_idx = rng.sample_without_replacement(n, n_mse);
        let gm_idx = rng.sample_without_replacement(n, n_gm);
        let mse_coords: Vec<[f64; 2]> = mse_idx.iter().map(|&i| coords[i]).collect();
        let mse_targets: Vec<f64> = mse_idx.iter().map(|&i| g.data[i]).collect();
        let gm_coords: Vec<[f64; 2]> = gm_idx.iter().map(|&i| coords[i]).collect();
        let gm_targets: Vec<[f64; 2]> = gm_idx
            .iter()
            .map(|&i| [grads.gx.data[i], grads.gy.data[i]])
            .collect();
        let sl = stage_loss_and_grads(
            &stage,
            Some(&ValueTerm {
                coords: &mse_coords,
                targets: &mse_targets,
                masks: None,
                nodes: Some(NodeRows {
                    table: &table,
                    idx: &mse_idx,
                }),
            }),
            Some(&GradTerm {
                coords: &gm_coords,
                targets: &gm_targets,
                lambda: cfg.lambda_grad,
                nodes: Some(NodeRows {
                    table: &table,
                    idx: &gm_idx,
                }),
            }),
        );
        check_loss(sl.loss, "shape", it)?;
        log.record("shape", it, it + 1 == cfg.shape_iters, sl.loss, start);
        adam_step(&mut params, &sl.grads.flatten(), &mut adam, cfg.lr)?;
        set_stage_params(&mut stage, &params);
    }
    Ok(stage)
}

/// Geometry-phase output.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryFit {
    pub stage: SirenStage,
    pub decoder: WcfDecoder,
    pub thresholds: ThresholdSet,
    pub field: ComplexityField,
    pub residual_scale: f64,
}

/// Residual of `target` against the shape stage on the full grid.
pub fn shape_residual(target: &Grid, shape: &SirenStage) -> Result<Grid> {
    let coords = grid_coords(target.width, target.height);
    let vals = shape.batch_eval(&coords, None, Want::Value)?;
    Grid::new(
        target.width,
        target.height,
        target
            .data
            .iter()
            .zip(&vals)
            .map(|(t, v)| t - v.value)
            .collect(),
    )
}

/// `rho = max |r|`, or 1 for an all-zero residual.
pub fn residual_scale(r: &Grid) -> f64 {
    let m = r.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Fits the geometry stage, decoder and thresholds to the scaled residual of
/// `target` (full-resolution normalized tile) against `shape`.
pub fn fit_geometry(
    target: &Grid,
    shape: &SirenStage,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<GeometryFit> {
    cfg.validate()?;
    let r = shape_residual(target, shape)?;
    let rho = residual_scale(&r);
    let scaled = Grid::new(r.width, r.height, r.data.iter().map(|v| v / rho).collect())?;
    fit_geometry_scaled(&scaled, rho, cfg, log)
}

/// Geometry fit on an already scaled residual.
pub fn fit_geometry_scaled(
    scaled: &Grid,
    rho: f64,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<GeometryFit> {
    let k = cfg.geom_freq.gated_bands();
    if k == 0 {
        return Err(Error::InvalidArgument(
            "the geometry stage needs at least one gated band".into(),
        ));
    }
    let features = FeatureMap::from_features(&build_features(scaled)?);
    let coords = grid_coords(scaled.width, scaled.height);
    let n = coords.len();
    let full_grid = cfg.geom_sample_frac >= 1.0;
    let count = ((cfg.geom_sample_frac * n as f64).floor() as usize).clamp(1, n);

    let mut stage = new_geometry_stage(cfg)?;
    let mut decoder = WcfDecoder::new(derive_seed(cfg.init_seed, tag::DECODER));
    let mut ts = ThresholdSet::initial(k);
    let table = FirstLayerTable::new(&stage, &coords);
    let all_nodes: Vec<usize> = (0..n).collect();
    let mut params = geometry_params(&stage, &decoder, &ts);
    let mut adam = AdamState::new(params.len());
    let mut rng = SeededRng::new(derive_seed(cfg.sample_seed, tag::GEOM_DRAWS));
    let start = Instant::now();
    let all_targets = &scaled.data;
    for it in 0..cfg.geom_iters {
        let decoded = decode_field(&decoder, &features);
        let idx = if full_grid {
            all_nodes.clone()
        } else {
            let p = sampling_distribution(
                &decoded.field,
                cfg.alpha,
                SAMPLING_EPS,
                (scaled.width, scaled.height),
            )?;
            CdfSampler::new(&p).draw_many(&mut rng, count)
        };
        let (batch, targets): (Vec<[f64; 2]>, Vec<f64>) =
            idx.iter().map(|&i| (coords[i], all_targets[i])).unzip();
        let (loss, grads) = geometry_loss_and_grads(
            &stage,
            &decoder,
            &ts,
            &decoded,
            &batch,
            &targets,
            Some(NodeRows {
                table: &table,
                idx: &idx,
            }),
            cfg.use_masks,
        );
        check_loss(loss, "geometry", it)?;
        log.record("geometry", it, it + 1 == cfg.geom_iters, loss, start);
        adam_step(&mut params, &grads.flatten(), &mut adam, cfg.lr)?;
        set_geometry_params(&mut stage, &mut decoder, &mut ts, &params);
    }
    let field = decode_field(&decoder, &features).field;
    Ok(GeometryFit {
        stage,
        decoder,
        thresholds: ts,
        field,
        residual_scale: rho,
    })
}

/// A fitted model plus per-phase wall-clock.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: TerrainModel,
    pub shape_ms: f64,
    pub geom_ms: f64,
}

/// normalize -> smooth/downsample -> shape -> residual -> geometry.
pub fn fit_tile(tile: &DemTile, cfg: &TrainConfig, log: &mut TrainLog) -> Result<FitOutcome> {
    tile.check_trainable()?;
    cfg.validate()?;
    let norm = normalize(tile)?;
    let t0 = Instant::now();
    let target = shape_target(&norm, cfg.sigma_smooth)?;
    let shape = fit_shape(&target, cfg, log)?;
    let shape_ms = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    let geom = fit_geometry(&norm.grid, &shape, cfg, log)?;
    let geom_ms = t1.elapsed().as_secs_f64() * 1e3;
    let model = TerrainModel {
        shape,
        geom: geom.stage,
        decoder: geom.decoder,
        thresholds: geom.thresholds,
        field: geom.field,
        residual_scale: geom.residual_scale,
        use_masks: cfg.use_masks,
        meta: TileMeta {
            width: tile.width(),
            height: tile.height(),
            z_min: tile.z_min,
            z_max: tile.z_max,
            cell_size: tile.cell_size,
        },
    };
    Ok(FitOutcome {
        model,
        shape_ms,
        geom_ms,
    })
}
