//! Frequency-embedded sinusoidal network (one cascade stage).
//!
//! The frozen first layer computes `sin(2*pi*(omega . x) + phi)` with integer
//! frequency rows `omega` (cycles per unit domain), optionally gated per
//! neuron by a spatial mask. Hidden layers are `sin(omega0 * (W h + b))`, the
//! output layer is linear. Derivatives with respect to the input coordinate
//! are propagated explicitly (first order batched, second order per point).

use std::f64::consts::TAU;
use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::trig::{sin_cos, sin_cos_inplace};

/// Queries may stray this far outside `[0, 1]^2` (Newton iterates near borders).
pub const DOMAIN_SLACK: f64 = 0.1;

/// Rows per block in [`SirenStage::batch_eval`].
pub const EVAL_BLOCK: usize = 2048;

// --- frequency table -------------------------------------------------------

/// Layout of the frozen first layer: a low band with `|omega|_inf <= low_limit`
/// followed by `edges.len()` higher bands `(edges[k-1], edges[k]]`.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FrequencyConfig {
    pub low_limit: u32,
    /// Upper `|omega|_inf` edge of each high band; the last one is the bandlimit.
    pub edges: Vec<u32>,
    /// Neurons per band, low band first (`edges.len() + 1` entries).
    pub sizes: Vec<usize>,
}

impl FrequencyConfig {
    /// 128 low-frequency neurons, `|omega|_inf <= 10`, no gated bands.
    pub fn shape_default() -> Self {
        FrequencyConfig {
            low_limit: 10,
            edges: vec![],
            sizes: vec![128],
        }
    }

    /// 64 low neurons up to 6, then four 16-neuron bands up to 40.
    pub fn geometry_default() -> Self {
        FrequencyConfig {
            low_limit: 6,
            edges: vec![14, 22, 31, 40],
            sizes: vec![64, 16, 16, 16, 16],
        }
    }

    pub fn neurons(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Number of gated bands (`K`).
    pub fn gated_bands(&self) -> usize {
        self.edges.len()
    }

    pub fn bandlimit(&self) -> u32 {
        self.edges.last().copied().unwrap_or(self.low_limit)
    }

    fn band_range(&self, band: usize) -> (u32, u32) {
        if band == 0 {
            (0, self.low_limit)
        } else if band == 1 {
            (self.low_limit, self.edges[0])
        } else {
            (self.edges[band - 2], self.edges[band - 1])
        }
    }
}

/// Half-lattice points `omega != 0` with `omega_x > 0 || (omega_x == 0 && omega_y > 0)`
/// and `lo < |omega|_inf <= hi`, in a fixed scan order.
pub fn half_lattice_annulus(lo: u32, hi: u32) -> Vec<[i32; 2]> {
    let hi = hi as i32;
    let lo = lo as i32;
    let mut out = Vec::new();
    for wx in 0..=hi {
        for wy in -hi..=hi {
            let canonical = wx > 0 || (wx == 0 && wy > 0);
            let norm = wx.abs().max(wy.abs());
            if canonical && norm > lo && norm <= hi {
                out.push([wx, wy]);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyTable {
    pub config: FrequencyConfig,
    pub seed: u64,
    /// Integer frequency rows, grouped by band in band order.
    pub rows: Vec<[i32; 2]>,
    pub phases: Vec<f64>,
    pub band_of: Vec<usize>,
}

impl FrequencyTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Neuron index range of each band, low band first.
    pub fn band_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.config
            .sizes
            .iter()
            .map(|&s| {
                let r = start..start + s;
                start += s;
                r
            })
            .collect()
    }

    /// Table with explicit rows and phases, one band. For hand-built stages.
    pub fn explicit(rows: Vec<[i32; 2]>, phases: Vec<f64>) -> Self {
        assert_eq!(rows.len(), phases.len());
        let n = rows.len();
        let limit = rows
            .iter()
            .map(|r| r[0].unsigned_abs().max(r[1].unsigned_abs()))
            .max()
            .unwrap_or(0);
        FrequencyTable {
            config: FrequencyConfig {
                low_limit: limit,
                edges: vec![],
                sizes: vec![n],
            },
            seed: 0,
            rows,
            phases,
            band_of: vec![0; n],
        }
    }
}

/// Samples each band uniformly without replacement from its half-lattice
/// annulus, then draws phases uniform in `[0, 2*pi)`.
pub fn build_frequency_table(seed: u64, config: &FrequencyConfig) -> Result<FrequencyTable> {
    if config.sizes.len() != config.edges.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} band sizes for {} gated bands",
            config.sizes.len(),
            config.edges.len()
        )));
    }
    let mut prev = config.low_limit;
    for &e in &config.edges {
        if e <= prev {
            return Err(Error::InvalidArgument(format!(
                "band edges must increase: {e} after {prev}"
            )));
        }
        prev = e;
    }
    let mut rng = SeededRng::new(seed);
    let mut rows = Vec::with_capacity(config.neurons());
    let mut band_of = Vec::with_capacity(config.neurons());
    for (band, &size) in config.sizes.iter().enumerate() {
        let (lo, hi) = config.band_range(band);
        let pool = half_lattice_annulus(lo, hi);
        if pool.len() < size {
            return Err(Error::PoolExhausted {
                band,
                available: pool.len(),
                requested: size,
            });
        }
        for idx in rng.sample_without_replacement(pool.len(), size) {
            rows.push(pool[idx]);
            band_of.push(band);
        }
    }
    let phases = (0..rows.len()).map(|_| rng.uniform() * TAU).collect();
    Ok(FrequencyTable {
        config: config.clone(),
        seed,
        rows,
        phases,
        band_of,
    })
}

// --- stage ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(out: usize, input: usize) -> Self {
        Dense {
            weight: Array2::zeros((out, input)),
            bias: Array1::zeros(out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.weight
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SirenStage {
    pub freq: FrequencyTable,
    /// Hidden-layer frequency factor.
    pub omega0: f64,
    pub hidden: Vec<Dense>,
    /// `(1, width)` linear readout.
    pub output: Dense,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub value: f64,
    pub grad: [f64; 2],
    pub hessian: Option<[[f64; 2]; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Want {
    Value,
    ValueGrad,
}

/// Activations of one batched forward pass, kept for back-propagation.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub rows: usize,
    /// `sin` of the first-layer pre-activation, before masking.
    pub first_sin: Array2<f64>,
    pub first_cos: Array2<f64>,
    /// `acts[0]` is the masked first layer, `acts[l]` the output of hidden layer `l-1`.
    pub acts: Vec<Array2<f64>>,
    /// `cos` of each hidden layer's pre-activation (`cos[l]` pairs with `acts[l+1]`).
    pub cos: Vec<Array2<f64>>,
    /// Per layer, input-coordinate tangents `[d/dx, d/dy]` of `acts[l]`.
    pub tangents: Option<Vec<[Array2<f64>; 2]>>,
    /// Tangents of each hidden pre-activation (`zdots[l]` pairs with `cos[l]`).
    pub zdots: Option<Vec<[Array2<f64>; 2]>>,
    pub values: Array1<f64>,
    /// `(rows, 2)` input gradients when tangents were requested.
    pub grads: Option<Array2<f64>>,
}

pub fn check_domain(xy: [f64; 2]) -> Result<()> {
    let ok = |t: f64| t.is_finite() && (-DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(&t);
    if ok(xy[0]) && ok(xy[1]) {
        Ok(())
    } else {
        Err(Error::OutOfDomain { x: xy[0], y: xy[1] })
    }
}

/// `C = A B^T`.
fn mul_bt(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    mul_bt_scaled(a, b, 1.0)
}

fn mul_bt_scaled(a: &Array2<f64>, b: &Array2<f64>, scale: f64) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.nrows()));
    general_mat_mul(scale, a, &b.t(), 0.0, &mut c);
    c
}

impl SirenStage {
    /// Layers `n -> width (x hidden_layers) -> 1`, SIREN-initialized.
    pub fn new(
        freq: FrequencyTable,
        omega0: f64,
        width: usize,
        hidden_layers: usize,
        seed: u64,
    ) -> Self {
        let mut hidden = Vec::with_capacity(hidden_layers);
        let mut fan_in = freq.len();
        for _ in 0..hidden_layers {
            hidden.push(Dense::zeros(width, fan_in));
            fan_in = width;
        }
        let stage = SirenStage {
            freq,
            omega0,
            hidden,
            output: Dense::zeros(1, fan_in),
        };
        stage.init_trainable(seed)
    }

    /// Hidden and output weights `U(-sqrt(6/fan_in)/omega0, +sqrt(6/fan_in)/omega0)`,
    /// zero biases.
    pub fn init_trainable(mut self, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let omega0 = self.omega0;
        for layer in self
            .hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.output))
        {
            let bound = (6.0 / layer.fan_in() as f64).sqrt() / omega0;
            layer
                .weight
                .mapv_inplace(|_| (2.0 * rng.uniform() - 1.0) * bound);
            layer.bias.fill(0.0);
        }
        self
    }

    pub fn neurons(&self) -> usize {
        self.freq.len()
    }

    pub fn width(&self) -> usize {
        self.hidden.last().map_or(self.freq.len(), |l| l.fan_out())
    }

    pub fn is_finite(&self) -> bool {
        self.hidden.iter().all(Dense::is_finite) && self.output.is_finite()
    }

    pub fn parameter_count(&self) -> usize {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.output))
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Frozen first-layer `(sin, cos)` of the pre-activation at `coords`.
    pub fn first_layer(&self, coords: &[[f64; 2]]) -> (Array2<f64>, Array2<f64>) {
        let rows = coords.len();
        let n = self.freq.len();
        let mut z = Array2::zeros((rows, n));
        for (i, xy) in coords.iter().enumerate() {
            let mut row = z.row_mut(i);
            for (j, (w, phi)) in self.freq.rows.iter().zip(&self.freq.phases).enumerate() {
                row[j] = TAU * (w[0] as f64 * xy[0] + w[1] as f64 * xy[1]) + phi;
            }
        }
        let mut cos = Array2::zeros((rows, n));
        sin_cos_inplace(
            z.as_slice_mut().expect("standard layout"),
            cos.as_slice_mut().expect("standard layout"),
        );
        (z, cos)
    }

    /// Batched forward pass over `coords`, optionally with a `(rows, n)` mask
    /// and first-order input tangents. No domain checks.
    pub fn forward_cached(
        &self,
        coords: &[[f64; 2]],
        mask: Option<ArrayView2<f64>>,
        with_tangents: bool,
    ) -> ForwardCache {
        let (first_sin, first_cos) = self.first_layer(coords);
        self.forward_from_first(first_sin, first_cos, mask, with_tangents)
    }

    /// Forward pass from a precomputed first layer (see [`Self::first_layer`]).
    pub fn forward_from_first(
        &self,
        first_sin: Array2<f64>,
        first_cos: Array2<f64>,
        mask: Option<ArrayView2<f64>>,
        with_tangents: bool,
    ) -> ForwardCache {
        let rows = first_sin.nrows();
        let n = self.freq.len();
        assert_eq!(first_sin.dim(), (rows, n), "first layer shape");
        if let Some(m) = &mask {
            assert_eq!(m.dim(), (rows, n), "mask shape");
        }
        let mut act = match &mask {
            Some(m) => &first_sin * m,
            None => first_sin.clone(),
        };
        let mut tangent = if with_tangents {
            let mut tx = first_cos.clone();
            if let Some(m) = &mask {
                tx *= m;
            }
            let mut ty = tx.clone();
            for (j, w) in self.freq.rows.iter().enumerate() {
                tx.column_mut(j).mapv_inplace(|v| v * TAU * w[0] as f64);
                ty.column_mut(j).mapv_inplace(|v| v * TAU * w[1] as f64);
            }
            Some([tx, ty])
        } else {
            None
        };

        let mut acts = Vec::with_capacity(self.hidden.len() + 1);
        let mut coss = Vec::with_capacity(self.hidden.len());
        let mut tangents = with_tangents.then(|| Vec::with_capacity(self.hidden.len() + 1));
        let mut zdots = with_tangents.then(|| Vec::with_capacity(self.hidden.len()));
        for layer in &self.hidden {
            let mut z = mul_bt(&act, &layer.weight);
            z += &layer.bias;
            z *= self.omega0;
            let mut cos = Array2::zeros(z.raw_dim());
            sin_cos_inplace(
                z.as_slice_mut().expect("standard layout"),
                cos.as_slice_mut().expect("standard layout"),
            );
            let next_tangent = tangent.as_ref().map(|[tx, ty]| {
                let zx = mul_bt_scaled(tx, &layer.weight, self.omega0);
                let zy = mul_bt_scaled(ty, &layer.weight, self.omega0);
                let next = [&zx * &cos, &zy * &cos];
                if let Some(zd) = zdots.as_mut() {
                    zd.push([zx, zy]);
                }
                next
            });
            acts.push(std::mem::replace(&mut act, z));
            if let (Some(ts), Some(t)) = (tangents.as_mut(), tangent.take()) {
                ts.push(t);
            }
            tangent = next_tangent;
            coss.push(cos);
        }
        let w_out = self.output.weight.row(0);
        let values = act.dot(&w_out) + self.output.bias[0];
        let grads = tangent.as_ref().map(|[tx, ty]| {
            let mut g = Array2::zeros((rows, 2));
            g.column_mut(0).assign(&tx.dot(&w_out));
            g.column_mut(1).assign(&ty.dot(&w_out));
            g
        });
        acts.push(act);
        if let (Some(ts), Some(t)) = (tangents.as_mut(), tangent) {
            ts.push(t);
        }
        ForwardCache {
            rows,
            first_sin,
            first_cos,
            acts,
            cos: coss,
            tangents,
            zdots,
            values,
            grads,
        }
    }

    /// Evaluates many coordinates in blocks; results match per-point evaluation.
    pub fn batch_eval(
        &self,
        coords: &[[f64; 2]],
        masks: Option<ArrayView2<f64>>,
        want: Want,
    ) -> Result<Vec<EvalResult>> {
        if coords.is_empty() {
            return Err(Error::InvalidArgument("empty coordinate batch".into()));
        }
        for &xy in coords {
            check_domain(xy)?;
        }
        let mut out = Vec::with_capacity(coords.len());
        for (b, block) in coords.chunks(EVAL_BLOCK).enumerate() {
            let start = b * EVAL_BLOCK;
            let m = masks
                .as_ref()
                .map(|m| m.slice_axis(Axis(0), (start..start + block.len()).into()));
            let cache = self.forward_cached(block, m, want == Want::ValueGrad);
            for i in 0..block.len() {
                let grad = cache
                    .grads
                    .as_ref()
                    .map_or([0.0; 2], |g| [g[[i, 0]], g[[i, 1]]]);
                out.push(EvalResult {
                    value: cache.values[i],
                    grad,
                    hessian: None,
                });
            }
        }
        Ok(out)
    }

    fn single(&self, xy: [f64; 2], mask: Option<&[f64]>, want: Want) -> Result<EvalResult> {
        let mask = match mask {
            Some(m) => {
                if m.len() != self.neurons() {
                    return Err(Error::DimMismatch(format!(
                        "mask of length {} for {} neurons",
                        m.len(),
                        self.neurons()
                    )));
                }
                Some(Array2::from_shape_vec((1, m.len()), m.to_vec()).expect("mask shape"))
            }
            None => None,
        };
        Ok(self.batch_eval(&[xy], mask.as_ref().map(|m| m.view()), want)?[0])
    }

    pub fn forward(&self, xy: [f64; 2], mask: Option<&[f64]>) -> Result<f64> {
        Ok(self.single(xy, mask, Want::Value)?.value)
    }

    /// Value and input gradient; the mask is treated as locally constant.
    pub fn eval_with_grad(&self, xy: [f64; 2], mask: Option<&[f64]>) -> Result<EvalResult> {
        self.single(xy, mask, Want::ValueGrad)
    }

    /// Value, gradient and Hessian of the unmasked stage by second-order
    /// forward propagation.
    pub fn eval_with_hessian(&self, xy: [f64; 2]) -> Result<EvalResult> {
        check_domain(xy)?;
        let n = self.freq.len();
        let mut a = vec![0.0; n];
        let mut da = [vec![0.0; n], vec![0.0; n]];
        // second derivatives xx, xy, yy
        let mut dda = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (j, (w, phi)) in self.freq.rows.iter().zip(&self.freq.phases).enumerate() {
            let (wx, wy) = (TAU * w[0] as f64, TAU * w[1] as f64);
            let (s, c) = sin_cos(wx * xy[0] + wy * xy[1] + phi);
            a[j] = s;
            da[0][j] = wx * c;
            da[1][j] = wy * c;
            dda[0][j] = -wx * wx * s;
            dda[1][j] = -wx * wy * s;
            dda[2][j] = -wy * wy * s;
        }
        const PAIRS: [(usize, usize); 3] = [(0, 0), (0, 1), (1, 1)];
        for layer in &self.hidden {
            let out = layer.fan_out();
            let mut na = vec![0.0; out];
            let mut nda = [vec![0.0; out], vec![0.0; out]];
            let mut ndda = [vec![0.0; out], vec![0.0; out], vec![0.0; out]];
            for o in 0..out {
                let w = layer.weight.row(o);
                let mut u = layer.bias[o];
                let mut du = [0.0; 2];
                let mut ddu = [0.0; 3];
                for (k, &wk) in w.iter().enumerate() {
                    u += wk * a[k];
                    du[0] += wk * da[0][k];
                    du[1] += wk * da[1][k];
                    for p in 0..3 {
                        ddu[p] += wk * dda[p][k];
                    }
                }
                let (s, c) = sin_cos(self.omega0 * u);
                let w0 = self.omega0;
                na[o] = s;
                nda[0][o] = w0 * c * du[0];
                nda[1][o] = w0 * c * du[1];
                for (p, &(i, j)) in PAIRS.iter().enumerate() {
                    ndda[p][o] = w0 * c * ddu[p] - w0 * w0 * s * du[i] * du[j];
                }
            }
            a = na;
            da = nda;
            dda = ndda;
        }
        let w = self.output.weight.row(0);
        let dot = |v: &[f64]| w.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        let value = dot(&a) + self.output.bias[0];
        let grad = [dot(&da[0]), dot(&da[1])];
        let hxy = dot(&dda[1]);
        Ok(EvalResult {
            value,
            grad,
            hessian: Some([[dot(&dda[0]), hxy], [hxy, dot(&dda[2])]]),
        })
    }
}
