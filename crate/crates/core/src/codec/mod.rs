//! Model container: quantized, entropy-coded parameter groups behind a fixed
//! little-endian header. The byte layout is documented in `docs/FORMAT.md`.

pub mod entropy;
pub mod quant;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::model::{TerrainModel, TileMeta};
use crate::raster::Grid;
use crate::siren::{build_frequency_table, Dense, FrequencyConfig, FrequencyTable, SirenStage};
use crate::wcf::{ComplexityField, ThresholdSet, WcfDecoder, DECODER_HIDDEN, INSTANCE_NORM_EPS};

pub use entropy::{decode_symbols, encode_symbols, entropy_decode, entropy_encode};
pub use quant::{check_bits, qmax, FieldCode, Granularity, QuantizedTensor};

pub const MAGIC: &[u8; 4] = b"ITV2";
pub const VERSION: u16 = 1;
/// Bit-width code for groups stored as raw little-endian f64.
pub const PASSTHROUGH_BITS: u8 = 64;

const TABLE_SEEDED: u8 = 0;
const TABLE_EXPLICIT: u8 = 1;

/// Bit-widths per group family; `overrides` wins for a named group.
#[derive(Clone, Debug, PartialEq)]
pub struct PackConfig {
    pub b_shape: u8,
    pub b_geom: u8,
    pub b_wcf: u8,
    pub b_field: u8,
    pub overrides: BTreeMap<String, u8>,
}

impl Default for PackConfig {
    fn default() -> Self {
        PackConfig {
            b_shape: 12,
            b_geom: 8,
            b_wcf: 8,
            b_field: 4,
            overrides: BTreeMap::new(),
        }
    }
}

impl PackConfig {
    /// Every group at full precision.
    pub fn passthrough() -> Self {
        PackConfig {
            b_shape: PASSTHROUGH_BITS,
            b_geom: PASSTHROUGH_BITS,
            b_wcf: PASSTHROUGH_BITS,
            b_field: PASSTHROUGH_BITS,
            overrides: BTreeMap::new(),
        }
    }

    pub fn bits_for(&self, group: &str) -> u8 {
        if let Some(&b) = self.overrides.get(group) {
            return b;
        }
        match group.split('.').next() {
            Some("shape") => self.b_shape,
            Some("geom") => self.b_geom,
            Some("wcf") => self.b_wcf,
            _ => self.b_field,
        }
    }

    fn validate(&self, names: &[String]) -> Result<()> {
        for name in self.overrides.keys() {
            if !names.contains(name) {
                return Err(Error::InvalidArgument(format!("unknown group {name}")));
            }
        }
        for name in names {
            let b = self.bits_for(name);
            if b == PASSTHROUGH_BITS {
                continue;
            }
            if name == "field" {
                if !(1..=16).contains(&b) {
                    return Err(Error::InvalidArgument(format!("field bits {b} not in 1..=16")));
                }
            } else {
                check_bits(b)?;
            }
        }
        Ok(())
    }
}

// --- byte helpers ---------------------------------------------------------

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Container(format!(
                "truncated: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn usize32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

// --- parameter groups -----------------------------------------------------

/// Weight matrix and bias of one layer, borrowed from the model.
type LayerRef<'a> = (&'a Array2<f64>, &'a Array1<f64>);

fn stage_groups<'a>(prefix: &str, stage: &'a SirenStage, out: &mut Vec<(String, Vec<LayerRef<'a>>)>) {
    for (i, l) in stage.hidden.iter().enumerate() {
        out.push((format!("{prefix}.hidden{i}"), vec![(&l.weight, &l.bias)]));
    }
    out.push((format!("{prefix}.output"), vec![(&stage.output.weight, &stage.output.bias)]));
}

fn layer_groups(model: &TerrainModel) -> Vec<(String, Vec<LayerRef<'_>>)> {
    let mut out = Vec::new();
    stage_groups("shape", &model.shape, &mut out);
    stage_groups("geom", &model.geom, &mut out);
    out.push((
        "wcf.decoder".to_string(),
        model.decoder.layers.iter().map(|l| (&l.weight, &l.bias)).collect(),
    ));
    out
}

/// Group names in container order; `field` is last.
pub fn group_names(model: &TerrainModel) -> Vec<String> {
    let mut names: Vec<String> = layer_groups(model).into_iter().map(|(n, _)| n).collect();
    names.push("field".to_string());
    names
}

fn encode_layer_group(layers: &[LayerRef<'_>], bits: u8) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    if bits == PASSTHROUGH_BITS {
        for (weight, bias) in layers {
            weight.iter().chain(bias.iter()).for_each(|&v| w.f64(v));
        }
        return Ok(w.buf);
    }
    let mut ints = Vec::new();
    for (weight, bias) in layers {
        let qw = QuantizedTensor::quantize(weight, bits, Granularity::PerChannel)?;
        let qb = QuantizedTensor::quantize_vector(bias, bits)?;
        qw.scales.iter().chain(&qb.scales).for_each(|&s| w.f32(s));
        ints.extend(qw.ints);
        ints.extend(qb.ints);
    }
    w.bytes(&entropy_encode(&ints, bits));
    Ok(w.buf)
}

/// Fills `shapes` (`(rows, cols)` per layer) from a group payload.
fn decode_layer_group(payload: &[u8], shapes: &[(usize, usize)], bits: u8) -> Result<Vec<(Array2<f64>, Array1<f64>)>> {
    let mut r = Reader::new(payload);
    let mut out = Vec::with_capacity(shapes.len());
    if bits == PASSTHROUGH_BITS {
        for &(rows, cols) in shapes {
            let mut wv = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                wv.push(r.f64()?);
            }
            let mut bv = Vec::with_capacity(rows);
            for _ in 0..rows {
                bv.push(r.f64()?);
            }
            out.push((
                Array2::from_shape_vec((rows, cols), wv).expect("sized"),
                Array1::from(bv),
            ));
        }
    } else {
        check_bits(bits).map_err(|e| Error::Container(e.to_string()))?;
        let mut scales = Vec::with_capacity(shapes.len());
        for &(rows, _) in shapes {
            let mut ws = Vec::with_capacity(rows);
            for _ in 0..rows {
                ws.push(r.f32()?);
            }
            scales.push((ws, r.f32()?));
        }
        let (ints, used) = entropy_decode(&payload[r.pos..], bits)?;
        r.pos += used;
        let expected: usize = shapes.iter().map(|&(a, b)| a * b + a).sum();
        if ints.len() != expected {
            return Err(Error::Container(format!(
                "group holds {} values, expected {expected}",
                ints.len()
            )));
        }
        let mut at = 0;
        for (&(rows, cols), (ws, bs)) in shapes.iter().zip(&scales) {
            let weight = Array2::from_shape_fn((rows, cols), |(i, j)| {
                ws[i] as f64 * ints[at + i * cols + j] as f64
            });
            at += rows * cols;
            let bias = Array1::from_shape_fn(rows, |i| *bs as f64 * ints[at + i] as f64);
            at += rows;
            out.push((weight, bias));
        }
    }
    if !r.finished() {
        return Err(Error::Container("trailing bytes in group".into()));
    }
    Ok(out)
}

fn encode_field(field: &ComplexityField, bits: u8) -> Result<(Vec<u8>, f64, f64)> {
    if bits == PASSTHROUGH_BITS {
        let mut w = Writer::default();
        field.c_hat.data.iter().for_each(|&v| w.f64(v));
        let (lo, hi) = field.c_hat.min_max();
        return Ok((w.buf, lo, hi));
    }
    let code = FieldCode::encode(&field.c_hat.data, bits)?;
    let bytes = encode_symbols(&code.levels, 1usize << bits);
    Ok((bytes, code.min, code.max))
}

fn decode_field(payload: &[u8], n: usize, bits: u8, min: f64, max: f64) -> Result<Vec<f64>> {
    if bits == PASSTHROUGH_BITS {
        let mut r = Reader::new(payload);
        let v = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if !r.finished() {
            return Err(Error::Container("trailing bytes in field".into()));
        }
        return Ok(v);
    }
    if !(1..=16).contains(&bits) {
        return Err(Error::Container(format!("field bits {bits}")));
    }
    let (levels, used) = decode_symbols(payload, 1usize << bits)?;
    if levels.len() != n || used != payload.len() {
        return Err(Error::Container("field length mismatch".into()));
    }
    let code = FieldCode {
        min,
        max,
        bits,
        levels,
    };
    Ok(code.decode())
}

// --- header ---------------------------------------------------------------

fn write_stage(w: &mut Writer, stage: &SirenStage) -> Result<()> {
    let t = &stage.freq;
    let seeded = build_frequency_table(t.seed, &t.config).is_ok_and(|b| b == *t);
    w.u8(if seeded { TABLE_SEEDED } else { TABLE_EXPLICIT });
    w.u64(t.seed);
    w.u32(t.config.low_limit);
    w.u8(u8::try_from(t.config.edges.len()).map_err(|_| Error::InvalidArgument("too many bands".into()))?);
    t.config.edges.iter().for_each(|&e| w.u32(e));
    for &s in &t.config.sizes {
        w.usize32(s)?;
    }
    if !seeded {
        w.usize32(t.len())?;
        for (row, &p) in t.rows.iter().zip(&t.phases) {
            w.i32(row[0]);
            w.i32(row[1]);
            w.f64(p);
        }
    }
    w.f64(stage.omega0);
    w.usize32(stage.width())?;
    w.usize32(stage.hidden.len())
}

struct StageHeader {
    freq: FrequencyTable,
    omega0: f64,
    width: usize,
    hidden_layers: usize,
}

impl StageHeader {
    fn shapes(&self) -> Vec<(usize, usize)> {
        let mut fan_in = self.freq.len();
        let mut out = Vec::new();
        for _ in 0..self.hidden_layers {
            out.push((self.width, fan_in));
            fan_in = self.width;
        }
        out.push((1, fan_in));
        out
    }
}

fn read_stage(r: &mut Reader) -> Result<StageHeader> {
    let kind = r.u8()?;
    let seed = r.u64()?;
    let low_limit = r.u32()?;
    let n_edges = r.u8()? as usize;
    let edges = (0..n_edges).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let sizes = (0..=n_edges).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
    let config = FrequencyConfig {
        low_limit,
        edges,
        sizes,
    };
    let freq = match kind {
        TABLE_SEEDED => build_frequency_table(seed, &config)
            .map_err(|e| Error::Container(format!("frequency table: {e}")))?,
        TABLE_EXPLICIT => {
            let n = r.usize32()?;
            if n != config.neurons() || n > r.buf.len() {
                return Err(Error::Container("explicit table size mismatch".into()));
            }
            let mut rows = Vec::with_capacity(n);
            let mut phases = Vec::with_capacity(n);
            for _ in 0..n {
                rows.push([r.i32()?, r.i32()?]);
                phases.push(r.f64()?);
            }
            let mut t = FrequencyTable::explicit(rows, phases);
            t.seed = seed;
            t.band_of = config
                .sizes
                .iter()
                .enumerate()
                .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
                .collect();
            t.config = config;
            t
        }
        k => return Err(Error::Container(format!("unknown table kind {k}"))),
    };
    let omega0 = r.f64()?;
    let width = r.usize32()?;
    let hidden_layers = r.usize32()?;
    if width == 0 || width > 1 << 16 || hidden_layers > 64 {
        return Err(Error::Container("implausible stage dimensions".into()));
    }
    Ok(StageHeader {
        freq,
        omega0,
        width,
        hidden_layers,
    })
}

/// Serializes `model` with the bit-widths in `cfg`.
pub fn pack(model: &TerrainModel, cfg: &PackConfig) -> Result<Vec<u8>> {
    if !model.is_finite() {
        return Err(Error::NonFinite("model parameters".into()));
    }
    let names = group_names(model);
    cfg.validate(&names)?;

    let field_bits = cfg.bits_for("field");
    let (field_bytes, field_min, field_max) = encode_field(&model.field, field_bits)?;

    let mut h = Writer::default();
    h.u8(model.use_masks as u8);
    h.usize32(model.meta.width)?;
    h.usize32(model.meta.height)?;
    h.f64(model.meta.z_min);
    h.f64(model.meta.z_max);
    h.f64(model.meta.cell_size);
    h.f64(model.residual_scale);
    write_stage(&mut h, &model.shape)?;
    write_stage(&mut h, &model.geom)?;
    h.usize32(DECODER_HIDDEN)?;
    h.u8(u8::try_from(model.thresholds.count()).map_err(|_| Error::InvalidArgument("too many thresholds".into()))?);
    h.f64(model.thresholds.tau1);
    model.thresholds.deltas.iter().for_each(|&d| h.f64(d));
    h.usize32(model.field.c_hat.width)?;
    h.usize32(model.field.c_hat.height)?;
    h.f64(model.field.mu_c);
    h.f64(model.field.sigma_c);
    h.f64(field_min);
    h.f64(field_max);
    h.u8(names.len() as u8);
    for name in &names {
        h.u8(cfg.bits_for(name));
    }

    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.usize32(h.buf.len())?;
    w.bytes(&h.buf);
    w.usize32(names.len())?;
    for (name, layers) in layer_groups(model) {
        let payload = encode_layer_group(&layers, cfg.bits_for(&name))?;
        w.usize32(payload.len())?;
        w.bytes(&payload);
    }
    w.usize32(field_bytes.len())?;
    w.bytes(&field_bytes);
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

fn assign(layers: Vec<(Array2<f64>, Array1<f64>)>, hidden: &mut Vec<Dense>, output: &mut Dense) {
    let n = layers.len();
    for (i, (weight, bias)) in layers.into_iter().enumerate() {
        if i + 1 == n {
            *output = Dense { weight, bias };
        } else {
            hidden.push(Dense { weight, bias });
        }
    }
}

/// Parses a container back into a queryable model.
pub fn unpack(bytes: &[u8]) -> Result<TerrainModel> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    if bytes.len() < 10 {
        return Err(Error::Container("truncated".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let mut r = Reader::new(body);
    r.take(4)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let computed = crc32fast::hash(body);
    if computed != stored {
        return Err(Error::Checksum { stored, computed });
    }

    let hlen = r.usize32()?;
    let mut h = Reader::new(r.take(hlen)?);
    let use_masks = h.u8()? != 0;
    let meta = TileMeta {
        width: h.usize32()?,
        height: h.usize32()?,
        z_min: h.f64()?,
        z_max: h.f64()?,
        cell_size: h.f64()?,
    };
    let residual_scale = h.f64()?;
    let shape_h = read_stage(&mut h)?;
    let geom_h = read_stage(&mut h)?;
    if h.usize32()? != DECODER_HIDDEN {
        return Err(Error::Container("decoder width mismatch".into()));
    }
    let k = h.u8()? as usize;
    if k == 0 {
        return Err(Error::Container("no thresholds".into()));
    }
    let tau1 = h.f64()?;
    let deltas = (1..k).map(|_| h.f64()).collect::<Result<Vec<_>>>()?;
    let (fw, fh) = (h.usize32()?, h.usize32()?);
    let (mu_c, sigma_c) = (h.f64()?, h.f64()?);
    let (field_min, field_max) = (h.f64()?, h.f64()?);
    let n_groups = h.u8()? as usize;
    let bits = (0..n_groups).map(|_| h.u8()).collect::<Result<Vec<_>>>()?;
    if !h.finished() {
        return Err(Error::Container("trailing header bytes".into()));
    }
    let expected_groups = shape_h.hidden_layers + geom_h.hidden_layers + 2 + 1 + 1;
    if n_groups != expected_groups || r.usize32()? != n_groups {
        return Err(Error::Container("group count mismatch".into()));
    }
    if fw == 0 || fh == 0 || fw.saturating_mul(fh) > bytes.len().saturating_mul(16) {
        return Err(Error::Container("implausible field dimensions".into()));
    }

    let mut payloads = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let len = r.usize32()?;
        payloads.push(r.take(len)?);
    }
    if !r.finished() {
        return Err(Error::Container("trailing bytes".into()));
    }

    let mut g = 0;
    let build_stage = |sh: StageHeader, payloads: &[&[u8]], g: &mut usize| -> Result<SirenStage> {
        let shapes = sh.shapes();
        let mut hidden = Vec::new();
        let mut output = Dense::zeros(1, sh.width);
        let mut layers = Vec::new();
        for s in &shapes {
            layers.extend(decode_layer_group(payloads[*g], std::slice::from_ref(s), bits[*g])?);
            *g += 1;
        }
        assign(layers, &mut hidden, &mut output);
        Ok(SirenStage {
            freq: sh.freq,
            omega0: sh.omega0,
            hidden,
            output,
        })
    };
    let shape = build_stage(shape_h, &payloads, &mut g)?;
    let geom = build_stage(geom_h, &payloads, &mut g)?;

    let mut decoder = WcfDecoder::new(0);
    let shapes: Vec<(usize, usize)> = decoder.layers.iter().map(|l| l.weight.dim()).collect();
    let layers = decode_layer_group(payloads[g], &shapes, bits[g])?;
    g += 1;
    for (l, (weight, bias)) in decoder.layers.iter_mut().zip(layers) {
        l.weight = weight;
        l.bias = bias;
    }

    let values = decode_field(payloads[g], fw * fh, bits[g], field_min, field_max)?;
    let field = ComplexityField {
        c_hat: Grid::new(fw, fh, values)?,
        mu_c,
        sigma_c,
        eps: INSTANCE_NORM_EPS,
    };
    let thresholds = ThresholdSet { tau1, deltas };
    if use_masks && thresholds.count() != geom.freq.config.gated_bands() {
        return Err(Error::Container("threshold count does not match bands".into()));
    }
    Ok(TerrainModel {
        shape,
        geom,
        decoder,
        thresholds,
        field,
        residual_scale,
        use_masks,
        meta,
    })
}

/// Total stored bits per grid cell of the original tile.
pub fn bits_per_pixel(container_len: usize, meta: &TileMeta) -> f64 {
    container_len as f64 * 8.0 / (meta.width * meta.height) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub group: String,
    pub bits: u8,
    pub psnr_db: f64,
    /// Quantized minus full-precision PSNR.
    pub delta_db: f64,
}

/// Quantizes one group at a time, everything else at full precision, and
/// reports the PSNR change against `truth` (normalized, reconstructed at its
/// own dimensions).
pub fn sensitivity_sweep(
    model: &TerrainModel,
    truth: &Grid,
    groups: &[String],
    bits: &[u8],
) -> Result<Vec<SweepRow>> {
    let (w, h) = (truth.width, truth.height);
    let base = psnr(&model.reconstruct(w, h)?, truth)?.db();
    let mut rows = Vec::new();
    for group in groups {
        for &b in bits {
            let mut cfg = PackConfig::passthrough();
            cfg.overrides.insert(group.clone(), b);
            let q = unpack(&pack(model, &cfg)?)?;
            let p = psnr(&q.reconstruct(w, h)?, truth)?.db();
            rows.push(SweepRow {
                group: group.clone(),
                bits: b,
                psnr_db: p,
                delta_db: p - base,
            });
        }
    }
    Ok(rows)
}

/// Names swept by default: every layer group, not the field.
pub fn sweep_groups(model: &TerrainModel) -> Vec<String> {
    layer_groups(model).into_iter().map(|(n, _)| n).collect()
}
