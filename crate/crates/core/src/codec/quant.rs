//! Symmetric uniform post-training quantization.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const MIN_BITS: u8 = 4;
pub const MAX_BITS: u8 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    PerChannel,
    PerTensor,
}

/// Integers of a quantized tensor, row-major, with one scale per row
/// (per-channel) or a single scale.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub ints: Vec<i32>,
    pub scales: Vec<f32>,
    pub bits: u8,
}

pub fn qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

pub fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "bit-width must be in {MIN_BITS}..={MAX_BITS}, got {bits}"
        )))
    }
}

/// `max|w| / qmax` rounded to the nearest f32; 1 for an all-zero slice.
fn scale_for(values: &[f64], q: i32) -> f32 {
    let m = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m == 0.0 {
        1.0
    } else {
        (m / q as f64) as f32
    }
}

/// Round half away from zero, clamped to `+-q`.
fn quantize_value(v: f64, scale: f32, q: i32) -> i32 {
    let r = (v / scale as f64).round();
    (r as i64).clamp(-(q as i64), q as i64) as i32
}

impl QuantizedTensor {
    pub fn quantize(data: &Array2<f64>, bits: u8, granularity: Granularity) -> Result<Self> {
        check_bits(bits)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor to quantize".into()));
        }
        let q = qmax(bits);
        let (rows, cols) = data.dim();
        let flat: Vec<f64> = data.iter().copied().collect();
        let scales: Vec<f32> = match granularity {
            Granularity::PerChannel => flat
                .chunks(cols.max(1))
                .take(rows)
                .map(|row| scale_for(row, q))
                .collect(),
            Granularity::PerTensor => vec![scale_for(&flat, q)],
        };
        let ints = flat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = match granularity {
                    Granularity::PerChannel => scales[i / cols],
                    Granularity::PerTensor => scales[0],
                };
                quantize_value(v, s, q)
            })
            .collect();
        Ok(QuantizedTensor {
            rows,
            cols,
            ints,
            scales,
            bits,
        })
    }

    pub fn quantize_vector(data: &Array1<f64>, bits: u8) -> Result<Self> {
        let m = data.view().insert_axis(ndarray::Axis(0)).to_owned();
        Self::quantize(&m, bits, Granularity::PerTensor)
    }

    pub fn scale_of(&self, index: usize) -> f64 {
        if self.scales.len() == 1 {
            self.scales[0] as f64
        } else {
            self.scales[index / self.cols] as f64
        }
    }

    pub fn dequantize(&self) -> Array2<f64> {
        let data = self
            .ints
            .iter()
            .enumerate()
            .map(|(i, &q)| self.scale_of(i) * q as f64)
            .collect();
        Array2::from_shape_vec((self.rows, self.cols), data).expect("shape matches")
    }
}

/// Min-max uniform quantization of a field to `2^bits` levels.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldCode {
    pub min: f64,
    pub max: f64,
    pub bits: u8,
    pub levels: Vec<u32>,
}

impl FieldCode {
    pub fn encode(values: &[f64], bits: u8) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return Err(Error::InvalidArgument(format!("field bits {bits} not in 1..=16")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("complexity field".into()));
        }
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let (min, max) = if values.is_empty() { (0.0, 0.0) } else { (min, max) };
        let top = (1u32 << bits) - 1;
        let range = max - min;
        let levels = values
            .iter()
            .map(|&v| {
                if range == 0.0 {
                    0
                } else {
                    (((v - min) / range * top as f64).round() as u32).min(top)
                }
            })
            .collect();
        Ok(FieldCode {
            min,
            max,
            bits,
            levels,
        })
    }

    pub fn top(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn value(&self, level: u32) -> f64 {
        let top = self.top();
        if level == top {
            self.max
        } else {
            self.min + level as f64 * (self.max - self.min) / top as f64
        }
    }

    pub fn decode(&self) -> Vec<f64> {
        self.levels.iter().map(|&l| self.value(l)).collect()
    }
}
