//! Joint sine/cosine for the network hot paths.
//!
//! Cody-Waite reduction by pi/2 with a three-part constant, then the fdlibm
//! minimax kernels on `[-pi/4, pi/4]`. Written branch-free so slice loops
//! vectorize; arguments beyond [`REDUCTION_LIMIT`] go to the standard library.

const FRAC_2_PI: f64 = 6.366_197_723_675_813_4e-1;
const PIO2_1: f64 = 1.570_796_326_734_125_6e0;
const PIO2_2: f64 = 6.077_100_506_303_966e-11;
const PIO2_3: f64 = 2.022_266_248_711_166_5e-21;
/// `1.5 * 2^52`: adding it rounds to an integer held in the low mantissa bits.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

pub const REDUCTION_LIMIT: f64 = 1e6;

const S1: f64 = -1.666_666_666_666_663_2e-1;
const S2: f64 = 8.333_333_333_322_49e-3;
const S3: f64 = -1.984_126_982_985_795e-4;
const S4: f64 = 2.755_731_370_707_006_8e-6;
const S5: f64 = -2.505_076_025_340_686_3e-8;
const S6: f64 = 1.589_690_995_211_55e-10;

const C1: f64 = 4.166_666_666_666_660_2e-2;
const C2: f64 = -1.388_888_888_887_411e-3;
const C3: f64 = 2.480_158_728_947_673e-5;
const C4: f64 = -2.755_731_435_139_066_3e-7;
const C5: f64 = 2.087_572_321_298_175e-9;
const C6: f64 = -1.135_964_755_778_819_5e-11;

#[inline(always)]
fn kernels(x: f64) -> (f64, f64) {
    let t = x * FRAC_2_PI + ROUND_MAGIC;
    let q = t.to_bits();
    let n = t - ROUND_MAGIC;
    let r = ((x - n * PIO2_1) - n * PIO2_2) - n * PIO2_3;

    let z = r * r;
    let w = z * z;
    let sp = S2 + z * (S3 + z * S4) + z * w * (S5 + z * S6);
    let s = r + z * r * (S1 + z * sp);
    let cp = z * (C1 + z * (C2 + z * C3)) + w * w * (C4 + z * (C5 + z * C6));
    let hz = 0.5 * z;
    let one_minus = 1.0 - hz;
    let c = one_minus + (((1.0 - one_minus) - hz) + z * cp);

    // quadrant q mod 4: (s, c), (c, -s), (-s, -c), (-c, s)
    let swap = (q & 1).wrapping_neg();
    let (sb, cb) = (s.to_bits(), c.to_bits());
    let bs = (sb & !swap) | (cb & swap);
    let bc = (cb & !swap) | (sb & swap);
    let sin_sign = (q & 2) << 62;
    let cos_sign = (q.wrapping_add(1) & 2) << 62;
    (f64::from_bits(bs ^ sin_sign), f64::from_bits(bc ^ cos_sign))
}

#[inline]
pub fn sin_cos(x: f64) -> (f64, f64) {
    if x.abs() <= REDUCTION_LIMIT {
        kernels(x)
    } else {
        x.sin_cos()
    }
}

/// `sin` and `cos` of every element of `x`, written to the two outputs.
pub fn sin_cos_slice(x: &[f64], sin: &mut [f64], cos: &mut [f64]) {
    assert!(x.len() == sin.len() && x.len() == cos.len());
    for ((v, s), c) in x.iter().zip(sin.iter_mut()).zip(cos.iter_mut()) {
        let (a, b) = kernels(*v);
        *s = a;
        *c = b;
    }
    for (i, v) in x.iter().enumerate() {
        if !(v.abs() <= REDUCTION_LIMIT) {
            (sin[i], cos[i]) = v.sin_cos();
        }
    }
}

/// In-place: `z` becomes `sin z`, `cos` receives `cos z`.
pub fn sin_cos_inplace(z: &mut [f64], cos: &mut [f64]) {
    assert_eq!(z.len(), cos.len());
    let wide: Vec<(usize, f64)> = z
        .iter()
        .enumerate()
        .filter(|(_, v)| !(v.abs() <= REDUCTION_LIMIT))
        .map(|(i, v)| (i, *v))
        .collect();
    for (v, c) in z.iter_mut().zip(cos.iter_mut()) {
        let (a, b) = kernels(*v);
        *v = a;
        *c = b;
    }
    for (i, x) in wide {
        (z[i], cos[i]) = x.sin_cos();
    }
}
