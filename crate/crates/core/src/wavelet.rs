//! Undecimated (stationary) 2-D Haar transform and the 7-channel complexity
//! features built from it.
//!
//! Taps are the orthonormal Haar pair scaled by `1/sqrt(2)` per level
//! (`[1/2, 1/2]`, `[1/2, -1/2]`), which makes the redundant transform a
//! Parseval frame: constants pass through unchanged and the four level-1
//! subbands together carry exactly the input energy. Boundaries wrap.

use crate::error::{Error, Result};
use crate::raster::{finite_diff_gradients, Grid};

pub const LOW_TAPS: [f64; 2] = [0.5, 0.5];
pub const HIGH_TAPS: [f64; 2] = [0.5, -0.5];

/// Number of feature channels: 3 details x 2 levels + gradient magnitude.
pub const FEATURE_CHANNELS: usize = 7;
pub const SWT_LEVELS: usize = 2;

const STD_FLOOR: f64 = 1e-8;

/// Subbands of one decomposition level. `d_h` is high-pass along x
/// (within rows), `d_v` high-pass along y, `d_d` high-pass along both.
#[derive(Clone, Debug, PartialEq)]
pub struct SwtLevel {
    pub approx: Grid,
    pub d_h: Grid,
    pub d_v: Grid,
    pub d_d: Grid,
}

/// `out[i] = taps[0] * src[i] + taps[1] * src[(i + step) mod n]` along rows.
fn filter_rows(g: &Grid, taps: [f64; 2], step: usize) -> Grid {
    let (w, h) = (g.width, g.height);
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        let row = &g.data[r * w..(r + 1) * w];
        for c in 0..w {
            out[r * w + c] = taps[0] * row[c] + taps[1] * row[(c + step) % w];
        }
    }
    Grid {
        width: w,
        height: h,
        data: out,
    }
}

fn filter_cols(g: &Grid, taps: [f64; 2], step: usize) -> Grid {
    let (w, h) = (g.width, g.height);
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        let r2 = (r + step) % h;
        for c in 0..w {
            out[r * w + c] = taps[0] * g.data[r * w + c] + taps[1] * g.data[r2 * w + c];
        }
    }
    Grid {
        width: w,
        height: h,
        data: out,
    }
}

/// A-trous stationary Haar transform, `levels` in `{1, 2}`.
pub fn swt2_haar(grid: &Grid, levels: usize) -> Result<Vec<SwtLevel>> {
    if !(1..=2).contains(&levels) {
        return Err(Error::InvalidArgument(format!(
            "levels must be 1 or 2, got {levels}"
        )));
    }
    if grid.width < 4 || grid.height < 4 {
        return Err(Error::TooSmall {
            width: grid.width,
            height: grid.height,
            min: 4,
        });
    }
    let mut out = Vec::with_capacity(levels);
    let mut current = grid.clone();
    for level in 1..=levels {
        // taps upsampled by inserting 2^(level-1) - 1 zeros
        let step = 1usize << (level - 1);
        let lo_x = filter_rows(&current, LOW_TAPS, step);
        let hi_x = filter_rows(&current, HIGH_TAPS, step);
        let approx = filter_cols(&lo_x, LOW_TAPS, step);
        let d_v = filter_cols(&lo_x, HIGH_TAPS, step);
        let d_h = filter_cols(&hi_x, LOW_TAPS, step);
        let d_d = filter_cols(&hi_x, HIGH_TAPS, step);
        current = approx.clone();
        out.push(SwtLevel {
            approx,
            d_h,
            d_v,
            d_d,
        });
    }
    Ok(out)
}

/// Z-scored 7-channel stack
/// `[|d1_h|, |d1_v|, |d1_d|, |d2_h|, |d2_v|, |d2_d|, |grad r|]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SwtFeatures {
    pub width: usize,
    pub height: usize,
    pub channels: Vec<Grid>,
    /// Pre-normalization statistics; a channel with `std < 1e-8` is zeroed.
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Raw (non-negative, un-normalized) feature channels.
pub fn raw_feature_channels(residual: &Grid) -> Result<Vec<Grid>> {
    let levels = swt2_haar(residual, SWT_LEVELS)?;
    let abs = |g: &Grid| Grid {
        width: g.width,
        height: g.height,
        data: g.data.iter().map(|v| v.abs()).collect(),
    };
    let mut channels = Vec::with_capacity(FEATURE_CHANNELS);
    for lvl in &levels {
        channels.push(abs(&lvl.d_h));
        channels.push(abs(&lvl.d_v));
        channels.push(abs(&lvl.d_d));
    }
    let grads = finite_diff_gradients(residual)?;
    channels.push(Grid {
        width: residual.width,
        height: residual.height,
        data: grads
            .gx
            .data
            .iter()
            .zip(&grads.gy.data)
            .map(|(x, y)| x.hypot(*y))
            .collect(),
    });
    Ok(channels)
}

pub fn build_features(residual: &Grid) -> Result<SwtFeatures> {
    let raw = raw_feature_channels(residual)?;
    let mut means = Vec::with_capacity(FEATURE_CHANNELS);
    let mut stds = Vec::with_capacity(FEATURE_CHANNELS);
    let mut channels = Vec::with_capacity(FEATURE_CHANNELS);
    for ch in raw {
        let (mean, std) = mean_std(&ch.data);
        let data = if std < STD_FLOOR {
            vec![0.0; ch.len()]
        } else {
            ch.data.iter().map(|v| (v - mean) / std).collect()
        };
        means.push(mean);
        stds.push(std);
        channels.push(Grid {
            width: ch.width,
            height: ch.height,
            data,
        });
    }
    Ok(SwtFeatures {
        width: residual.width,
        height: residual.height,
        channels,
        means,
        stds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::node_coord;
    use crate::rng::SeededRng;

    fn random_grid(w: usize, h: usize, seed: u64) -> Grid {
        let mut rng = SeededRng::new(seed);
        Grid::from_fn(w, h, |_, _| rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn constant_grid_passes_through() {
        let g = Grid::filled(16, 12, 0.7);
        for lvl in swt2_haar(&g, 2).unwrap() {
            for v in lvl.approx.data {
                assert!((v - 0.7).abs() < 1e-15);
            }
            for d in [lvl.d_h, lvl.d_v, lvl.d_d] {
                assert!(d.data.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn rejects_bad_levels_and_dims() {
        let g = Grid::filled(8, 8, 0.0);
        assert!(swt2_haar(&g, 0).is_err());
        assert!(swt2_haar(&g, 3).is_err());
        assert!(swt2_haar(&Grid::filled(3, 8, 0.0), 1).is_err());
    }

    /// Every row is `[0,0,1,1,0,0,0,0]`; low-pass along y leaves rows
    /// unchanged, so d_h must be the periodic convolution of the row with the
    /// orthonormal high-pass `[1/sqrt2, -1/sqrt2]`, times the per-level
    /// `1/sqrt2` normalization.
    #[test]
    fn level1_detail_matches_direct_convolution() {
        let row = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let g = Grid::from_fn(8, 4, |c, _| row[c]);
        let lvl = &swt2_haar(&g, 1).unwrap()[0];
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let taps = [s, -s];
        for c in 0..8 {
            let conv: f64 = (0..2).map(|k| taps[k] * row[(c + k) % 8]).sum();
            for r in 0..4 {
                assert!((lvl.d_h.get(c, r) - conv * s).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shift_invariance() {
        let (w, h) = (32, 24);
        let g = random_grid(w, h, 11);
        let shifted = Grid::from_fn(w, h, |c, r| g.get((c + w - 3) % w, (r + h - 5) % h));
        let a = swt2_haar(&g, 2).unwrap();
        let b = swt2_haar(&shifted, 2).unwrap();
        for (la, lb) in a.iter().zip(&b) {
            for (ga, gb) in [
                (&la.approx, &lb.approx),
                (&la.d_h, &lb.d_h),
                (&la.d_v, &lb.d_v),
                (&la.d_d, &lb.d_d),
            ] {
                for r in 0..h {
                    for c in 0..w {
                        let moved = gb.get((c + 3) % w, (r + 5) % h);
                        assert!((ga.get(c, r) - moved).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn level1_energy_identity() {
        let g = random_grid(40, 28, 2);
        let lvl = &swt2_haar(&g, 1).unwrap()[0];
        let e_in: f64 = g.data.iter().map(|v| v * v).sum();
        let e_out: f64 = [&lvl.approx, &lvl.d_h, &lvl.d_v, &lvl.d_d]
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum();
        assert!(((e_out - e_in) / e_in).abs() < 1e-8);
    }

    #[test]
    fn zero_residual_gives_zero_features() {
        let f = build_features(&Grid::filled(16, 16, 0.0)).unwrap();
        assert_eq!(f.channels.len(), FEATURE_CHANNELS);
        for ch in &f.channels {
            assert!(ch.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn tilted_plane_features() {
        let n = 64;
        let g = Grid::from_fn(n, n, |c, _| node_coord(c, n));
        let raw = raw_feature_channels(&g).unwrap();
        let spacing = 1.0 / (n - 1) as f64;
        // away from the wrap-around column the details are at most one cell step
        for ch in &raw[..6] {
            for r in 0..n {
                for c in 0..n - 3 {
                    assert!(ch.get(c, r) <= spacing + 1e-12);
                }
            }
        }
        // vertical details see no variation at all
        for idx in [1usize, 4] {
            assert!(raw[idx].data.iter().all(|&v| v.abs() < 1e-15));
        }
        for v in &raw[6].data {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zscored_channels_are_centered() {
        let f = build_features(&random_grid(64, 64, 4)).unwrap();
        for ch in &f.channels {
            let (m, s) = mean_std(&ch.data);
            assert!(m.abs() < 1e-6);
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
