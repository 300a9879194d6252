//! DEM tiles, file I/O, preprocessing and finite-difference gradient targets.
//!
//! Coordinate convention shared by the whole crate: grid node `(col i, row j)`
//! of a `W x H` grid sits at normalized coordinate `(i / (W-1), j / (H-1))`,
//! with `x` running along columns and `y` along rows.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Smallest tile side accepted for training.
pub const MIN_TRAINABLE_SIDE: usize = 16;

/// Smallest side accepted by the synthetic generator.
pub const MIN_SYNTH_SIDE: usize = 32;

/// Power-law exponent of the `fractal` profile's power spectrum, `P(k) ~ k^-beta`.
pub const FRACTAL_SPECTRAL_EXPONENT: f64 = 3.0;

/// Row-major scalar grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimMismatch(format!(
                "{} samples for a {width}x{height} grid",
                data.len()
            )));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(col, row));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Normalized coordinate of a node.
    #[inline]
    pub fn node_xy(&self, col: usize, row: usize) -> [f64; 2] {
        [node_coord(col, self.width), node_coord(row, self.height)]
    }

    /// Normalized coordinates of every node, row-major.
    pub fn node_coords(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.len());
        for row in 0..self.height {
            for col in 0..self.width {
                out.push(self.node_xy(col, row));
            }
        }
        out
    }

    /// Bilinear interpolation at a normalized coordinate (clamped to the grid).
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let (c0, c1, tx) = bilinear_axis(x, self.width);
        let (r0, r1, ty) = bilinear_axis(y, self.height);
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let top = lerp(self.get(c0, r0), self.get(c1, r0), tx);
        let bot = lerp(self.get(c0, r1), self.get(c1, r1), tx);
        lerp(top, bot, ty)
    }
}

#[inline]
pub fn node_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Lower node, upper node and fractional weight of the upper node for a
/// normalized coordinate on an axis of `n` nodes. Coordinates outside
/// `[0, 1]` clamp to the border.
#[inline]
pub fn bilinear_axis(t: f64, n: usize) -> (usize, usize, f64) {
    if n <= 1 {
        return (0, 0, 0.0);
    }
    let pos = (t * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
    let i0 = (pos.floor() as usize).min(n - 2);
    (i0, i0 + 1, pos - i0 as f64)
}

/// A rectangular elevation grid in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct DemTile {
    pub elevations: Grid,
    pub z_min: f64,
    pub z_max: f64,
    /// Meters per cell; carried along, never used by the math.
    pub cell_size: f64,
}

impl DemTile {
    pub fn from_grid(elevations: Grid, cell_size: f64) -> Result<Self> {
        for (i, v) in elevations.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::MissingData {
                    col: i % elevations.width,
                    row: i / elevations.width,
                });
            }
        }
        let (z_min, z_max) = elevations.min_max();
        Ok(DemTile {
            elevations,
            z_min,
            z_max,
            cell_size,
        })
    }

    pub fn width(&self) -> usize {
        self.elevations.width
    }

    pub fn height(&self) -> usize {
        self.elevations.height
    }

    pub fn z_range(&self) -> f64 {
        self.z_max - self.z_min
    }

    /// Non-degenerate range and both sides at least [`MIN_TRAINABLE_SIDE`].
    pub fn is_trainable(&self) -> bool {
        self.z_range() > 0.0
            && self.width() >= MIN_TRAINABLE_SIDE
            && self.height() >= MIN_TRAINABLE_SIDE
    }

    pub fn check_trainable(&self) -> Result<()> {
        if self.width() < MIN_TRAINABLE_SIDE || self.height() < MIN_TRAINABLE_SIDE {
            return Err(Error::TooSmall {
                width: self.width(),
                height: self.height(),
                min: MIN_TRAINABLE_SIDE,
            });
        }
        if !(self.z_range() > 0.0) {
            return Err(Error::ZeroRange);
        }
        Ok(())
    }
}

/// Min-max normalized grid with the range used to produce it.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedTile {
    pub grid: Grid,
    pub z_min: f64,
    pub z_max: f64,
}

impl NormalizedTile {
    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    fn with_grid(&self, grid: Grid) -> NormalizedTile {
        NormalizedTile {
            grid,
            z_min: self.z_min,
            z_max: self.z_max,
        }
    }

    pub fn denormalize(&self) -> Grid {
        let range = self.z_max - self.z_min;
        Grid {
            width: self.grid.width,
            height: self.grid.height,
            data: self
                .grid
                .data
                .iter()
                .map(|v| v * range + self.z_min)
                .collect(),
        }
    }
}

/// Per-node partial derivatives in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientGrid {
    pub gx: Grid,
    pub gy: Grid,
}

impl GradientGrid {
    pub fn width(&self) -> usize {
        self.gx.width
    }

    pub fn height(&self) -> usize {
        self.gx.height
    }
}

// --- I/O -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TileFormat {
    RawF32,
    AsciiGrid,
}

impl TileFormat {
    /// `.asc` means ascii-grid, everything else raw-f32.
    pub fn from_path(path: &Path) -> TileFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("asc") => TileFormat::AsciiGrid,
            _ => TileFormat::RawF32,
        }
    }
}

/// Sidecar metadata of a raw-f32 raster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_cell_size")]
    pub cell_size: f64,
}

fn default_cell_size() -> f64 {
    1.0
}

/// `tile.raw` -> `tile.json`.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

pub fn load_tile(path: &Path, format: TileFormat) -> Result<DemTile> {
    match format {
        TileFormat::RawF32 => load_raw(path),
        TileFormat::AsciiGrid => load_ascii(path),
    }
}

fn load_raw(path: &Path) -> Result<DemTile> {
    let side = sidecar_path(path);
    let meta_text = fs::read_to_string(&side)
        .map_err(|e| Error::Header(format!("cannot read sidecar {}: {e}", side.display())))?;
    let meta: RawSidecar = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Header(format!("sidecar {}: {e}", side.display())))?;
    if meta.width == 0 || meta.height == 0 {
        return Err(Error::Header("zero width or height".into()));
    }
    let bytes = fs::read(path)?;
    let expected = meta.width * meta.height * 4;
    if bytes.len() != expected {
        return Err(Error::Header(format!(
            "raw payload is {} bytes, sidecar implies {expected}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    DemTile::from_grid(Grid::new(meta.width, meta.height, data)?, meta.cell_size)
}

fn load_ascii(path: &Path) -> Result<DemTile> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut ncols = None;
    let mut nrows = None;
    let mut cellsize = 1.0;
    let mut nodata: Option<f64> = None;
    let mut values = Vec::new();
    let mut in_body = false;
    for line in reader.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if !in_body {
            let mut parts = trimmed.split_whitespace();
            let key = parts.next().unwrap_or("").to_ascii_lowercase();
            let is_key = key.chars().next().is_some_and(|c| c.is_ascii_alphabetic());
            if is_key {
                let val = parts
                    .next()
                    .ok_or_else(|| Error::Header(format!("no value for `{key}`")))?;
                let parse_f = |v: &str| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Header(format!("bad value `{v}` for `{key}`")))
                };
                match key.as_str() {
                    "ncols" => ncols = Some(parse_f(val)? as usize),
                    "nrows" => nrows = Some(parse_f(val)? as usize),
                    "cellsize" => cellsize = parse_f(val)?,
                    "nodata_value" => nodata = Some(parse_f(val)?),
                    // georeferencing is accepted and ignored
                    "xllcorner" | "yllcorner" | "xllcenter" | "yllcenter" => {}
                    _ => return Err(Error::Header(format!("unknown header key `{key}`"))),
                }
                continue;
            }
            in_body = true;
        }
        for tok in trimmed.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Header(format!("bad sample `{tok}`")))?;
            values.push(v);
        }
    }
    let (w, h) = match (ncols, nrows) {
        (Some(w), Some(h)) if w > 0 && h > 0 => (w, h),
        _ => return Err(Error::Header("missing ncols/nrows".into())),
    };
    if values.len() != w * h {
        return Err(Error::Header(format!(
            "{} samples for a {w}x{h} grid",
            values.len()
        )));
    }
    if let Some(nd) = nodata {
        if let Some(i) = values.iter().position(|&v| v == nd) {
            return Err(Error::MissingData {
                col: i % w,
                row: i / w,
            });
        }
    }
    DemTile::from_grid(Grid::new(w, h, values)?, cellsize)
}

/// Writes `grid` as little-endian f32 plus a `.json` sidecar.
pub fn save_raw(path: &Path, grid: &Grid, cell_size: f64) -> Result<()> {
    let mut bytes = Vec::with_capacity(grid.len() * 4);
    for &v in &grid.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    let meta = RawSidecar {
        width: grid.width,
        height: grid.height,
        cell_size,
    };
    let mut f = fs::File::create(sidecar_path(path))?;
    let text = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
    writeln!(f, "{text}")?;
    Ok(())
}

pub fn save_ascii(path: &Path, grid: &Grid, cell_size: f64) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("ncols {}\nnrows {}\n", grid.width, grid.height));
    out.push_str(&format!("cellsize {cell_size}\nNODATA_value -9999\n"));
    for row in 0..grid.height {
        let line: Vec<String> = (0..grid.width)
            .map(|c| format!("{}", grid.get(c, row)))
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// --- preprocessing -------------------------------------------------------

pub fn normalize(tile: &DemTile) -> Result<NormalizedTile> {
    let range = tile.z_range();
    if !(range > 0.0) {
        return Err(Error::ZeroRange);
    }
    let data = tile
        .elevations
        .data
        .iter()
        .map(|v| (v - tile.z_min) / range)
        .collect();
    Ok(NormalizedTile {
        grid: Grid::new(tile.width(), tile.height(), data)?,
        z_min: tile.z_min,
        z_max: tile.z_max,
    })
}

/// Reflect an index into `0..n` with edge repetition (`... b a | a b c ... | c b ...`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Normalized 1-D Gaussian taps for `-radius..=radius`, radius = ceil(3 sigma).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|j| (-(j * j) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_smooth(tile: &NormalizedTile, sigma: f64) -> Result<NormalizedTile> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    let g = &tile.grid;
    let (w, h) = (g.width, g.height);
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;

    let mut tmp = vec![0.0; w * h];
    for row in 0..h {
        let src = &g.data[row * w..(row + 1) * w];
        for col in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                acc += kv * src[reflect(col as isize + t as isize - radius, w)];
            }
            tmp[row * w + col] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for row in 0..h {
        for (t, kv) in kernel.iter().enumerate() {
            let r = reflect(row as isize + t as isize - radius, h);
            let src = &tmp[r * w..(r + 1) * w];
            let dst = &mut out[row * w..(row + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    // only snap round-off; real excursions stay visible
    for v in &mut out {
        if *v < 0.0 && *v > -1e-6 {
            *v = 0.0;
        } else if *v > 1.0 && *v < 1.0 + 1e-6 {
            *v = 1.0;
        }
    }
    Ok(tile.with_grid(Grid::new(w, h, out)?))
}

/// Corner-aligned bilinear resampling.
pub fn resample_bilinear(
    tile: &NormalizedTile,
    out_w: usize,
    out_h: usize,
) -> Result<NormalizedTile> {
    if out_w < 2 || out_h < 2 {
        return Err(Error::InvalidArgument(format!(
            "output dims must be >= 2, got {out_w}x{out_h}"
        )));
    }
    let g = &tile.grid;
    if out_w == g.width && out_h == g.height {
        return Ok(tile.clone());
    }
    let out = Grid::from_fn(out_w, out_h, |c, r| {
        g.sample_bilinear(node_coord(c, out_w), node_coord(r, out_h))
    });
    Ok(tile.with_grid(out))
}

/// Derivatives along one axis: central inside, one-sided at both ends.
fn axis_derivative(values: impl Fn(usize) -> f64, n: usize, spacing: f64, out: &mut [f64]) {
    out[0] = (values(1) - values(0)) / spacing;
    out[n - 1] = (values(n - 1) - values(n - 2)) / spacing;
    for i in 1..n - 1 {
        out[i] = (values(i + 1) - values(i - 1)) / (2.0 * spacing);
    }
}

pub fn finite_diff_gradients(grid: &Grid) -> Result<GradientGrid> {
    let (w, h) = (grid.width, grid.height);
    if w < 3 || h < 3 {
        return Err(Error::TooSmall {
            width: w,
            height: h,
            min: 3,
        });
    }
    let dx = 1.0 / (w - 1) as f64;
    let dy = 1.0 / (h - 1) as f64;
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for row in 0..h {
        axis_derivative(|c| grid.get(c, row), w, dx, &mut gx[row * w..(row + 1) * w]);
    }
    let mut column = vec![0.0; h];
    for col in 0..w {
        axis_derivative(|r| grid.get(col, r), h, dy, &mut column);
        for (row, v) in column.iter().enumerate() {
            gy[row * w + col] = *v;
        }
    }
    Ok(GradientGrid {
        gx: Grid::new(w, h, gx)?,
        gy: Grid::new(w, h, gy)?,
    })
}

// --- synthetic terrain ---------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthProfile {
    Bumps,
    Ridge,
    FlatPlusCliff,
    Fractal,
}

impl SynthProfile {
    pub const ALL: [SynthProfile; 4] = [
        SynthProfile::Bumps,
        SynthProfile::Ridge,
        SynthProfile::FlatPlusCliff,
        SynthProfile::Fractal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthProfile::Bumps => "bumps",
            SynthProfile::Ridge => "ridge",
            SynthProfile::FlatPlusCliff => "flat-plus-cliff",
            SynthProfile::Fractal => "fractal",
        }
    }
}

impl std::str::FromStr for SynthProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthProfile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownProfile(s.to_string()))
    }
}

/// The region of a `flat-plus-cliff` tile that is free of the detail patch:
/// every node with `x < FLAT_REGION_MAX_X` lies on the smooth plane.
pub const FLAT_REGION_MAX_X: f64 = 0.45;

/// Deterministic synthetic terrain, elevations in meters.
pub fn synth_tile(
    seed: u64,
    width: usize,
    height: usize,
    profile: SynthProfile,
) -> Result<DemTile> {
    if width < MIN_SYNTH_SIDE || height < MIN_SYNTH_SIDE {
        return Err(Error::TooSmall {
            width,
            height,
            min: MIN_SYNTH_SIDE,
        });
    }
    // decorrelate profiles sharing a seed
    let mut rng = SeededRng::new(seed ^ (profile as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let unit = match profile {
        SynthProfile::Bumps => synth_bumps(&mut rng, width, height),
        SynthProfile::Ridge => synth_ridge(&mut rng, width, height),
        SynthProfile::FlatPlusCliff => synth_flat_plus_cliff(&mut rng, width, height),
        SynthProfile::Fractal => synth_fractal(&mut rng, width, height, FRACTAL_SPECTRAL_EXPONENT),
    };
    let base = rng.uniform_in(200.0, 1200.0);
    let relief = rng.uniform_in(100.0, 600.0);
    let (lo, hi) = unit.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = unit
        .data
        .iter()
        .map(|v| base + relief * (v - lo) / span)
        .collect();
    DemTile::from_grid(Grid::new(width, height, data)?, 1.0)
}

fn synth_bumps(rng: &mut SeededRng, w: usize, h: usize) -> Grid {
    struct Bump {
        cx: f64,
        cy: f64,
        sa: f64,
        sb: f64,
        cos: f64,
        sin: f64,
        amp: f64,
    }
    let bumps: Vec<Bump> = (0..5)
        .map(|_| {
            let theta = rng.uniform_in(0.0, std::f64::consts::PI);
            Bump {
                cx: rng.uniform_in(0.15, 0.85),
                cy: rng.uniform_in(0.15, 0.85),
                sa: rng.uniform_in(0.08, 0.25),
                sb: rng.uniform_in(0.05, 0.15),
                cos: theta.cos(),
                sin: theta.sin(),
                amp: rng.uniform_in(0.3, 1.0) * if rng.uniform() < 0.25 { -1.0 } else { 1.0 },
            }
        })
        .collect();
    Grid::from_fn(w, h, |c, r| {
        let (x, y) = (node_coord(c, w), node_coord(r, h));
        bumps
            .iter()
            .map(|b| {
                let (dx, dy) = (x - b.cx, y - b.cy);
                let u = dx * b.cos + dy * b.sin;
                let v = -dx * b.sin + dy * b.cos;
                b.amp * (-(u * u) / (2.0 * b.sa * b.sa) - (v * v) / (2.0 * b.sb * b.sb)).exp()
            })
            .sum()
    })
}

fn synth_ridge(rng: &mut SeededRng, w: usize, h: usize) -> Grid {
    let theta = rng.uniform_in(0.0, std::f64::consts::PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let freq = rng.uniform_in(1.5, 3.0);
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    let meander_amp = rng.uniform_in(0.02, 0.06);
    let meander_freq = rng.uniform_in(1.0, 2.5);
    let tilt = [rng.uniform_in(-0.3, 0.3), rng.uniform_in(-0.3, 0.3)];
    let hill = [rng.uniform_in(0.3, 0.7), rng.uniform_in(0.3, 0.7)];
    Grid::from_fn(w, h, |c, r| {
        let (x, y) = (node_coord(c, w), node_coord(r, h));
        let along = -x * st + y * ct;
        let across =
            x * ct + y * st + meander_amp * (std::f64::consts::TAU * meander_freq * along).sin();
        // folded sine: sharp crests where the sine crosses zero
        let ridge = 1.0 - (std::f64::consts::PI * freq * across + phase).sin().abs();
        let d2 = (x - hill[0]).powi(2) + (y - hill[1]).powi(2);
        let base = tilt[0] * x + tilt[1] * y + 0.8 * (-d2 / 0.18).exp();
        0.45 * ridge + base
    })
}

fn synth_flat_plus_cliff(rng: &mut SeededRng, w: usize, h: usize) -> Grid {
    let tilt = [rng.uniform_in(0.05, 0.15), rng.uniform_in(-0.1, 0.1)];
    let cx = rng.uniform_in(0.68, 0.76);
    let cy = rng.uniform_in(0.35, 0.65);
    let radius = rng.uniform_in(0.12, 0.16);
    let cliff_angle = rng.uniform_in(0.0, std::f64::consts::TAU);
    let (ca, sa) = (cliff_angle.cos(), cliff_angle.sin());
    let k1 = [rng.uniform_in(14.0, 20.0), rng.uniform_in(-6.0, 6.0)];
    let k2 = [rng.uniform_in(-6.0, 6.0), rng.uniform_in(16.0, 24.0)];
    Grid::from_fn(w, h, |c, r| {
        let (x, y) = (node_coord(c, w), node_coord(r, h));
        let plane = tilt[0] * x + tilt[1] * y;
        let (dx, dy) = (x - cx, y - cy);
        let d = (dx * dx + dy * dy).sqrt();
        // compactly supported window keeps the left part of the tile exactly planar
        let window = if d < radius {
            let t = d / radius;
            (1.0 - t * t).powi(3)
        } else {
            0.0
        };
        let cliff = (40.0 * (dx * ca + dy * sa)).tanh();
        let ripples = (std::f64::consts::TAU * (k1[0] * x + k1[1] * y)).sin()
            * (std::f64::consts::TAU * (k2[0] * x + k2[1] * y)).cos();
        plane + window * (0.5 * cliff + 0.25 * ripples)
    })
}

/// Spectral synthesis: exact power-law amplitudes, random phases with
/// Hermitian symmetry, inverse 2-D DFT.
fn synth_fractal(rng: &mut SeededRng, w: usize, h: usize, beta: f64) -> Grid {
    let mut spec = vec![Complex::new(0.0, 0.0); w * h];
    for v in 0..h {
        for u in 0..w {
            let pu = (w - u) % w;
            let pv = (h - v) % h;
            let idx = v * w + u;
            let partner = pv * w + pu;
            if partner < idx {
                continue;
            }
            let ku = if u <= w / 2 {
                u as f64
            } else {
                u as f64 - w as f64
            };
            let kv = if v <= h / 2 {
                v as f64
            } else {
                v as f64 - h as f64
            };
            let k = (ku * ku + kv * kv).sqrt();
            if k == 0.0 {
                continue;
            }
            let amp = k.powf(-beta / 2.0);
            if partner == idx {
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                spec[idx] = Complex::new(sign * amp, 0.0);
            } else {
                let phi = rng.uniform_in(0.0, std::f64::consts::TAU);
                let z = Complex::from_polar(amp, phi);
                spec[idx] = z;
                spec[partner] = z.conj();
            }
        }
    }
    let data = inverse_dft_2d(spec, w, h);
    Grid {
        width: w,
        height: h,
        data,
    }
}

fn inverse_dft_2d(mut buf: Vec<Complex<f64>>, w: usize, h: usize) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_inverse(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_inverse(h);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            column[r] = buf[r * w + c];
        }
        col_fft.process(&mut column);
        for r in 0..h {
            buf[r * w + c] = column[r];
        }
    }
    let scale = 1.0 / (w * h) as f64;
    buf.iter().map(|z| z.re * scale).collect()
}
