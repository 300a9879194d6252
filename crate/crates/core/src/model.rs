//! The queryable cascade: shape stage plus masked, scaled geometry stage.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::raster::{node_coord, Grid};
use crate::siren::{check_domain, EvalResult, SirenStage, Want, EVAL_BLOCK};
use crate::wcf::{band_mask_matrix, neuron_mask_matrix, ComplexityField, ThresholdSet, WcfDecoder};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileMeta {
    pub width: usize,
    pub height: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub cell_size: f64,
}

impl TileMeta {
    pub fn z_range(&self) -> f64 {
        self.z_max - self.z_min
    }
}

/// `z(xy) = (shape(xy) + rho * geom(xy; masks(xy))) * (z_max - z_min) + z_min`.
#[derive(Clone, Debug, PartialEq)]
pub struct TerrainModel {
    pub shape: SirenStage,
    pub geom: SirenStage,
    pub decoder: WcfDecoder,
    pub thresholds: ThresholdSet,
    pub field: ComplexityField,
    /// `rho`, the residual normalization.
    pub residual_scale: f64,
    /// When false the geometry stage runs with all masks fixed at 1.
    pub use_masks: bool,
    pub meta: TileMeta,
}

impl TerrainModel {
    /// Per-neuron geometry masks `(rows, n)` at `coords`.
    pub fn geom_masks(&self, coords: &[[f64; 2]]) -> Array2<f64> {
        if !self.use_masks {
            return Array2::ones((coords.len(), self.geom.neurons()));
        }
        let bands = band_mask_matrix(&self.field, &self.thresholds, coords);
        neuron_mask_matrix(&self.geom.freq.band_ranges(), &bands)
    }

    /// Normalized reconstruction (value and, for `ValueGrad`, input gradient)
    /// at arbitrary coordinates. Masks are held constant in the gradient.
    pub fn eval_normalized(&self, coords: &[[f64; 2]], want: Want) -> Result<Vec<EvalResult>> {
        if coords.is_empty() {
            return Ok(Vec::new());
        }
        for &xy in coords {
            check_domain(xy)?;
        }
        let mut out = Vec::with_capacity(coords.len());
        let rho = self.residual_scale;
        for block in coords.chunks(EVAL_BLOCK) {
            let masks = self.geom_masks(block);
            let s = self.shape.batch_eval(block, None, want)?;
            let g = self.geom.batch_eval(block, Some(masks.view()), want)?;
            for (a, b) in s.iter().zip(&g) {
                out.push(EvalResult {
                    value: a.value + rho * b.value,
                    grad: [a.grad[0] + rho * b.grad[0], a.grad[1] + rho * b.grad[1]],
                    hessian: None,
                });
            }
        }
        Ok(out)
    }

    /// Elevations in meters; gradients in meters per unit normalized coordinate.
    pub fn eval_elevation(&self, coords: &[[f64; 2]], want: Want) -> Result<Vec<EvalResult>> {
        let range = self.meta.z_range();
        let mut out = self.eval_normalized(coords, want)?;
        for r in &mut out {
            r.value = r.value * range + self.meta.z_min;
            r.grad = [r.grad[0] * range, r.grad[1] * range];
        }
        Ok(out)
    }

    /// Normalized reconstruction on a corner-aligned `w x h` grid.
    pub fn reconstruct(&self, w: usize, h: usize) -> Result<Grid> {
        if w < 2 || h < 2 {
            return Err(Error::InvalidArgument(format!(
                "raster dims must be >= 2, got {w}x{h}"
            )));
        }
        let coords = grid_coords(w, h);
        let vals = self.eval_normalized(&coords, Want::Value)?;
        Grid::new(w, h, vals.iter().map(|r| r.value).collect())
    }

    /// Mean band-mask activation over a `w x h` grid, one entry per gated band.
    pub fn mean_band_activation(&self, w: usize, h: usize) -> Vec<f64> {
        let coords = grid_coords(w, h);
        let bands = band_mask_matrix(&self.field, &self.thresholds, &coords);
        bands
            .mean_axis(Axis(0))
            .map_or_else(Vec::new, |m| m.to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.shape.is_finite()
            && self.geom.is_finite()
            && self.decoder.is_finite()
            && self.residual_scale.is_finite()
    }
}

/// Corner-aligned node coordinates of a `w x h` grid, row-major.
pub fn grid_coords(w: usize, h: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            out.push([node_coord(c, w), node_coord(r, h)]);
        }
    }
    out
}
