//! Fidelity metrics on normalized elevations, meters and gradients.

use std::fmt;

use crate::error::{Error, Result};
use crate::raster::{finite_diff_gradients, GradientGrid, Grid};
use crate::siren::{SirenStage, Want};

/// PSNR with peak 1; an exact match has no finite value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Db(f64),
    Lossless,
}

impl Psnr {
    /// Numeric dB, `+inf` for lossless.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Db(v) => v,
            Psnr::Lossless => f64::INFINITY,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.4}"),
            Psnr::Lossless => f.write_str("lossless"),
        }
    }
}

fn same_dims(a: &Grid, b: &Grid) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::DimMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )))
    }
}

pub fn mse(pred: &Grid, truth: &Grid) -> Result<f64> {
    same_dims(pred, truth)?;
    let n = pred.len() as f64;
    Ok(pred
        .data
        .iter()
        .zip(&truth.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `-10 log10(MSE)` on normalized grids.
pub fn psnr(pred: &Grid, truth: &Grid) -> Result<Psnr> {
    let m = mse(pred, truth)?;
    Ok(if m == 0.0 {
        Psnr::Lossless
    } else {
        Psnr::Db(-10.0 * m.log10())
    })
}

/// Mean over nodes of `|dgx| + |dgy|`.
pub fn grad_mae(model: &GradientGrid, truth: &GradientGrid) -> Result<f64> {
    same_dims(&model.gx, &truth.gx)?;
    same_dims(&model.gy, &truth.gy)?;
    let n = model.gx.len() as f64;
    let sum: f64 = (0..model.gx.len())
        .map(|i| (model.gx.data[i] - truth.gx.data[i]).abs() + (model.gy.data[i] - truth.gy.data[i]).abs())
        .sum();
    Ok(sum / n)
}

/// Mean and max absolute error in meters.
pub fn mae_maxae(pred: &Grid, truth: &Grid, z_range: f64) -> Result<(f64, f64)> {
    same_dims(pred, truth)?;
    if !(z_range > 0.0) {
        return Err(Error::InvalidArgument(format!("z_range must be > 0, got {z_range}")));
    }
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for (a, b) in pred.data.iter().zip(&truth.data) {
        let e = (a - b).abs();
        sum += e;
        max = max.max(e);
    }
    Ok((sum / pred.len() as f64 * z_range, max * z_range))
}

/// Analytical stage gradients at the nodes of a `w x h` grid.
pub fn stage_gradients(stage: &SirenStage, w: usize, h: usize) -> Result<GradientGrid> {
    let coords = crate::model::grid_coords(w, h);
    let res = stage.batch_eval(&coords, None, Want::ValueGrad)?;
    Ok(GradientGrid {
        gx: Grid::new(w, h, res.iter().map(|r| r.grad[0]).collect())?,
        gy: Grid::new(w, h, res.iter().map(|r| r.grad[1]).collect())?,
    })
}

/// GradMAE of the shape stage against finite differences of its target.
pub fn shape_grad_mae(shape: &SirenStage, target: &Grid) -> Result<f64> {
    let truth = finite_diff_gradients(target)?;
    let model = stage_gradients(shape, target.width, target.height)?;
    grad_mae(&model, &truth)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FidelityReport {
    pub psnr: Option<Psnr>,
    pub mae_m: Option<f64>,
    pub maxae_m: Option<f64>,
    pub gradmae: Option<f64>,
    pub bpp: Option<f64>,
    /// `(phase, milliseconds)`.
    pub wall_ms: Vec<(String, f64)>,
}

impl FidelityReport {
    /// PSNR, MAE and MaxAE of a normalized prediction against the truth.
    pub fn compare(pred: &Grid, truth: &Grid, z_range: f64) -> Result<Self> {
        let (mae, maxae) = mae_maxae(pred, truth, z_range)?;
        Ok(FidelityReport {
            psnr: Some(psnr(pred, truth)?),
            mae_m: Some(mae),
            maxae_m: Some(maxae),
            ..Default::default()
        })
    }
}

/// `key value` lines, fixed order, absent fields omitted.
impl fmt::Display for FidelityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = self.psnr {
            writeln!(f, "psnr_db {p}")?;
        }
        if let Some(v) = self.mae_m {
            writeln!(f, "mae_m {v:.6}")?;
        }
        if let Some(v) = self.maxae_m {
            writeln!(f, "maxae_m {v:.6}")?;
        }
        if let Some(v) = self.gradmae {
            writeln!(f, "gradmae {v:.6}")?;
        }
        if let Some(v) = self.bpp {
            writeln!(f, "bpp {v:.4}")?;
        }
        for (phase, ms) in &self.wall_ms {
            writeln!(f, "wall_ms_{phase} {ms:.1}")?;
        }
        Ok(())
    }
}
