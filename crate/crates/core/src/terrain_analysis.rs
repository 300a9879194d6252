//! Slope, aspect and mean curvature from analytical derivatives, plus
//! critical points and separatrices of the shape stage.

use std::f64::consts::FRAC_PI_2;

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::grid_coords;
use crate::raster::Grid;
use crate::siren::{Dense, FrequencyTable, SirenStage};

pub const TOL_ROOT: f64 = 1e-6;
pub const TOL_DEGENERATE: f64 = 1e-8;
pub const DEDUP_RADIUS: f64 = 1e-4;
/// Roots outside `[ROOT_DOMAIN.0, ROOT_DOMAIN.1]^2` are discarded.
pub const ROOT_DOMAIN: (f64, f64) = (-0.01, 1.01);
pub const NEWTON_MAX_ITERS: usize = 50;
/// Longest Newton step, in normalized units.
pub const MAX_NEWTON_STEP: f64 = 0.05;
const SINGULAR_DET: f64 = 1e-14;

/// `sin(2 pi x) sin(2 pi y)` as a stage with no hidden layers.
pub fn product_of_sines() -> SirenStage {
    let freq = FrequencyTable::explicit(vec![[1, -1], [1, 1]], vec![FRAC_PI_2, FRAC_PI_2]);
    SirenStage {
        freq,
        omega0: 30.0,
        hidden: vec![],
        output: Dense {
            weight: Array2::from_shape_vec((1, 2), vec![0.5, -0.5]).expect("1x2"),
            bias: Array1::zeros(1),
        },
    }
}

pub fn slope(grad: [f64; 2]) -> f64 {
    grad[0].hypot(grad[1]).atan()
}

/// Radians counterclockwise from `+x`.
pub fn aspect(grad: [f64; 2]) -> f64 {
    grad[1].atan2(grad[0])
}

pub fn mean_curvature(grad: [f64; 2], h: [[f64; 2]; 2]) -> f64 {
    let [px, py] = grad;
    let num = (1.0 + py * py) * h[0][0] - 2.0 * px * py * h[0][1] + (1.0 + px * px) * h[1][1];
    num / (2.0 * (1.0 + px * px + py * py).powf(1.5))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopoRasters {
    pub slope: Grid,
    pub aspect: Grid,
    pub curvature: Grid,
}

/// Evaluated on the corner-aligned `w x h` grid.
pub fn topo_rasters(stage: &SirenStage, w: usize, h: usize) -> Result<TopoRasters> {
    if w < 2 || h < 2 {
        return Err(Error::InvalidArgument(format!("raster dims must be >= 2, got {w}x{h}")));
    }
    let coords = grid_coords(w, h);
    let mut s = Vec::with_capacity(coords.len());
    let mut a = Vec::with_capacity(coords.len());
    let mut k = Vec::with_capacity(coords.len());
    for xy in coords {
        let r = stage.eval_with_hessian(xy)?;
        let hess = r.hessian.expect("hessian requested");
        s.push(slope(r.grad));
        a.push(aspect(r.grad));
        k.push(mean_curvature(r.grad, hess));
    }
    Ok(TopoRasters {
        slope: Grid::new(w, h, s)?,
        aspect: Grid::new(w, h, a)?,
        curvature: Grid::new(w, h, k)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticalKind {
    Minimum,
    Maximum,
    Saddle,
    Degenerate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CriticalPoint {
    pub xy: [f64; 2],
    pub value: f64,
    pub kind: CriticalKind,
    pub grad_norm: f64,
    /// Ascending order.
    pub eigenvalues: [f64; 2],
}

/// Eigenvalues (ascending) and unit eigenvectors of a symmetric 2x2 matrix.
pub fn symmetric_eigen(h: [[f64; 2]; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
    let (a, b, c) = (h[0][0], h[0][1], h[1][1]);
    let mean = 0.5 * (a + c);
    let rad = (0.5 * (a - c)).hypot(b);
    let (l0, l1) = (mean - rad, mean + rad);
    if b == 0.0 {
        return if a <= c {
            ([a, c], [[1.0, 0.0], [0.0, 1.0]])
        } else {
            ([c, a], [[0.0, 1.0], [1.0, 0.0]])
        };
    }
    let vec_for = |l: f64| {
        // rows (a-l, b) and (b, c-l); use the better-conditioned one
        let v = if (a - l).abs() > (c - l).abs() {
            [-b, a - l]
        } else {
            [c - l, -b]
        };
        let n = v[0].hypot(v[1]);
        [v[0] / n, v[1] / n]
    };
    ([l0, l1], [vec_for(l0), vec_for(l1)])
}

pub fn classify(eigenvalues: [f64; 2]) -> CriticalKind {
    let [l0, l1] = eigenvalues;
    if l0.abs() < TOL_DEGENERATE || l1.abs() < TOL_DEGENERATE {
        CriticalKind::Degenerate
    } else if l0 > 0.0 {
        CriticalKind::Minimum
    } else if l1 < 0.0 {
        CriticalKind::Maximum
    } else {
        CriticalKind::Saddle
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonConfig {
    pub tol_root: f64,
    pub max_iters: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            tol_root: TOL_ROOT,
            max_iters: NEWTON_MAX_ITERS,
        }
    }
}

/// Converged root and iteration count, or `None` if the start was abandoned.
pub fn newton_from(stage: &SirenStage, start: [f64; 2], cfg: &NewtonConfig) -> Option<([f64; 2], usize)> {
    let mut x = start;
    let mut damped = false;
    for iter in 0..=cfg.max_iters {
        let r = stage.eval_with_hessian(x).ok()?;
        let g = r.grad;
        if g[0].hypot(g[1]) < cfg.tol_root {
            return Some((x, iter));
        }
        if iter == cfg.max_iters {
            return None;
        }
        let h = r.hessian.expect("hessian requested");
        let scale = h[0][0].abs() + h[1][1].abs() + 2.0 * h[0][1].abs();
        let det = h[0][0] * h[1][1] - h[0][1] * h[0][1];
        let step = if det.abs() > SINGULAR_DET * scale.max(1.0).powi(2) {
            solve2(h, g)
        } else if !damped {
            // one Levenberg-damped step, then give up on a second singularity
            damped = true;
            let mu = 1e-2 * scale.max(1.0);
            let hd = [[h[0][0] + mu, h[0][1]], [h[1][0], h[1][1] + mu]];
            solve2(hd, g)
        } else {
            return None;
        };
        let len = step[0].hypot(step[1]);
        let shrink = if len > MAX_NEWTON_STEP { MAX_NEWTON_STEP / len } else { 1.0 };
        x = [x[0] - shrink * step[0], x[1] - shrink * step[1]];
        if !x.iter().all(|t| (-0.1..=1.1).contains(t)) {
            return None;
        }
    }
    None
}

fn solve2(h: [[f64; 2]; 2], g: [f64; 2]) -> [f64; 2] {
    let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    [
        (h[1][1] * g[0] - h[0][1] * g[1]) / det,
        (h[0][0] * g[1] - h[1][0] * g[0]) / det,
    ]
}

/// Evenly spaced starts, `per_side` per axis, corners included.
pub fn seed_lattice(per_side: usize) -> Vec<[f64; 2]> {
    let n = per_side.max(2);
    grid_coords(n, n)
}

/// Newton from every seed; roots deduplicated, out-of-domain roots dropped.
pub fn find_critical_points(
    stage: &SirenStage,
    seeds: &[[f64; 2]],
    cfg: &NewtonConfig,
) -> Result<Vec<CriticalPoint>> {
    let mut found: Vec<CriticalPoint> = Vec::new();
    let inside = |t: f64| (ROOT_DOMAIN.0..=ROOT_DOMAIN.1).contains(&t);
    for &s in seeds {
        let Some((xy, _)) = newton_from(stage, s, cfg) else {
            continue;
        };
        if !(inside(xy[0]) && inside(xy[1])) {
            continue;
        }
        if found
            .iter()
            .any(|c| (c.xy[0] - xy[0]).hypot(c.xy[1] - xy[1]) < DEDUP_RADIUS)
        {
            continue;
        }
        let r = stage.eval_with_hessian(xy)?;
        let (eig, _) = symmetric_eigen(r.hessian.expect("hessian requested"));
        found.push(CriticalPoint {
            xy,
            value: r.value,
            kind: classify(eig),
            grad_norm: r.grad[0].hypot(r.grad[1]),
            eigenvalues: eig,
        });
    }
    found.sort_by(|a, b| {
        a.xy[1]
            .total_cmp(&b.xy[1])
            .then(a.xy[0].total_cmp(&b.xy[0]))
    });
    Ok(found)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowDirection {
    Ascending,
    Descending,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Terminus {
    Critical { point: CriticalPoint },
    Boundary,
    Unresolved,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Separatrix {
    pub origin: CriticalPoint,
    pub direction: FlowDirection,
    pub polyline: Vec<[f64; 2]>,
    pub terminus: Terminus,
}

fn flow(stage: &SirenStage, x: [f64; 2], sign: f64) -> Option<[f64; 2]> {
    let g = stage.eval_with_grad(x, None).ok()?.grad;
    let n = g[0].hypot(g[1]);
    if n < 1e-12 {
        return None;
    }
    Some([sign * g[0] / n, sign * g[1] / n])
}

fn rk4(stage: &SirenStage, x: [f64; 2], h: f64, sign: f64) -> Option<[f64; 2]> {
    let at = |p: [f64; 2], k: [f64; 2], f: f64| [p[0] + f * k[0], p[1] + f * k[1]];
    let k1 = flow(stage, x, sign)?;
    let k2 = flow(stage, at(x, k1, h / 2.0), sign)?;
    let k3 = flow(stage, at(x, k2, h / 2.0), sign)?;
    let k4 = flow(stage, at(x, k3, h), sign)?;
    Some([
        x[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        x[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ])
}

fn in_root_domain(x: [f64; 2]) -> bool {
    x.iter().all(|t| (ROOT_DOMAIN.0..=ROOT_DOMAIN.1).contains(t))
}

/// Four traces per saddle: two ascending along the positive-curvature
/// eigenvector, two descending along the negative one.
pub fn trace_separatrices(
    stage: &SirenStage,
    critical: &[CriticalPoint],
    step: f64,
    max_steps: usize,
) -> Result<Vec<Separatrix>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    let mut out = Vec::new();
    for (si, saddle) in critical.iter().enumerate() {
        if saddle.kind != CriticalKind::Saddle {
            continue;
        }
        let r = stage.eval_with_hessian(saddle.xy)?;
        let (_, vecs) = symmetric_eigen(r.hessian.expect("hessian requested"));
        for (direction, v, sign) in [
            (FlowDirection::Ascending, vecs[1], 1.0),
            (FlowDirection::Descending, vecs[0], -1.0),
        ] {
            for side in [1.0, -1.0] {
                let start = [saddle.xy[0] + side * step * v[0], saddle.xy[1] + side * step * v[1]];
                out.push(trace_one(stage, critical, si, *saddle, direction, start, sign, step, max_steps));
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn trace_one(
    stage: &SirenStage,
    critical: &[CriticalPoint],
    origin_index: usize,
    origin: CriticalPoint,
    direction: FlowDirection,
    start: [f64; 2],
    sign: f64,
    step: f64,
    max_steps: usize,
) -> Separatrix {
    let mut poly = vec![origin.xy, start];
    let mut x = start;
    let capture = |x: [f64; 2]| {
        critical
            .iter()
            .enumerate()
            .find(|(i, c)| *i != origin_index && (c.xy[0] - x[0]).hypot(c.xy[1] - x[1]) < 2.0 * step)
            .map(|(_, c)| *c)
    };
    let done = |poly: Vec<[f64; 2]>, terminus| Separatrix {
        origin,
        direction,
        polyline: poly,
        terminus,
    };
    for _ in 0..max_steps {
        if !in_root_domain(x) {
            return done(poly, Terminus::Boundary);
        }
        if let Some(c) = capture(x) {
            return done(poly, Terminus::Critical { point: c });
        }
        match rk4(stage, x, step, sign) {
            Some(next) => {
                x = next;
                poly.push(x);
            }
            None => return done(poly, Terminus::Unresolved),
        }
    }
    if !in_root_domain(x) {
        return done(poly, Terminus::Boundary);
    }
    match capture(x) {
        Some(c) => done(poly, Terminus::Critical { point: c }),
        None => done(poly, Terminus::Unresolved),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{PI, TAU};

    fn sine_x() -> SirenStage {
        SirenStage {
            freq: FrequencyTable::explicit(vec![[1, 0]], vec![0.0]),
            omega0: 30.0,
            hidden: vec![],
            output: Dense {
                weight: Array2::from_elem((1, 1), 1.0),
                bias: Array1::zeros(1),
            },
        }
    }

    #[test]
    fn single_sine_closed_forms() {
        let t = topo_rasters(&sine_x(), 3, 3).unwrap();
        // center node is x = 0.5
        assert!((t.slope.get(1, 1) - TAU.atan()).abs() < 1e-12);
        assert!((t.aspect.get(1, 1).abs() - PI).abs() < 1e-12);
        assert!(t.curvature.get(1, 1).abs() < 1e-12);
    }

    #[test]
    fn curvature_formula_examples() {
        assert_eq!(mean_curvature([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]), 1.0);
        assert_eq!(mean_curvature([0.0, 0.0], [[0.0, 0.0], [0.0, 0.0]]), 0.0);
        assert_eq!(slope([0.0, 0.0]), 0.0);
        // oracle: direct formula with all terms nonzero
        let (px, py, a, b, c) = (0.3, -0.7, 1.1, 0.4, -0.2);
        let num = (1.0 + py * py) * a - 2.0 * px * py * b + (1.0 + px * px) * c;
        let den = 2.0 * (1.0f64 + px * px + py * py).powf(1.5);
        assert!((mean_curvature([px, py], [[a, b], [b, c]]) - num / den).abs() < 1e-15);
    }

    #[test]
    fn eigen_decomposition() {
        for h in [[[2.0, 1.0], [1.0, 3.0]], [[-1.0, 0.0], [0.0, 4.0]], [[5.0, 0.0], [0.0, -2.0]], [[0.0, 2.0], [2.0, 0.0]]] {
            let (l, v) = symmetric_eigen(h);
            assert!(l[0] <= l[1]);
            for k in 0..2 {
                let hv = [h[0][0] * v[k][0] + h[0][1] * v[k][1], h[1][0] * v[k][0] + h[1][1] * v[k][1]];
                assert!((hv[0] - l[k] * v[k][0]).abs() < 1e-12 && (hv[1] - l[k] * v[k][1]).abs() < 1e-12);
                assert!((v[k][0].hypot(v[k][1]) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classification() {
        assert_eq!(classify([1.0, 2.0]), CriticalKind::Minimum);
        assert_eq!(classify([-2.0, -1.0]), CriticalKind::Maximum);
        assert_eq!(classify([-1.0, 1.0]), CriticalKind::Saddle);
        assert_eq!(classify([0.0, 1.0]), CriticalKind::Degenerate);
    }

    #[test]
    fn exact_start_needs_no_iterations() {
        let (x, it) = newton_from(&product_of_sines(), [0.25, 0.25], &NewtonConfig::default()).unwrap();
        assert_eq!((x, it), ([0.25, 0.25], 0));
    }

    #[test]
    fn zero_step_rejected() {
        assert!(trace_separatrices(&product_of_sines(), &[], 0.0, 10).is_err());
    }
}
