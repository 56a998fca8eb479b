//! Occupancy-grid SLAM with multi-resolution Gauss-Newton scan matching.

use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;
use thiserror::Error;

use crate::geom::{Point2, Pose2D};
use crate::sensors::LaserScan;
use crate::world::{log_odds_to_probability, OccupancyGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SlamError {
    #[error("pose ({x}, {y}) lies outside the map")]
    PoseOutsideMap { x: f64, y: f64 },
    #[error("pyramid needs at least one level")]
    NoLevels,
    #[error("bad map geometry: {0}")]
    Geometry(String),
}

/// Counters from one [`grid_update`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GridUpdateReport {
    pub beams_applied: usize,
    pub beams_outside: usize,
    /// Inclusive cell bounds touched by the update, if any.
    pub touched: Option<(usize, usize, usize, usize)>,
}

impl GridUpdateReport {
    fn touch(&mut self, ix: usize, iy: usize) {
        self.touched = Some(match self.touched {
            None => (ix, iy, ix, iy),
            Some((x0, y0, x1, y1)) => (x0.min(ix), y0.min(iy), x1.max(ix), y1.max(iy)),
        });
    }
}

/// Cells strictly between `a` and `b` on the Bresenham line, then `b`.
fn bresenham(a: (i64, i64), b: (i64, i64), mut visit: impl FnMut(i64, i64, bool)) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if (x, y) == b {
            visit(x, y, true);
            return;
        }
        visit(x, y, false);
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Integrates one scan taken at `pose` into the grid.
///
/// Each beam marks its endpoint cell occupied and the cells it traverses
/// free. Within one scan every cell changes at most once, and an occupied
/// mark takes precedence over free marks from other beams. MISS beams only
/// clear space when `clear_miss` is set.
pub fn grid_update(
    g: &mut OccupancyGrid,
    pose: &Pose2D,
    scan: &LaserScan,
    l_occ: f64,
    l_free: f64,
    clear_miss: bool,
) -> Result<GridUpdateReport, SlamError> {
    let Some(start) = g.cell_at(&pose.position()) else {
        return Err(SlamError::PoseOutsideMap { x: pose.x, y: pose.y });
    };
    let start = (start.0 as i64, start.1 as i64);
    let (w, h) = (g.width() as i64, g.height() as i64);
    // 0 untouched, 1 free, 2 occupied.
    let mut mark = vec![0u8; g.len()];
    let mut report = GridUpdateReport::default();
    for i in 0..scan.len() {
        let r = scan.ranges[i];
        let hit = scan.is_valid_range(r);
        if !hit && !(clear_miss && r.is_infinite()) {
            continue;
        }
        let reach = if hit { r } else { scan.range_max };
        let a = pose.theta + scan.bearing(i);
        let end = Point2::new(pose.x + reach * a.cos(), pose.y + reach * a.sin());
        let (u, v) = g.world_to_map(&end);
        let end_cell = (u.floor() as i64, v.floor() as i64);
        let inside = |c: (i64, i64)| c.0 >= 0 && c.1 >= 0 && c.0 < w && c.1 < h;
        if hit && !inside(end_cell) {
            report.beams_outside += 1;
            continue;
        }
        report.beams_applied += 1;
        bresenham(start, end_cell, |x, y, last| {
            if !inside((x, y)) {
                return;
            }
            let idx = (y * w + x) as usize;
            if last && hit {
                mark[idx] = 2;
            } else if mark[idx] == 0 {
                mark[idx] = 1;
            }
        });
    }
    for (idx, m) in mark.iter().enumerate() {
        if *m == 0 {
            continue;
        }
        let (ix, iy) = (idx % g.width(), idx / g.width());
        g.add_log_odds(ix, iy, if *m == 2 { l_occ } else { l_free });
        report.touch(ix, iy);
    }
    Ok(report)
}

/// A grid plus successively half-resolution copies of it.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPyramid {
    levels: Vec<OccupancyGrid>,
    probs: Vec<Vec<f64>>,
}

fn coarsen(fine: &OccupancyGrid) -> OccupancyGrid {
    let w = fine.width().div_ceil(2);
    let h = fine.height().div_ceil(2);
    let mut g = OccupancyGrid::new(w, h, fine.resolution() * 2.0, fine.origin()).expect("non-empty level");
    pool_region(fine, &mut g, 0, 0, w - 1, h - 1);
    g
}

fn pool_region(fine: &OccupancyGrid, coarse: &mut OccupancyGrid, x0: usize, y0: usize, x1: usize, y1: usize) {
    for cy in y0..=y1 {
        for cx in x0..=x1 {
            let mut best = f64::NEG_INFINITY;
            for (fx, fy) in [
                (2 * cx, 2 * cy),
                (2 * cx + 1, 2 * cy),
                (2 * cx, 2 * cy + 1),
                (2 * cx + 1, 2 * cy + 1),
            ] {
                if fx < fine.width() && fy < fine.height() {
                    best = best.max(fine.log_odds(fx, fy));
                }
            }
            coarse.set_log_odds(cx, cy, best);
        }
    }
}

fn prob_cache(g: &OccupancyGrid) -> Vec<f64> {
    g.cells().iter().map(|&l| log_odds_to_probability(l)).collect()
}

/// Max-pools `g` into `n_levels` levels; level 0 is `g` itself.
pub fn build_pyramid(g: &OccupancyGrid, n_levels: usize) -> Result<MapPyramid, SlamError> {
    if n_levels == 0 {
        return Err(SlamError::NoLevels);
    }
    let mut levels = vec![g.clone()];
    for _ in 1..n_levels {
        let next = coarsen(levels.last().expect("non-empty"));
        levels.push(next);
    }
    let probs = levels.iter().map(prob_cache).collect();
    Ok(MapPyramid { levels, probs })
}

impl MapPyramid {
    pub fn levels(&self) -> &[OccupancyGrid] {
        &self.levels
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &OccupancyGrid {
        &self.levels[0]
    }

    pub fn finest_mut(&mut self) -> &mut OccupancyGrid {
        &mut self.levels[0]
    }

    /// Recomputes the coarse levels (and probability caches) above the
    /// inclusive level-0 cell box.
    pub fn refresh_region(&mut self, x0: usize, y0: usize, x1: usize, y1: usize) {
        let (mut x0, mut y0, mut x1, mut y1) = (x0, y0, x1, y1);
        refresh_probs(&self.levels[0], &mut self.probs[0], x0, y0, x1, y1);
        for k in 1..self.levels.len() {
            (x0, y0, x1, y1) = (x0 / 2, y0 / 2, x1 / 2, y1 / 2);
            let (fine, coarse) = self.levels.split_at_mut(k);
            let coarse = &mut coarse[0];
            let x1c = x1.min(coarse.width() - 1);
            let y1c = y1.min(coarse.height() - 1);
            pool_region(&fine[k - 1], coarse, x0, y0, x1c, y1c);
            refresh_probs(coarse, &mut self.probs[k], x0, y0, x1c, y1c);
        }
    }

    pub fn refresh(&mut self) {
        let g = &self.levels[0];
        self.refresh_region(0, 0, g.width() - 1, g.height() - 1);
    }

    /// Bilinear occupancy probability at continuous level-`k` cell
    /// coordinates and its gradient with respect to them. Cell values sit
    /// at cell centers. `None` when the stencil leaves the grid.
    pub fn interpolate(&self, k: usize, u: f64, v: f64) -> Option<(f64, f64, f64)> {
        let g = &self.levels[k];
        let p = &self.probs[k];
        let x = u - 0.5;
        let y = v - 0.5;
        let (fx0, fy0) = (x.floor(), y.floor());
        if !(fx0 >= 0.0 && fy0 >= 0.0) || fx0 + 1.0 >= g.width() as f64 || fy0 + 1.0 >= g.height() as f64 {
            return None;
        }
        let (i, j) = (fx0 as usize, fy0 as usize);
        let w = g.width();
        let m00 = p[j * w + i];
        let m10 = p[j * w + i + 1];
        let m01 = p[(j + 1) * w + i];
        let m11 = p[(j + 1) * w + i + 1];
        let (fx, fy) = (x - fx0, y - fy0);
        let m = (1.0 - fy) * ((1.0 - fx) * m00 + fx * m10) + fy * ((1.0 - fx) * m01 + fx * m11);
        let du = (1.0 - fy) * (m10 - m00) + fy * (m11 - m01);
        let dv = (1.0 - fx) * (m01 - m00) + fx * (m11 - m10);
        Some((m, du, dv))
    }
}

fn refresh_probs(g: &OccupancyGrid, p: &mut [f64], x0: usize, y0: usize, x1: usize, y1: usize) {
    for iy in y0..=y1.min(g.height() - 1) {
        for ix in x0..=x1.min(g.width() - 1) {
            p[g.index(ix, iy)] = g.probability(ix, iy);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchOptions {
    /// Gauss-Newton iterations allowed per pyramid level.
    pub max_iter: usize,
    pub eps_xy: f64,
    pub eps_theta: f64,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            max_iter: 20,
            eps_xy: 1e-4,
            eps_theta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanMatchResult {
    pub pose: Pose2D,
    /// Accepted iterations summed over all levels.
    pub iterations: usize,
    pub converged: bool,
    /// Mean squared residual at the final pose on the finest level.
    pub final_residual: f64,
    /// Final normal-equations matrix on the finest level (metric units).
    pub hessian: Matrix3<f64>,
    /// `(level, mean squared residual)` after each accepted iteration.
    pub history: Vec<(usize, f64)>,
}

struct Normal {
    h: Matrix3<f64>,
    g: Vector3<f64>,
    sse: f64,
    n: usize,
}

/// Residual `1 − M(S(ξ))` of one endpoint and `∇M·∂S/∂ξ` in metric units.
fn point_term(pyr: &MapPyramid, k: usize, pose: &Pose2D, p: &Point2) -> Option<(f64, Vector3<f64>)> {
    let g = &pyr.levels[k];
    let res = g.resolution();
    let (so, co) = g.origin().theta.sin_cos();
    let (s, c) = pose.theta.sin_cos();
    let wx = pose.x + c * p.x - s * p.y;
    let wy = pose.y + s * p.x + c * p.y;
    let (u, v) = g.world_to_map(&Point2::new(wx, wy));
    let (m, du, dv) = pyr.interpolate(k, u, v)?;
    // Map-coordinate gradient rotated back to the world frame, per meter.
    let gx = (co * du - so * dv) / res;
    let gy = (so * du + co * dv) / res;
    let dth = gx * (-s * p.x - c * p.y) + gy * (c * p.x - s * p.y);
    Some((1.0 - m, Vector3::new(gx, gy, dth)))
}

/// Residual sum and normal equations of `Σ (1 − M(S_i(ξ)))²` at `pose`.
fn normal_equations(pyr: &MapPyramid, k: usize, pose: &Pose2D, pts: &[Point2]) -> Normal {
    let mut out = Normal {
        h: Matrix3::zeros(),
        g: Vector3::zeros(),
        sse: 0.0,
        n: 0,
    };
    for p in pts {
        if let Some((r, j)) = point_term(pyr, k, pose, p) {
            out.h += j * j.transpose();
            out.g += j * r;
            out.sse += r * r;
            out.n += 1;
        }
    }
    out
}

/// Mean squared residual of the scan at `pose` on level `k`; infinite when
/// no endpoint lands on the map.
pub fn match_residual(pyr: &MapPyramid, k: usize, pose: &Pose2D, pts: &[Point2]) -> f64 {
    let ne = normal_equations(pyr, k, pose, pts);
    if ne.n == 0 {
        f64::INFINITY
    } else {
        ne.sse / ne.n as f64
    }
}

/// Residuals `r_i = 1 − M` and their analytic gradients `∂r_i/∂(x, y, θ)`.
/// Endpoints off the map yield `None`.
pub fn residual_jacobian(
    pyr: &MapPyramid,
    k: usize,
    pose: &Pose2D,
    pts: &[Point2],
) -> Vec<Option<(f64, Vector3<f64>)>> {
    pts.iter()
        .map(|p| point_term(pyr, k, pose, p).map(|(r, j)| (r, -j)))
        .collect()
}

fn solve_step(h: &Matrix3<f64>, g: &Vector3<f64>) -> Option<Vector3<f64>> {
    let scale = h.abs().max();
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let chol = (h / scale).cholesky()?;
    let d = chol.l().diagonal();
    let (dmax, dmin) = (d.max(), d.min());
    if dmin <= 0.0 || dmax / dmin > 1e6 {
        return None;
    }
    Some(chol.solve(g) / scale)
}

/// Coarse-to-fine Gauss-Newton alignment of `scan` to the pyramid.
pub fn match_scan(pyr: &MapPyramid, prior: &Pose2D, scan: &LaserScan, opts: &MatchOptions) -> ScanMatchResult {
    let pts = scan.endpoints();
    let singular = |prior: &Pose2D| ScanMatchResult {
        pose: *prior,
        iterations: 0,
        converged: false,
        final_residual: match_residual(pyr, 0, prior, &pts),
        hessian: Matrix3::zeros(),
        history: Vec::new(),
    };
    if pyr.finest().cell_at(&prior.position()).is_none() || pts.is_empty() {
        return singular(prior);
    }
    let mut pose = *prior;
    let mut iterations = 0;
    let mut history = Vec::new();
    let mut converged = false;
    for k in (0..pyr.n_levels()).rev() {
        converged = false;
        let mut ne = normal_equations(pyr, k, &pose, &pts);
        for _ in 0..opts.max_iter {
            let Some(step) = solve_step(&ne.h, &ne.g) else {
                if k == 0 || iterations == 0 && k == pyr.n_levels() - 1 {
                    // Nothing to align against.
                    return singular(prior);
                }
                break;
            };
            let current = if ne.n == 0 { f64::INFINITY } else { ne.sse / ne.n as f64 };
            let mut step = step;
            let mut accepted = None;
            for _ in 0..=5 {
                let cand = Pose2D::new(pose.x + step[0], pose.y + step[1], pose.theta + step[2]);
                let cand_ne = normal_equations(pyr, k, &cand, &pts);
                let cand_res = if cand_ne.n == 0 {
                    f64::INFINITY
                } else {
                    cand_ne.sse / cand_ne.n as f64
                };
                if cand_res <= current {
                    accepted = Some((cand, cand_ne, cand_res));
                    break;
                }
                step *= 0.5;
            }
            let Some((cand, cand_ne, cand_res)) = accepted else {
                converged = true;
                break;
            };
            pose = cand;
            ne = cand_ne;
            iterations += 1;
            history.push((k, cand_res));
            if step[0].hypot(step[1]) < opts.eps_xy && step[2].abs() < opts.eps_theta {
                converged = true;
                break;
            }
        }
    }
    let fine = normal_equations(pyr, 0, &pose, &pts);
    if solve_step(&fine.h, &fine.g).is_none() {
        return singular(prior);
    }
    ScanMatchResult {
        pose,
        iterations,
        converged,
        final_residual: if fine.n == 0 {
            f64::INFINITY
        } else {
            fine.sse / fine.n as f64
        },
        hessian: fine.h,
        history,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlamConfig {
    pub resolution: f64,
    /// Map extent in meters.
    pub size: [f64; 2],
    /// Map-frame position of the grid's lower-left corner.
    pub origin: [f64; 2],
    pub n_levels: usize,
    pub l_occ: f64,
    pub l_free: f64,
    pub clear_miss: bool,
    pub update_min_d: f64,
    pub update_min_a: f64,
    /// Mean squared residual above which a match counts as diverged.
    pub max_residual: f64,
    pub matcher: MatchOptions,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            resolution: 0.05,
            size: [60.0, 60.0],
            origin: [-30.0, -30.0],
            n_levels: 3,
            l_occ: 0.9,
            l_free: -0.4,
            clear_miss: false,
            update_min_d: 0.2,
            update_min_a: 0.15,
            max_residual: 0.5,
            matcher: MatchOptions::default(),
        }
    }
}

impl SlamConfig {
    pub fn new_grid(&self) -> Result<OccupancyGrid, SlamError> {
        let w = (self.size[0] / self.resolution).round() as usize;
        let h = (self.size[1] / self.resolution).round() as usize;
        OccupancyGrid::new(w, h, self.resolution, Pose2D::new(self.origin[0], self.origin[1], 0.0))
            .map_err(|e| SlamError::Geometry(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlamEvent {
    Seeded,
    Matched,
    MapUpdated,
    /// Matching failed or diverged; the pose fell back to the prior.
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlamStepReport {
    pub pose: Pose2D,
    pub events: Vec<SlamEvent>,
    pub matched: Option<ScanMatchResult>,
}

#[derive(Debug, Clone)]
pub struct Slam {
    pyramid: MapPyramid,
    config: SlamConfig,
    pose: Option<Pose2D>,
    last_update: Pose2D,
}

impl Slam {
    pub fn new(config: SlamConfig) -> Result<Self, SlamError> {
        let grid = config.new_grid()?;
        Ok(Self {
            pyramid: build_pyramid(&grid, config.n_levels)?,
            config,
            pose: None,
            last_update: Pose2D::IDENTITY,
        })
    }

    pub fn pose(&self) -> Option<Pose2D> {
        self.pose
    }

    pub fn map(&self) -> &OccupancyGrid {
        self.pyramid.finest()
    }

    pub fn pyramid(&self) -> &MapPyramid {
        &self.pyramid
    }

    pub fn config(&self) -> &SlamConfig {
        &self.config
    }

    fn integrate(&mut self, pose: &Pose2D, scan: &LaserScan) -> Result<(), SlamError> {
        let c = self.config;
        let rep = grid_update(self.pyramid.finest_mut(), pose, scan, c.l_occ, c.l_free, c.clear_miss)?;
        if let Some((x0, y0, x1, y1)) = rep.touched {
            self.pyramid.refresh_region(x0, y0, x1, y1);
        }
        self.last_update = *pose;
        Ok(())
    }

    /// Processes one scan. `prior` is the odometry-predicted pose in the
    /// map frame; the first scan seeds the map at `prior`.
    pub fn step(&mut self, scan: &LaserScan, prior: &Pose2D) -> Result<SlamStepReport, SlamError> {
        if self.pose.is_none() {
            self.integrate(prior, scan)?;
            self.pose = Some(*prior);
            return Ok(SlamStepReport {
                pose: *prior,
                events: vec![SlamEvent::Seeded],
                matched: None,
            });
        }
        let result = match_scan(&self.pyramid, prior, scan, &self.config.matcher);
        let mut events = Vec::new();
        let ok = result.iterations > 0 || result.converged;
        let ok = ok && result.final_residual <= self.config.max_residual && result.pose.is_finite();
        let pose = if ok {
            events.push(SlamEvent::Matched);
            result.pose
        } else {
            events.push(SlamEvent::Diverged);
            *prior
        };
        self.pose = Some(pose);
        if ok {
            let moved = self.last_update.between(&pose);
            if moved.x.hypot(moved.y) > self.config.update_min_d || moved.theta.abs() > self.config.update_min_a {
                self.integrate(&pose, scan)?;
                events.push(SlamEvent::MapUpdated);
            }
        }
        Ok(SlamStepReport {
            pose,
            events,
            matched: Some(result),
        })
    }
}
