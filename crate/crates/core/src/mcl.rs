//! Monte Carlo localization on a known occupancy grid.

use std::collections::HashSet;
use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;

use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use thiserror::Error;

use crate::geom::{angle_diff, wrap_angle, Point2, Pose2D};
use crate::sensors::LaserScan;
use crate::world::{CellState, OccupancyGrid, Thresholds};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MclError {
    #[error("particle set is empty")]
    Empty,
    #[error("map has no free cells to scatter particles in")]
    NoFreeSpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MclConfig {
    pub n_min: usize,
    pub n_max: usize,
    /// Odometry noise: rot from rot, rot from trans, trans from trans,
    /// trans from rot.
    pub alphas: [f64; 4],
    pub sigma_hit: f64,
    pub z_hit: f64,
    pub z_rand: f64,
    pub max_beams: usize,
    pub kld_epsilon: f64,
    pub kld_z: f64,
    pub bin_xy: f64,
    pub bin_theta: f64,
    /// Minimum translation between filter updates.
    pub update_min_d: f64,
    /// Minimum rotation between filter updates.
    pub update_min_a: f64,
    /// Averaging rates of the long- and short-term measurement likelihood;
    /// random particles are injected when the short-term average falls
    /// below the long-term one. Zero disables injection.
    pub recovery_alpha_slow: f64,
    pub recovery_alpha_fast: f64,
}

impl Default for MclConfig {
    fn default() -> Self {
        Self {
            n_min: 250,
            n_max: 2000,
            alphas: [0.2, 0.2, 0.1, 0.1],
            sigma_hit: 0.2,
            z_hit: 0.9,
            z_rand: 0.1,
            max_beams: 60,
            kld_epsilon: 0.05,
            kld_z: 2.326,
            bin_xy: 0.5,
            bin_theta: 10f64.to_radians(),
            update_min_d: 0.1,
            update_min_a: 0.1,
            recovery_alpha_slow: 0.0,
            recovery_alpha_fast: 0.0,
        }
    }
}

impl MclConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(format!(
                "mcl needs 0 < n_min <= n_max, got {} and {}",
                self.n_min, self.n_max
            ));
        }
        if (self.z_hit + self.z_rand - 1.0).abs() > 1e-9 || self.z_hit < 0.0 || self.z_rand < 0.0 {
            return Err("mcl.z_hit and mcl.z_rand must be non-negative and sum to 1".into());
        }
        if !(self.sigma_hit > 0.0) || self.max_beams == 0 {
            return Err("mcl.sigma_hit and mcl.max_beams must be positive".into());
        }
        if self.alphas.iter().any(|a| *a < 0.0) {
            return Err("mcl.alphas must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub pose: Pose2D,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    pub config: MclConfig,
}

fn normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    }
}

impl ParticleSet {
    pub fn from_poses(poses: impl IntoIterator<Item = Pose2D>, config: MclConfig) -> Self {
        let mut particles: Vec<Particle> = poses.into_iter().map(|pose| Particle { pose, weight: 1.0 }).collect();
        let n = particles.len().max(1) as f64;
        for p in &mut particles {
            p.weight = 1.0 / n;
        }
        Self { particles, config }
    }

    /// `n` particles spread uniformly over the free cells of `map`, with
    /// uniform heading.
    pub fn uniform<R: Rng + ?Sized>(
        map: &OccupancyGrid,
        n: usize,
        config: MclConfig,
        rng: &mut R,
    ) -> Result<Self, MclError> {
        let t = Thresholds::default();
        let free: Vec<(usize, usize)> = (0..map.height())
            .flat_map(|iy| (0..map.width()).map(move |ix| (ix, iy)))
            .filter(|&(ix, iy)| map.cell_state(ix, iy, &t) == CellState::Free)
            .collect();
        if free.is_empty() {
            return Err(MclError::NoFreeSpace);
        }
        let poses = (0..n).map(|_| {
            let (ix, iy) = free[rng.random_range(0..free.len())];
            let u = ix as f64 + rng.random::<f64>();
            let v = iy as f64 + rng.random::<f64>();
            let p = map.map_to_world(u, v);
            Pose2D::new(p.x, p.y, rng.random_range(-PI..PI))
        });
        Ok(Self::from_poses(poses.collect::<Vec<_>>(), config))
    }

    pub fn gaussian<R: Rng + ?Sized>(
        center: &Pose2D,
        sigma_xy: f64,
        sigma_theta: f64,
        n: usize,
        config: MclConfig,
        rng: &mut R,
    ) -> Self {
        let poses: Vec<Pose2D> = (0..n)
            .map(|_| {
                Pose2D::new(
                    center.x + normal(rng, sigma_xy),
                    center.y + normal(rng, sigma_xy),
                    center.theta + normal(rng, sigma_theta),
                )
            })
            .collect();
        Self::from_poses(poses, config)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    pub fn effective_sample_size(&self) -> f64 {
        let s2: f64 = self.particles.iter().map(|p| p.weight * p.weight).sum();
        if s2 > 0.0 {
            1.0 / s2
        } else {
            0.0
        }
    }

    fn normalize(&mut self) -> bool {
        let total = self.weight_sum();
        let n = self.particles.len() as f64;
        if total > 0.0 && total.is_finite() {
            for p in &mut self.particles {
                p.weight /= total;
            }
            true
        } else {
            for p in &mut self.particles {
                p.weight = 1.0 / n;
            }
            false
        }
    }

    /// Debug dump: `x,y,theta,weight` per particle.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,theta,weight\n");
        for p in &self.particles {
            let _ = writeln!(out, "{},{},{},{}", p.pose.x, p.pose.y, p.pose.theta, p.weight);
        }
        out
    }
}

/// Odometry increment decomposed as rotate, translate, rotate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdomSteps {
    pub rot1: f64,
    pub trans: f64,
    pub rot2: f64,
}

impl OdomSteps {
    /// Decomposes a relative pose expressed in the previous robot frame.
    pub fn from_delta(delta: &Pose2D) -> Self {
        let trans = delta.x.hypot(delta.y);
        let rot1 = if trans < 1e-3 { 0.0 } else { delta.y.atan2(delta.x) };
        Self {
            rot1,
            trans,
            rot2: wrap_angle(delta.theta - rot1),
        }
    }

    /// Noise standard deviations of `(rot1, trans, rot2)`. Rotations near
    /// pi count as small so reversing is not penalized.
    pub fn sigmas(&self, a: &[f64; 4]) -> (f64, f64, f64) {
        let small = |r: f64| r.abs().min((PI - r.abs()).abs());
        let r1 = small(self.rot1);
        let r2 = small(self.rot2);
        (
            a[0] * r1 + a[1] * self.trans,
            a[2] * self.trans + a[3] * (r1 + r2),
            a[0] * r2 + a[1] * self.trans,
        )
    }

    pub fn perturbed<R: Rng + ?Sized>(&self, a: &[f64; 4], rng: &mut R) -> Self {
        let (s1, st, s2) = self.sigmas(a);
        Self {
            rot1: self.rot1 + normal(rng, s1),
            trans: self.trans + normal(rng, st),
            rot2: self.rot2 + normal(rng, s2),
        }
    }

    pub fn apply(&self, pose: &Pose2D) -> Pose2D {
        let heading = pose.theta + self.rot1;
        Pose2D::new(
            pose.x + self.trans * heading.cos(),
            pose.y + self.trans * heading.sin(),
            pose.theta + self.rot1 + self.rot2,
        )
    }
}

/// Moves every particle by the odometry increment with sampled noise.
pub fn mcl_motion_update<R: Rng + ?Sized>(ps: &mut ParticleSet, odom_delta: &Pose2D, rng: &mut R) {
    let steps = OdomSteps::from_delta(odom_delta);
    let alphas = ps.config.alphas;
    for p in &mut ps.particles {
        p.pose = steps.perturbed(&alphas, rng).apply(&p.pose);
    }
}

/// Euclidean distance from each cell to the nearest occupied cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodField {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Pose2D,
    dist: Vec<f64>,
}

const FAR: f64 = 1e20;

/// Exact 1D squared distance transform (lower envelope of parabolas).
/// Cells with no occupied cell anywhere hold `FAR` or more.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

impl LikelihoodField {
    pub fn from_grid(grid: &OccupancyGrid) -> Self {
        let t = Thresholds::default();
        let (w, h) = (grid.width(), grid.height());
        let mut f: Vec<f64> = (0..w * h)
            .map(|i| {
                if grid.cell_state(i % w, i / w, &t) == CellState::Occupied {
                    0.0
                } else {
                    FAR
                }
            })
            .collect();
        let mut col = vec![0.0; h];
        let mut col_out = vec![0.0; h];
        for ix in 0..w {
            for iy in 0..h {
                col[iy] = f[iy * w + ix];
            }
            edt_1d(&col, &mut col_out);
            for iy in 0..h {
                f[iy * w + ix] = col_out[iy];
            }
        }
        let mut row_out = vec![0.0; w];
        for iy in 0..h {
            edt_1d(&f[iy * w..(iy + 1) * w], &mut row_out);
            f[iy * w..(iy + 1) * w].copy_from_slice(&row_out);
        }
        let res = grid.resolution();
        Self {
            width: w,
            height: h,
            resolution: res,
            origin: grid.origin(),
            dist: f
                .into_iter()
                .map(|d| if d >= FAR { f64::INFINITY } else { d.sqrt() * res })
                .collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn distance(&self, ix: usize, iy: usize) -> f64 {
        self.dist[iy * self.width + ix]
    }

    /// Distance at the cell containing `p`; infinite off the map.
    pub fn distance_at(&self, p: &Point2) -> f64 {
        let local = self.origin.inverse_transform_point(p);
        let u = local.x / self.resolution;
        let v = local.y / self.resolution;
        if u < 0.0 || v < 0.0 {
            return f64::INFINITY;
        }
        let (ix, iy) = (u as usize, v as usize);
        if ix >= self.width || iy >= self.height {
            return f64::INFINITY;
        }
        self.distance(ix, iy)
    }
}

fn beam_likelihood(d: f64, c: &MclConfig, range_max: f64) -> f64 {
    let g = if d.is_finite() {
        (-0.5 * (d / c.sigma_hit).powi(2)).exp() / (c.sigma_hit * TAU.sqrt())
    } else {
        0.0
    };
    c.z_hit * g + c.z_rand / range_max
}

/// Indices of the beams used by the sensor model: evenly spaced over the
/// scan, MISS returns dropped.
pub fn selected_beams(scan: &LaserScan, max_beams: usize) -> Vec<usize> {
    let n = scan.len();
    if n == 0 || max_beams == 0 {
        return Vec::new();
    }
    let step = n.div_ceil(max_beams).max(1);
    (0..n)
        .step_by(step)
        .filter(|&i| scan.is_valid_range(scan.ranges[i]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SensorUpdateReport {
    pub beams_used: usize,
    /// Weighted mean of the measurement likelihood before normalization.
    pub mean_likelihood: f64,
    /// Set when every weight vanished and the set was reset to uniform.
    pub reset: bool,
}

/// Reweights the particles by the likelihood-field model and renormalizes.
pub fn mcl_sensor_update(ps: &mut ParticleSet, scan: &LaserScan, lf: &LikelihoodField) -> SensorUpdateReport {
    let c = ps.config;
    let beams: Vec<(f64, f64)> = selected_beams(scan, c.max_beams)
        .into_iter()
        .map(|i| (scan.ranges[i], scan.bearing(i)))
        .collect();
    if beams.is_empty() {
        let ok = ps.normalize();
        return SensorUpdateReport {
            beams_used: 0,
            mean_likelihood: 1.0,
            reset: !ok,
        };
    }
    let prior_total = ps.weight_sum();
    let mut mean_likelihood = 0.0;
    let log_w: Vec<f64> = ps
        .particles
        .iter()
        .map(|p| {
            let mut ll = 0.0;
            for &(r, b) in &beams {
                let a = p.pose.theta + b;
                let end = Point2::new(p.pose.x + r * a.cos(), p.pose.y + r * a.sin());
                ll += beam_likelihood(lf.distance_at(&end), &c, scan.range_max).ln();
            }
            mean_likelihood += p.weight / prior_total * ll.exp();
            p.weight.ln() + ll
        })
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (p, lw) in ps.particles.iter_mut().zip(&log_w) {
        p.weight = if max.is_finite() { (lw - max).exp() } else { 0.0 };
    }
    let ok = ps.normalize();
    SensorUpdateReport {
        beams_used: beams.len(),
        mean_likelihood,
        reset: !ok,
    }
}

/// Low-variance resampling: `n` draws with a single random offset.
pub fn systematic_indices<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let step = total / n as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut i = 0usize;
    let mut acc = weights.first().copied().unwrap_or(0.0);
    for _ in 0..n {
        while u > acc && i + 1 < weights.len() {
            i += 1;
            acc += weights[i];
        }
        out.push(i);
        u += step;
    }
    out
}

/// Particle count bound for `k` occupied histogram bins.
pub fn kld_count(k: usize, epsilon: f64, z: f64) -> f64 {
    if k <= 1 {
        return 1.0;
    }
    let km1 = (k - 1) as f64;
    let a = 2.0 / (9.0 * km1);
    km1 / (2.0 * epsilon) * (1.0 - a + a.sqrt() * z).powi(3)
}

fn bin_of(p: &Pose2D, c: &MclConfig) -> (i64, i64, i64) {
    (
        (p.x / c.bin_xy).floor() as i64,
        (p.y / c.bin_xy).floor() as i64,
        (p.theta / c.bin_theta).floor() as i64,
    )
}

/// Resamples when the effective sample size drops below half the set.
/// The new count follows the KLD bound over the bins a full-size draw
/// occupies. Returns whether resampling happened.
pub fn mcl_resample<R: Rng + ?Sized>(ps: &mut ParticleSet, rng: &mut R) -> bool {
    resample_with(ps, rng, 0.0, |_| unreachable!())
}

fn resample_with<R: Rng + ?Sized>(
    ps: &mut ParticleSet,
    rng: &mut R,
    inject_prob: f64,
    mut random_pose: impl FnMut(&mut R) -> Pose2D,
) -> bool {
    let n = ps.len();
    if n == 0 || ps.effective_sample_size() >= n as f64 / 2.0 {
        return false;
    }
    let c = ps.config;
    let weights: Vec<f64> = ps.particles.iter().map(|p| p.weight).collect();
    let probe = systematic_indices(&weights, c.n_max, rng);
    let bins: HashSet<_> = probe.iter().map(|&i| bin_of(&ps.particles[i].pose, &c)).collect();
    let target = (kld_count(bins.len(), c.kld_epsilon, c.kld_z).ceil() as usize).clamp(c.n_min, c.n_max);
    let picks = systematic_indices(&weights, target, rng);
    let w = 1.0 / target as f64;
    ps.particles = picks
        .into_iter()
        .map(|i| {
            let pose = if inject_prob > 0.0 && rng.random::<f64>() < inject_prob {
                random_pose(rng)
            } else {
                ps.particles[i].pose
            };
            Particle { pose, weight: w }
        })
        .collect();
    true
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose2D,
    pub cov: Matrix3<f64>,
}

/// Weighted mean (circular in heading) and covariance about it.
pub fn mcl_estimate(ps: &ParticleSet) -> Result<PoseEstimate, MclError> {
    if ps.is_empty() {
        return Err(MclError::Empty);
    }
    let total = ps.weight_sum();
    let (mut x, mut y, mut s, mut c) = (0.0, 0.0, 0.0, 0.0);
    for p in &ps.particles {
        let w = p.weight / total;
        x += w * p.pose.x;
        y += w * p.pose.y;
        s += w * p.pose.theta.sin();
        c += w * p.pose.theta.cos();
    }
    let theta = s.atan2(c);
    let mut cov = Matrix3::zeros();
    for p in &ps.particles {
        let w = p.weight / total;
        let d = nalgebra::Vector3::new(p.pose.x - x, p.pose.y - y, angle_diff(p.pose.theta, theta));
        cov += d * d.transpose() * w;
    }
    Ok(PoseEstimate {
        pose: Pose2D::new(x, y, theta),
        cov,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MclStepReport {
    pub updated: bool,
    pub resampled: bool,
    pub reset: bool,
}

/// Filter driver fed with odometry poses (EKF output) and scans.
#[derive(Debug, Clone)]
pub struct Mcl {
    pub particles: ParticleSet,
    field: LikelihoodField,
    last_odom: Option<Pose2D>,
    free_cells: Vec<Point2>,
    half_cell: f64,
    w_slow: f64,
    w_fast: f64,
}

impl Mcl {
    pub fn new(particles: ParticleSet, map: &OccupancyGrid) -> Self {
        let t = Thresholds::default();
        let free_cells = (0..map.height())
            .flat_map(|iy| (0..map.width()).map(move |ix| (ix, iy)))
            .filter(|&(ix, iy)| map.cell_state(ix, iy, &t) == CellState::Free)
            .map(|(ix, iy)| map.cell_center(ix, iy))
            .collect();
        Self {
            particles,
            field: LikelihoodField::from_grid(map),
            last_odom: None,
            free_cells,
            half_cell: map.resolution() / 2.0,
            w_slow: 0.0,
            w_fast: 0.0,
        }
    }

    pub fn field(&self) -> &LikelihoodField {
        &self.field
    }

    /// Applies the motion accumulated since the last filter update once it
    /// exceeds the update thresholds, followed by a sensor update and,
    /// if needed, resampling.
    pub fn step<R: Rng + ?Sized>(&mut self, odom: &Pose2D, scan: &LaserScan, rng: &mut R) -> MclStepReport {
        let Some(last) = self.last_odom else {
            self.last_odom = Some(*odom);
            return MclStepReport::default();
        };
        let delta = last.between(odom);
        let c = self.particles.config;
        if delta.x.hypot(delta.y) < c.update_min_d && delta.theta.abs() < c.update_min_a {
            return MclStepReport::default();
        }
        self.last_odom = Some(*odom);
        mcl_motion_update(&mut self.particles, &delta, rng);
        let report = mcl_sensor_update(&mut self.particles, scan, &self.field);
        let mut inject = 0.0;
        if c.recovery_alpha_slow > 0.0 && report.beams_used > 0 && !self.free_cells.is_empty() {
            let w = report.mean_likelihood;
            if self.w_slow == 0.0 {
                self.w_slow = w;
                self.w_fast = w;
            } else {
                self.w_slow += c.recovery_alpha_slow * (w - self.w_slow);
                self.w_fast += c.recovery_alpha_fast * (w - self.w_fast);
            }
            if self.w_slow > 0.0 {
                inject = (1.0 - self.w_fast / self.w_slow).max(0.0);
            }
        }
        let (cells, h) = (&self.free_cells, self.half_cell);
        let resampled = resample_with(&mut self.particles, rng, inject, |r| {
            let p = cells[r.random_range(0..cells.len())];
            Pose2D::new(
                p.x + r.random_range(-h..h),
                p.y + r.random_range(-h..h),
                r.random_range(-PI..PI),
            )
        });
        if inject > 0.0 && resampled {
            self.w_slow = 0.0;
            self.w_fast = 0.0;
        }
        MclStepReport {
            updated: true,
            resampled,
            reset: report.reset,
        }
    }

    pub fn estimate(&self) -> Result<PoseEstimate, MclError> {
        mcl_estimate(&self.particles)
    }
}
