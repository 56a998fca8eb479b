//! Seeded emulation of the sensor suite: 3D LIDAR, the 3D→2D scan cut,
//! IMU and GPS.
//!
//! The 3D world is the 2D world extruded to a fixed wall height over a flat
//! ground plane. Every function threads its random state explicitly, so a
//! fixed seed reproduces the exact same stream.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::geom::{wrap_angle, Point2, Point3, Pose2D};
use crate::world::World2D;

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        let n: f64 = StandardNormal.sample(rng);
        sigma * n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarParams {
    pub range_max: f64,
    pub v_fov: f64,
    pub h_fov: f64,
    pub rings: usize,
    pub beams_per_ring: usize,
    /// Sensor height above the vehicle roof.
    pub mount_height: f64,
    pub roof_height: f64,
    pub wall_height: f64,
    pub noise_sigma: f64,
}

impl Default for LidarParams {
    fn default() -> Self {
        Self {
            range_max: 120.0,
            v_fov: 45f64.to_radians(),
            h_fov: TAU,
            rings: 128,
            beams_per_ring: 512,
            mount_height: 0.3,
            roof_height: 1.0,
            wall_height: 3.0,
            noise_sigma: 0.02,
        }
    }
}

impl LidarParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.rings == 0 || self.beams_per_ring == 0 {
            return Err("lidar needs at least one ring and one beam".into());
        }
        if !(self.range_max > 0.0) {
            return Err(format!("lidar.range_max must be positive, got {}", self.range_max));
        }
        if self.noise_sigma < 0.0 {
            return Err("lidar.noise_sigma must be non-negative".into());
        }
        Ok(())
    }

    /// Height of the optical center above ground.
    pub fn sensor_height(&self) -> f64 {
        self.roof_height + self.mount_height
    }

    /// Ring elevations, spread uniformly over the vertical field of view.
    pub fn elevations(&self) -> Vec<f64> {
        if self.rings == 1 {
            return vec![0.0];
        }
        let step = self.v_fov / (self.rings - 1) as f64;
        (0..self.rings).map(|j| -0.5 * self.v_fov + j as f64 * step).collect()
    }

    /// Beam azimuths in the sensor frame. A full circle starts at −π and
    /// does not repeat the closing beam.
    pub fn azimuths(&self) -> Vec<f64> {
        let n = self.beams_per_ring;
        if n == 1 {
            return vec![0.0];
        }
        let full = self.h_fov >= TAU - 1e-9;
        let step = if full {
            self.h_fov / n as f64
        } else {
            self.h_fov / (n - 1) as f64
        };
        (0..n).map(|i| -0.5 * self.h_fov + i as f64 * step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud3D {
    /// Points in the sensor frame.
    pub points: Vec<Point3>,
    pub stamp: f64,
}

/// Simulates one LIDAR sweep from `sensor_pose` (the planar pose of the
/// sensor; its height comes from `lp`).
///
/// Each azimuth is ray cast once in the plane; every ring then lifts that
/// horizontal range onto its elevation, returning a wall point when the
/// hit lies between the ground and the wall top, and a ground point for
/// downward beams that reach the floor first.
pub fn simulate_cloud<R: Rng + ?Sized>(
    world: &World2D,
    sensor_pose: &Pose2D,
    lp: &LidarParams,
    rng: &mut R,
    stamp: f64,
) -> PointCloud3D {
    let elevations = lp.elevations();
    let trig: Vec<(f64, f64)> = elevations.iter().map(|e| e.sin_cos()).collect();
    let h = lp.sensor_height();
    let origin = sensor_pose.position();
    let mut points = Vec::with_capacity(lp.rings * lp.beams_per_ring / 2);
    for psi in lp.azimuths() {
        let bearing = sensor_pose.theta + psi;
        let horizontal = if world.has_glass() {
            world.raycast_stochastic(&origin, bearing, lp.range_max, rng)
        } else {
            world.raycast(&origin, bearing, lp.range_max)
        };
        let (s_psi, c_psi) = psi.sin_cos();
        for &(s_phi, c_phi) in &trig {
            let wall = horizontal.and_then(|rh| {
                let r = rh / c_phi;
                let z = h + r * s_phi;
                (r <= lp.range_max && (0.0..=lp.wall_height).contains(&z)).then_some(r)
            });
            let range = wall.or_else(|| {
                if s_phi < 0.0 {
                    let r = h / -s_phi;
                    (r <= lp.range_max).then_some(r)
                } else {
                    None
                }
            });
            let Some(r) = range else { continue };
            let r = r + gaussian(rng, lp.noise_sigma);
            if r <= 0.0 || r > lp.range_max {
                continue;
            }
            points.push(Point3::new(r * c_phi * c_psi, r * c_phi * s_psi, r * s_phi));
        }
    }
    PointCloud3D { points, stamp }
}

/// Planar range scan. MISS is encoded as `f64::INFINITY`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaserScan {
    pub angle_min: f64,
    pub angle_max: f64,
    pub angle_increment: f64,
    pub range_min: f64,
    pub range_max: f64,
    pub ranges: Vec<f64>,
    pub stamp: f64,
}

impl LaserScan {
    /// Empty (all MISS) full-circle scan with `n` beams starting at −π.
    pub fn full_circle(n: usize, range_min: f64, range_max: f64, stamp: f64) -> Self {
        let inc = TAU / n as f64;
        Self {
            angle_min: -PI,
            angle_max: -PI + (n - 1) as f64 * inc,
            angle_increment: inc,
            range_min,
            range_max,
            ranges: vec![f64::INFINITY; n],
            stamp,
        }
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn bearing(&self, i: usize) -> f64 {
        self.angle_min + i as f64 * self.angle_increment
    }

    pub fn is_valid_range(&self, r: f64) -> bool {
        r.is_finite() && r >= self.range_min && r <= self.range_max
    }

    /// `(bearing, range)` of every usable return.
    pub fn hits(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.ranges
            .iter()
            .enumerate()
            .filter(|(_, &r)| self.is_valid_range(r))
            .map(|(i, &r)| (self.bearing(i), r))
    }

    /// Beam endpoints in the sensor frame.
    pub fn endpoints(&self) -> Vec<Point2> {
        self.hits()
            .map(|(b, r)| Point2::new(r * b.cos(), r * b.sin()))
            .collect()
    }

    /// Keeps at most `max` evenly spaced beams (for telemetry).
    pub fn downsample(&self, max: usize) -> LaserScan {
        if self.len() <= max || max == 0 {
            return self.clone();
        }
        let stride = self.len().div_ceil(max);
        let ranges: Vec<f64> = self.ranges.iter().step_by(stride).copied().collect();
        LaserScan {
            angle_increment: self.angle_increment * stride as f64,
            angle_max: self.angle_min + (ranges.len() - 1) as f64 * self.angle_increment * stride as f64,
            ranges,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanCut {
    /// Height band kept, relative to the sensor plane.
    pub z_lo: f64,
    pub z_hi: f64,
    pub angle_increment: f64,
    pub range_min: f64,
    pub range_max: f64,
}

impl Default for ScanCut {
    fn default() -> Self {
        Self {
            z_lo: -0.2,
            z_hi: 0.2,
            angle_increment: TAU / 512.0,
            range_min: 0.1,
            range_max: 120.0,
        }
    }
}

/// Flattens a cloud into a full-circle scan: points inside the height band
/// are binned by azimuth and each bin keeps its closest planar range.
pub fn cloud_to_scan(cloud: &PointCloud3D, cut: &ScanCut) -> LaserScan {
    debug_assert!(cut.z_lo < cut.z_hi && cut.angle_increment > 0.0);
    let n = (TAU / cut.angle_increment).round().max(1.0) as usize;
    let mut scan = LaserScan::full_circle(n, cut.range_min, cut.range_max, cloud.stamp);
    scan.angle_increment = cut.angle_increment;
    scan.angle_max = scan.angle_min + (n - 1) as f64 * cut.angle_increment;
    for p in &cloud.points {
        if p.z < cut.z_lo || p.z > cut.z_hi {
            continue;
        }
        let r = p.x.hypot(p.y);
        if r < cut.range_min || r > cut.range_max {
            continue;
        }
        let k = ((p.y.atan2(p.x) - scan.angle_min) / cut.angle_increment).round() as i64;
        let bin = k.rem_euclid(n as i64) as usize;
        if r < scan.ranges[bin] {
            scan.ranges[bin] = r;
        }
    }
    scan
}

/// Single-plane LIDAR used where the full cloud is not needed.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanarLidar {
    pub beams: usize,
    pub range_min: f64,
    pub range_max: f64,
    pub noise_sigma: f64,
}

impl Default for PlanarLidar {
    fn default() -> Self {
        Self {
            beams: 360,
            range_min: 0.1,
            range_max: 30.0,
            noise_sigma: 0.02,
        }
    }
}

pub fn simulate_planar_scan<R: Rng + ?Sized>(
    world: &World2D,
    sensor_pose: &Pose2D,
    lp: &PlanarLidar,
    rng: &mut R,
    stamp: f64,
) -> LaserScan {
    let mut scan = LaserScan::full_circle(lp.beams, lp.range_min, lp.range_max, stamp);
    let origin = sensor_pose.position();
    let glass = world.has_glass();
    for i in 0..lp.beams {
        let bearing = sensor_pose.theta + scan.bearing(i);
        let hit = if glass {
            world.raycast_stochastic(&origin, bearing, lp.range_max, rng)
        } else {
            world.raycast(&origin, bearing, lp.range_max)
        };
        if let Some(r) = hit {
            let r = r + gaussian(rng, lp.noise_sigma);
            if r >= lp.range_min && r <= lp.range_max {
                scan.ranges[i] = r;
            }
        }
    }
    scan
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuParams {
    /// White noise on each yaw-rate sample.
    pub gyro_sigma: f64,
    /// Gyro bias random-walk intensity, rad/s per √s.
    pub bias_walk_sigma: f64,
    pub accel_sigma: f64,
    pub rate: f64,
}

impl Default for ImuParams {
    fn default() -> Self {
        Self {
            gyro_sigma: 0.005,
            bias_walk_sigma: 1e-4,
            accel_sigma: 0.05,
            rate: 50.0,
        }
    }
}

/// Ground-truth motion the IMU observes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuTruth {
    pub yaw_rate: f64,
    pub accel_x: f64,
    pub accel_y: f64,
}

/// Evolving bias and integrated heading of one IMU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuState {
    pub gyro_bias: f64,
    pub yaw: f64,
    pub last_stamp: f64,
}

impl ImuState {
    pub fn new(initial_yaw: f64, stamp: f64) -> Self {
        Self {
            gyro_bias: 0.0,
            yaw: initial_yaw,
            last_stamp: stamp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub yaw_rate: f64,
    pub accel_x: f64,
    pub accel_y: f64,
    /// Heading integrated from the measured rate; drifts with the bias.
    pub yaw: f64,
    pub stamp: f64,
}

pub fn sample_imu<R: Rng + ?Sized>(
    truth: &ImuTruth,
    state: &mut ImuState,
    params: &ImuParams,
    rng: &mut R,
    stamp: f64,
) -> ImuSample {
    let dt = (stamp - state.last_stamp).max(0.0);
    state.gyro_bias += gaussian(rng, params.bias_walk_sigma * dt.sqrt());
    let yaw_rate = truth.yaw_rate + state.gyro_bias + gaussian(rng, params.gyro_sigma);
    state.yaw += yaw_rate * dt;
    state.last_stamp = stamp;
    ImuSample {
        yaw_rate,
        accel_x: truth.accel_x + gaussian(rng, params.accel_sigma),
        accel_y: truth.accel_y + gaussian(rng, params.accel_sigma),
        yaw: wrap_angle(state.yaw),
        stamp,
    }
}

/// Meters per degree of latitude used by the equirectangular projection.
pub const METERS_PER_DEGREE: f64 = 111_320.0;

/// Geodetic anchor of the map frame (x east, y north).
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct GeoOrigin {
    pub lat: f64,
    pub lon: f64,
}

impl Default for GeoOrigin {
    fn default() -> Self {
        // Linz, Austria.
        Self {
            lat: 48.3366,
            lon: 14.3197,
        }
    }
}

impl GeoOrigin {
    pub fn to_local(&self, lat: f64, lon: f64) -> (f64, f64) {
        let north = (lat - self.lat) * METERS_PER_DEGREE;
        let east = (lon - self.lon) * METERS_PER_DEGREE * self.lat.to_radians().cos();
        (east, north)
    }

    pub fn to_geodetic(&self, east: f64, north: f64) -> (f64, f64) {
        let lat = self.lat + north / METERS_PER_DEGREE;
        let lon = self.lon + east / (METERS_PER_DEGREE * self.lat.to_radians().cos());
        (lat, lon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpsParams {
    pub sigma: f64,
    pub dropout_prob: f64,
    pub rate: f64,
}

impl Default for GpsParams {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            dropout_prob: 0.0,
            rate: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsFix {
    pub east: f64,
    pub north: f64,
    pub lat: f64,
    pub lon: f64,
    pub sigma: f64,
    pub valid: bool,
    pub stamp: f64,
}

/// One GPS fix of `true_pos`, or `None` when the fix is dropped.
pub fn sample_gps<R: Rng + ?Sized>(
    true_pos: &Point2,
    origin: &GeoOrigin,
    gp: &GpsParams,
    rng: &mut R,
    stamp: f64,
) -> Option<GpsFix> {
    if gp.dropout_prob > 0.0 && rng.random::<f64>() < gp.dropout_prob {
        return None;
    }
    let east = true_pos.x + gaussian(rng, gp.sigma);
    let north = true_pos.y + gaussian(rng, gp.sigma);
    let (lat, lon) = origin.to_geodetic(east, north);
    Some(GpsFix {
        east,
        north,
        lat,
        lon,
        // A noiseless unit still reports a tiny positive sigma.
        sigma: gp.sigma.max(1e-6),
        valid: true,
        stamp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{RectSpec, WorldSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_wall_single_beam() {
        let w = World2D::new(vec![crate::world::Segment::opaque(
            Point2::new(5.0, -10.0),
            Point2::new(5.0, 10.0),
        )])
        .unwrap();
        let lp = LidarParams {
            rings: 1,
            beams_per_ring: 1,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let c = simulate_cloud(&w, &Pose2D::IDENTITY, &lp, &mut rng(0), 0.0);
        assert_eq!(c.points, vec![Point3::new(5.0, 0.0, 0.0)]);
    }

    #[test]
    fn empty_world_only_ground() {
        let lp = LidarParams {
            rings: 16,
            beams_per_ring: 64,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let c = simulate_cloud(&World2D::empty(), &Pose2D::IDENTITY, &lp, &mut rng(0), 0.0);
        assert_eq!(c.points.len(), 8 * 64);
        for p in &c.points {
            assert!((p.z + lp.sensor_height()).abs() < 1e-9);
        }
    }

    #[test]
    fn downward_beam_ground_distance() {
        let lp = LidarParams {
            rings: 2,
            beams_per_ring: 1,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let c = simulate_cloud(&World2D::empty(), &Pose2D::IDENTITY, &lp, &mut rng(0), 0.0);
        assert_eq!(c.points.len(), 1);
        let p = c.points[0];
        let expected = lp.sensor_height() / 22.5f64.to_radians().tan();
        assert!((p.x.hypot(p.y) - expected).abs() < 1e-9);
    }

    #[test]
    fn points_within_range() {
        let w = WorldSpec {
            rect: vec![RectSpec {
                min: [-40.0, -3.0],
                max: [200.0, 3.0],
                material: Default::default(),
                transmission: 0.0,
            }],
            segment: vec![],
        }
        .build()
        .unwrap();
        let lp = LidarParams {
            rings: 32,
            beams_per_ring: 128,
            ..Default::default()
        };
        let c = simulate_cloud(&w, &Pose2D::IDENTITY, &lp, &mut rng(1), 0.0);
        assert!(c.points.iter().all(|p| p.coords.norm() <= lp.range_max));
    }

    #[test]
    fn cut_examples() {
        let cut = ScanCut {
            z_lo: -0.1,
            z_hi: 0.1,
            ..Default::default()
        };
        let c = PointCloud3D {
            points: vec![Point3::new(2.0, 0.0, 0.05)],
            stamp: 1.0,
        };
        let s = cloud_to_scan(&c, &cut);
        let bin = ((0.0 - s.angle_min) / s.angle_increment).round() as usize;
        assert_eq!(s.ranges[bin], 2.0);
        assert_eq!(s.hits().count(), 1);
        let expected_len = ((s.angle_max - s.angle_min) / s.angle_increment).round() as usize + 1;
        assert_eq!(s.len(), expected_len);

        let c = PointCloud3D {
            points: vec![Point3::new(2.0, 0.0, 0.5)],
            stamp: 1.0,
        };
        assert!(cloud_to_scan(&c, &cut).ranges.iter().all(|r| r.is_infinite()));
    }

    #[test]
    fn imu_stationary_and_constant_rate() {
        let p = ImuParams {
            gyro_sigma: 0.0,
            bias_walk_sigma: 0.0,
            accel_sigma: 0.0,
            rate: 100.0,
        };
        let mut st = ImuState::new(0.3, 0.0);
        let mut r = rng(0);
        for k in 1..=100 {
            let s = sample_imu(&ImuTruth::default(), &mut st, &p, &mut r, k as f64 * 0.01);
            assert_eq!(s.yaw_rate, 0.0);
            assert_eq!(s.yaw, 0.3);
        }
        let mut st = ImuState::new(0.0, 0.0);
        let truth = ImuTruth {
            yaw_rate: 0.1,
            ..Default::default()
        };
        let mut last = None;
        for k in 1..=1000 {
            last = Some(sample_imu(&truth, &mut st, &p, &mut r, k as f64 * 0.01));
        }
        assert!((last.unwrap().yaw - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gps_examples() {
        let origin = GeoOrigin { lat: 48.0, lon: 14.0 };
        let exact = GpsParams {
            sigma: 0.0,
            ..Default::default()
        };
        let p = Point2::new(12.5, -3.25);
        let fix = sample_gps(&p, &origin, &exact, &mut rng(0), 0.0).unwrap();
        assert_eq!((fix.east, fix.north), (12.5, -3.25));
        assert!(fix.valid && fix.sigma > 0.0);

        let dropped = GpsParams {
            dropout_prob: 1.0,
            ..Default::default()
        };
        let mut r = rng(1);
        assert!((0..100).all(|k| sample_gps(&p, &origin, &dropped, &mut r, k as f64).is_none()));

        let (_, north) = origin.to_local(48.001, 14.0);
        assert!((north - 111.32).abs() < 1e-6);
        let (east, _) = origin.to_local(48.0, 14.001);
        assert!((east - 0.001 * 111_320.0 * 48f64.to_radians().cos()).abs() < 1e-9);
        let (e, n) = origin.to_local(48.0012, 14.0007);
        let (lat, lon) = origin.to_geodetic(e, n);
        assert!((lat - 48.0012).abs() < 1e-12 && (lon - 14.0007).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_stream() {
        let w = WorldSpec {
            rect: vec![RectSpec {
                min: [-5.0, -5.0],
                max: [5.0, 5.0],
                material: Default::default(),
                transmission: 0.0,
            }],
            segment: vec![],
        }
        .build()
        .unwrap();
        let lp = LidarParams {
            rings: 8,
            beams_per_ring: 90,
            ..Default::default()
        };
        let a = simulate_cloud(&w, &Pose2D::new(0.5, 0.2, 0.1), &lp, &mut rng(42), 0.0);
        let b = simulate_cloud(&w, &Pose2D::new(0.5, 0.2, 0.1), &lp, &mut rng(42), 0.0);
        let bits = |c: &PointCloud3D| -> Vec<u64> {
            c.points
                .iter()
                .flat_map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    /// Variance of the integrated-yaw error after `n` samples at spacing
    /// `dt`, summed in closed form from the bias-walk and white-noise terms.
    fn yaw_drift_variance(n: usize, dt: f64, walk: f64, white: f64) -> f64 {
        let n = n as f64;
        dt * dt * walk * walk * dt * n * (n + 1.0) * (2.0 * n + 1.0) / 6.0 + dt * dt * white * white * n
    }

    #[test]
    fn yaw_drift_variance_grows_cubically() {
        let p = ImuParams {
            gyro_sigma: 0.0,
            bias_walk_sigma: 1e-3,
            accel_sigma: 0.0,
            rate: 50.0,
        };
        let dt = 0.02;
        let checkpoints = [500usize, 1000, 2000];
        let runs = 200;
        let mut sums = [0.0; 3];
        for run in 0..runs {
            let mut r = rng(1000 + run);
            let mut st = ImuState::new(0.0, 0.0);
            for k in 1..=2000 {
                sample_imu(&ImuTruth::default(), &mut st, &p, &mut r, k as f64 * dt);
                let yaw = st.yaw;
                if let Some(c) = checkpoints.iter().position(|&c| c == k) {
                    sums[c] += yaw * yaw;
                }
            }
        }
        for (c, &n) in checkpoints.iter().enumerate() {
            let sample = sums[c] / runs as f64;
            let expected = yaw_drift_variance(n, dt, p.bias_walk_sigma, p.gyro_sigma);
            assert!((sample / expected - 1.0).abs() < 0.2, "n={n} {sample} vs {expected}");
        }
        // t^3 growth: doubling the horizon multiplies the variance by ~8.
        let ratio = yaw_drift_variance(2000, dt, 1e-3, 0.0) / yaw_drift_variance(1000, dt, 1e-3, 0.0);
        assert!((ratio - 8.0).abs() < 0.05);
    }
}
