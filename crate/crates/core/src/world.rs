//! Static line-segment worlds, exact ray casting, and the log-odds
//! occupancy grid shared by mapping, localization and map I/O.

use rand::Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::config::{parse_toml, ParseError};
use crate::geom::{Point2, Pose2D};

/// Log-odds clamp applied to every occupancy cell.
pub const LOG_ODDS_MAX: f64 = 4.0;
pub const LOG_ODDS_MIN: f64 = -4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("segment {index} has zero length")]
    ZeroLengthSegment { index: usize },
    #[error("segment {index}: glass transmission {value} outside [0, 1]")]
    BadTransmission { index: usize, value: f64 },
    #[error("non-finite coordinate in segment {index}")]
    NonFinite { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Material {
    Opaque,
    /// A ray crossing the segment passes through with this probability.
    Glass {
        transmission: f64,
    },
}

impl Material {
    fn transmission(&self) -> f64 {
        match *self {
            Material::Opaque => 0.0,
            Material::Glass { transmission } => transmission,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub p0: Point2,
    pub p1: Point2,
    pub material: Material,
}

impl Segment {
    pub fn opaque(p0: Point2, p1: Point2) -> Self {
        Self {
            p0,
            p1,
            material: Material::Opaque,
        }
    }

    pub fn length(&self) -> f64 {
        (self.p1 - self.p0).norm()
    }

    /// Ray parameter `t` (distance along the unit direction `dir`) at which
    /// the ray from `origin` meets this segment, if it does.
    fn intersect(&self, origin: &Point2, dir: &nalgebra::Vector2<f64>) -> Option<f64> {
        let e = self.p1 - self.p0;
        let w = self.p0 - origin;
        let denom = dir.x * e.y - dir.y * e.x;
        let scale = e.norm();
        if denom.abs() <= 1e-12 * scale {
            // Parallel; only a collinear overlap counts, at its nearest point.
            let off = w.x * dir.y - w.y * dir.x;
            if off.abs() > 1e-12 * (1.0 + w.norm()) {
                return None;
            }
            let t0 = w.dot(dir);
            let t1 = (self.p1 - origin).dot(dir);
            let (lo, hi) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
            return if hi < 0.0 { None } else { Some(lo.max(0.0)) };
        }
        let t = (w.x * e.y - w.y * e.x) / denom;
        let u = (w.x * dir.y - w.y * dir.x) / denom;
        if t >= 0.0 && (0.0..=1.0).contains(&u) {
            Some(t)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point2,
    pub max: Point2,
}

impl Aabb {
    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }
}

/// Immutable 2D environment made of wall segments.
#[derive(Debug, Clone, PartialEq)]
pub struct World2D {
    segments: Vec<Segment>,
    bounds: Aabb,
}

impl World2D {
    pub fn new(segments: Vec<Segment>) -> Result<Self, WorldError> {
        for (index, s) in segments.iter().enumerate() {
            let coords = [s.p0.x, s.p0.y, s.p1.x, s.p1.y];
            if coords.iter().any(|c| !c.is_finite()) {
                return Err(WorldError::NonFinite { index });
            }
            if s.length() == 0.0 {
                return Err(WorldError::ZeroLengthSegment { index });
            }
            if let Material::Glass { transmission } = s.material {
                if !(0.0..=1.0).contains(&transmission) {
                    return Err(WorldError::BadTransmission {
                        index,
                        value: transmission,
                    });
                }
            }
        }
        let bounds = if segments.is_empty() {
            Aabb {
                min: Point2::origin(),
                max: Point2::origin(),
            }
        } else {
            let mut min = Point2::new(f64::INFINITY, f64::INFINITY);
            let mut max = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
            for s in &segments {
                for p in [s.p0, s.p1] {
                    min.x = min.x.min(p.x);
                    min.y = min.y.min(p.y);
                    max.x = max.x.max(p.x);
                    max.y = max.y.max(p.y);
                }
            }
            Aabb { min, max }
        };
        Ok(Self { segments, bounds })
    }

    pub fn empty() -> Self {
        Self::new(Vec::new()).expect("empty world is valid")
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn has_glass(&self) -> bool {
        self.segments
            .iter()
            .any(|s| matches!(s.material, Material::Glass { .. }))
    }

    /// Distance to the nearest wall along the ray, or `None` (MISS) when
    /// nothing lies within `max_range`. Glass is treated as opaque.
    pub fn raycast(&self, origin: &Point2, bearing: f64, max_range: f64) -> Option<f64> {
        debug_assert!(max_range > 0.0);
        let dir = nalgebra::Vector2::new(bearing.cos(), bearing.sin());
        self.segments
            .iter()
            .filter_map(|s| s.intersect(origin, &dir))
            .filter(|&t| t <= max_range)
            .min_by(f64::total_cmp)
    }

    /// Like [`World2D::raycast`], but each glass segment crossed lets the ray
    /// through with its transmission probability. Consumes one uniform draw
    /// per glass hit, nearest first.
    pub fn raycast_stochastic<R: Rng + ?Sized>(
        &self,
        origin: &Point2,
        bearing: f64,
        max_range: f64,
        rng: &mut R,
    ) -> Option<f64> {
        let dir = nalgebra::Vector2::new(bearing.cos(), bearing.sin());
        let mut hits: Vec<(f64, f64)> = self
            .segments
            .iter()
            .filter_map(|s| {
                s.intersect(origin, &dir)
                    .filter(|&t| t <= max_range)
                    .map(|t| (t, s.material.transmission()))
            })
            .collect();
        hits.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (t, transmission) in hits {
            if transmission <= 0.0 || rng.random::<f64>() >= transmission {
                return Some(t);
            }
        }
        None
    }

    /// Cells crossed by any wall, as a mask over `grid`'s cells.
    pub fn rasterize_walls(&self, grid: &OccupancyGrid) -> Vec<bool> {
        let mut mask = vec![false; grid.len()];
        let step = grid.resolution() / 8.0;
        for s in &self.segments {
            let n = (s.length() / step).ceil() as usize;
            for k in 0..=n {
                let f = k as f64 / n as f64;
                let p = s.p0 + (s.p1 - s.p0) * f;
                if let Some((ix, iy)) = grid.cell_at(&p) {
                    mask[grid.index(ix, iy)] = true;
                }
            }
        }
        mask
    }

    /// Known map of this world on `grid`'s geometry: wall cells occupied,
    /// every other cell free.
    pub fn to_grid(&self, width: usize, height: usize, resolution: f64, origin: Pose2D) -> OccupancyGrid {
        let mut grid =
            OccupancyGrid::new(width, height, resolution, origin).expect("caller supplies valid grid geometry");
        let mask = self.rasterize_walls(&grid);
        for (cell, wall) in grid.cells.iter_mut().zip(mask) {
            *cell = if wall { LOG_ODDS_MAX } else { LOG_ODDS_MIN };
        }
        grid
    }
}

/// Free function form of [`World2D::raycast`].
pub fn raycast(world: &World2D, origin: &Point2, bearing: f64, max_range: f64) -> Option<f64> {
    world.raycast(origin, bearing, max_range)
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    #[serde(default)]
    pub rect: Vec<RectSpec>,
    #[serde(default)]
    pub segment: Vec<SegmentSpec>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RectSpec {
    pub min: [f64; 2],
    pub max: [f64; 2],
    #[serde(default)]
    pub material: MaterialSpec,
    #[serde(default)]
    pub transmission: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub from: [f64; 2],
    pub to: [f64; 2],
    #[serde(default)]
    pub material: MaterialSpec,
    #[serde(default)]
    pub transmission: f64,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum MaterialSpec {
    #[default]
    Opaque,
    Glass,
}

fn material(spec: MaterialSpec, transmission: f64) -> Material {
    match spec {
        MaterialSpec::Opaque => Material::Opaque,
        MaterialSpec::Glass => Material::Glass { transmission },
    }
}

impl WorldSpec {
    /// Expands rectangles into their four edges (counter-clockwise from
    /// `min`), followed by the free segments in declaration order.
    pub fn build(&self) -> Result<World2D, WorldError> {
        let mut segments = Vec::with_capacity(self.rect.len() * 4 + self.segment.len());
        for r in &self.rect {
            let m = material(r.material, r.transmission);
            let corners = [
                Point2::new(r.min[0], r.min[1]),
                Point2::new(r.max[0], r.min[1]),
                Point2::new(r.max[0], r.max[1]),
                Point2::new(r.min[0], r.max[1]),
            ];
            for k in 0..4 {
                segments.push(Segment {
                    p0: corners[k],
                    p1: corners[(k + 1) % 4],
                    material: m,
                });
            }
        }
        for s in &self.segment {
            segments.push(Segment {
                p0: Point2::new(s.from[0], s.from[1]),
                p1: Point2::new(s.to[0], s.to[1]),
                material: material(s.material, s.transmission),
            });
        }
        World2D::new(segments)
    }
}

#[derive(Deserialize)]
struct WorldDoc {
    #[serde(default)]
    world: WorldSpec,
}

/// Loads the `[world]` section of a scenario file; other sections are
/// ignored.
pub fn load_world(text: &str) -> Result<World2D, WorldError> {
    let doc: WorldDoc = parse_toml(text)?;
    doc.world.build()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid resolution must be positive, got {0}")]
    BadResolution(f64),
    #[error("grid must have at least one cell, got {width}x{height}")]
    Empty { width: usize, height: usize },
}

/// Probability thresholds that turn a grid into occupied/free/unknown.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct Thresholds {
    pub occupied: f64,
    pub free: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            occupied: 0.65,
            free: 0.196,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellState {
    Occupied,
    Free,
    Unknown,
}

impl CellState {
    /// Graymap pixel value: occupied 0, free 254, unknown 205.
    pub fn pixel(self) -> u8 {
        match self {
            CellState::Occupied => 0,
            CellState::Free => 254,
            CellState::Unknown => 205,
        }
    }
}

pub fn log_odds_to_probability(l: f64) -> f64 {
    1.0 - 1.0 / (1.0 + l.exp())
}

/// Log-odds occupancy grid. Cell `(ix, iy)` covers
/// `origin ∘ [ix·res, (ix+1)·res) × [iy·res, (iy+1)·res)`; cells are stored
/// row-major with `iy = 0` first.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    resolution: f64,
    width: usize,
    height: usize,
    origin: Pose2D,
    cells: Vec<f64>,
}

impl OccupancyGrid {
    pub fn new(width: usize, height: usize, resolution: f64, origin: Pose2D) -> Result<Self, GridError> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(GridError::BadResolution(resolution));
        }
        if width == 0 || height == 0 {
            return Err(GridError::Empty { width, height });
        }
        Ok(Self {
            resolution,
            width,
            height,
            origin,
            cells: vec![0.0; width * height],
        })
    }

    /// Builds a grid from raw log-odds values (clamped).
    pub fn from_cells(
        width: usize,
        height: usize,
        resolution: f64,
        origin: Pose2D,
        cells: Vec<f64>,
    ) -> Result<Self, GridError> {
        let mut g = Self::new(width, height, resolution, origin)?;
        assert_eq!(cells.len(), width * height, "cell count must match dimensions");
        g.cells = cells.into_iter().map(|l| l.clamp(LOG_ODDS_MIN, LOG_ODDS_MAX)).collect();
        Ok(g)
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn origin(&self) -> Pose2D {
        self.origin
    }
    pub fn len(&self) -> usize {
        self.cells.len()
    }
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn same_geometry(&self, other: &OccupancyGrid) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.resolution == other.resolution
            && self.origin == other.origin
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.width + ix
    }

    /// Continuous cell coordinates of a map-frame point (cell `(i, j)` spans
    /// `[i, i+1) × [j, j+1)`).
    #[inline]
    pub fn world_to_map(&self, p: &Point2) -> (f64, f64) {
        let local = self.origin.inverse_transform_point(p);
        (local.x / self.resolution, local.y / self.resolution)
    }

    #[inline]
    pub fn map_to_world(&self, u: f64, v: f64) -> Point2 {
        self.origin
            .transform_point(&Point2::new(u * self.resolution, v * self.resolution))
    }

    pub fn cell_at(&self, p: &Point2) -> Option<(usize, usize)> {
        let (u, v) = self.world_to_map(p);
        self.cell_from_map(u, v)
    }

    #[inline]
    pub fn cell_from_map(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (fx, fy) = (u.floor(), v.floor());
        if fx >= 0.0 && fy >= 0.0 && fx < self.width as f64 && fy < self.height as f64 {
            Some((fx as usize, fy as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Point2 {
        self.map_to_world(ix as f64 + 0.5, iy as f64 + 0.5)
    }

    #[inline]
    pub fn log_odds(&self, ix: usize, iy: usize) -> f64 {
        self.cells[self.index(ix, iy)]
    }

    pub fn set_log_odds(&mut self, ix: usize, iy: usize, l: f64) {
        let i = self.index(ix, iy);
        self.cells[i] = l.clamp(LOG_ODDS_MIN, LOG_ODDS_MAX);
    }

    pub fn add_log_odds(&mut self, ix: usize, iy: usize, delta: f64) {
        let i = self.index(ix, iy);
        self.cells[i] = (self.cells[i] + delta).clamp(LOG_ODDS_MIN, LOG_ODDS_MAX);
    }

    #[inline]
    pub fn probability(&self, ix: usize, iy: usize) -> f64 {
        log_odds_to_probability(self.log_odds(ix, iy))
    }

    pub fn cell_state(&self, ix: usize, iy: usize, t: &Thresholds) -> CellState {
        classify(self.log_odds(ix, iy), t)
    }

    /// Per-cell graymap values in storage order.
    pub fn thresholded(&self, t: &Thresholds) -> Vec<u8> {
        self.cells.iter().map(|&l| classify(l, t).pixel()).collect()
    }
}

pub fn classify(log_odds: f64, t: &Thresholds) -> CellState {
    let p = log_odds_to_probability(log_odds);
    if p >= t.occupied {
        CellState::Occupied
    } else if p <= t.free {
        CellState::Free
    } else {
        CellState::Unknown
    }
}
