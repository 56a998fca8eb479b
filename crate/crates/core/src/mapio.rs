//! Occupancy maps on disk: a binary graymap (`P5`) plus a YAML sidecar in
//! the layout used by common robotics map servers. Image rows run from the
//! top of the map (largest y) down.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Pose2D;
use crate::world::{GridError, OccupancyGrid, Thresholds, LOG_ODDS_MAX, LOG_ODDS_MIN};

#[derive(Debug, Error)]
pub enum MapIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("graymap header: {0}")]
    Header(String),
    #[error("map metadata: {0}")]
    Metadata(String),
    #[error("graymap holds {actual} pixels, header says {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major, top row first.
    pub pixels: Vec<u8>,
}

/// Largest accepted image side; keeps hostile headers from allocating.
const MAX_SIDE: usize = 1 << 15;

pub fn encode_pgm(img: &Graymap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parses a binary graymap with 8-bit samples. `#` comments are allowed
/// between header fields.
pub fn decode_pgm(bytes: &[u8]) -> Result<Graymap, MapIoError> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(MapIoError::Header(format!(
            "expected magic P5, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
        return Err(MapIoError::Header(format!("unsupported size {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(MapIoError::Header(format!("maxval {maxval} not in 1..=255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(MapIoError::Header("missing whitespace after maxval".into())),
    }
    let pixels = &bytes[pos..];
    let expected = width * height;
    if pixels.len() != expected {
        return Err(MapIoError::DimensionMismatch {
            expected,
            actual: pixels.len(),
        });
    }
    Ok(Graymap {
        width,
        height,
        maxval: maxval as u16,
        pixels: pixels.to_vec(),
    })
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], MapIoError> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&c| c != b'\n') {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(MapIoError::Header("truncated header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|c| !c.is_ascii_whitespace() && *c != b'#') {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, MapIoError> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .filter(|s| s.bytes().all(|c| c.is_ascii_digit()))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| MapIoError::Header(format!("bad {what} {:?}", String::from_utf8_lossy(tok))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapMetadata {
    pub image: String,
    pub resolution: f64,
    pub origin: [f64; 3],
    pub negate: u8,
    pub occupied_thresh: f64,
    pub free_thresh: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

impl MapMetadata {
    pub fn parse(text: &str) -> Result<Self, MapIoError> {
        let m: MapMetadata = serde_yaml::from_str(text).map_err(|e| MapIoError::Metadata(e.to_string()))?;
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<(), MapIoError> {
        let bad = |m: &str| Err(MapIoError::Metadata(m.into()));
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return bad("resolution must be positive");
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return bad("origin must be finite");
        }
        if self.negate > 1 {
            return bad("negate must be 0 or 1");
        }
        if !(0.0 <= self.free_thresh && self.free_thresh < self.occupied_thresh && self.occupied_thresh <= 1.0) {
            return bad("thresholds must satisfy 0 <= free_thresh < occupied_thresh <= 1");
        }
        if let Some(m) = &self.mode {
            if m != "trinary" {
                return bad("only trinary mode is supported");
            }
        }
        Ok(())
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            occupied: self.occupied_thresh,
            free: self.free_thresh,
        }
    }
}

/// Thresholded image of a grid, top row first.
pub fn grid_to_graymap(g: &OccupancyGrid, t: &Thresholds) -> Graymap {
    let values = g.thresholded(t);
    let (w, h) = (g.width(), g.height());
    let mut pixels = Vec::with_capacity(w * h);
    for iy in (0..h).rev() {
        pixels.extend_from_slice(&values[iy * w..(iy + 1) * w]);
    }
    Graymap {
        width: w,
        height: h,
        maxval: 255,
        pixels,
    }
}

/// Rebuilds a grid. Occupied and free pixels become saturated log-odds,
/// everything else 0.
pub fn graymap_to_grid(img: &Graymap, meta: &MapMetadata) -> Result<OccupancyGrid, MapIoError> {
    let (w, h) = (img.width, img.height);
    let t = meta.thresholds();
    let mut cells = vec![0.0; w * h];
    for (row, chunk) in img.pixels.chunks(w).enumerate() {
        let iy = h - 1 - row;
        for (ix, &px) in chunk.iter().enumerate() {
            let shade = px as f64 / img.maxval as f64;
            let occ = if meta.negate == 1 { shade } else { 1.0 - shade };
            cells[iy * w + ix] = if occ > t.occupied {
                LOG_ODDS_MAX
            } else if occ < t.free {
                LOG_ODDS_MIN
            } else {
                0.0
            };
        }
    }
    let origin = Pose2D::new(meta.origin[0], meta.origin[1], meta.origin[2]);
    Ok(OccupancyGrid::from_cells(w, h, meta.resolution, origin, cells)?)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MapIoError + '_ {
    move |source| MapIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `<stem>.pgm` and `<stem>.yaml` next to each other; `path` may
/// name either file or the bare stem. Returns the metadata path.
pub fn write_map(g: &OccupancyGrid, path: &Path, t: &Thresholds) -> Result<PathBuf, MapIoError> {
    let pgm = path.with_extension("pgm");
    let yaml = path.with_extension("yaml");
    fs::write(&pgm, encode_pgm(&grid_to_graymap(g, t))).map_err(io_err(&pgm))?;
    let o = g.origin();
    let meta = MapMetadata {
        image: pgm
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        resolution: g.resolution(),
        origin: [o.x, o.y, o.theta],
        negate: 0,
        occupied_thresh: t.occupied,
        free_thresh: t.free,
        mode: None,
    };
    let text = serde_yaml::to_string(&meta).map_err(|e| MapIoError::Metadata(e.to_string()))?;
    fs::write(&yaml, text).map_err(io_err(&yaml))?;
    Ok(yaml)
}

/// Reads a map from its YAML sidecar; `path` may also name the image or
/// the bare stem.
pub fn read_map(path: &Path) -> Result<OccupancyGrid, MapIoError> {
    let yaml = path.with_extension("yaml");
    let text = fs::read_to_string(&yaml).map_err(io_err(&yaml))?;
    let meta = MapMetadata::parse(&text)?;
    let image = yaml.parent().unwrap_or(Path::new("")).join(&meta.image);
    let bytes = fs::read(&image).map_err(io_err(&image))?;
    graymap_to_grid(&decode_pgm(&bytes)?, &meta)
}
