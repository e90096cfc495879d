//! `<name>.json` + `<name>.bin` raster pairs: a JSON sidecar with the grid
//! metadata and a row-major little-endian f32 payload.

use super::{Band, GridSpec, Raster, RasterError, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterHeader {
    pub width: u32,
    pub height: u32,
    pub pixel_size_m: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub band: Band,
    pub timestamp: String,
    pub nodata: f32,
    pub dtype: String,
}

/// Both files of a raster pair; `path` may name either file or the stem.
pub fn pair_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut bin = stem.into_os_string();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

/// Keeps the offending path in I/O error messages.
fn at(path: &Path) -> impl FnOnce(std::io::Error) -> RasterError + '_ {
    move |e| RasterError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn write_raster(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let (json_path, bin_path) = pair_paths(path.as_ref());
    let header = RasterHeader {
        width: r.width() as u32,
        height: r.height() as u32,
        pixel_size_m: r.pixel_size(),
        origin_x: r.grid().origin_x,
        origin_y: r.grid().origin_y,
        band: r.band(),
        timestamp: r.timestamp().format("%Y-%m-%d").to_string(),
        nodata: r.nodata(),
        dtype: DTYPE.to_string(),
    };
    let mut payload = Vec::with_capacity(r.values().len() * 4);
    for (i, (&v, &m)) in r.values().iter().zip(r.mask()).enumerate() {
        if !m && v == r.nodata() {
            return Err(RasterError::Invalid(format!(
                "valid pixel {i} equals the nodata value {}",
                r.nodata()
            )));
        }
        payload.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = json_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(at(dir))?;
        }
    }
    let text = serde_json::to_string_pretty(&header).map_err(|e| RasterError::MalformedHeader(e.to_string()))?;
    fs::write(&json_path, text).map_err(at(&json_path))?;
    fs::write(&bin_path, payload).map_err(at(&bin_path))?;
    Ok(())
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let (json_path, bin_path) = pair_paths(path.as_ref());
    let text = fs::read_to_string(&json_path).map_err(at(&json_path))?;
    let header: RasterHeader = serde_json::from_str(&text).map_err(|e| RasterError::MalformedHeader(e.to_string()))?;
    if header.dtype != DTYPE {
        return Err(RasterError::MalformedHeader(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    if !header.nodata.is_finite() {
        return Err(RasterError::MalformedHeader("nodata must be finite".into()));
    }
    let timestamp = NaiveDate::parse_from_str(&header.timestamp, "%Y-%m-%d")
        .map_err(|e| RasterError::MalformedHeader(format!("timestamp: {e}")))?;
    let grid = GridSpec::new(
        header.width as usize,
        header.height as usize,
        header.pixel_size_m,
        header.origin_x,
        header.origin_y,
    );
    grid.validate()
        .map_err(|e| RasterError::MalformedHeader(e.to_string()))?;
    let bytes = fs::read(&bin_path).map_err(at(&bin_path))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != grid.len() {
        return Err(RasterError::SizeMismatch {
            expected: grid.len(),
            actual: bytes.len() / 4,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mask: Vec<bool> = values.iter().map(|&v| v == header.nodata).collect();
    Raster::with_mask(grid, header.band, timestamp, values, mask)?.with_nodata(header.nodata)
}
