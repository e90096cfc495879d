//! Single-band georeferenced grids and the deterministic operators that link
//! the nested 10 m / 30 m / 1 km resolution tiers.

mod filter;
mod io;
mod resample;

pub use filter::{gaussian_filter, gaussian_kernel};
pub use io::{read_raster, write_raster, RasterHeader};
pub use resample::{bicubic_resample, catmull_rom, sample_bicubic, Direction};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

pub const DEFAULT_NODATA: f32 = -9999.0;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("dimensions {width}x{height} are not divisible by {factor}")]
    DimensionNotDivisible { width: usize, height: usize, factor: usize },
    #[error("raster has {0} masked pixels; gap-fill first")]
    MaskedPixelsPresent(usize),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("invalid raster: {0}")]
    Invalid(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload holds {actual} pixels but header declares {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RasterError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Band {
    Lst,
    Ndvi,
    Ndwi,
    Ndbi,
    Red,
    Nir,
    Green,
    Swir,
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Band::Lst => "LST",
            Band::Ndvi => "NDVI",
            Band::Ndwi => "NDWI",
            Band::Ndbi => "NDBI",
            Band::Red => "RED",
            Band::Nir => "NIR",
            Band::Green => "GREEN",
            Band::Swir => "SWIR",
        };
        f.write_str(s)
    }
}

/// Placement of a grid in map space. The origin is the top-left corner;
/// rows run southwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
    pub origin_x: f64,
    pub origin_y: f64,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

impl GridSpec {
    pub fn new(width: usize, height: usize, pixel_size: f64, origin_x: f64, origin_y: f64) -> Self {
        Self {
            width,
            height,
            pixel_size,
            origin_x,
            origin_y,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(RasterError::Invalid(format!(
                "empty grid {}x{}",
                self.width, self.height
            )));
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(RasterError::Invalid(format!(
                "pixel size must be positive, got {}",
                self.pixel_size
            )));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(RasterError::Invalid("non-finite origin".into()));
        }
        Ok(())
    }

    pub fn same_as(&self, other: &GridSpec) -> bool {
        self.width == other.width
            && self.height == other.height
            && close(self.pixel_size, other.pixel_size)
            && close(self.origin_x, other.origin_x)
            && close(self.origin_y, other.origin_y)
    }

    pub fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(RasterError::GridMismatch(format!("{self} vs {other}")))
        }
    }

    /// Map coordinates of the centre of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_size,
            self.origin_y - (row as f64 + 0.5) * self.pixel_size,
        )
    }

    /// The grid obtained by aggregating `factor`x`factor` blocks.
    pub fn coarsened(&self, factor: usize) -> Result<GridSpec> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(RasterError::DimensionNotDivisible {
                width: self.width,
                height: self.height,
                factor,
            });
        }
        Ok(GridSpec {
            width: self.width / factor,
            height: self.height / factor,
            pixel_size: self.pixel_size * factor as f64,
            ..*self
        })
    }

    pub fn refined(&self, factor: usize) -> GridSpec {
        GridSpec {
            width: self.width * factor,
            height: self.height * factor,
            pixel_size: self.pixel_size / factor as f64,
            ..*self
        }
    }

    /// Sub-window starting at `(row, col)` with the given size.
    pub fn window(&self, row: usize, col: usize, height: usize, width: usize) -> Result<GridSpec> {
        if row + height > self.height || col + width > self.width {
            return Err(RasterError::Invalid(format!(
                "window ({row},{col}) {height}x{width} exceeds {}x{} grid",
                self.height, self.width
            )));
        }
        Ok(GridSpec {
            width,
            height,
            pixel_size: self.pixel_size,
            origin_x: self.origin_x + col as f64 * self.pixel_size,
            origin_y: self.origin_y - row as f64 * self.pixel_size,
        })
    }

    /// Integer ratio `coarse / self` when `coarse` nests this grid exactly.
    pub fn nesting_factor(&self, coarse: &GridSpec) -> Result<usize> {
        let ratio = coarse.pixel_size / self.pixel_size;
        let factor = ratio.round();
        if factor < 1.0 || !close(ratio, factor) {
            return Err(RasterError::GridMismatch(format!(
                "pixel size ratio {ratio} is not a positive integer"
            )));
        }
        let factor = factor as usize;
        let expected = self.coarsened(factor)?;
        if !expected.same_as(coarse) {
            return Err(RasterError::GridMismatch(format!(
                "{coarse} does not nest {self} at factor {factor}"
            )));
        }
        Ok(factor)
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{} @ {} m, origin ({}, {})",
            self.width, self.height, self.pixel_size, self.origin_x, self.origin_y
        )
    }
}

/// Integer resolution ratio between two nested grids (fine→medium = 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRelation {
    pub factor: usize,
}

impl GridRelation {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(RasterError::Invalid("grid factor must be >= 1".into()));
        }
        Ok(Self { factor })
    }
}

/// A single-band float grid with a nodata mask.
///
/// Masked pixels always hold the raster's nodata value, so a raster
/// round-trips through the on-disk format without loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    grid: GridSpec,
    band: Band,
    timestamp: NaiveDate,
    nodata: f32,
    values: Vec<f32>,
    mask: Vec<bool>,
}

impl Raster {
    pub fn new(grid: GridSpec, band: Band, timestamp: NaiveDate, values: Vec<f32>) -> Result<Self> {
        let mask = vec![false; values.len()];
        Self::with_mask(grid, band, timestamp, values, mask)
    }

    pub fn with_mask(
        grid: GridSpec,
        band: Band,
        timestamp: NaiveDate,
        mut values: Vec<f32>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(RasterError::SizeMismatch {
                expected: grid.len(),
                actual: values.len(),
            });
        }
        if mask.len() != values.len() {
            return Err(RasterError::Invalid(format!(
                "mask has {} entries for {} pixels",
                mask.len(),
                values.len()
            )));
        }
        for (v, &m) in values.iter_mut().zip(&mask) {
            if m {
                *v = DEFAULT_NODATA;
            } else if !v.is_finite() {
                return Err(RasterError::Invalid("non-finite unmasked value".into()));
            }
        }
        Ok(Self {
            grid,
            band,
            timestamp,
            nodata: DEFAULT_NODATA,
            values,
            mask,
        })
    }

    pub fn from_fn(
        grid: GridSpec,
        band: Band,
        timestamp: NaiveDate,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.len());
        for r in 0..grid.height {
            for c in 0..grid.width {
                values.push(f(r, c));
            }
        }
        Self::new(grid, band, timestamp, values)
    }

    pub fn constant(grid: GridSpec, band: Band, timestamp: NaiveDate, value: f32) -> Result<Self> {
        Self::new(grid, band, timestamp, vec![value; grid.len()])
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn width(&self) -> usize {
        self.grid.width
    }
    pub fn height(&self) -> usize {
        self.grid.height
    }
    pub fn pixel_size(&self) -> f64 {
        self.grid.pixel_size
    }
    pub fn band(&self) -> Band {
        self.band
    }
    pub fn timestamp(&self) -> NaiveDate {
        self.timestamp
    }
    pub fn nodata(&self) -> f32 {
        self.nodata
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.grid.width + col]
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.grid.width + col]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn with_band(mut self, band: Band) -> Self {
        self.band = band;
        self
    }

    pub fn with_timestamp(mut self, timestamp: NaiveDate) -> Self {
        self.timestamp = timestamp;
        self
    }

    /// Changes the nodata sentinel. Masked pixels take the new value.
    pub fn with_nodata(mut self, nodata: f32) -> Result<Self> {
        if !nodata.is_finite() {
            return Err(RasterError::Invalid("nodata must be finite".into()));
        }
        self.nodata = nodata;
        for (v, &m) in self.values.iter_mut().zip(&self.mask) {
            if m {
                *v = nodata;
            }
        }
        Ok(self)
    }

    /// Same grid and metadata, new unmasked values.
    pub fn map_values(&self, values: Vec<f32>) -> Result<Self> {
        let mut out = Self::new(self.grid, self.band, self.timestamp, values)?;
        out.nodata = self.nodata;
        Ok(out)
    }

    pub fn ensure_unmasked(&self) -> Result<()> {
        match self.masked_count() {
            0 => Ok(()),
            n => Err(RasterError::MaskedPixelsPresent(n)),
        }
    }

    /// Mean of the unmasked pixels, accumulated in f64.
    pub fn mean(&self) -> f64 {
        let (sum, n) = self
            .values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| !m)
            .fold((0.0f64, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    pub fn min_max(&self) -> Option<(f32, f32)> {
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| !m)
            .fold(None, |acc, (&v, _)| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Copies the sub-window starting at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Raster> {
        let grid = self.grid.window(row, col, height, width)?;
        let mut values = Vec::with_capacity(grid.len());
        let mut mask = Vec::with_capacity(grid.len());
        for r in row..row + height {
            let start = r * self.grid.width + col;
            values.extend_from_slice(&self.values[start..start + width]);
            mask.extend_from_slice(&self.mask[start..start + width]);
        }
        Ok(Raster {
            grid,
            band: self.band,
            timestamp: self.timestamp,
            nodata: self.nodata,
            values,
            mask,
        })
    }
}

/// Non-overlapping `k`x`k` mean aggregation.
///
/// Each block is summed in f64, row by row and left to right within a row,
/// then divided by `k*k`. The tensor average pool follows the same order so
/// the two paths agree bit for bit.
pub fn block_average(r: &Raster, k: usize) -> Result<Raster> {
    let out_grid = r.grid.coarsened(k)?;
    r.ensure_unmasked()?;
    let w = r.grid.width;
    let area = (k * k) as f64;
    let mut values = Vec::with_capacity(out_grid.len());
    for br in 0..out_grid.height {
        for bc in 0..out_grid.width {
            let mut acc = 0.0f64;
            for dy in 0..k {
                let row = &r.values[(br * k + dy) * w + bc * k..][..k];
                for &v in row {
                    acc += v as f64;
                }
            }
            values.push((acc / area) as f32);
        }
    }
    let mut out = Raster::new(out_grid, r.band, r.timestamp, values)?;
    out.nodata = r.nodata;
    Ok(out)
}

/// Per-pixel `(a - b) / (a + b)`; pixels with `|a + b| < 1e-12` or a masked
/// input are masked. The output keeps `a`'s band; see [`ndvi`], [`ndwi`],
/// [`ndbi`] for labelled variants.
pub fn normalized_difference(a: &Raster, b: &Raster) -> Result<Raster> {
    a.grid.ensure_same(&b.grid)?;
    if a.timestamp != b.timestamp {
        return Err(RasterError::GridMismatch(format!(
            "timestamps differ: {} vs {}",
            a.timestamp, b.timestamp
        )));
    }
    let n = a.grid.len();
    let mut values = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = (a.values[i] as f64, b.values[i] as f64);
        let denom = x + y;
        if a.mask[i] || b.mask[i] || denom.abs() < 1e-12 {
            values.push(0.0);
            mask.push(true);
        } else {
            values.push(((x - y) / denom) as f32);
            mask.push(false);
        }
    }
    Raster::with_mask(a.grid, a.band, a.timestamp, values, mask)
}

/// (NIR - RED) / (NIR + RED)
pub fn ndvi(nir: &Raster, red: &Raster) -> Result<Raster> {
    Ok(normalized_difference(nir, red)?.with_band(Band::Ndvi))
}

/// (GREEN - NIR) / (GREEN + NIR)
pub fn ndwi(green: &Raster, nir: &Raster) -> Result<Raster> {
    Ok(normalized_difference(green, nir)?.with_band(Band::Ndwi))
}

/// (SWIR - NIR) / (SWIR + NIR)
pub fn ndbi(swir: &Raster, nir: &Raster) -> Result<Raster> {
    Ok(normalized_difference(swir, nir)?.with_band(Band::Ndbi))
}

#[cfg(test)]
pub(crate) fn test_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 9, 19).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(w: usize, h: usize) -> GridSpec {
        GridSpec::new(w, h, 10.0, 500_000.0, 5_300_000.0)
    }

    fn raster(w: usize, h: usize, values: Vec<f32>) -> Raster {
        Raster::new(grid(w, h), Band::Lst, test_date(), values).unwrap()
    }

    #[test]
    fn block_average_constant_field() {
        let r = raster(3, 3, vec![1.0; 9]);
        let out = block_average(&r, 3).unwrap();
        assert_eq!(out.values(), &[1.0]);
        assert_eq!(out.pixel_size(), 30.0);
    }

    #[test]
    fn block_average_one_to_nine() {
        let r = raster(3, 3, (1..=9).map(|v| v as f32).collect());
        let out = block_average(&r, 3).unwrap();
        assert_eq!(out.values(), &[5.0]);
    }

    #[test]
    fn block_average_paper_scene_dims() {
        let r = Raster::constant(grid(1200, 1200), Band::Lst, test_date(), 300.0).unwrap();
        let out = block_average(&r, 3).unwrap();
        assert_eq!((out.width(), out.height()), (400, 400));
    }

    #[test]
    fn block_average_rejects_bad_input() {
        let r = raster(4, 3, vec![0.0; 12]);
        assert!(matches!(
            block_average(&r, 3),
            Err(RasterError::DimensionNotDivisible { .. })
        ));
        let mut mask = vec![false; 9];
        mask[4] = true;
        let r = Raster::with_mask(grid(3, 3), Band::Lst, test_date(), vec![1.0; 9], mask).unwrap();
        assert!(matches!(block_average(&r, 3), Err(RasterError::MaskedPixelsPresent(1))));
    }

    #[test]
    fn normalized_difference_cases() {
        let a = raster(3, 1, vec![0.8, 0.5, 0.0]);
        let b = raster(3, 1, vec![0.2, 0.5, 0.0]);
        let nd = normalized_difference(&a, &b).unwrap();
        assert!((nd.get(0, 0) - 0.6).abs() < 1e-7);
        assert_eq!(nd.get(0, 1), 0.0);
        assert!(nd.is_masked(0, 2));
        assert!(!nd.is_masked(0, 0));
    }

    #[test]
    fn normalized_difference_grid_mismatch() {
        let a = raster(3, 1, vec![0.8; 3]);
        let b = raster(1, 3, vec![0.2; 3]);
        assert!(matches!(
            normalized_difference(&a, &b),
            Err(RasterError::GridMismatch(_))
        ));
        let c = raster(3, 1, vec![0.2; 3]).with_timestamp(test_date().succ_opt().unwrap());
        assert!(normalized_difference(&a, &c).is_err());
    }

    #[test]
    fn index_helpers_label_bands() {
        let nir = raster(2, 1, vec![0.5, 0.4]).with_band(Band::Nir);
        let red = raster(2, 1, vec![0.1, 0.1]).with_band(Band::Red);
        assert_eq!(ndvi(&nir, &red).unwrap().band(), Band::Ndvi);
    }

    #[test]
    fn nesting_factor_detects_alignment() {
        let fine = grid(12, 12);
        let medium = fine.coarsened(3).unwrap();
        assert_eq!(fine.nesting_factor(&medium).unwrap(), 3);
        let shifted = GridSpec {
            origin_x: medium.origin_x + 5.0,
            ..medium
        };
        assert!(fine.nesting_factor(&shifted).is_err());
    }

    #[test]
    fn rejects_non_finite_values() {
        assert!(Raster::new(grid(2, 1), Band::Lst, test_date(), vec![1.0, f32::NAN]).is_err());
        assert!(Raster::new(grid(2, 1), Band::Lst, test_date(), vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn block_average_composes(values in prop::collection::vec(-50.0f32..50.0, 36 * 36)) {
            let r = raster(36, 36, values);
            let twice = block_average(&block_average(&r, 2).unwrap(), 3).unwrap();
            let once = block_average(&r, 6).unwrap();
            for (a, b) in twice.values().iter().zip(once.values()) {
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            }
        }

        #[test]
        fn block_average_preserves_mean(values in prop::collection::vec(0.0f32..400.0, 24 * 24)) {
            let r = raster(24, 24, values);
            let out = block_average(&r, 3).unwrap();
            let (a, b) = (r.mean(), out.mean());
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }

        #[test]
        fn normalized_difference_antisymmetric(
            a in prop::collection::vec(0.01f32..1.0, 16),
            b in prop::collection::vec(0.01f32..1.0, 16),
        ) {
            let ra = raster(4, 4, a);
            let rb = raster(4, 4, b);
            let ab = normalized_difference(&ra, &rb).unwrap();
            let ba = normalized_difference(&rb, &ra).unwrap();
            for (x, y) in ab.values().iter().zip(ba.values()) {
                prop_assert_eq!(*x, -*y);
                prop_assert!((-1.0..=1.0).contains(x));
            }
        }
    }
}
