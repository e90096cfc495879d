//! Gap filling, patch enumeration and channel normalisation.

use crate::raster::{GridSpec, Raster, RasterError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("every pixel is masked; nothing to fill from")]
    AllMasked,
    #[error("patch size {size} exceeds the {width}x{height} raster")]
    PatchTooLarge { size: usize, width: usize, height: usize },
    #[error("misaligned grids: {0}")]
    Misaligned(String),
    #[error("invalid patch geometry: {0}")]
    InvalidGeometry(String),
    #[error("channel {0:?} is degenerate (zero range or variance)")]
    DegenerateChannel(String),
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

/// Replaces each masked pixel by the mean of the originally valid pixels in
/// the smallest centred odd window (3x3, 5x5, ...) that contains any.
///
/// Fill values are computed against the input mask only, so the result does
/// not depend on visiting order.
pub fn gapfill_adaptive(r: &Raster) -> Result<Raster> {
    let (w, h) = (r.width(), r.height());
    let mask = r.mask();
    if mask.iter().all(|&m| m) {
        return Err(PreprocessError::AllMasked);
    }
    if mask.iter().all(|&m| !m) {
        return Ok(r.clone());
    }
    let src = r.values();
    let mut values = src.to_vec();
    let max_radius = w.max(h);
    for row in 0..h {
        for col in 0..w {
            if !mask[row * w + col] {
                continue;
            }
            let mut filled = None;
            for radius in 1..=max_radius {
                let (r0, r1) = (row.saturating_sub(radius), (row + radius).min(h - 1));
                let (c0, c1) = (col.saturating_sub(radius), (col + radius).min(w - 1));
                let mut sum = 0.0f64;
                let mut n = 0usize;
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        let i = rr * w + cc;
                        if !mask[i] {
                            sum += src[i] as f64;
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    filled = Some((sum / n as f64) as f32);
                    break;
                }
            }
            // at least one valid pixel exists, so the window always finds it
            values[row * w + col] = filled.expect("valid pixel within scene");
        }
    }
    Ok(r.map_values(values)?)
}

/// Window radius gapfill would use for pixel `(row, col)`; 0 for valid pixels.
pub fn gapfill_window_radius(r: &Raster, row: usize, col: usize) -> Option<usize> {
    let (w, h) = (r.width(), r.height());
    if !r.is_masked(row, col) {
        return Some(0);
    }
    (1..=w.max(h)).find(|&radius| {
        let (r0, r1) = (row.saturating_sub(radius), (row + radius).min(h - 1));
        let (c0, c1) = (col.saturating_sub(radius), (col + radius).min(w - 1));
        (r0..=r1).any(|rr| (c0..=c1).any(|cc| !r.is_masked(rr, cc)))
    })
}

/// Top-left corner of a patch on the fine grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchAnchor {
    pub row: usize,
    pub col: usize,
}

/// Patch origins for a `size` window sliding with `stride` over a
/// `width`x`height` grid, enumerated row-major.
pub fn patch_anchors(width: usize, height: usize, size: usize, stride: usize) -> Result<Vec<PatchAnchor>> {
    if size == 0 || stride == 0 {
        return Err(PreprocessError::InvalidGeometry(format!(
            "size {size} and stride {stride} must be positive"
        )));
    }
    if size > width || size > height {
        return Err(PreprocessError::PatchTooLarge { size, width, height });
    }
    let per_row = (width - size) / stride + 1;
    let per_col = (height - size) / stride + 1;
    let mut out = Vec::with_capacity(per_row * per_col);
    for i in 0..per_col {
        for j in 0..per_row {
            out.push(PatchAnchor {
                row: i * stride,
                col: j * stride,
            });
        }
    }
    Ok(out)
}

/// Number of patches per scene without materialising them.
pub fn patch_count(width: usize, height: usize, size: usize, stride: usize) -> Result<usize> {
    if size == 0 || stride == 0 {
        return Err(PreprocessError::InvalidGeometry(
            "size and stride must be positive".into(),
        ));
    }
    if size > width || size > height {
        return Err(PreprocessError::PatchTooLarge { size, width, height });
    }
    Ok(((width - size) / stride + 1) * ((height - size) / stride + 1))
}

/// A `channels x size x size` block of raster data in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBlock {
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f32>,
}

impl ChannelBlock {
    fn cut(rasters: &[&Raster], row: usize, col: usize, size: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rasters.len() * size * size);
        for r in rasters {
            data.extend_from_slice(r.crop(row, col, size, size)?.values());
        }
        Ok(Self {
            channels: rasters.len(),
            size,
            data,
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[c * n..(c + 1) * n]
    }
}

/// One training sample cut from a scene, with views on each grid tier
/// covering the same map footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub anchor: PatchAnchor,
    /// S2 indices (3) and the enhanced prior LST, fine grid.
    pub fine_channels: ChannelBlock,
    /// L8 indices (3) and L8 LST at t1, medium grid.
    pub medium_channels: ChannelBlock,
    /// MODIS LST at t1 and t2, coarse grid.
    pub coarse_channels: ChannelBlock,
    pub target_medium_lst: Option<ChannelBlock>,
}

/// Raster tiers of one scene, as seen by the patch extractor.
pub struct SceneLayers<'a> {
    pub fine: Vec<&'a Raster>,
    pub medium: Vec<&'a Raster>,
    pub coarse: Vec<&'a Raster>,
    pub target_medium: Option<&'a Raster>,
}

fn common_grid(rasters: &[&Raster], tier: &str) -> Result<GridSpec> {
    let first = rasters
        .first()
        .ok_or_else(|| PreprocessError::Misaligned(format!("no {tier} rasters")))?;
    for r in rasters {
        if !r.grid().same_as(first.grid()) {
            return Err(PreprocessError::Misaligned(format!(
                "{tier} rasters do not share one grid"
            )));
        }
    }
    Ok(*first.grid())
}

/// Enumerates `size` patches at `stride` over the fine grid and cuts the
/// co-located medium/coarse views.
pub fn extract_patches(scene: &SceneLayers<'_>, size: usize, stride: usize) -> Result<Vec<PatchSample>> {
    let fine = common_grid(&scene.fine, "fine")?;
    let medium = common_grid(&scene.medium, "medium")?;
    let coarse = common_grid(&scene.coarse, "coarse")?;
    let mf = fine
        .nesting_factor(&medium)
        .map_err(|e| PreprocessError::Misaligned(e.to_string()))?;
    let cf = fine
        .nesting_factor(&coarse)
        .map_err(|e| PreprocessError::Misaligned(e.to_string()))?;
    if let Some(t) = scene.target_medium {
        if !t.grid().same_as(&medium) {
            return Err(PreprocessError::Misaligned("target is not on the medium grid".into()));
        }
    }
    for (factor, what) in [(mf, "medium"), (cf, "coarse")] {
        if !size.is_multiple_of(factor) || !stride.is_multiple_of(factor) {
            return Err(PreprocessError::InvalidGeometry(format!(
                "size {size} and stride {stride} must be multiples of the {what} factor {factor}"
            )));
        }
    }
    patch_anchors(fine.width, fine.height, size, stride)?
        .into_iter()
        .map(|a| {
            Ok(PatchSample {
                anchor: a,
                fine_channels: ChannelBlock::cut(&scene.fine, a.row, a.col, size)?,
                medium_channels: ChannelBlock::cut(&scene.medium, a.row / mf, a.col / mf, size / mf)?,
                coarse_channels: ChannelBlock::cut(&scene.coarse, a.row / cf, a.col / cf, size / cf)?,
                target_medium_lst: scene
                    .target_medium
                    .map(|t| ChannelBlock::cut(&[t], a.row / mf, a.col / mf, size / mf))
                    .transpose()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Affine map of [min, max] onto [-1, 1].
    MinMax,
    /// (x - mean) / std.
    ZScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub name: String,
    /// min (min-max) or mean (z-score)
    pub a: f64,
    /// max (min-max) or std (z-score)
    pub b: f64,
}

/// Per-channel normalisation statistics fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mode: NormMode,
    pub channels: Vec<ChannelStats>,
}

/// Fits statistics for each named channel over all of its sample slices.
pub fn fit_norm(mode: NormMode, channels: &[(&str, Vec<&[f32]>)]) -> Result<NormStats> {
    let mut out = Vec::with_capacity(channels.len());
    for (name, slices) in channels {
        let values = slices.iter().flat_map(|s| s.iter()).map(|&v| v as f64);
        let (a, b) = match mode {
            NormMode::MinMax => {
                let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                if !(hi > lo) {
                    return Err(PreprocessError::DegenerateChannel(name.to_string()));
                }
                (lo, hi)
            }
            NormMode::ZScore => {
                let (mut n, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);
                for v in values {
                    n += 1;
                    let d = v - mean;
                    mean += d / n as f64;
                    m2 += d * (v - mean);
                }
                let std = if n > 0 { (m2 / n as f64).sqrt() } else { 0.0 };
                if !(std > 0.0) {
                    return Err(PreprocessError::DegenerateChannel(name.to_string()));
                }
                (mean, std)
            }
        };
        out.push(ChannelStats {
            name: name.to_string(),
            a,
            b,
        });
    }
    Ok(NormStats { mode, channels: out })
}

impl NormStats {
    pub fn channel(&self, name: &str) -> Result<&ChannelStats> {
        self.channels
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| PreprocessError::UnknownChannel(name.to_string()))
    }

    /// `(scale, offset)` with `normalised = raw * scale + offset`.
    pub fn affine(&self, name: &str) -> Result<(f64, f64)> {
        let c = self.channel(name)?;
        Ok(match self.mode {
            NormMode::MinMax => {
                let scale = 2.0 / (c.b - c.a);
                (scale, -1.0 - c.a * scale)
            }
            NormMode::ZScore => (1.0 / c.b, -c.a / c.b),
        })
    }

    pub fn apply(&self, name: &str, values: &[f32]) -> Result<Vec<f64>> {
        let (s, o) = self.affine(name)?;
        Ok(values.iter().map(|&v| v as f64 * s + o).collect())
    }

    pub fn invert(&self, name: &str, values: &[f64]) -> Result<Vec<f64>> {
        let c = self.channel(name)?;
        Ok(match self.mode {
            NormMode::MinMax => values.iter().map(|&v| (v + 1.0) * 0.5 * (c.b - c.a) + c.a).collect(),
            NormMode::ZScore => values.iter().map(|&v| v * c.b + c.a).collect(),
        })
    }
}
