use crate::nnet::Tensor;
use crate::preprocess::{fit_norm, NormMode, NormStats, PreprocessError};
use crate::raster::{bicubic_resample, Direction, GridRelation, GridSpec, Raster};

use super::{ModelError, Result, SceneTriple};

/// Content channels fed to the generator, in order, with the norm group
/// each is scaled by.
pub const CONTENT_CHANNELS: [(&str, &str); 9] = [
    ("s2_ndvi", "ndvi"),
    ("s2_ndwi", "ndwi"),
    ("s2_ndbi", "ndbi"),
    ("prior_lst", "lst"),
    ("l8_ndvi", "ndvi"),
    ("l8_ndwi", "ndwi"),
    ("l8_ndbi", "ndbi"),
    ("l8_lst", "lst"),
    ("modis_lst_t1", "lst"),
];

/// A scene resampled onto the working grids and normalised, ready to be cut
/// into training or inference tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScene {
    pub fine: GridSpec,
    pub medium: GridSpec,
    pub medium_factor: usize,
    /// `(1, 9, H, W)` on the fine grid.
    pub content: Tensor,
    /// `(1, 1, H, W)`: target-date coarse LST on the fine grid.
    pub condition: Tensor,
    /// `(1, 1, H/m, W/m)`: the same condition on the medium grid.
    pub condition_medium: Tensor,
    /// `(1, 1, H/m, W/m)`: normalised medium LST at the target date.
    pub target_medium: Option<Tensor>,
}

/// Tensors for one fine-grid tile.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensors {
    pub content: Tensor,
    pub condition: Tensor,
    pub condition_medium: Tensor,
    pub target_medium: Option<Tensor>,
}

fn upsample(r: &Raster, factor: usize) -> Result<Raster> {
    if factor == 1 {
        return Ok(r.clone());
    }
    Ok(bicubic_resample(r, GridRelation::new(factor)?, Direction::Up)?)
}

fn plane(norm: &NormStats, group: &str, r: &Raster) -> Result<Vec<f64>> {
    Ok(norm.apply(group, r.values())?)
}

/// Fits one min-max range per physical quantity (LST and each index) over
/// the given scenes. The LST range is widened by `lst_margin` of its span on
/// each side so target-date temperatures outside the training range stay
/// reachable by a bounded output.
pub fn fit_scene_norm(scenes: &[&SceneTriple], lst_margin: f64) -> Result<NormStats> {
    let mut lst: Vec<&[f32]> = Vec::new();
    let mut idx: [Vec<&[f32]>; 3] = Default::default();
    for s in scenes {
        lst.extend([
            s.prior_lst10_t1.values(),
            s.l8_lst_t1.values(),
            s.modis_lst_t1.values(),
            s.modis_lst_t2.values(),
        ]);
        if let Some(t) = &s.l8_lst_t2 {
            lst.push(t.values());
        }
        for k in 0..3 {
            idx[k].push(s.s2_indices_t1[k].values());
            idx[k].push(s.l8_indices_t1[k].values());
        }
    }
    let [ndvi, ndwi, ndbi] = idx;
    let mut stats = fit_norm(
        NormMode::MinMax,
        &[("lst", lst), ("ndvi", ndvi), ("ndwi", ndwi), ("ndbi", ndbi)],
    )?;
    let c = &mut stats.channels[0];
    let pad = (c.b - c.a) * lst_margin;
    c.a -= pad;
    c.b += pad;
    Ok(stats)
}

/// Resamples every input onto the fine grid (bicubic), normalises it and
/// stacks it in [`CONTENT_CHANNELS`] order.
pub fn prepare_scene(t: &SceneTriple, norm: &NormStats) -> Result<PreparedScene> {
    let g = t.validate()?;
    let (mf, cf) = (g.medium_factor, g.coarse_factor);
    if cf % mf != 0 {
        return Err(ModelError::Scene(format!(
            "coarse factor {cf} is not a multiple of medium factor {mf}"
        )));
    }
    let sources: [(&Raster, usize); 9] = [
        (&t.s2_indices_t1[0], 1),
        (&t.s2_indices_t1[1], 1),
        (&t.s2_indices_t1[2], 1),
        (&t.prior_lst10_t1, 1),
        (&t.l8_indices_t1[0], mf),
        (&t.l8_indices_t1[1], mf),
        (&t.l8_indices_t1[2], mf),
        (&t.l8_lst_t1, mf),
        (&t.modis_lst_t1, cf),
    ];
    let (h, w) = (g.fine.height, g.fine.width);
    let mut content = Vec::with_capacity(9 * h * w);
    for ((r, f), (_, group)) in sources.iter().zip(CONTENT_CHANNELS) {
        content.extend(plane(norm, group, &upsample(r, *f)?)?);
    }
    let condition = plane(norm, "lst", &upsample(&t.modis_lst_t2, cf)?)?;
    let condition_medium = plane(norm, "lst", &upsample(&t.modis_lst_t2, cf / mf)?)?;
    let (mh, mw) = (g.medium.height, g.medium.width);
    let target_medium = t
        .l8_lst_t2
        .as_ref()
        .map(|r| -> Result<Tensor> { Ok(Tensor::new(&[1, 1, mh, mw], plane(norm, "lst", r)?)?) })
        .transpose()?;
    Ok(PreparedScene {
        fine: g.fine,
        medium: g.medium,
        medium_factor: mf,
        content: Tensor::new(&[1, 9, h, w], content)?,
        condition: Tensor::new(&[1, 1, h, w], condition)?,
        condition_medium: Tensor::new(&[1, 1, mh, mw], condition_medium)?,
        target_medium,
    })
}

impl PreparedScene {
    /// Cuts the tile whose top-left fine pixel is `(row, col)`.
    pub fn patch(&self, row: usize, col: usize, size: usize) -> Result<PatchTensors> {
        let (h, w) = (self.fine.height, self.fine.width);
        let m = self.medium_factor;
        if size == 0 || row + size > h || col + size > w {
            return Err(ModelError::Footprint {
                row,
                col,
                size,
                width: w,
                height: h,
            });
        }
        if !row.is_multiple_of(m) || !col.is_multiple_of(m) || !size.is_multiple_of(m) {
            return Err(PreprocessError::InvalidGeometry(format!(
                "tile ({row},{col}) size {size} is not aligned to the medium factor {m}"
            ))
            .into());
        }
        let (mr, mc, ms) = (row / m, col / m, size / m);
        Ok(PatchTensors {
            content: self.content.crop(row, col, size, size)?,
            condition: self.condition.crop(row, col, size, size)?,
            condition_medium: self.condition_medium.crop(mr, mc, ms, ms)?,
            target_medium: self
                .target_medium
                .as_ref()
                .map(|t| t.crop(mr, mc, ms, ms))
                .transpose()?,
        })
    }
}

/// Generator inputs `(content, condition)` for one tile of a scene.
pub fn assemble_inputs(
    t: &SceneTriple,
    norm: &NormStats,
    row: usize,
    col: usize,
    size: usize,
) -> Result<(Tensor, Tensor)> {
    let p = prepare_scene(t, norm)?.patch(row, col, size)?;
    Ok((p.content, p.condition))
}
