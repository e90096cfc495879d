//! Generator and conditional patch discriminator, plus the scene-to-tensor
//! input assembly they share.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnet::NnError;
use crate::preprocess::PreprocessError;
use crate::raster::{GridSpec, Raster, RasterError};

mod discriminator;
mod generator;
mod inputs;

pub use discriminator::Discriminator;
pub use generator::Generator;
pub use inputs::{assemble_inputs, fit_scene_norm, prepare_scene, PatchTensors, PreparedScene, CONTENT_CHANNELS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("patch footprint ({row},{col}) size {size} outside {width}x{height} scene")]
    Footprint {
        row: usize,
        col: usize,
        size: usize,
        width: usize,
        height: usize,
    },
    #[error("scene is inconsistent: {0}")]
    Scene(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Reference-date bundle plus the target-date condition for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTriple {
    /// NDVI, NDWI, NDBI on the fine grid.
    pub s2_indices_t1: [Raster; 3],
    /// NDVI, NDWI, NDBI on the medium grid.
    pub l8_indices_t1: [Raster; 3],
    pub l8_lst_t1: Raster,
    pub modis_lst_t1: Raster,
    /// Coarse LST at the target date.
    pub modis_lst_t2: Raster,
    /// Enhanced LST on the fine grid.
    pub prior_lst10_t1: Raster,
    /// Medium LST at the target date, present for training scenes.
    pub l8_lst_t2: Option<Raster>,
}

/// Fine-to-medium and fine-to-coarse factors of a validated scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneGeometry {
    pub fine: GridSpec,
    pub medium: GridSpec,
    pub coarse: GridSpec,
    pub medium_factor: usize,
    pub coarse_factor: usize,
}

impl SceneTriple {
    pub fn t1(&self) -> NaiveDate {
        self.l8_lst_t1.timestamp()
    }

    pub fn t2(&self) -> NaiveDate {
        self.modis_lst_t2.timestamp()
    }

    /// Checks grid nesting, shared dates and absence of masked pixels.
    pub fn validate(&self) -> Result<SceneGeometry> {
        let fine = *self.prior_lst10_t1.grid();
        let medium = *self.l8_lst_t1.grid();
        let coarse = *self.modis_lst_t1.grid();
        let same = |r: &Raster, g: &GridSpec, what: &str| -> Result<()> {
            if r.grid().same_as(g) {
                Ok(())
            } else {
                Err(ModelError::Scene(format!("{what} is not on the expected grid")))
            }
        };
        for r in &self.s2_indices_t1 {
            same(r, &fine, "sentinel index")?;
        }
        for r in &self.l8_indices_t1 {
            same(r, &medium, "landsat index")?;
        }
        same(&self.modis_lst_t2, &coarse, "coarse t2 LST")?;
        if let Some(t) = &self.l8_lst_t2 {
            same(t, &medium, "medium t2 LST")?;
        }
        let medium_factor = fine.nesting_factor(&medium)?;
        let coarse_factor = fine.nesting_factor(&coarse)?;

        let t1 = self.t1();
        let t1_rasters = self
            .s2_indices_t1
            .iter()
            .chain(&self.l8_indices_t1)
            .chain([&self.modis_lst_t1, &self.prior_lst10_t1]);
        if t1_rasters.clone().any(|r| r.timestamp() != t1) {
            return Err(ModelError::Scene("reference rasters do not share one date".into()));
        }
        let t2 = self.t2();
        if t2 <= t1 {
            return Err(ModelError::Scene(format!("target date {t2} is not after {t1}")));
        }
        if let Some(t) = &self.l8_lst_t2 {
            if t.timestamp() != t2 {
                return Err(ModelError::Scene("target rasters do not share one date".into()));
            }
        }
        for r in t1_rasters
            .chain([&self.l8_lst_t1, &self.modis_lst_t2])
            .chain(self.l8_lst_t2.as_ref())
        {
            r.ensure_unmasked()?;
        }
        Ok(SceneGeometry {
            fine,
            medium,
            coarse,
            medium_factor,
            coarse_factor,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    /// Number of stride-2 downsamplings in each encoder.
    pub depth: usize,
    pub residual_blocks: usize,
    pub attention: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 3,
            residual_blocks: 6,
            attention: true,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Desk-scale network used by tests and the synthetic pipeline.
    pub fn tiny() -> Self {
        Self {
            base_channels: 4,
            depth: 3,
            residual_blocks: 2,
            attention: true,
            seed: 0,
        }
    }

    pub fn validate(&self, patch: usize) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 {
            return Err(ModelError::InvalidConfig("base channels and depth must be >= 1".into()));
        }
        let m = 1usize << self.depth;
        if !patch.is_multiple_of(m) {
            return Err(ModelError::InvalidConfig(format!(
                "patch {patch} not divisible by 2^{} = {m}",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Number of stride-2 conv blocks.
    pub depth: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 3,
            seed: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn tiny() -> Self {
        Self {
            base_channels: 4,
            depth: 3,
            seed: 1,
        }
    }

    pub fn validate(&self, medium_patch: usize) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 {
            return Err(ModelError::InvalidConfig("base channels and depth must be >= 1".into()));
        }
        if medium_patch >> self.depth == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "medium patch {medium_patch} vanishes after {} downsamplings",
                self.depth
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
