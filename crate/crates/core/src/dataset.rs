//! Dataset manifest: which raster files make up each scene and how scenes
//! are split between training and testing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enhance::{apply_enhance, fit_linear_enhance, EnhanceError};
use crate::model::SceneTriple;
use crate::raster::{read_raster, write_raster, Raster, RasterError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest {path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error("scene {scene} lacks required role {role:?}")]
    MissingRole { scene: String, role: String },
    #[error("no scene with id {0:?}")]
    UnknownScene(String),
    #[error("dataset has no {0} scenes")]
    Empty(&'static str),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Enhance(#[from] EnhanceError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

pub mod role {
    pub const S2_NDVI: &str = "s2_ndvi";
    pub const S2_NDWI: &str = "s2_ndwi";
    pub const S2_NDBI: &str = "s2_ndbi";
    pub const L8_NDVI: &str = "l8_ndvi";
    pub const L8_NDWI: &str = "l8_ndwi";
    pub const L8_NDBI: &str = "l8_ndbi";
    pub const L8_LST_T1: &str = "l8_lst_t1";
    pub const MODIS_LST_T1: &str = "modis_lst_t1";
    pub const MODIS_LST_T2: &str = "modis_lst_t2";
    pub const PRIOR_LST_T1: &str = "prior_lst10_t1";
    pub const L8_LST_T2: &str = "l8_lst_t2";
    pub const TRUTH_FINE_T1: &str = "truth_fine_lst_t1";
    pub const TRUTH_FINE_T2: &str = "truth_fine_lst_t2";

    pub const REQUIRED: [&str; 9] = [
        S2_NDVI,
        S2_NDWI,
        S2_NDBI,
        L8_NDVI,
        L8_NDWI,
        L8_NDBI,
        L8_LST_T1,
        MODIS_LST_T1,
        MODIS_LST_T2,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub split: Split,
    /// Role name to raster path, relative to the manifest's directory.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub scenes: Vec<SceneEntry>,
    /// Directory that relative paths resolve against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            scenes: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |msg: String| DatasetError::Manifest {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(err(format!("unsupported version {}", m.version)));
        }
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SceneEntry> {
        self.scenes.iter().filter(move |s| s.split == split)
    }

    pub fn entry(&self, id: &str) -> Result<&SceneEntry> {
        self.scenes
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| DatasetError::UnknownScene(id.to_string()))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn read_role(&self, entry: &SceneEntry, role: &str) -> Result<Option<Raster>> {
        entry
            .files
            .get(role)
            .map(|rel| read_raster(self.resolve(rel)).map_err(Into::into))
            .transpose()
    }

    fn require(&self, entry: &SceneEntry, role: &str) -> Result<Raster> {
        self.read_role(entry, role)?.ok_or_else(|| DatasetError::MissingRole {
            scene: entry.id.clone(),
            role: role.to_string(),
        })
    }

    /// Loads a scene; when the prior fine LST is not on disk it is derived by
    /// fitting the index regression on the medium grid.
    pub fn load_scene(&self, entry: &SceneEntry) -> Result<SceneTriple> {
        let s2 = [
            self.require(entry, role::S2_NDVI)?,
            self.require(entry, role::S2_NDWI)?,
            self.require(entry, role::S2_NDBI)?,
        ];
        let l8 = [
            self.require(entry, role::L8_NDVI)?,
            self.require(entry, role::L8_NDWI)?,
            self.require(entry, role::L8_NDBI)?,
        ];
        let l8_lst_t1 = self.require(entry, role::L8_LST_T1)?;
        let prior = match self.read_role(entry, role::PRIOR_LST_T1)? {
            Some(p) => p,
            None => {
                let model = fit_linear_enhance(&l8[0], &l8[1], &l8[2], &l8_lst_t1)?;
                apply_enhance(&model, &s2[0], &s2[1], &s2[2])?
            }
        };
        Ok(SceneTriple {
            s2_indices_t1: s2,
            l8_indices_t1: l8,
            l8_lst_t1,
            modis_lst_t1: self.require(entry, role::MODIS_LST_T1)?,
            modis_lst_t2: self.require(entry, role::MODIS_LST_T2)?,
            prior_lst10_t1: prior,
            l8_lst_t2: self.read_role(entry, role::L8_LST_T2)?,
        })
    }
}

/// Writes each raster under `dir/<scene id>/<role>` and records the entry.
pub fn write_scene_files(manifest: &mut Manifest, id: &str, split: Split, rasters: &[(&str, &Raster)]) -> Result<()> {
    let scene_dir = manifest.base_dir.join(id);
    std::fs::create_dir_all(&scene_dir)?;
    let mut files = BTreeMap::new();
    for (role, r) in rasters {
        write_raster(r, scene_dir.join(role))?;
        files.insert(role.to_string(), format!("{id}/{role}.json"));
    }
    manifest.scenes.push(SceneEntry {
        id: id.to_string(),
        split,
        files,
    });
    Ok(())
}

/// Number of training scenes out of `n`: 70% rounded down, keeping at least
/// one scene on each side.
pub fn train_count(n: usize) -> usize {
    (7 * n / 10).clamp(1, n.saturating_sub(1).max(1))
}
