//! Synthetic nested-resolution scenes with known ground truth.
//!
//! Fine index fields are drawn from smooth blobs, gradients and sharp river
//! and built-up shapes; fine LST follows a known linear law of the indices.
//! Every coarser raster is an exact block average of its fine counterpart.

use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, role, train_count, DatasetError, Manifest, Split};
use crate::enhance::{apply_enhance, fit_linear_enhance, EnhanceError, EnhanceModel};
use crate::model::SceneTriple;
use crate::raster::{block_average, Band, GridSpec, Raster, RasterError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Enhance(#[from] EnhanceError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub fine_size: usize,
    pub medium_factor: usize,
    pub coarse_factor: usize,
    pub pixel_size: f64,
    /// LST sensitivities to (NDVI, NDWI, NDBI).
    pub beta: [f64; 3],
    pub intercept: f64,
    /// Std of additive fine-grid LST noise.
    pub lst_noise: f64,
    /// Std of additive fine-grid index noise (applied before the law).
    pub index_noise: f64,
    /// Peak amplitude of the smooth t1-to-t2 anomaly.
    pub anomaly_amplitude: f64,
    /// Extra t2 warming per unit of built-up index above the scene mean.
    pub urban_gain: f64,
    /// Smooth blobs per index field.
    pub blobs: usize,
    pub t1: NaiveDate,
    pub revisit_days: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            fine_size: 96,
            medium_factor: 3,
            coarse_factor: 12,
            pixel_size: 10.0,
            beta: [-10.0, -6.0, 8.0],
            intercept: 30.0,
            lst_noise: 0.0,
            index_noise: 0.0,
            anomaly_amplitude: 4.0,
            urban_gain: 3.0,
            blobs: 6,
            t1: NaiveDate::from_ymd_opt(2024, 9, 19).expect("valid date"),
            revisit_days: 16,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.fine_size == 0 || self.medium_factor == 0 || self.coarse_factor == 0 {
            return bad("sizes and factors must be >= 1".into());
        }
        for f in [self.medium_factor, self.coarse_factor] {
            if !self.fine_size.is_multiple_of(f) {
                return bad(format!("factor {f} does not divide fine size {}", self.fine_size));
            }
        }
        if self.lst_noise < 0.0
            || self.index_noise < 0.0
            || !self.lst_noise.is_finite()
            || !self.index_noise.is_finite()
        {
            return bad("noise levels must be finite and >= 0".into());
        }
        if !(self.pixel_size > 0.0) {
            return bad("pixel size must be positive".into());
        }
        if self.revisit_days == 0 {
            return bad("target date must follow the reference date".into());
        }
        Ok(())
    }

    pub fn t2(&self) -> NaiveDate {
        self.t1 + Days::new(self.revisit_days)
    }

    pub fn fine_grid(&self) -> GridSpec {
        GridSpec::new(
            self.fine_size,
            self.fine_size,
            self.pixel_size,
            500_000.0,
            5_300_000.0 + self.fine_size as f64 * self.pixel_size,
        )
    }
}

/// A generated scene and the fine-grid truth it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub truth_fine_t1: Raster,
    pub truth_fine_t2: Raster,
    pub triple: SceneTriple,
    /// Regression fitted on the medium grid and used for the prior.
    pub enhance: EnhanceModel,
}

struct Field {
    n: usize,
    v: Vec<f64>,
}

impl Field {
    fn new(n: usize, base: f64) -> Self {
        Self {
            n,
            v: vec![base; n * n],
        }
    }

    fn add_gradient(&mut self, rng: &mut ChaCha8Rng, amp: f64) {
        let (a, b) = (rng.random_range(-amp..amp), rng.random_range(-amp..amp));
        let n = self.n as f64;
        for r in 0..self.n {
            for c in 0..self.n {
                self.v[r * self.n + c] += a * (c as f64 / n - 0.5) + b * (r as f64 / n - 0.5);
            }
        }
    }

    fn add_blobs(&mut self, rng: &mut ChaCha8Rng, count: usize, amp: f64) {
        let n = self.n as f64;
        for _ in 0..count {
            let (cy, cx) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
            let s = rng.random_range(0.06..0.2) * n;
            let a = rng.random_range(-amp..amp);
            for r in 0..self.n {
                for c in 0..self.n {
                    let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                    self.v[r * self.n + c] += a * (-d2 / (2.0 * s * s)).exp();
                }
            }
        }
    }

    fn add_noise(&mut self, rng: &mut ChaCha8Rng, sigma: f64) {
        if sigma > 0.0 {
            let d = Normal::new(0.0, sigma).expect("finite sigma");
            self.v.iter_mut().for_each(|v| *v += d.sample(rng));
        }
    }

    fn clamp(&mut self, lo: f64, hi: f64) {
        self.v.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }

    fn mean(&self) -> f64 {
        self.v.iter().sum::<f64>() / self.v.len() as f64
    }
}

/// Pixels within a sinuous band across the scene.
fn river_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let nf = n as f64;
    let y0 = rng.random_range(0.25..0.75) * nf;
    let amp = rng.random_range(0.05..0.15) * nf;
    let period = rng.random_range(0.6..1.5) * nf;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let half_width = rng.random_range(1.5..3.5);
    let mut m = vec![false; n * n];
    for c in 0..n {
        let centre = y0 + amp * (std::f64::consts::TAU * c as f64 / period + phase).sin();
        for r in 0..n {
            m[r * n + c] = (r as f64 - centre).abs() <= half_width;
        }
    }
    m
}

/// A few axis-aligned built-up rectangles.
fn urban_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for _ in 0..rng.random_range(2..5) {
        let h = rng.random_range((n / 12).max(1)..(n / 4).max(2));
        let w = rng.random_range((n / 12).max(1)..(n / 4).max(2));
        let r0 = rng.random_range(0..n - h);
        let c0 = rng.random_range(0..n - w);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                m[r * n + c] = true;
            }
        }
    }
    m
}

fn to_raster(grid: GridSpec, band: Band, date: NaiveDate, v: &[f64]) -> Result<Raster> {
    Ok(Raster::new(grid, band, date, v.iter().map(|&x| x as f32).collect())?)
}

/// Draws one scene. The same config always yields the same scene.
pub fn gen_scene(cfg: &SynthConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.fine_size;
    let grid = cfg.fine_grid();
    let (t1, t2) = (cfg.t1, cfg.t2());

    let mut ndvi = Field::new(n, 0.35);
    ndvi.add_gradient(&mut rng, 0.3);
    ndvi.add_blobs(&mut rng, cfg.blobs, 0.3);
    let mut ndwi = Field::new(n, -0.25);
    ndwi.add_gradient(&mut rng, 0.15);
    ndwi.add_blobs(&mut rng, cfg.blobs, 0.15);
    let mut ndbi = Field::new(n, -0.1);
    ndbi.add_gradient(&mut rng, 0.2);
    ndbi.add_blobs(&mut rng, cfg.blobs, 0.2);

    let river = river_mask(&mut rng, n);
    let urban = urban_mask(&mut rng, n);
    for i in 0..n * n {
        if river[i] {
            ndwi.v[i] += 0.55;
            ndvi.v[i] -= 0.35;
            ndbi.v[i] -= 0.1;
        } else if urban[i] {
            ndbi.v[i] += 0.4;
            ndvi.v[i] -= 0.25;
        }
    }
    for f in [&mut ndvi, &mut ndwi, &mut ndbi] {
        f.add_noise(&mut rng, cfg.index_noise);
        f.clamp(-1.0, 1.0);
    }
    // Indices are stored in f32; the law is applied to the stored values.
    let idx: Vec<Raster> = [(&ndvi, Band::Ndvi), (&ndwi, Band::Ndwi), (&ndbi, Band::Ndbi)]
        .iter()
        .map(|(f, b)| to_raster(grid, *b, t1, &f.v))
        .collect::<Result<_>>()?;
    let law = |i: usize| {
        cfg.intercept
            + cfg.beta[0] * idx[0].values()[i] as f64
            + cfg.beta[1] * idx[1].values()[i] as f64
            + cfg.beta[2] * idx[2].values()[i] as f64
    };
    let mut lst1 = Field {
        n,
        v: (0..n * n).map(law).collect(),
    };
    lst1.add_noise(&mut rng, cfg.lst_noise);

    let mut anomaly = Field::new(n, rng.random_range(-1.0..1.0) * cfg.anomaly_amplitude * 0.5);
    anomaly.add_gradient(&mut rng, cfg.anomaly_amplitude);
    anomaly.add_blobs(&mut rng, 3, cfg.anomaly_amplitude);
    let ndbi_mean = ndbi.mean();
    let lst2: Vec<f64> = (0..n * n)
        .map(|i| lst1.v[i] + anomaly.v[i] + cfg.urban_gain * (idx[2].values()[i] as f64 - ndbi_mean))
        .collect();

    let truth_fine_t1 = to_raster(grid, Band::Lst, t1, &lst1.v)?;
    let truth_fine_t2 = to_raster(grid, Band::Lst, t2, &lst2)?;
    let (mf, cf) = (cfg.medium_factor, cfg.coarse_factor);
    let l8_indices_t1 = [
        block_average(&idx[0], mf)?,
        block_average(&idx[1], mf)?,
        block_average(&idx[2], mf)?,
    ];
    let l8_lst_t1 = block_average(&truth_fine_t1, mf)?;
    let enhance = fit_linear_enhance(&l8_indices_t1[0], &l8_indices_t1[1], &l8_indices_t1[2], &l8_lst_t1)?;
    let prior = apply_enhance(&enhance, &idx[0], &idx[1], &idx[2])?;
    let triple = SceneTriple {
        modis_lst_t1: block_average(&truth_fine_t1, cf)?,
        modis_lst_t2: block_average(&truth_fine_t2, cf)?,
        l8_lst_t2: Some(block_average(&truth_fine_t2, mf)?),
        s2_indices_t1: [idx[0].clone(), idx[1].clone(), idx[2].clone()],
        l8_indices_t1,
        l8_lst_t1,
        prior_lst10_t1: prior,
    };
    Ok(SynthScene {
        truth_fine_t1,
        truth_fine_t2,
        triple,
        enhance,
    })
}

/// Seed of scene `i` in a dataset drawn with base seed `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1)
}

/// Writes `n` scenes under `out_dir` plus `out_dir/manifest.json`; the first
/// [`train_count`] scenes are the training split.
pub fn make_dataset(cfg: &SynthConfig, n: usize, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    if n < 2 {
        return Err(SynthError::InvalidConfig(format!("need at least 2 scenes, got {n}")));
    }
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(DatasetError::from)?;
    let mut manifest = Manifest::new(out_dir);
    let n_train = train_count(n);
    for i in 0..n {
        let scene = gen_scene(&SynthConfig {
            seed: scene_seed(cfg.seed, i),
            ..cfg.clone()
        })?;
        let t = &scene.triple;
        let split = if i < n_train { Split::Train } else { Split::Test };
        let target = t.l8_lst_t2.as_ref().expect("synthetic scenes carry the target");
        dataset::write_scene_files(
            &mut manifest,
            &format!("scene_{i:03}"),
            split,
            &[
                (role::S2_NDVI, &t.s2_indices_t1[0]),
                (role::S2_NDWI, &t.s2_indices_t1[1]),
                (role::S2_NDBI, &t.s2_indices_t1[2]),
                (role::L8_NDVI, &t.l8_indices_t1[0]),
                (role::L8_NDWI, &t.l8_indices_t1[1]),
                (role::L8_NDBI, &t.l8_indices_t1[2]),
                (role::L8_LST_T1, &t.l8_lst_t1),
                (role::MODIS_LST_T1, &t.modis_lst_t1),
                (role::MODIS_LST_T2, &t.modis_lst_t2),
                (role::PRIOR_LST_T1, &t.prior_lst10_t1),
                (role::L8_LST_T2, target),
                (role::TRUTH_FINE_T1, &scene.truth_fine_t1),
                (role::TRUTH_FINE_T2, &scene.truth_fine_t2),
            ],
        )?;
    }
    manifest.save(out_dir.join("manifest.json")).map_err(SynthError::from)?;
    Ok(manifest)
}
