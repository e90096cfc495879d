//! Spatial feature enhancement: a least-squares map from (NDVI, NDWI, NDBI)
//! to LST fitted on the medium grid and transferred to the fine grid.

use crate::raster::{Band, Raster, RasterError};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnhanceError {
    #[error("design matrix is rank deficient (column {column} is collinear with earlier columns)")]
    RankDeficient { column: usize },
    #[error("need at least {needed} pixels, got {got}")]
    TooFewPixels { needed: usize, got: usize },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("model file: {0}")]
    Io(String),
}

pub type Result<T, E = EnhanceError> = std::result::Result<T, E>;

const REGRESSORS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub r_squared: f64,
    pub residual_rmse: f64,
    pub pixels: usize,
}

/// Fitted regression `lst = beta . (ndvi, ndwi, ndbi) + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhanceModel {
    pub beta: [f64; REGRESSORS],
    pub intercept: f64,
    pub diagnostics: FitDiagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_date: Option<NaiveDate>,
}

/// Householder QR least squares for a tall, column-major design matrix.
/// Returns the coefficient vector or the first column whose pivot falls
/// below `tol * max column norm`.
pub(crate) fn qr_least_squares(columns: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    let p = columns.len();
    let n = y.len();
    let mut a: Vec<Vec<f64>> = columns.to_vec();
    let mut b = y.to_vec();
    let scale = a
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let tol = 1e-10 * scale.max(f64::MIN_POSITIVE);
    let mut diag = vec![0.0; p];
    for k in 0..p {
        let norm = a[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= tol {
            return Err(EnhanceError::RankDeficient { column: k });
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        // v = x - alpha e1, stored in place of column k
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        diag[k] = alpha;
        if vnorm2 > 0.0 {
            for col in a.iter_mut().skip(k + 1) {
                let dot: f64 = v.iter().zip(&col[k..]).map(|(x, y)| x * y).sum();
                let f = 2.0 * dot / vnorm2;
                for (c, x) in col[k..].iter_mut().zip(&v) {
                    *c -= f * x;
                }
            }
            let dot: f64 = v.iter().zip(&b[k..]).map(|(x, y)| x * y).sum();
            let f = 2.0 * dot / vnorm2;
            for (c, x) in b[k..].iter_mut().zip(&v) {
                *c -= f * x;
            }
        }
        if diag[k].abs() <= tol {
            return Err(EnhanceError::RankDeficient { column: k });
        }
    }
    debug_assert!(n >= p);
    // back substitution on R (upper triangle: diag + a[j][i] for i < j)
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = b[i];
        for j in i + 1..p {
            s -= a[j][i] * x[j];
        }
        x[i] = s / diag[i];
    }
    Ok(x)
}

fn check_inputs(indices: [&Raster; 3]) -> Result<()> {
    let (first, rest) = (indices[0], &indices[1..]);
    for r in rest {
        if !r.grid().same_as(first.grid()) {
            return Err(EnhanceError::GridMismatch(format!("{} vs {}", r.grid(), first.grid())));
        }
        if r.timestamp() != first.timestamp() {
            return Err(EnhanceError::GridMismatch("index dates differ".into()));
        }
    }
    Ok(())
}

/// Least-squares fit of LST against the three indices plus an intercept.
pub fn fit_linear_enhance(ndvi: &Raster, ndwi: &Raster, ndbi: &Raster, lst: &Raster) -> Result<EnhanceModel> {
    check_inputs([ndvi, ndwi, ndbi])?;
    if !lst.grid().same_as(ndvi.grid()) {
        return Err(EnhanceError::GridMismatch(format!(
            "LST grid {} vs index grid {}",
            lst.grid(),
            ndvi.grid()
        )));
    }
    if lst.timestamp() != ndvi.timestamp() {
        return Err(EnhanceError::GridMismatch("LST and index dates differ".into()));
    }
    for r in [ndvi, ndwi, ndbi, lst] {
        r.ensure_unmasked()?;
    }
    let n = lst.values().len();
    if n < REGRESSORS + 1 {
        return Err(EnhanceError::TooFewPixels {
            needed: REGRESSORS + 1,
            got: n,
        });
    }
    let columns = vec![ndvi.to_f64(), ndwi.to_f64(), ndbi.to_f64(), vec![1.0; n]];
    let y = lst.to_f64();
    let coef = qr_least_squares(&columns, &y)?;
    let beta = [coef[0], coef[1], coef[2]];
    let intercept = coef[3];

    let mean = y.iter().sum::<f64>() / n as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for i in 0..n {
        let pred = beta[0] * columns[0][i] + beta[1] * columns[1][i] + beta[2] * columns[2][i] + intercept;
        ss_res += (y[i] - pred).powi(2);
        ss_tot += (y[i] - mean).powi(2);
    }
    // a constant target carries no explainable variance
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    Ok(EnhanceModel {
        beta,
        intercept,
        diagnostics: FitDiagnostics {
            r_squared,
            residual_rmse: (ss_res / n as f64).sqrt(),
            pixels: n,
        },
        source_date: Some(lst.timestamp()),
    })
}

impl EnhanceModel {
    pub fn predict(&self, ndvi: f64, ndwi: f64, ndbi: f64) -> f64 {
        self.beta[0] * ndvi + self.beta[1] * ndwi + self.beta[2] * ndbi + self.intercept
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| EnhanceError::Io(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| EnhanceError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EnhanceError::Io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| EnhanceError::Io(e.to_string()))
    }
}

/// Applies the fitted law to fine-grid indices, giving the prior fine LST.
pub fn apply_enhance(model: &EnhanceModel, ndvi: &Raster, ndwi: &Raster, ndbi: &Raster) -> Result<Raster> {
    check_inputs([ndvi, ndwi, ndbi])?;
    let (a, b, c) = (ndvi.values(), ndwi.values(), ndbi.values());
    let mut values = Vec::with_capacity(a.len());
    let mut mask = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let m = ndvi.mask()[i] || ndwi.mask()[i] || ndbi.mask()[i];
        mask.push(m);
        values.push(if m {
            0.0
        } else {
            model.predict(a[i] as f64, b[i] as f64, c[i] as f64) as f32
        });
    }
    Ok(Raster::with_mask(
        *ndvi.grid(),
        Band::Lst,
        ndvi.timestamp(),
        values,
        mask,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{block_average, test_date, GridSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(w: usize) -> GridSpec {
        GridSpec::new(w, w, 30.0, 0.0, 0.0)
    }

    fn random_index(rng: &mut ChaCha8Rng, g: GridSpec, band: Band) -> Raster {
        Raster::from_fn(g, band, test_date(), |_, _| rng.random_range(-0.8..0.8)).unwrap()
    }

    fn indices(seed: u64, w: usize) -> [Raster; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = grid(w);
        [
            random_index(&mut rng, g, Band::Ndvi),
            random_index(&mut rng, g, Band::Ndwi),
            random_index(&mut rng, g, Band::Ndbi),
        ]
    }

    fn law(idx: &[Raster; 3], beta: [f64; 3], c: f64) -> Raster {
        let g = *idx[0].grid();
        Raster::from_fn(g, Band::Lst, test_date(), |r, col| {
            (beta[0] * idx[0].get(r, col) as f64
                + beta[1] * idx[1].get(r, col) as f64
                + beta[2] * idx[2].get(r, col) as f64
                + c) as f32
        })
        .unwrap()
    }

    #[test]
    fn recovers_noise_free_law() {
        let idx = indices(1, 20);
        let lst = law(&idx, [3.0, -2.0, 0.5], 10.0);
        let m = fit_linear_enhance(&idx[0], &idx[1], &idx[2], &lst).unwrap();
        for (got, want) in m.beta.iter().zip([3.0, -2.0, 0.5]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        assert!((m.intercept - 10.0).abs() < 1e-6);
        assert!((m.diagnostics.r_squared - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_target_has_no_explained_variance() {
        let idx = indices(2, 16);
        let lst = Raster::constant(grid(16), Band::Lst, test_date(), 300.0).unwrap();
        let m = fit_linear_enhance(&idx[0], &idx[1], &idx[2], &lst).unwrap();
        assert!(m.beta.iter().all(|b| b.abs() < 1e-6));
        assert!((m.intercept - 300.0).abs() < 1e-6);
        assert!(m.diagnostics.r_squared.abs() < 1e-9);
    }

    #[test]
    fn collinear_indices_rejected() {
        let idx = indices(3, 10);
        let lst = law(&idx, [1.0, 1.0, 1.0], 0.0);
        let dup = idx[0].clone().with_band(Band::Ndwi);
        assert!(matches!(
            fit_linear_enhance(&idx[0], &dup, &idx[2], &lst),
            Err(EnhanceError::RankDeficient { column: 1 })
        ));
        let flat = Raster::constant(grid(10), Band::Ndbi, test_date(), 0.2).unwrap();
        assert!(matches!(
            fit_linear_enhance(&idx[0], &idx[1], &flat, &lst),
            Err(EnhanceError::RankDeficient { column: 3 })
        ));
    }

    #[test]
    fn grid_mismatch_and_small_inputs() {
        let idx = indices(4, 10);
        let lst = Raster::constant(grid(5), Band::Lst, test_date(), 1.0).unwrap();
        assert!(matches!(
            fit_linear_enhance(&idx[0], &idx[1], &idx[2], &lst),
            Err(EnhanceError::GridMismatch(_))
        ));
        let tiny = indices(5, 1);
        let lst = Raster::constant(grid(1), Band::Lst, test_date(), 1.0).unwrap();
        assert!(matches!(
            fit_linear_enhance(&tiny[0], &tiny[1], &tiny[2], &lst),
            Err(EnhanceError::TooFewPixels { .. })
        ));
    }

    #[test]
    fn apply_projection_and_pixel_value() {
        let idx = indices(6, 8);
        let m = EnhanceModel {
            beta: [1.0, 0.0, 0.0],
            intercept: 0.0,
            diagnostics: FitDiagnostics {
                r_squared: 1.0,
                residual_rmse: 0.0,
                pixels: 0,
            },
            source_date: None,
        };
        let out = apply_enhance(&m, &idx[0], &idx[1], &idx[2]).unwrap();
        assert_eq!(out.values(), idx[0].values());
        assert_eq!(out.band(), Band::Lst);
        let m = EnhanceModel {
            beta: [3.0, -2.0, 0.5],
            intercept: 10.0,
            ..m
        };
        assert!((m.predict(0.5, 0.1, -0.2) - 11.2).abs() < 1e-12);
    }

    #[test]
    fn transfers_across_scales() {
        let fine = indices(7, 36);
        let fine = [fine[0].clone().with_band(Band::Ndvi), fine[1].clone(), fine[2].clone()];
        let truth = law(&fine, [-6.0, -3.0, 5.0], 30.0);
        let medium: Vec<Raster> = fine.iter().map(|r| block_average(r, 3).unwrap()).collect();
        let lst30 = block_average(&truth, 3).unwrap();
        let m = fit_linear_enhance(&medium[0], &medium[1], &medium[2], &lst30).unwrap();
        let prior = apply_enhance(&m, &fine[0], &fine[1], &fine[2]).unwrap();
        let worst = prior
            .values()
            .iter()
            .zip(truth.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-4, "max deviation {worst}");
    }

    #[test]
    fn residuals_orthogonal_and_refit_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let idx = indices(8, 24);
        let noisy = Raster::from_fn(grid(24), Band::Lst, test_date(), |r, c| {
            (2.0 * idx[0].get(r, c) as f64 - idx[2].get(r, c) as f64 + 25.0 + rng.random_range(-1.0..1.0)) as f32
        })
        .unwrap();
        let m = fit_linear_enhance(&idx[0], &idx[1], &idx[2], &noisy).unwrap();
        let pred = apply_enhance(&m, &idx[0], &idx[1], &idx[2]).unwrap();
        let resid: Vec<f64> = noisy
            .values()
            .iter()
            .zip(pred.values())
            .map(|(a, b)| *a as f64 - *b as f64)
            .collect();
        for x in &idx {
            let dot: f64 = resid.iter().zip(x.values()).map(|(r, v)| r * *v as f64).sum();
            let scale: f64 = resid.iter().map(|r| r * r).sum::<f64>().sqrt()
                * x.values().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            // residuals are taken after f32 rounding of the prediction
            assert!(dot.abs() < 1e-5 * scale, "dot {dot} scale {scale}");
        }
        let refit = fit_linear_enhance(&idx[0], &idx[1], &idx[2], &pred).unwrap();
        for (a, b) in refit.beta.iter().zip(&m.beta) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn index_scaling_rescales_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let idx = indices(9, 16);
        let lst = Raster::from_fn(grid(16), Band::Lst, test_date(), |r, c| {
            (4.0 * idx[1].get(r, c) as f64 + 1.0 + rng.random_range(-0.5..0.5)) as f32
        })
        .unwrap();
        let c = 0.5f32;
        let scaled: Vec<Raster> = idx
            .iter()
            .map(|r| r.map_values(r.values().iter().map(|v| v * c).collect()).unwrap())
            .collect();
        let m = fit_linear_enhance(&idx[0], &idx[1], &idx[2], &lst).unwrap();
        let ms = fit_linear_enhance(&scaled[0], &scaled[1], &scaled[2], &lst).unwrap();
        for (a, b) in ms.beta.iter().zip(&m.beta) {
            assert!((a - b / c as f64).abs() < 1e-6 * b.abs().max(1.0));
        }
        let p = apply_enhance(&m, &idx[0], &idx[1], &idx[2]).unwrap();
        let ps = apply_enhance(&ms, &scaled[0], &scaled[1], &scaled[2]).unwrap();
        for (a, b) in p.values().iter().zip(ps.values()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn model_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let idx = indices(10, 8);
        let lst = law(&idx, [1.0, 2.0, 3.0], 4.0);
        let m = fit_linear_enhance(&idx[0], &idx[1], &idx[2], &lst).unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(EnhanceModel::load(&p).unwrap(), m);
    }
}
