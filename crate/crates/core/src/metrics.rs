//! Six-metric comparison of a predicted LST field against a reference, and
//! the 30 m validation protocol built on them.

use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::raster::{block_average, GridSpec, Raster, RasterError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("reference has zero dynamic range")]
    DegenerateRange,
    #[error("{0} has zero norm")]
    ZeroNorm(&'static str),
    #[error("{0} has zero variance")]
    ZeroVariance(&'static str),
    #[error("reference mean is zero")]
    ZeroMean,
    #[error("grid {width}x{height} is smaller than the {window}x{window} SSIM window")]
    TooSmall { width: usize, height: usize, window: usize },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Window and constants shared by every report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    /// Fused pixel size over reference pixel size.
    pub ergas_ratio: f64,
    /// Fine-to-reference block size used by [`evaluate_30m`].
    pub average_factor: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            ergas_ratio: 10.0 / 30.0,
            average_factor: 3,
        }
    }
}

fn paired(pred: &Raster, reference: &Raster) -> Result<(Vec<f64>, Vec<f64>)> {
    pred.grid().ensure_same(reference.grid())?;
    pred.ensure_unmasked()?;
    reference.ensure_unmasked()?;
    Ok((pred.to_f64(), reference.to_f64()))
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn mse(p: &[f64], r: &[f64]) -> f64 {
    p.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64
}

fn dynamic_range(r: &[f64]) -> Result<f64> {
    let (lo, hi) = r.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let l = hi - lo;
    if l > 0.0 {
        Ok(l)
    } else {
        Err(MetricsError::DegenerateRange)
    }
}

pub fn rmse(p: &[f64], r: &[f64]) -> f64 {
    mse(p, r).sqrt()
}

/// `10 log10(L^2 / MSE)` with `L` the reference range; `+inf` when the
/// inputs are identical.
pub fn psnr(p: &[f64], r: &[f64]) -> Result<f64> {
    let l = dynamic_range(r)?;
    let m = mse(p, r);
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (l * l / m).log10()
    })
}

/// Angle in degrees between the two images viewed as flat vectors.
pub fn sam_degrees(p: &[f64], r: &[f64]) -> Result<f64> {
    let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if np == 0.0 {
        return Err(MetricsError::ZeroNorm("prediction"));
    }
    if nr == 0.0 {
        return Err(MetricsError::ZeroNorm("reference"));
    }
    // 2 atan2(|u - v|, |u + v|) on unit vectors stays accurate near 0 and
    // 180 degrees, where acos of the cosine loses half its digits
    let (mut diff, mut sum) = (0.0, 0.0);
    for (a, b) in p.iter().zip(r) {
        let (u, v) = (a / np, b / nr);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Ok((2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees())
}

/// Pearson correlation over all pixels.
pub fn cc(p: &[f64], r: &[f64]) -> Result<f64> {
    let (mp, mr) = (mean(p), mean(r));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(r) {
        let (dx, dy) = (a - mp, b - mr);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricsError::ZeroVariance("prediction"));
    }
    if syy == 0.0 {
        return Err(MetricsError::ZeroVariance("reference"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Single-band ERGAS, `100 * ratio * |RMSE / mean(ref)|`.
pub fn ergas(p: &[f64], r: &[f64], ratio: f64) -> Result<f64> {
    let m = mean(r);
    if m == 0.0 {
        return Err(MetricsError::ZeroMean);
    }
    Ok(100.0 * ratio * (rmse(p, r) / m).abs())
}

fn ssim_taps(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..window)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable weighted window sums over every fully contained window.
fn valid_filter(x: &[f64], width: usize, height: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (ow, oh) = (width + 1 - n, height + 1 - n);
    let mut rows = vec![0.0; ow * height];
    for r in 0..height {
        let line = &x[r * width..][..width];
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().zip(&line[c..c + n]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(k, t)| t * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean local SSIM with a Gaussian window and `L` the reference range.
pub fn ssim(p: &[f64], r: &[f64], width: usize, height: usize, cfg: &MetricConfig) -> Result<f64> {
    let n = cfg.ssim_window;
    if width < n || height < n {
        return Err(MetricsError::TooSmall {
            width,
            height,
            window: n,
        });
    }
    let l = dynamic_range(r)?;
    let c1 = (cfg.ssim_k1 * l).powi(2);
    let c2 = (cfg.ssim_k2 * l).powi(2);
    let taps = ssim_taps(n, cfg.ssim_sigma);
    let f = |v: &[f64]| valid_filter(v, width, height, &taps);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mx, my) = (f(p), f(r));
    let (exx, eyy, exy) = (f(&prod(p, p)), f(&prod(r, r)), f(&prod(p, r)));
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        let sxx = exx[i] - a * a;
        let syy = eyy[i] - b * b;
        let sxy = exy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * sxy + c2)) / ((a * a + b * b + c1) * (sxx + syy + c2));
    }
    Ok(total / mx.len() as f64)
}

pub fn metric_rmse(pred: &Raster, reference: &Raster) -> Result<f64> {
    let (p, r) = paired(pred, reference)?;
    Ok(rmse(&p, &r))
}

pub fn metric_ssim(pred: &Raster, reference: &Raster) -> Result<f64> {
    let (p, r) = paired(pred, reference)?;
    ssim(&p, &r, pred.width(), pred.height(), &MetricConfig::default())
}

pub fn metric_psnr(pred: &Raster, reference: &Raster) -> Result<f64> {
    let (p, r) = paired(pred, reference)?;
    psnr(&p, &r)
}

pub fn metric_sam(pred: &Raster, reference: &Raster) -> Result<f64> {
    let (p, r) = paired(pred, reference)?;
    sam_degrees(&p, &r)
}

pub fn metric_cc(pred: &Raster, reference: &Raster) -> Result<f64> {
    let (p, r) = paired(pred, reference)?;
    cc(&p, &r)
}

pub fn metric_ergas(pred: &Raster, reference: &Raster, ratio: f64) -> Result<f64> {
    let (p, r) = paired(pred, reference)?;
    ergas(&p, &r, ratio)
}

/// Writes `+inf` as the string `"inf"` so the report stays valid JSON.
mod psnr_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("unexpected psnr value {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub ssim: f64,
    #[serde(with = "psnr_serde")]
    pub psnr: f64,
    #[serde(rename = "sam")]
    pub sam_degrees: f64,
    pub cc: f64,
    pub ergas: f64,
    pub pred_date: NaiveDate,
    pub ref_date: NaiveDate,
    pub pred_grid: GridSpec,
    pub ref_grid: GridSpec,
    pub config: MetricConfig,
}

impl EvalReport {
    /// All six metrics of `pred` against `reference` on a shared grid.
    pub fn compare(pred: &Raster, reference: &Raster, cfg: &MetricConfig) -> Result<Self> {
        let (p, r) = paired(pred, reference)?;
        Ok(Self {
            rmse: rmse(&p, &r),
            ssim: ssim(&p, &r, pred.width(), pred.height(), cfg)?,
            psnr: psnr(&p, &r)?,
            sam_degrees: sam_degrees(&p, &r)?,
            cc: cc(&p, &r)?,
            ergas: ergas(&p, &r, cfg.ergas_ratio)?,
            pred_date: pred.timestamp(),
            ref_date: reference.timestamp(),
            pred_grid: *pred.grid(),
            ref_grid: *reference.grid(),
            config: *cfg,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn rows(&self) -> [(&'static str, f64); 6] {
        [
            ("RMSE", self.rmse),
            ("SSIM", self.ssim),
            ("PSNR", self.psnr),
            ("SAM", self.sam_degrees),
            ("CC", self.cc),
            ("ERGAS", self.ergas),
        ]
    }
}

/// Three decimals, `inf` for the identical-input PSNR.
pub fn format_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.3}")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>10}", "metric", "value")?;
        for (name, v) in self.rows() {
            writeln!(f, "{:<6} {:>10}", name, format_metric(v))?;
        }
        Ok(())
    }
}

/// Block-averages a fine prediction onto the reference grid, then compares.
pub fn evaluate_30m(pred_fine: &Raster, ref_medium: &Raster) -> Result<EvalReport> {
    evaluate_30m_with(pred_fine, ref_medium, &MetricConfig::default())
}

pub fn evaluate_30m_with(pred_fine: &Raster, ref_medium: &Raster, cfg: &MetricConfig) -> Result<EvalReport> {
    let averaged = block_average(pred_fine, cfg.average_factor)?;
    let mut report = EvalReport::compare(&averaged, ref_medium, cfg)?;
    report.pred_grid = *pred_fine.grid();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{test_date, Band};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn grid(n: usize) -> GridSpec {
        GridSpec::new(n, n, 30.0, 0.0, 30.0 * n as f64)
    }

    fn raster(n: usize, f: impl FnMut(usize, usize) -> f32) -> Raster {
        Raster::from_fn(grid(n), Band::Lst, test_date(), f).unwrap()
    }

    fn field(n: usize) -> Raster {
        raster(n, |r, c| 290.0 + (r as f32 * 0.3).sin() * 4.0 + c as f32 * 0.2)
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn identical_inputs() {
        let r = field(32);
        let rep = EvalReport::compare(&r, &r, &MetricConfig::default()).unwrap();
        assert_eq!(rep.rmse, 0.0);
        assert!((rep.ssim - 1.0).abs() < 1e-9);
        assert_eq!(rep.psnr, f64::INFINITY);
        assert_eq!(rep.sam_degrees, 0.0);
        assert!((rep.cc - 1.0).abs() < 1e-9);
        assert_eq!(rep.ergas, 0.0);
        let json = rep.to_json();
        assert!(json.contains("\"psnr\": \"inf\""));
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), rep);
        assert!(rep.to_string().contains("inf"));
    }

    #[test]
    fn rmse_constant_offset() {
        let r = field(16);
        let p = r.map_values(r.values().iter().map(|v| v + 2.0).collect()).unwrap();
        assert!((metric_rmse(&p, &r).unwrap() - 2.0).abs() < 1e-4);
        assert_eq!(format_metric(3.22), "3.220");
    }

    #[test]
    fn ssim_of_negated_zero_mean_reference_is_negative() {
        let n = 24;
        // alternating sign keeps every local window mean near zero
        let r = raster(n, |r, c| {
            (if (r + c) % 2 == 0 { 1.0 } else { -1.0 }) * (1.0 + 0.3 * (r as f32 * 0.5).sin())
        });
        let m = r.mean() as f32;
        let r = r.map_values(r.values().iter().map(|v| v - m).collect()).unwrap();
        let p = r.map_values(r.values().iter().map(|v| -v).collect()).unwrap();
        assert!(metric_ssim(&p, &r).unwrap() < 0.0);
    }

    #[test]
    fn ssim_errors() {
        let c = raster(16, |_, _| 5.0);
        assert!(matches!(
            metric_ssim(&field(16), &c),
            Err(MetricsError::DegenerateRange)
        ));
        assert!(matches!(
            metric_ssim(&field(8), &field(8)),
            Err(MetricsError::TooSmall { .. })
        ));
        assert!(metric_ssim(&field(16), &field(17)).is_err());
    }

    /// Direct double loop over every window, no separability.
    fn ssim_naive(p: &[f64], r: &[f64], w: usize, h: usize) -> f64 {
        let taps = ssim_taps(11, 1.5);
        let l = dynamic_range(r).unwrap();
        let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for r0 in 0..=h - 11 {
            for c0 in 0..=w - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = taps[i] * taps[j];
                        let (a, b) = (p[(r0 + i) * w + c0 + j], r[(r0 + i) * w + c0 + j]);
                        mx += wt * a;
                        my += wt * b;
                        xx += wt * a * a;
                        yy += wt * b * b;
                        xy += wt * a * b;
                    }
                }
                let (sx, sy, sxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_window_loop() {
        let (w, h) = (19, 14);
        let r = noise(w * h, 1);
        let p: Vec<f64> = r.iter().zip(noise(w * h, 2)).map(|(a, b)| a + 0.3 * b).collect();
        let fast = ssim(&p, &r, w, h, &MetricConfig::default()).unwrap();
        assert!((fast - ssim_naive(&p, &r, w, h)).abs() < 1e-12);
    }

    #[test]
    fn psnr_analytic_values() {
        // L = 100 with RMSE = 1 gives 40 dB
        let mut r = vec![0.0; 100];
        r[0] = 100.0;
        let p: Vec<f64> = r
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { v + 1.0 } else { v - 1.0 })
            .collect();
        assert!((psnr(&p, &r).unwrap() - 40.0).abs() < 1e-12);
        // MSE = L^2 gives 0 dB
        let r = [0.0, 1.0];
        assert!(psnr(&[1.0, 0.0], &r).unwrap().abs() < 1e-12);
        assert!(matches!(
            psnr(&[1.0, 1.0], &[2.0, 2.0]),
            Err(MetricsError::DegenerateRange)
        ));
    }

    #[test]
    fn sam_cases() {
        assert!((sam_degrees(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 90.0).abs() < 1e-12);
        assert!(sam_degrees(&[0.0, 0.0], &[0.0, 1.0]).is_err());
        let r: Vec<f64> = noise(4096, 3).iter().map(|v| 300.0 + 5.0 * v).collect();
        let scale = 5.0;
        let angles: Vec<f64> = [0.01, 0.1]
            .iter()
            .map(|s| {
                let p: Vec<f64> = r.iter().zip(noise(4096, 4)).map(|(a, n)| a + s * scale * n).collect();
                sam_degrees(&p, &r).unwrap()
            })
            .collect();
        assert!(angles[0] > 0.0 && angles[0] < angles[1]);
    }

    #[test]
    fn cc_cases() {
        let r = noise(10_000, 5);
        let q = noise(10_000, 6);
        assert!(cc(&q, &r).unwrap().abs() < 0.05);
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        assert!((cc(&neg, &r).unwrap() + 1.0).abs() < 1e-9);
        assert!(matches!(
            cc(&[1.0, 1.0], &[1.0, 2.0]),
            Err(MetricsError::ZeroVariance(_))
        ));
        assert!(matches!(
            cc(&[1.0, 2.0], &[1.0, 1.0]),
            Err(MetricsError::ZeroVariance(_))
        ));
    }

    #[test]
    fn ergas_cases() {
        let r = [2.0, 4.0];
        assert_eq!(ergas(&r, &r, 1.0 / 3.0).unwrap(), 0.0);
        // RMSE = mean(ref) = 3
        let p = [5.0, 7.0];
        assert!((ergas(&p, &r, 1.0 / 3.0).unwrap() - 100.0 / 3.0).abs() < 1e-9);
        assert!(matches!(
            ergas(&p, &[-1.0, 1.0], 1.0 / 3.0),
            Err(MetricsError::ZeroMean)
        ));
    }

    #[test]
    fn evaluate_30m_composition_and_perfect_case() {
        let reference = field(12);
        let fine = Raster::from_fn(grid(12).refined(3), Band::Lst, test_date(), |r, c| {
            let base = reference.get(r / 3, c / 3);
            // zero-sum pattern inside each 3x3 block
            base + [-1.0, 0.0, 1.0][c % 3] * 0.5
        })
        .unwrap();
        let rep = evaluate_30m(&fine, &reference).unwrap();
        assert!(rep.rmse < 1e-4);
        assert!((rep.ssim - 1.0).abs() < 1e-6);
        assert_eq!(rep.pred_grid.width, 36);

        let noisy = fine
            .map_values(
                fine.values()
                    .iter()
                    .zip(noise(36 * 36, 8))
                    .map(|(v, n)| v + n as f32)
                    .collect(),
            )
            .unwrap();
        let rep = evaluate_30m(&noisy, &reference).unwrap();
        let direct =
            EvalReport::compare(&block_average(&noisy, 3).unwrap(), &reference, &MetricConfig::default()).unwrap();
        assert_eq!(rep.rows(), direct.rows());
        assert!(evaluate_30m(&noisy, &field(11)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn metric_ranges_and_invariances(seed in 0u64..1000, slope in 0.1f64..10.0, shift in -50.0f64..50.0, k in 0.1f64..10.0) {
            let (w, h) = (13, 12);
            let r: Vec<f64> = noise(w * h, seed).iter().map(|v| 10.0 + v).collect();
            let p: Vec<f64> = r.iter().zip(noise(w * h, seed + 7)).map(|(a, b)| a + 0.5 * b).collect();
            let cfg = MetricConfig::default();
            let s = ssim(&p, &r, w, h, &cfg).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            let c = cc(&p, &r).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
            prop_assert!(rmse(&p, &r) >= 0.0);
            prop_assert!(ergas(&p, &r, 1.0 / 3.0).unwrap() >= 0.0);
            let sam = sam_degrees(&p, &r).unwrap();
            prop_assert!(sam >= 0.0);

            let affine: Vec<f64> = p.iter().map(|v| slope * v + shift).collect();
            prop_assert!((cc(&affine, &r).unwrap() - c).abs() < 1e-9);

            let scaled: Vec<f64> = p.iter().map(|v| k * v).collect();
            let scaled_ref: Vec<f64> = r.iter().map(|v| k * v).collect();
            prop_assert!((sam_degrees(&scaled, &r).unwrap() - sam).abs() < 1e-9);
            prop_assert!((sam_degrees(&p, &scaled_ref).unwrap() - sam).abs() < 1e-9);

            // halving the error raises PSNR
            let closer: Vec<f64> = p.iter().zip(&r).map(|(a, b)| b + 0.5 * (a - b)).collect();
            prop_assert!(psnr(&closer, &r).unwrap() > psnr(&p, &r).unwrap());
        }
    }
}
