use super::{Raster, RasterError, Result};

/// Normalised 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(2 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(RasterError::NonPositiveSigma(sigma));
    }
    let radius = (2.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    Ok(taps)
}

/// Half-sample symmetric reflection into `0..len`.
fn reflect(i: i64, len: usize) -> usize {
    let n = len as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn convolve_axis(
    src: &[f64],
    dst: &mut [f64],
    len: usize,
    stride: usize,
    count: usize,
    line_step: usize,
    taps: &[f64],
) {
    let radius = (taps.len() / 2) as i64;
    for line in 0..count {
        let base = line * line_step;
        for i in 0..len {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let j = reflect(i as i64 + k as i64 - radius, len);
                acc += t * src[base + j * stride];
            }
            dst[base + i * stride] = acc;
        }
    }
}

/// Separable Gaussian smoothing with mirrored borders.
///
/// Mirroring keeps every pixel's total outgoing weight at exactly one, so
/// the grid mean is conserved and the output stays within the input range.
pub fn gaussian_filter(r: &Raster, sigma: f64) -> Result<Raster> {
    let taps = gaussian_kernel(sigma)?;
    r.ensure_unmasked()?;
    let (w, h) = (r.width(), r.height());
    let src = r.to_f64();
    let mut tmp = vec![0.0; src.len()];
    convolve_axis(&src, &mut tmp, w, 1, h, w, &taps);
    let mut out = vec![0.0; src.len()];
    convolve_axis(&tmp, &mut out, h, w, w, 1, &taps);
    let values = out.into_iter().map(|v| v as f32).collect();
    r.map_values(values)
}
