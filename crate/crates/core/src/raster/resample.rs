use super::{GridRelation, Raster, RasterError, Result};

/// Keys cubic convolution parameter (Catmull-Rom).
const KEYS_A: f64 = -0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Catmull-Rom kernel weight at signed distance `x`.
pub fn catmull_rom(x: f64) -> f64 {
    let a = KEYS_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four clamped taps and weights for a sample at continuous index `pos`.
fn taps(pos: f64, len: usize) -> ([usize; 4], [f64; 4]) {
    let base = pos.floor();
    let t = pos - base;
    let base = base as i64;
    let last = len as i64 - 1;
    let mut idx = [0usize; 4];
    let mut w = [0.0f64; 4];
    for k in 0..4 {
        let offset = k as i64 - 1;
        idx[k] = (base + offset).clamp(0, last) as usize;
        w[k] = catmull_rom(t - offset as f64);
    }
    (idx, w)
}

/// Resamples one axis of length `src_len` to `dst_len` with aligned extents.
fn axis_table(src_len: usize, dst_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| taps((i as f64 + 0.5) * scale - 0.5, src_len))
        .collect()
}

/// Bicubic resampling between nested grids sharing one extent.
///
/// Output pixel centres are mapped back to continuous source pixel
/// coordinates and interpolated separably with clamp-to-edge taps.
pub fn bicubic_resample(r: &Raster, target: GridRelation, direction: Direction) -> Result<Raster> {
    r.ensure_unmasked()?;
    let f = target.factor;
    if f == 0 {
        return Err(RasterError::Invalid("grid factor must be >= 1".into()));
    }
    let grid = match direction {
        Direction::Up => r.grid().refined(f),
        Direction::Down => r.grid().coarsened(f)?,
    };
    let (sw, sh) = (r.width(), r.height());
    let (dw, dh) = (grid.width, grid.height);
    let cols = axis_table(sw, dw);
    let rows = axis_table(sh, dh);

    // horizontal pass: sh x dw
    let src = r.values();
    let mut tmp = vec![0.0f64; sh * dw];
    for y in 0..sh {
        let line = &src[y * sw..(y + 1) * sw];
        for (x, (idx, w)) in cols.iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += w[k] * line[idx[k]] as f64;
            }
            tmp[y * dw + x] = acc;
        }
    }
    // vertical pass
    let mut values = vec![0.0f32; dh * dw];
    for (y, (idx, w)) in rows.iter().enumerate() {
        let out = &mut values[y * dw..(y + 1) * dw];
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += w[k] * tmp[idx[k] * dw + x];
            }
            *o = acc as f32;
        }
    }
    let out = Raster::new(grid, r.band(), r.timestamp(), values)?;
    out.with_nodata(r.nodata())
}

/// Evaluates the bicubic interpolant at continuous pixel coordinates, where
/// integer `(x, y)` is the centre of pixel `(row = y, col = x)`.
pub fn sample_bicubic(r: &Raster, x: f64, y: f64) -> f64 {
    let (ci, cw) = taps(x, r.width());
    let (ri, rw) = taps(y, r.height());
    let mut acc = 0.0;
    for j in 0..4 {
        let mut row = 0.0;
        for i in 0..4 {
            row += cw[i] * r.get(ri[j], ci[i]) as f64;
        }
        acc += rw[j] * row;
    }
    acc
}
