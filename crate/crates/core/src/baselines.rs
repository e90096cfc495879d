//! Reference methods that fused predictions are compared against.
//!
//! Only bicubic interpolation is computed here. Predictions from external
//! tools are read as rasters and scored through the same evaluation path.

use crate::raster::{bicubic_resample, Band, Direction, GridRelation, Raster, Result};

/// Bicubic upsampling of the coarse target-date LST onto the fine grid.
pub fn baseline_bicubic(coarse_t2: &Raster, target: GridRelation) -> Result<Raster> {
    Ok(bicubic_resample(coarse_t2, target, Direction::Up)?.with_band(Band::Lst))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate_30m;
    use crate::raster::{test_date, GridSpec};
    use crate::synth::{gen_scene, SynthConfig};

    #[test]
    fn constant_field_stays_constant() {
        let g = GridSpec::new(8, 8, 120.0, 0.0, 960.0);
        let r = Raster::constant(g, Band::Lst, test_date(), 301.5).unwrap();
        let out = baseline_bicubic(&r, GridRelation::new(12).unwrap()).unwrap();
        assert_eq!(out.width(), 96);
        assert_eq!(out.pixel_size(), 10.0);
        assert_eq!(out.band(), Band::Lst);
        assert!(out.values().iter().all(|&v| (v - 301.5).abs() < 1e-4));
    }

    #[test]
    fn mean_is_nearly_conserved_on_large_grids() {
        let g = GridSpec::new(100, 100, 1000.0, 0.0, 1e5);
        let r = Raster::from_fn(g, Band::Lst, test_date(), |row, col| {
            300.0 + 5.0 * (row as f32 * 0.11).sin() * (col as f32 * 0.07).cos()
        })
        .unwrap();
        let out = baseline_bicubic(&r, GridRelation::new(10).unwrap()).unwrap();
        assert!(((out.mean() - r.mean()) / r.mean()).abs() < 1e-3);
    }

    #[test]
    fn truth_scores_better_than_bicubic() {
        let scene = gen_scene(&SynthConfig::default()).unwrap();
        let t = &scene.triple;
        let reference = t.l8_lst_t2.as_ref().unwrap();
        let base = baseline_bicubic(&t.modis_lst_t2, GridRelation::new(12).unwrap()).unwrap();
        let base_rep = evaluate_30m(&base, reference).unwrap();
        let truth_rep = evaluate_30m(&scene.truth_fine_t2, reference).unwrap();
        assert!(truth_rep.rmse < base_rep.rmse);
        assert!(base_rep.rmse > 0.0);
    }
}
