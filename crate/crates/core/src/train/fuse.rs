use crate::model::{prepare_scene, Generator, ModelError, SceneTriple};
use crate::nnet::Tensor;
use crate::preprocess::NormStats;
use crate::raster::{gaussian_filter, Band, Raster};

use super::{Result, TrainState};

/// Smoothing applied to the stitched prediction.
pub const FUSE_SIGMA: f64 = 1.0;

/// Tiles run through the generator together.
const TILE_BATCH: usize = 8;

/// Tile origins along one axis: every `stride` step from 0, plus a final
/// tile flush with the far edge.
pub fn tile_anchors(len: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=len - size).step_by(stride).collect();
    if *out.last().expect("len >= size") != len - size {
        out.push(len - size);
    }
    out
}

/// Linear ramp weights for one axis of a tile, rising from the edges to the
/// centre and never reaching zero.
pub fn feather_weights(size: usize) -> Vec<f64> {
    (0..size).map(|i| (i.min(size - 1 - i) + 1) as f64).collect()
}

/// Tiled inference with feathered blending, denormalisation and Gaussian
/// smoothing, on the scene's fine grid at the target date.
pub fn fuse_with(
    generator: &Generator,
    norm: &NormStats,
    patch: usize,
    scene: &SceneTriple,
    sigma: f64,
) -> Result<Raster> {
    let prepared = prepare_scene(scene, norm)?;
    let (h, w) = (prepared.fine.height, prepared.fine.width);
    if patch > h || patch > w {
        return Err(ModelError::Footprint {
            row: 0,
            col: 0,
            size: patch,
            width: w,
            height: h,
        }
        .into());
    }
    let stride = (patch / 2).max(1);
    let m = prepared.medium_factor;
    if !stride.is_multiple_of(m) || !(h - patch).is_multiple_of(m) || !(w - patch).is_multiple_of(m) {
        return Err(ModelError::InvalidConfig(format!(
            "tiling with patch {patch} does not stay on the {m}x medium lattice of a {w}x{h} scene"
        ))
        .into());
    }
    let anchors: Vec<(usize, usize)> = tile_anchors(h, patch, stride)
        .into_iter()
        .flat_map(|r| tile_anchors(w, patch, stride).into_iter().map(move |c| (r, c)))
        .collect();
    let ramp = feather_weights(patch);
    let mut acc = vec![0.0f64; h * w];
    let mut weight = vec![0.0f64; h * w];
    for chunk in anchors.chunks(TILE_BATCH) {
        let tiles = chunk
            .iter()
            .map(|&(r, c)| prepared.patch(r, c, patch))
            .collect::<Result<Vec<_>, _>>()?;
        let content = Tensor::stack_batch(&tiles.iter().map(|t| &t.content).collect::<Vec<_>>())?;
        let condition = Tensor::stack_batch(&tiles.iter().map(|t| &t.condition).collect::<Vec<_>>())?;
        let y = generator.infer(&content, &condition)?;
        for (k, &(r0, c0)) in chunk.iter().enumerate() {
            let tile = &y.data()[k * patch * patch..(k + 1) * patch * patch];
            for i in 0..patch {
                for j in 0..patch {
                    let wt = ramp[i] * ramp[j];
                    let idx = (r0 + i) * w + c0 + j;
                    acc[idx] += wt * tile[i * patch + j];
                    weight[idx] += wt;
                }
            }
        }
    }
    let blended: Vec<f64> = acc.iter().zip(&weight).map(|(a, b)| a / b).collect();
    let lst = norm.invert("lst", &blended)?;
    let raster = Raster::new(
        prepared.fine,
        Band::Lst,
        scene.t2(),
        lst.into_iter().map(|v| v as f32).collect(),
    )?;
    Ok(gaussian_filter(&raster, sigma)?)
}

/// Fine-grid LST at the target date from a trained state.
pub fn fuse(state: &TrainState, scene: &SceneTriple) -> Result<Raster> {
    fuse_with(&state.generator, &state.norm, state.config.patch, scene, FUSE_SIGMA)
}
