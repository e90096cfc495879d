use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nnet::{grad_check, Bound, Tape, Tensor};
use crate::preprocess::{ChannelStats, NormMode, NormStats};
use crate::raster::{Band, GridSpec};
use crate::synth::{gen_scene, SynthConfig};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn tiny() -> GeneratorConfig {
    GeneratorConfig::tiny()
}

#[test]
fn generator_shape_and_range() {
    let g = Generator::new(tiny()).unwrap();
    let y = g.infer(&randn(&[2, 9, 32, 32], 1), &randn(&[2, 1, 32, 32], 2)).unwrap();
    assert_eq!(y.shape(), &[2, 1, 32, 32]);
    assert!(y.data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn default_generator_on_full_patch() {
    let g = Generator::new(GeneratorConfig::default()).unwrap();
    let y = g.infer(&randn(&[1, 9, 96, 96], 3), &randn(&[1, 1, 96, 96], 4)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 96, 96]);
    let mut t = Tape::new();
    let v = t.constant(y);
    let pooled = t.avg_pool(v, 3).unwrap();
    assert_eq!(t.value(pooled).shape(), &[1, 1, 32, 32]);
}

#[test]
fn generator_rejects_bad_inputs() {
    let g = Generator::new(tiny()).unwrap();
    assert!(g.infer(&randn(&[1, 8, 32, 32], 5), &randn(&[1, 1, 32, 32], 6)).is_err());
    assert!(g.infer(&randn(&[1, 9, 36, 36], 5), &randn(&[1, 1, 36, 36], 6)).is_err());
    assert!(g.infer(&randn(&[1, 9, 32, 32], 5), &randn(&[1, 1, 16, 16], 6)).is_err());
}

#[test]
fn zero_condition_ablation_runs() {
    let g = Generator::new(tiny()).unwrap();
    let y = g
        .infer(&randn(&[1, 9, 32, 32], 7), &Tensor::zeros(&[1, 1, 32, 32]))
        .unwrap();
    assert_eq!(y.shape(), &[1, 1, 32, 32]);
    assert!(y.all_finite());
}

#[test]
fn generator_without_attention() {
    let g = Generator::new(GeneratorConfig {
        attention: false,
        ..tiny()
    })
    .unwrap();
    let with = Generator::new(tiny()).unwrap();
    assert!(g.params.len() < with.params.len());
    let y = g.infer(&randn(&[1, 9, 16, 16], 8), &randn(&[1, 1, 16, 16], 9)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 16, 16]);
}

#[test]
fn generator_is_deterministic() {
    let a = Generator::new(tiny()).unwrap();
    let b = Generator::new(tiny()).unwrap();
    assert_eq!(a.params, b.params);
    let (x, c) = (randn(&[1, 9, 32, 32], 10), randn(&[1, 1, 32, 32], 11));
    assert_eq!(a.infer(&x, &c).unwrap(), b.infer(&x, &c).unwrap());
    let other = Generator::new(GeneratorConfig { seed: 5, ..tiny() }).unwrap();
    assert_ne!(other.params, a.params);
}

#[test]
fn generator_grad_check() {
    let g = Generator::new(tiny()).unwrap();
    for (a, b) in [(12, 13), (3, 4)] {
        let mut inputs = vec![randn(&[1, 9, 16, 16], a), randn(&[1, 1, 16, 16], b)];
        inputs.extend(g.params.tensors().iter().cloned());
        // 1e-4 rather than 1e-3: AdaIN over the 2x2 deepest maps is curved
        // enough for the O(h^2) difference error to reach 5e-3.
        let report = grad_check(
            &inputs,
            |t, v| {
                let p = Bound::from_vars(v[2..].to_vec());
                Ok(g.forward(t, &p, v[0], v[1]).expect("forward"))
            },
            1e-4,
            Some(12),
            3,
        )
        .unwrap();
        assert!(report.max_rel_error < 5e-4, "{report:?}");
        assert!(report.coords_checked >= report.coords_skipped, "{report:?}");
    }
}

/// A constant background with a small bump, placed at `(r0, c0)`.
fn bump_stack(n: usize, channels: usize, r0: usize, c0: usize) -> Tensor {
    let mut data = Vec::with_capacity(channels * n * n);
    for ch in 0..channels {
        let base = 0.1 * ch as f64 - 0.3;
        for r in 0..n {
            for c in 0..n {
                let d2 = (r as f64 - r0 as f64).powi(2) + (c as f64 - c0 as f64).powi(2);
                data.push(base + (0.5 + 0.05 * ch as f64) * (-d2 / 18.0).exp());
            }
        }
    }
    Tensor::new(&[1, channels, n, n], data).unwrap()
}

#[test]
fn generator_translation_covariance() {
    let g = Generator::new(tiny()).unwrap();
    let n = 320;
    let (p, shift) = (136, 24);
    let y1 = g.infer(&bump_stack(n, 9, p, p), &bump_stack(n, 1, p, p)).unwrap();
    let y2 = g
        .infer(
            &bump_stack(n, 9, p + shift, p + shift),
            &bump_stack(n, 1, p + shift, p + shift),
        )
        .unwrap();
    let a = y1.crop(64, 64, 160, 160).unwrap();
    let b = y2.crop(64 + shift, 64 + shift, 160, 160).unwrap();
    let max = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(max < 1e-4, "max deviation {max}");
    // the bump must actually reach the output
    let spread = a.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        - a.data().iter().fold(f64::INFINITY, |m, &v| m.min(v));
    assert!(spread > 1e-3);
}

#[test]
fn discriminator_contract() {
    let d = Discriminator::new(DiscriminatorConfig::tiny()).unwrap();
    let (x, c) = (randn(&[3, 1, 32, 32], 20), randn(&[3, 1, 32, 32], 21));
    let y = d.infer(&x, &c).unwrap();
    assert_eq!(y.shape(), &[3, 1, 4, 4]);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let d2 = Discriminator::new(DiscriminatorConfig::tiny()).unwrap();
    assert_eq!(d2.infer(&x, &c).unwrap(), y);
    let full = Discriminator::new(DiscriminatorConfig::default()).unwrap();
    assert_eq!(full.infer(&x, &c).unwrap().shape(), &[3, 1, 4, 4]);
    assert!(d.infer(&x, &randn(&[3, 1, 16, 16], 22)).is_err());
}

fn date(d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 9, d).unwrap()
}

fn constant_scene(v: f32) -> SceneTriple {
    let fine = GridSpec::new(48, 48, 10.0, 0.0, 480.0);
    let medium = fine.coarsened(3).unwrap();
    let coarse = fine.coarsened(12).unwrap();
    let r = |g: GridSpec, b: Band, d: u32| Raster::constant(g, b, date(d), v).unwrap();
    SceneTriple {
        s2_indices_t1: [r(fine, Band::Ndvi, 3), r(fine, Band::Ndwi, 3), r(fine, Band::Ndbi, 3)],
        l8_indices_t1: [
            r(medium, Band::Ndvi, 3),
            r(medium, Band::Ndwi, 3),
            r(medium, Band::Ndbi, 3),
        ],
        l8_lst_t1: r(medium, Band::Lst, 3),
        modis_lst_t1: r(coarse, Band::Lst, 3),
        modis_lst_t2: r(coarse, Band::Lst, 19),
        prior_lst10_t1: r(fine, Band::Lst, 3),
        l8_lst_t2: Some(r(medium, Band::Lst, 19)),
    }
}

fn unit_norm() -> NormStats {
    NormStats {
        mode: NormMode::MinMax,
        channels: ["lst", "ndvi", "ndwi", "ndbi"]
            .iter()
            .map(|n| ChannelStats {
                name: n.to_string(),
                a: -1.0,
                b: 1.0,
            })
            .collect(),
    }
}

#[test]
fn assemble_counts_and_constants() {
    let scene = constant_scene(0.25);
    let (content, cond) = assemble_inputs(&scene, &unit_norm(), 0, 0, 48).unwrap();
    assert_eq!(content.shape(), &[1, 9, 48, 48]);
    assert_eq!(cond.shape(), &[1, 1, 48, 48]);
    assert!(content
        .data()
        .iter()
        .chain(cond.data())
        .all(|&v| (v - 0.25).abs() < 1e-6));
    let prepared = prepare_scene(&scene, &unit_norm()).unwrap();
    let patch = prepared.patch(24, 24, 24).unwrap();
    assert_eq!(patch.condition_medium.shape(), &[1, 1, 8, 8]);
    assert_eq!(patch.target_medium.unwrap().shape(), &[1, 1, 8, 8]);
}

#[test]
fn assemble_footprint_errors() {
    let scene = constant_scene(0.25);
    assert!(matches!(
        assemble_inputs(&scene, &unit_norm(), 24, 0, 48),
        Err(ModelError::Footprint { .. })
    ));
    assert!(assemble_inputs(&scene, &unit_norm(), 1, 0, 24).is_err());
}

#[test]
fn scene_validation() {
    let mut scene = constant_scene(0.1);
    scene.modis_lst_t2 = scene.modis_lst_t2.clone().with_timestamp(date(3));
    assert!(matches!(scene.validate(), Err(ModelError::Scene(_))));
    let mut scene = constant_scene(0.1);
    scene.l8_lst_t1 = scene.modis_lst_t1.clone();
    assert!(scene.validate().is_err());
}

#[test]
fn synthetic_scene_norm_and_patch_consistency() {
    let s = gen_scene(&SynthConfig::default()).unwrap();
    let norm = fit_scene_norm(&[&s.triple], 0.1).unwrap();
    let prepared = prepare_scene(&s.triple, &norm).unwrap();
    // Native-grid fine channels lie inside the fitted ranges; upsampled
    // channels may overshoot slightly at sharp edges.
    let plane = 96 * 96;
    let content = prepared.content.data();
    assert!(content[..4 * plane].iter().all(|v| v.abs() <= 1.0 + 1e-9));
    assert!(content.iter().all(|v| v.abs() < 1.5));
    let target = prepared.target_medium.as_ref().unwrap();
    let raw = norm.invert("lst", target.data()).unwrap();
    for (a, b) in raw.iter().zip(s.triple.l8_lst_t2.as_ref().unwrap().values()) {
        assert!((a - *b as f64).abs() < 1e-4);
    }
}
