//! Adversarial training with averaging-based supervision, checkpoints, and
//! full-scene inference.
//!
//! Each step updates the discriminator on real versus block-averaged fake
//! medium LST, then updates the generator against the updated
//! discriminator plus a weighted L1 term on the averaged output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, Manifest, Split};
use crate::model::{
    fit_scene_norm, prepare_scene, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ModelError,
    PatchTensors, SceneTriple,
};
use crate::nnet::{Adam, AdamConfig, Bound, NnError, Tape, Tensor, Var};
use crate::preprocess::{patch_anchors, NormStats, PreprocessError};
use crate::raster::RasterError;

mod checkpoint;
mod fuse;

pub use checkpoint::{config_hash, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use fuse::{feather_weights, fuse, fuse_with, tile_anchors, FUSE_SIGMA};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("scene {0} has no target-date medium LST")]
    MissingTarget(String),
    #[error("non-finite loss at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset manifest; its training split is used.
    pub manifest: Option<PathBuf>,
    /// Directory for checkpoints and the loss history.
    pub out_dir: Option<PathBuf>,
    pub adam: AdamConfig,
    pub batch: usize,
    pub steps: u64,
    /// Weight of the L1 supervision term in the generator loss.
    pub lambda_sup: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: u64,
    /// Fine-grid training patch side.
    pub patch: usize,
    pub stride: usize,
    /// Fraction of the LST range added on each side when fitting the norm.
    pub lst_margin: f64,
    /// Global gradient-norm clip applied to both networks.
    pub grad_clip: Option<f64>,
    /// Skip discriminator updates (supervised regression only).
    pub freeze_discriminator: bool,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            out_dir: None,
            adam: AdamConfig::default(),
            batch: 32,
            steps: 2000,
            lambda_sup: 100.0,
            seed: 0,
            checkpoint_every: 0,
            patch: 48,
            stride: 24,
            lst_margin: 0.1,
            grad_clip: None,
            freeze_discriminator: false,
            generator: GeneratorConfig::tiny(),
            discriminator: DiscriminatorConfig::tiny(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.adam.lr));
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if !(self.lambda_sup >= 0.0 && self.lambda_sup.is_finite()) {
            return bad(format!("lambda_sup must be >= 0, got {}", self.lambda_sup));
        }
        if self.stride == 0 {
            return bad("stride must be >= 1".into());
        }
        if !(self.lst_margin >= 0.0) {
            return bad(format!("lst_margin must be >= 0, got {}", self.lst_margin));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.generator.validate(self.patch)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Stacked tensors for one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub content: Tensor,
    pub condition: Tensor,
    pub condition_medium: Tensor,
    pub target_medium: Tensor,
}

impl Batch {
    pub fn from_patches(items: &[&PatchTensors]) -> Result<Self> {
        if items.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let stack = |f: &dyn Fn(&PatchTensors) -> Option<&Tensor>| -> Result<Tensor> {
            let ts: Vec<&Tensor> = items
                .iter()
                .map(|p| f(p).ok_or_else(|| TrainError::MissingTarget("patch".into())))
                .collect::<Result<_>>()?;
            Ok(Tensor::stack_batch(&ts)?)
        };
        Ok(Self {
            content: stack(&|p| Some(&p.content))?,
            condition: stack(&|p| Some(&p.condition))?,
            condition_medium: stack(&|p| Some(&p.condition_medium))?,
            target_medium: stack(&|p| p.target_medium.as_ref())?,
        })
    }

    /// Fine-to-medium factor implied by the tensor shapes.
    pub fn medium_factor(&self) -> Result<usize> {
        let h = self.content.dims4()?[2];
        let m = self.target_medium.dims4()?[2];
        if m == 0 || h % m != 0 {
            return Err(TrainError::Config(format!(
                "fine side {h} is not a multiple of medium side {m}"
            )));
        }
        Ok(h / m)
    }
}

/// Every training patch of every training scene, normalised and cut once.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub norm: NormStats,
    pub samples: Vec<PatchTensors>,
}

impl TrainingSet {
    /// Fits the normalisation on `scenes` and cuts their patches.
    pub fn from_scenes(scenes: &[SceneTriple], patch: usize, stride: usize, lst_margin: f64) -> Result<Self> {
        if scenes.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let refs: Vec<&SceneTriple> = scenes.iter().collect();
        let norm = fit_scene_norm(&refs, lst_margin)?;
        Self::with_norm(scenes, norm, patch, stride)
    }

    pub fn with_norm(scenes: &[SceneTriple], norm: NormStats, patch: usize, stride: usize) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, s) in scenes.iter().enumerate() {
            if s.l8_lst_t2.is_none() {
                return Err(TrainError::MissingTarget(format!("#{i}")));
            }
            let prepared = prepare_scene(s, &norm)?;
            for a in patch_anchors(prepared.fine.width, prepared.fine.height, patch, stride)? {
                samples.push(prepared.patch(a.row, a.col, patch)?);
            }
        }
        if samples.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        Ok(Self { norm, samples })
    }

    /// Loads the training split of a manifest.
    pub fn from_manifest(m: &Manifest, patch: usize, stride: usize, lst_margin: f64) -> Result<Self> {
        let scenes = m
            .split(Split::Train)
            .map(|e| m.load_scene(e))
            .collect::<Result<Vec<_>, _>>()?;
        if scenes.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        Self::from_scenes(&scenes, patch, stride, lst_margin)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let items: Vec<&PatchTensors> = indices.iter().map(|&i| &self.samples[i]).collect();
        Batch::from_patches(&items)
    }
}

/// Sample indices for `step`: the samples are visited epoch by epoch, each
/// epoch in its own seeded permutation, so any step's batch can be rebuilt
/// without replaying earlier ones.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|j| {
            let pos = step * batch as u64 + j;
            let epoch = pos / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03));
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("set above").1[(pos % n as u64) as usize]
        })
        .collect()
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub step: u64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub l1: f64,
    pub bce_g: f64,
    pub bce_d_real: f64,
    pub bce_d_fake: f64,
}

impl LossComponents {
    fn check_finite(&self) -> Result<()> {
        let all = [
            self.loss_g,
            self.loss_d,
            self.l1,
            self.bce_g,
            self.bce_d_real,
            self.bce_d_fake,
        ];
        if all.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TrainError::Diverged {
                step: self.step,
                detail: format!("{self:?}"),
            })
        }
    }
}

pub const LOSS_CSV_HEADER: &str = "step,loss_g,loss_d,l1,bce_g,bce_d_real,bce_d_fake";

pub fn loss_csv(history: &[LossComponents]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for h in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            h.step, h.loss_g, h.loss_d, h.l1, h.bce_g, h.bce_d_real, h.bce_d_fake
        );
    }
    s
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub norm: NormStats,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub adam_g: Adam,
    pub adam_d: Adam,
    /// Completed optimisation steps.
    pub step: u64,
}

fn collect_grads(tape: &Tape, loss: Var, bound: &Bound) -> Result<Vec<Tensor>> {
    let mut g = tape.backward(loss)?;
    Ok(bound
        .vars()
        .iter()
        .map(|&v| {
            let shape = tape.value(v).shape().to_vec();
            g.take_or_zeros(v, &shape)
        })
        .collect())
}

fn clip(grads: &mut [Tensor], max_norm: Option<f64>) {
    if let Some(c) = max_norm {
        let norm = grads.iter().map(|g| g.dot(g)).sum::<f64>().sqrt();
        if norm > c {
            grads.iter_mut().for_each(|g| g.scale_in_place(c / norm));
        }
    }
}

struct DiscriminatorPass {
    loss: Var,
    real: f64,
    fake: f64,
}

impl TrainState {
    pub fn new(config: TrainConfig, norm: NormStats) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator)?;
        let discriminator = Discriminator::new(config.discriminator)?;
        let adam_g = Adam::new(config.adam, generator.params.tensors());
        let adam_d = Adam::new(config.adam, discriminator.params.tensors());
        Ok(Self {
            config,
            norm,
            generator,
            discriminator,
            adam_g,
            adam_d,
            step: 0,
        })
    }

    /// Discriminator loss `(BCE(D(real), 1) + BCE(D(fake), 0)) / 2`.
    fn discriminator_pass(
        &self,
        tape: &mut Tape,
        p: &Bound,
        fake_med: Var,
        real: Var,
        cond: Var,
    ) -> Result<DiscriminatorPass> {
        let zr = self.discriminator.logits(tape, p, real, cond)?;
        let zf = self.discriminator.logits(tape, p, fake_med, cond)?;
        let br = tape.bce_with_logits(zr, 1.0);
        let bf = tape.bce_with_logits(zf, 0.0);
        let sum = tape.add(br, bf)?;
        Ok(DiscriminatorPass {
            loss: tape.scale(sum, 0.5),
            real: tape.value(br).item(),
            fake: tape.value(bf).item(),
        })
    }

    /// Generator loss `BCE(D(fake), 1) + lambda * L1(fake, real)`; returns
    /// `(loss, bce, l1)`.
    fn generator_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        fake_med: Var,
        real: Var,
        cond: Var,
    ) -> Result<(Var, f64, f64)> {
        let z = self.discriminator.logits(tape, p, fake_med, cond)?;
        let bce = tape.bce_with_logits(z, 1.0);
        let l1 = tape.l1(fake_med, real)?;
        let sup = tape.scale(l1, self.config.lambda_sup);
        let loss = tape.add(bce, sup)?;
        Ok((loss, tape.value(bce).item(), tape.value(l1).item()))
    }

    /// Block-averaged generator output on `tape`.
    fn fake_medium(&self, tape: &mut Tape, batch: &Batch, trainable: bool) -> Result<(Bound, Var)> {
        let m = batch.medium_factor()?;
        let gp = self.generator.params.bind(tape, trainable);
        let content = tape.constant(batch.content.clone());
        let cond = tape.constant(batch.condition.clone());
        let fake = self.generator.forward(tape, &gp, content, cond)?;
        Ok((gp, tape.avg_pool(fake, m)?))
    }

    /// All loss terms for `batch` at the current parameters, without updating.
    pub fn losses(&self, batch: &Batch) -> Result<LossComponents> {
        let mut tape = Tape::new();
        let (_, fake_med) = self.fake_medium(&mut tape, batch, false)?;
        let dp = self.discriminator.params.bind(&mut tape, false);
        let real = tape.constant(batch.target_medium.clone());
        let cond = tape.constant(batch.condition_medium.clone());
        let d = self.discriminator_pass(&mut tape, &dp, fake_med, real, cond)?;
        let (loss_g, bce_g, l1) = self.generator_loss(&mut tape, &dp, fake_med, real, cond)?;
        let out = LossComponents {
            step: self.step,
            loss_g: tape.value(loss_g).item(),
            loss_d: tape.value(d.loss).item(),
            l1,
            bce_g,
            bce_d_real: d.real,
            bce_d_fake: d.fake,
        };
        out.check_finite()?;
        Ok(out)
    }

    /// One discriminator update followed by one generator update. The
    /// generator term is evaluated against the freshly updated
    /// discriminator. Non-finite losses abort before the offending update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossComponents> {
        let mut tape = Tape::new();
        let (gp, fake_med) = self.fake_medium(&mut tape, batch, true)?;

        let mut dtape = Tape::new();
        let frozen = self.config.freeze_discriminator;
        let dp = self.discriminator.params.bind(&mut dtape, !frozen);
        let fake_const = dtape.constant(tape.value(fake_med).clone());
        let real_d = dtape.constant(batch.target_medium.clone());
        let cond_d = dtape.constant(batch.condition_medium.clone());
        let d = self.discriminator_pass(&mut dtape, &dp, fake_const, real_d, cond_d)?;
        let mut out = LossComponents {
            step: self.step,
            loss_g: 0.0,
            loss_d: dtape.value(d.loss).item(),
            l1: 0.0,
            bce_g: 0.0,
            bce_d_real: d.real,
            bce_d_fake: d.fake,
        };
        out.check_finite()?;
        if !frozen {
            let mut grads = collect_grads(&dtape, d.loss, &dp)?;
            clip(&mut grads, self.config.grad_clip);
            self.adam_d.update(self.discriminator.params.tensors_mut(), &grads)?;
        }
        drop(dtape);

        let dp = self.discriminator.params.bind(&mut tape, false);
        let real = tape.constant(batch.target_medium.clone());
        let cond = tape.constant(batch.condition_medium.clone());
        let (loss_g, bce_g, l1) = self.generator_loss(&mut tape, &dp, fake_med, real, cond)?;
        out.loss_g = tape.value(loss_g).item();
        out.bce_g = bce_g;
        out.l1 = l1;
        out.check_finite()?;
        let mut grads = collect_grads(&tape, loss_g, &gp)?;
        clip(&mut grads, self.config.grad_clip);
        self.adam_g.update(self.generator.params.tensors_mut(), &grads)?;
        self.step += 1;
        Ok(out)
    }

    /// Runs `steps` further steps, sampling batches by step index. `on_step`
    /// sees the state after each update.
    pub fn run(
        &mut self,
        data: &TrainingSet,
        steps: u64,
        mut on_step: impl FnMut(&TrainState, &LossComponents) -> Result<()>,
    ) -> Result<Vec<LossComponents>> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut history = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let idx = batch_indices(self.config.seed, self.step, self.config.batch, data.len());
            let batch = data.batch(&idx)?;
            let losses = self.train_step(&batch)?;
            debug!(
                "step {} loss_g {:.5} loss_d {:.5} l1 {:.5}",
                losses.step, losses.loss_g, losses.loss_d, losses.l1
            );
            on_step(self, &losses)?;
            history.push(losses);
        }
        Ok(history)
    }
}

/// Result of [`train_loop`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<LossComponents>,
    /// Final checkpoint path when an output directory was configured.
    pub checkpoint: Option<PathBuf>,
}

pub const FINAL_CHECKPOINT: &str = "checkpoint.ftck";
pub const LOSS_CSV: &str = "losses.csv";

/// Trains from `config.manifest`, writing periodic and final checkpoints
/// plus the loss history to `config.out_dir` when set.
pub fn train_loop(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest_path = config
        .manifest
        .as_ref()
        .ok_or_else(|| TrainError::Config("no dataset manifest given".into()))?;
    let manifest = Manifest::load(manifest_path)?;
    let data = TrainingSet::from_manifest(&manifest, config.patch, config.stride, config.lst_margin)?;
    info!("training on {} patches for {} steps", data.len(), config.steps);
    let mut state = TrainState::new(config.clone(), data.norm.clone())?;
    let out_dir = config.out_dir.clone();
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let every = config.checkpoint_every;
    let history = state.run(&data, config.steps, |s, l| {
        if l.step % 50 == 0 {
            info!(
                "step {} loss_g {:.4} loss_d {:.4} l1 {:.4}",
                l.step, l.loss_g, l.loss_d, l.l1
            );
        }
        if let (Some(dir), true) = (&out_dir, every > 0 && s.step % every == 0) {
            s.save(dir.join(format!("checkpoint_{:06}.ftck", s.step)))?;
        }
        Ok(())
    })?;
    let checkpoint = match &out_dir {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT);
            state.save(&path)?;
            std::fs::write(dir.join(LOSS_CSV), loss_csv(&history))?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        state,
        history,
        checkpoint,
    })
}
