//! Command-line front end. Each subcommand loads its inputs, runs one
//! pipeline stage and writes rasters, checkpoints or reports.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crate::baselines::baseline_bicubic;
use crate::dataset::{role, Manifest, SceneEntry, Split};
use crate::enhance::{apply_enhance, fit_linear_enhance};
use crate::metrics::{evaluate_30m, EvalReport, MetricConfig};
use crate::preprocess::gapfill_adaptive;
use crate::raster::{ndbi, ndvi, ndwi, read_raster, write_raster, GridRelation};
use crate::synth::{make_dataset, SynthConfig};
use crate::train::{fuse, train_loop, TrainConfig, TrainState};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "fuseten",
    version,
    about = "Fine-resolution LST by fusing coarse daily LST with a reference scene"
)]
pub struct Cli {
    /// Worker threads. Execution is single-threaded; values above 1 are
    /// accepted and ignored.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Force reproducible execution (always the case in this build).
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth(SynthArgs),
    /// Fit the index-to-LST regression per scene and write the fine prior.
    FitEnhance(FitEnhanceArgs),
    /// Train the generator and discriminator.
    Train(TrainArgs),
    /// Predict fine LST at the target date of a scene.
    Fuse(FuseArgs),
    /// Run a reference method.
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Score a prediction against a reference raster.
    Eval(EvalArgs),
    /// Fill masked pixels from their nearest valid neighbourhood.
    Gapfill(GapfillArgs),
    /// Compute a normalised-difference index from two bands.
    Indices(IndicesArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON synthetic-scene config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub scenes: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; receives manifest.json and one folder per scene.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitEnhanceArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub scene: PathBuf,
    /// Restrict to one scene id.
    #[arg(long)]
    pub id: Option<String>,
    /// Directory for the fitted models; defaults to the manifest directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest, overriding the config.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Output directory for checkpoints and the loss history.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset manifest holding the scene.
    #[arg(long)]
    pub scene: PathBuf,
    /// Scene id; defaults to the first test scene.
    #[arg(long)]
    pub id: Option<String>,
    /// Output raster path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum BaselineCommand {
    /// Bicubic upsampling of a coarse raster.
    Bicubic(BicubicArgs),
}

#[derive(Debug, Args)]
pub struct BicubicArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Target pixel size in metres.
    #[arg(long, default_value_t = 10.0)]
    pub pixel_size: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GapfillArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum IndexKind {
    /// (NIR - RED) / (NIR + RED); --a NIR, --b RED
    Ndvi,
    /// (GREEN - NIR) / (GREEN + NIR); --a GREEN, --b NIR
    Ndwi,
    /// (SWIR - NIR) / (SWIR + NIR); --a SWIR, --b NIR
    Ndbi,
}

#[derive(Debug, Args)]
pub struct IndicesArgs {
    #[arg(long, value_enum)]
    pub kind: IndexKind,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Relative paths in a config file resolve against the file's directory.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn pick_scene<'a>(m: &'a Manifest, id: Option<&str>) -> Result<&'a SceneEntry> {
    match id {
        Some(id) => Ok(m.entry(id)?),
        None => m
            .split(Split::Test)
            .next()
            .or_else(|| m.scenes.first())
            .ok_or_else(|| Error::Config("manifest lists no scenes".into())),
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let m = make_dataset(&cfg, a.scenes, &a.out)?;
    info!("wrote {} scenes to {}", m.scenes.len(), a.out.display());
    Ok(())
}

fn fit_enhance(a: &FitEnhanceArgs) -> Result<()> {
    let mut m = Manifest::load(&a.scene)?;
    let out_dir = a.out.clone().unwrap_or_else(|| m.base_dir.clone());
    std::fs::create_dir_all(&out_dir)?;
    let ids: Vec<String> = match &a.id {
        Some(id) => vec![m.entry(id)?.id.clone()],
        None => m.scenes.iter().map(|s| s.id.clone()).collect(),
    };
    for id in ids {
        let entry = m.entry(&id)?.clone();
        let need = |r: &str| -> Result<_> {
            m.read_role(&entry, r)?
                .ok_or_else(|| Error::Config(format!("scene {id} lacks role {r}")))
        };
        let model = fit_linear_enhance(
            &need(role::L8_NDVI)?,
            &need(role::L8_NDWI)?,
            &need(role::L8_NDBI)?,
            &need(role::L8_LST_T1)?,
        )?;
        let prior = apply_enhance(
            &model,
            &need(role::S2_NDVI)?,
            &need(role::S2_NDWI)?,
            &need(role::S2_NDBI)?,
        )?;
        model.save(out_dir.join(format!("{id}_enhance.json")))?;
        let rel = format!("{id}/{}.json", role::PRIOR_LST_T1);
        write_raster(&prior, m.resolve(&rel))?;
        let slot = m.scenes.iter_mut().find(|s| s.id == id).expect("entry exists");
        slot.files.insert(role::PRIOR_LST_T1.to_string(), rel);
        info!(
            "{id}: beta {:?} intercept {:.4} R^2 {:.6}",
            model.beta, model.intercept, model.diagnostics.r_squared
        );
    }
    m.save(&a.scene)?;
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let mut c = TrainConfig::load(p)?;
            let base = p.parent().unwrap_or(Path::new("."));
            c.manifest = c.manifest.map(|m| resolve(base, &m));
            c.out_dir = c.out_dir.map(|o| resolve(base, &o));
            c
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = &a.scene {
        cfg.manifest = Some(s.clone());
    }
    if let Some(o) = &a.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.generator.seed = s;
        cfg.discriminator.seed = s.wrapping_add(1);
    }
    if cfg.out_dir.is_none() {
        return Err(Error::Config("no output directory (--out or out_dir)".into()));
    }
    let outcome = train_loop(&cfg)?;
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        info!(
            "L1 {:.5} -> {:.5} over {} steps",
            first.l1,
            last.l1,
            outcome.history.len()
        );
    }
    if let Some(p) = outcome.checkpoint {
        writeln!(std::io::stdout(), "{}", p.display())?;
    }
    Ok(())
}

fn fuse_cmd(a: &FuseArgs) -> Result<()> {
    let state = TrainState::load(&a.ckpt)?;
    let m = Manifest::load(&a.scene)?;
    let entry = pick_scene(&m, a.id.as_deref())?;
    info!("fusing scene {}", entry.id);
    let scene = m.load_scene(entry)?;
    let out = fuse(&state, &scene)?;
    write_raster(&out, &a.out)?;
    Ok(())
}

fn bicubic(a: &BicubicArgs) -> Result<()> {
    let r = read_raster(&a.input)?;
    let ratio = r.pixel_size() / a.pixel_size;
    let factor = ratio.round();
    if !(factor >= 1.0 && (ratio - factor).abs() < 1e-9) {
        return Err(Error::Config(format!(
            "pixel size {} is not an integer multiple of {}",
            r.pixel_size(),
            a.pixel_size
        )));
    }
    let out = baseline_bicubic(&r, GridRelation::new(factor as usize)?)?;
    write_raster(&out, &a.out)?;
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let pred = read_raster(&a.pred)?;
    let reference = read_raster(&a.reference)?;
    let report = if pred.grid().same_as(reference.grid()) {
        EvalReport::compare(&pred, &reference, &MetricConfig::default())?
    } else {
        evaluate_30m(&pred, &reference)?
    };
    let json = report.to_json();
    if let Some(p) = &a.out {
        std::fs::write(p, format!("{json}\n"))?;
    }
    writeln!(std::io::stdout(), "{json}")?;
    write!(std::io::stderr(), "{report}")?;
    Ok(())
}

fn gapfill(a: &GapfillArgs) -> Result<()> {
    let r = read_raster(&a.input)?;
    let filled = gapfill_adaptive(&r)?;
    info!("filled {} pixels", r.masked_count());
    write_raster(&filled, &a.out)?;
    Ok(())
}

fn indices(a: &IndicesArgs) -> Result<()> {
    let (x, y) = (read_raster(&a.a)?, read_raster(&a.b)?);
    let out = match a.kind {
        IndexKind::Ndvi => ndvi(&x, &y)?,
        IndexKind::Ndwi => ndwi(&x, &y)?,
        IndexKind::Ndbi => ndbi(&x, &y)?,
    };
    write_raster(&out, &a.out)?;
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads > 1 {
        warn!("--threads {} requested; running single-threaded", cli.threads);
    }
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::FitEnhance(a) => fit_enhance(a),
        Command::Train(a) => train(a),
        Command::Fuse(a) => fuse_cmd(a),
        Command::Baseline(BaselineCommand::Bicubic(a)) => bicubic(a),
        Command::Eval(a) => eval(a),
        Command::Gapfill(a) => gapfill(a),
        Command::Indices(a) => indices(a),
    }
}

/// One-line JSON error record for stderr.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": { "category": e.category(), "message": e.to_string() } }).to_string()
}
