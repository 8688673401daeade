//! The `multiface` command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use multiface_core::capture::{Capture, Rgb8Image};
use multiface_core::model::{AppearanceModel, ColorCorrection, DecoderVariant, ModelConfig};
use multiface_core::protocol::{
    evaluate, finetune_for, make_splits, render_prediction, run_ablation, AblationConfig, AblationEvent, CameraSplit,
    EncoderFinetuneConfig, EvalReport, Protocol, SplitPlan, COLOR_EPOCHS, HOLDOUT_FRACTION,
};
use multiface_core::synth::{generate_capture, SynthConfig};
use multiface_core::train::{train, LossRecord, Normalizer, TrainConfig, TrainingSet};

use crate::checkpoint::{checkpoint_path, load_checkpoint, save_checkpoint};
use crate::report::{emit_report, image_strip, write_loss_csv};
use crate::store::{read_capture, read_json, write_capture, write_json, write_png};

#[derive(Debug, Parser)]
#[command(name = "multiface", version, about = "Multi-view face avatar training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic capture directory with ground truth.
    Synth(SynthArgs),
    /// Write a split file with nested camera splits and an expression hold-out.
    Splits(SplitsArgs),
    /// Train one decoder variant on a split's training cameras and expressions.
    Train(TrainArgs),
    /// Fine-tune and evaluate a checkpoint under one protocol.
    Eval(EvalArgs),
    /// Train and evaluate every variant on every split under all protocols.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 12)]
    pub cameras: usize,
    #[arg(long, default_value_t = 16)]
    pub expressions: usize,
    #[arg(long, default_value_t = 2)]
    pub frames_per_expression: usize,
    #[arg(long, default_value_t = 64)]
    pub texture_resolution: usize,
    #[arg(long, default_value_t = 128)]
    pub width: u32,
    #[arg(long, default_value_t = 96)]
    pub height: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitsArgs {
    #[arg(long)]
    pub capture: PathBuf,
    /// Training-camera counts; defaults to the studio proportions 17/23/27/37
    /// of 40 scaled to the rig.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitSelect {
    /// Split file written by `splits`.
    #[arg(long)]
    pub split: PathBuf,
    /// Split to use; defaults to the one with the most training cameras.
    #[arg(long)]
    pub split_name: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub capture: PathBuf,
    #[arg(long, default_value = "spatial_bias")]
    pub variant: String,
    #[command(flatten)]
    pub select: SplitSelect,
    #[arg(long, default_value_t = 2000)]
    pub iters: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub cameras_per_step: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Also checkpoint every N iterations (0: final checkpoint only).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long, default_value_t = COLOR_EPOCHS)]
    pub color_epochs: usize,
    #[arg(long, default_value_t = EncoderFinetuneConfig::default().epochs)]
    pub encoder_epochs: usize,
    #[arg(long, default_value_t = EncoderFinetuneConfig::default().learning_rate)]
    pub encoder_lr: f64,
}

impl FinetuneArgs {
    fn encoder(&self, seed: u64) -> EncoderFinetuneConfig {
        EncoderFinetuneConfig {
            epochs: self.encoder_epochs,
            learning_rate: self.encoder_lr,
            seed,
            ..EncoderFinetuneConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub capture: PathBuf,
    #[command(flatten)]
    pub select: SplitSelect,
    /// novel_view, novel_expression or joint.
    #[arg(long)]
    pub protocol: String,
    #[command(flatten)]
    pub finetune: FinetuneArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub capture: PathBuf,
    /// `all` or a comma-separated list of variant names.
    #[arg(long, default_value = "all")]
    pub variants: String,
    #[arg(long)]
    pub splits: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub iters: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub finetune: FinetuneArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Splits(a) => splits(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Ablation(a) => ablation(&a),
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        camera_count: a.cameras,
        expression_count: a.expressions,
        frames_per_expression: a.frames_per_expression,
        texture_resolution: a.texture_resolution,
        image_size: (a.width, a.height),
        seed: a.seed,
        ..SynthConfig::default()
    };
    let s = generate_capture(&cfg)?;
    write_capture(&a.out, &s.capture, Some(&s.truth))
        .with_context(|| format!("writing capture to {}", a.out.display()))?;
    eprintln!("wrote {} frames x {} cameras to {}", s.capture.frames.len(), s.capture.cameras.len(), a.out.display());
    Ok(())
}

fn splits(a: &SplitsArgs) -> Result<()> {
    let capture = read_capture(&a.capture)?;
    let mut plan = SplitPlan::for_capture(&capture, a.seed)?;
    if let Some(sizes) = &a.sizes {
        plan.splits = make_splits(&capture.cameras, sizes, a.seed)?;
    }
    plan.validate(&capture)?;
    write_json(&a.out, &plan)?;
    for s in &plan.splits {
        eprintln!("{}: {} train / {} test", s.name, s.train_ids.len(), s.test_ids.len());
    }
    eprintln!("held out (last {:.0}%): {:?}", HOLDOUT_FRACTION * 100.0, plan.held_out_segments);
    Ok(())
}

fn load_plan(capture: &Capture, path: &Path) -> Result<SplitPlan> {
    let plan: SplitPlan = read_json(path)?;
    plan.validate(capture).with_context(|| format!("split file {}", path.display()))?;
    Ok(plan)
}

fn select_split(plan: &SplitPlan, name: Option<&str>) -> Result<CameraSplit> {
    match name {
        Some(n) => match plan.splits.iter().find(|s| s.name == n) {
            Some(s) => Ok(s.clone()),
            None => bail!("no split named `{n}`"),
        },
        None => Ok(plan.splits.iter().max_by_key(|s| s.train_ids.len()).expect("validated plan").clone()),
    }
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let capture = read_capture(&a.capture)?;
    let plan = load_plan(&capture, &a.select.split)?;
    let split = select_split(&plan, a.select.split_name.as_deref())?;
    let frames = plan.frames(&capture);
    let variant = DecoderVariant::from_name(&a.variant)?;
    let normalizer = Normalizer::new(&capture.stats);
    let mut mc = ModelConfig::desk(variant, capture.texture_resolution(), capture.topology.vertex_count());
    mc.seed = a.seed;
    let mut model = AppearanceModel::new(mc, normalizer.clone())?;
    let ids: Vec<&str> = capture.cameras.iter().map(|c| c.camera_id()).collect();
    let mut cc = ColorCorrection::new(&split.train_ids[0], ids.iter().copied())?;
    let cams = split.train_indices(&capture)?;
    let set = TrainingSet::build(&capture, &normalizer, &cams, &cams, &frames.train, None)?;
    let config = TrainConfig {
        learning_rate: a.lr,
        cameras_per_step: a.cameras_per_step,
        checkpoint_every: a.checkpoint_every,
        ..TrainConfig::desk(a.iters, a.seed)
    };
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &(&config, model.config(), &split))?;
    if a.iters == 0 {
        save_checkpoint(&checkpoint_path(&a.out, 0), &model, &cc, 0)?;
    }
    let out = a.out.clone();
    let curve = train(&mut model, &mut cc, &capture, &set, &config, |it, m, c| {
        save_checkpoint(&checkpoint_path(&out, it), m, c, it)
            .map_err(|e| multiface_core::Error::Config(format!("saving checkpoint: {e}")))
    })?;
    write_loss_csv(&a.out.join("loss.csv"), &curve)?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        eprintln!("loss {:.4} -> {:.4} over {} iterations", first.terms.total, last.terms.total, curve.len());
    }
    Ok(())
}

fn strip_for(
    capture: &Capture,
    models: &[(&AppearanceModel, &ColorCorrection)],
    split: &CameraSplit,
    frame: usize,
    camera: usize,
) -> Result<Rgb8Image> {
    let inputs = split.train_indices(capture)?;
    let mut images = vec![capture.frames[frame].images[camera].clone()];
    for (m, c) in models {
        images.push(render_prediction(m, c, capture, &inputs, frame, camera)?.to_rgb8());
    }
    Ok(image_strip(&images))
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let capture = read_capture(&a.capture)?;
    let plan = load_plan(&capture, &a.select.split)?;
    let split = select_split(&plan, a.select.split_name.as_deref())?;
    let frames = plan.frames(&capture);
    let protocol = Protocol::from_name(&a.protocol)?;
    let (model, cc, manifest) = load_checkpoint(&a.checkpoint, Normalizer::new(&capture.stats))?;
    let enc = a.finetune.encoder(a.seed);
    let (model, cc, ft) =
        finetune_for(protocol, &model, &cc, &capture, &split, &frames, a.finetune.color_epochs, &enc)?;
    let stats = evaluate(&model, &cc, &capture, &split, &frames, protocol)?;
    let mut report = EvalReport::default();
    report.push(manifest.model.variant, &split.name, protocol, &stats);
    std::fs::create_dir_all(&a.out)?;
    emit_report(&a.out, &report)?;
    if let Some(ft) = &ft {
        write_json(&a.out.join("encoder_finetune.json"), ft)?;
    }
    let (frame, cam) = (stats.frames[0], capture.camera_index(&stats.cameras[0]).expect("evaluated camera"));
    write_png(&a.out.join("strip.png"), &strip_for(&capture, &[(&model, &cc)], &split, frame, cam)?)?;
    eprintln!(
        "{} {} {}: mse {:.3} mae {:.3} over {} pixels",
        manifest.model.variant.name(),
        split.name,
        protocol.name(),
        stats.mse,
        stats.mae,
        stats.pixels
    );
    Ok(())
}

fn parse_variants(s: &str) -> Result<Vec<DecoderVariant>> {
    if s == "all" {
        return Ok(DecoderVariant::ALL.to_vec());
    }
    Ok(s.split(',').map(|v| DecoderVariant::from_name(v.trim())).collect::<Result<_, _>>()?)
}

fn ablation(a: &AblationArgs) -> Result<()> {
    let capture = read_capture(&a.capture)?;
    let plan = load_plan(&capture, &a.splits)?;
    let frames = plan.frames(&capture);
    let config = AblationConfig {
        variants: parse_variants(&a.variants)?,
        color_epochs: a.finetune.color_epochs,
        encoder: a.finetune.encoder(a.seed),
        ..AblationConfig::desk(a.iters, a.seed)
    };
    std::fs::create_dir_all(a.out.join("strips"))?;
    // (split, protocol) -> ground truth followed by one render per variant
    let mut strips: BTreeMap<(String, Protocol), Vec<Rgb8Image>> = BTreeMap::new();
    let mut failure = None;
    let outcome = run_ablation(&capture, &plan, &config, |e| match e {
        AblationEvent::Trained { variant, split, final_loss } => {
            eprintln!("trained {} on {split}: final loss {final_loss:.4}", variant.name());
        }
        AblationEvent::Evaluated { variant, split, protocol, stats } => {
            eprintln!("  {} {split} {}: mse {:.3} mae {:.3}", variant.name(), protocol.name(), stats.mse, stats.mae);
        }
        AblationEvent::Cell { split, trained, encoder_tuned, color, color_tuned, .. } => {
            for p in Protocol::ALL {
                let (m, c) = match p {
                    Protocol::NovelView => (trained, color_tuned),
                    Protocol::NovelExpression => (encoder_tuned, color),
                    Protocol::Joint => (encoder_tuned, color_tuned),
                };
                let Ok((cams, fr)) = p.selection(&capture, split, &frames) else { continue };
                let (frame, cam) = (fr[0], cams[0]);
                let inputs = split.train_indices(&capture).unwrap_or_default();
                let entry = strips
                    .entry((split.name.clone(), p))
                    .or_insert_with(|| vec![capture.frames[frame].images[cam].clone()]);
                match render_prediction(m, c, &capture, &inputs, frame, cam) {
                    Ok(img) => entry.push(img.to_rgb8()),
                    Err(err) => failure = Some(err),
                }
            }
        }
    })?;
    if let Some(err) = failure {
        return Err(err.into());
    }
    emit_report(&a.out, &outcome.report)?;
    write_json(&a.out.join("audits.json"), &outcome.audits)?;
    for (variant, split, curve) in &outcome.loss_curves {
        write_loss_csv(&a.out.join(format!("loss_{variant}_{split}.csv")), curve as &[LossRecord])?;
    }
    for ((split, p), images) in &strips {
        write_png(&a.out.join("strips").join(format!("{split}_{}.png", p.name())), &image_strip(images))?;
    }
    let broken: Vec<_> = outcome.audits.iter().filter(|x| !x.freeze_contracts_hold()).collect();
    if !broken.is_empty() {
        bail!("{} cells changed parameters outside their fine-tune", broken.len());
    }
    eprintln!("{} rows written to {}", outcome.report.rows.len(), a.out.join("report.csv").display());
    Ok(())
}
