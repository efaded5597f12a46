//! Command-line front end: argument definitions and command dispatch.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::eval::{ablation_grid, bias_study, evaluate_segmentation, segmentation_mask, THETA_SWEEP};
use crate::model::{Backbone, Class};
use crate::preprocess::{expand_three_class, DEFAULT_TAU};
use crate::synthdata::{generate, BackgroundStyle, SceneSpec, VideoDataset};
use crate::tensor::load_checkpoint;
use crate::temporal::{cam_map, estimate_flow, temporal_loss_from_features, warp_map, FlowMethod, LateralFlows, SaliencyMap};
use crate::train::{accuracy, fit, frame_inputs, RunConfig, CHECKPOINT_FILE, CONFIG_FILE};

/// Version of the embedded default configuration.
pub const DEFAULTS_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "tcam", version, about = "Temporally consistent CAM training on before/after videos")]
pub struct Cli {
    /// Seed overriding the one in specs and configs.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for independent training runs (1 = fully sequential).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic before/after dataset.
    Gen(GenArgs),
    /// Expand a before/after dataset into before/after/background.
    Preprocess(PreprocessArgs),
    /// Train a model and write config, metrics and checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint: classification accuracy and, with masks, mIoU.
    Eval(EvalArgs),
    /// Train and score the four reconstruction-loss settings.
    Ablate(AblateArgs),
    /// Background-bias study on a dataset with class-tinted backgrounds.
    Bias(BiasArgs),
    /// Write saliency maps of one frame or triplet as PNGs.
    Cam(CamArgs),
    /// Show the built-in defaults.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct SpecFlags {
    /// Scene spec JSON; its values override the flags below.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub n_before: usize,
    #[arg(long, default_value_t = 20)]
    pub n_after: usize,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f32>,
    /// Background style for both classes.
    #[arg(long, value_parser = parse_background)]
    pub background: Option<BackgroundStyle>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub spec: SpecFlags,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f32,
}

#[derive(Debug, Args)]
pub struct RunFlags {
    /// Run config JSON; its values override the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub alpha_max: Option<f64>,
    #[arg(long)]
    pub beta_max: Option<f64>,
    #[arg(long)]
    pub no_spatial: bool,
    #[arg(long)]
    pub no_temporal: bool,
    #[arg(long)]
    pub detach_fused: bool,
    #[arg(long)]
    pub detach_cam_max: bool,
    #[arg(long)]
    pub temporal_before_only: bool,
    #[arg(long)]
    pub lateral_cls: bool,
    /// groundtruth or lucas_kanade
    #[arg(long)]
    pub flow: Option<FlowMethod>,
    #[arg(long)]
    pub triplet_stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset (three-class).
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset; without it `data` is split 80/20.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Run config describing the architecture (default: config.json next to
    /// the checkpoint, else built-in defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fixed threshold instead of the sweep.
    #[arg(long)]
    pub theta: Option<f32>,
    /// Directory for results and predicted masks.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Three-class dataset with ground-truth masks; split 80/20.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    /// Raw before/after dataset; split 80/20.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f32,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct CamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Video id from the manifest.
    #[arg(long)]
    pub video: String,
    #[arg(long)]
    pub frame: usize,
    /// Class channel (default: the video's label).
    #[arg(long, value_parser = parse_class)]
    pub class: Option<Class>,
    /// Emit the lateral, warped and fused maps of the triplet centred on
    /// `frame`.
    #[arg(long)]
    pub triplet: bool,
    #[arg(long)]
    pub flow: Option<FlowMethod>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Print the default run config and scene spec as JSON.
    #[arg(long)]
    pub dump: bool,
}

fn parse_background(s: &str) -> std::result::Result<BackgroundStyle, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown background style {s:?}"))
}

fn parse_class(s: &str) -> std::result::Result<Class, String> {
    Class::from_name(s).ok_or_else(|| format!("unknown class {s:?}"))
}

/// Built-in defaults as one versioned JSON document.
pub fn defaults_json() -> Value {
    json!({
        "version": DEFAULTS_VERSION,
        "run": RunConfig::default(),
        "scene": SceneSpec::default(),
        "tau": DEFAULT_TAU,
        "train_fraction": 0.8,
        "theta_sweep": THETA_SWEEP,
    })
}

/// Overlays the keys of JSON file `path` on `base`.
fn overlay<T: serde::Serialize + serde::de::DeserializeOwned>(base: &T, path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let Value::Object(file) = file else {
        return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
    };
    let mut merged = serde_json::to_value(base).expect("serializable");
    let obj = merged.as_object_mut().expect("struct serializes to an object");
    for (k, v) in file {
        obj.insert(k, v);
    }
    serde_json::from_value(merged).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn scene_spec(flags: &SpecFlags, seed: Option<u64>) -> Result<SceneSpec> {
    let mut spec = SceneSpec::default();
    if let Some(v) = flags.height {
        spec.height = v;
    }
    if let Some(v) = flags.width {
        spec.width = v;
    }
    if let Some(v) = flags.frames {
        spec.frames = v;
    }
    if let Some(v) = flags.noise_sigma {
        spec.noise_sigma = v;
    }
    if let Some(b) = flags.background {
        spec.background_before = b;
        spec.background_after = b;
    }
    if let Some(p) = &flags.spec {
        spec = overlay(&spec, p)?;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

fn run_config(flags: &RunFlags, seed: Option<u64>) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(v) = flags.epochs {
        c.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = flags.lr {
        c.learning_rate = v;
    }
    if let Some(v) = flags.momentum {
        c.momentum = v;
    }
    if let Some(v) = flags.alpha_max {
        c.alpha_max = v;
    }
    if let Some(v) = flags.beta_max {
        c.beta_max = v;
    }
    if let Some(v) = flags.flow {
        c.flow_method = v;
    }
    if let Some(v) = flags.triplet_stride {
        c.triplet_stride = v;
    }
    c.enable_spatial &= !flags.no_spatial;
    c.enable_temporal &= !flags.no_temporal;
    c.detach_fused |= flags.detach_fused;
    c.detach_cam_max |= flags.detach_cam_max;
    c.temporal_before_only |= flags.temporal_before_only;
    c.lateral_cls |= flags.lateral_cls;
    if let Some(p) = &flags.config {
        c = overlay(&c, p)?;
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn load_backbone(checkpoint: &Path, config: Option<&Path>) -> Result<Backbone<f32>> {
    let sibling = checkpoint.parent().map(|d| d.join(CONFIG_FILE));
    let cfg = match (config, sibling) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(&p)?,
        _ => RunConfig::default(),
    };
    Backbone::from_named(cfg.backbone, load_checkpoint(checkpoint)?)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Executes one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let spec = scene_spec(&a.spec, cli.seed)?;
            let data = generate(&spec, a.spec.n_before, a.spec.n_after)?;
            data.save(&a.out)?;
            write_file(&a.out.join("spec.json"), &to_json(&spec))?;
            println!("wrote {} videos to {}", data.len(), a.out.display());
        }
        Command::Preprocess(a) => {
            let data = VideoDataset::load(&a.data)?;
            let out = expand_three_class(&data, a.tau)?;
            out.save(&a.out)?;
            println!(
                "wrote {} videos ({} before, {} after, {} background) to {}",
                out.len(),
                out.count(Class::Before),
                out.count(Class::After),
                out.count(Class::Background),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let cfg = run_config(&a.run, cli.seed)?;
            let data = VideoDataset::load(&a.data)?;
            let (train, val) = match &a.val {
                Some(v) => (data, VideoDataset::load(v)?),
                None => data.split(0.8, cfg.seed)?,
            };
            let out = fit(&train, Some(&val), &cfg, Some(&a.out))?;
            let last = out.metrics.last().expect("at least one epoch");
            println!(
                "trained {} steps; final L_total {:.4}, val accuracy {:.4}; checkpoint {}",
                out.steps,
                last.total,
                last.val_accuracy.unwrap_or(f64::NAN),
                a.out.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Eval(a) => eval_command(&a)?,
        Command::Ablate(a) => {
            let base = run_config(&a.run, cli.seed)?;
            let data = VideoDataset::load(&a.data)?;
            let (train, val) = data.split(0.8, base.seed)?;
            let table = ablation_grid(&train, &val, &base, &a.seeds, cli.threads)?;
            create_dir(&a.out)?;
            write_file(&a.out.join("ablation.csv"), &table.to_csv())?;
            write_file(&a.out.join("ablation.json"), &to_json(&table))?;
            print!("{}", table.to_csv());
        }
        Command::Bias(a) => {
            let base = run_config(&a.run, cli.seed)?;
            let data = VideoDataset::load(&a.data)?;
            let (train, val) = data.split(0.8, base.seed)?;
            let table = bias_study(&train, &val, &base, a.tau, cli.threads)?;
            create_dir(&a.out)?;
            write_file(&a.out.join("bias.csv"), &table.to_csv())?;
            write_file(&a.out.join("bias.json"), &to_json(&table))?;
            print!("{}", table.to_csv());
        }
        Command::Cam(a) => cam_command(&a)?,
        Command::Config(a) => {
            if !a.dump {
                return Err(Error::Config("nothing to do; pass --dump".into()));
            }
            print!("{}", to_json(&defaults_json()));
        }
    }
    Ok(())
}

fn eval_command(a: &EvalArgs) -> Result<()> {
    let backbone = load_backbone(&a.checkpoint, a.config.as_deref())?;
    let data = VideoDataset::load(&a.data)?;
    let frames = frame_inputs(&data)?;
    let present: Vec<Class> = Class::ALL.into_iter().filter(|&c| data.count(c) > 0).collect();
    if present.is_empty() {
        return Err(Error::Contract("dataset has no videos".into()));
    }
    let acc = accuracy(&backbone, &frames, &present)?;
    let mut summary = json!({ "frames": frames.len(), "classes": present, "accuracy": acc });
    println!("classification accuracy over {} frames: {acc:.4}", frames.len());

    let annotated = data.videos.iter().any(|v| v.label == Class::Before && v.gt_masks.is_some());
    if !annotated {
        println!("notice: dataset has no ground-truth masks; reporting classification metrics only");
    } else {
        let thetas = a.theta.map_or(THETA_SWEEP.to_vec(), |t| vec![t]);
        let report = evaluate_segmentation(&backbone, &data, &thetas)?;
        println!(
            "illegal-class mIoU {:.4} at theta {} over {} frames",
            report.best_miou, report.best_theta, report.frames
        );
        if let Some(out) = &a.out {
            create_dir(out)?;
            let mut csv = String::from("theta,miou\n");
            for (t, m) in &report.sweep {
                csv.push_str(&format!("{t},{m}\n"));
            }
            write_file(&out.join("miou.csv"), &csv)?;
            let mdir = out.join("masks");
            create_dir(&mdir)?;
            for v in data.videos.iter().filter(|v| v.label == Class::Before) {
                for (k, f) in v.frames.iter().enumerate() {
                    let feats = backbone.features_of(&f.to_tensor())?;
                    let seg = segmentation_mask(&feats, report.best_theta, f.height(), f.width())?;
                    seg.save_png(&mdir.join(format!("{}_{k:04}.png", v.id)))?;
                }
            }
        }
        summary["segmentation"] = serde_json::to_value(&report).expect("serializable");
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_file(&out.join("summary.json"), &to_json(&summary))?;
    }
    Ok(())
}

fn cam_command(a: &CamArgs) -> Result<()> {
    let backbone = load_backbone(&a.checkpoint, a.config.as_deref())?;
    let data = VideoDataset::load(&a.data)?;
    let video = data
        .videos
        .iter()
        .find(|v| v.id == a.video)
        .ok_or_else(|| Error::Config(format!("no video {:?} in {}", a.video, a.data.display())))?;
    let class = a.class.unwrap_or(video.label);
    create_dir(&a.out)?;
    let save = |m: &SaliencyMap, name: &str| m.to_image().save_png(&a.out.join(format!("{name}.png")));
    if !a.triplet {
        let f = video
            .frames
            .get(a.frame)
            .ok_or_else(|| Error::Config(format!("video {} has no frame {}", video.id, a.frame)))?;
        let m = cam_map(&backbone.features_of(&f.to_tensor())?, class, a.frame)?;
        save(&m, "m_t")?;
        println!("wrote 1 map to {}", a.out.display());
        return Ok(());
    }
    if a.frame == 0 || a.frame + 1 >= video.len() {
        return Err(Error::Config(format!(
            "triplet centre {} needs frames on both sides (video has {})",
            a.frame,
            video.len()
        )));
    }
    let t = a.frame;
    let method = a.flow.unwrap_or(FlowMethod::GroundTruth);
    let (rec_prev, rec_next) = match &video.gt_flow {
        Some(fl) => (Some(fl[t - 1].negated()), Some(fl[t].clone())),
        None => (None, None),
    };
    let s = backbone.stride();
    let flows = LateralFlows {
        to_prev: estimate_flow(&video.frames[t], &video.frames[t - 1], method, rec_prev.as_ref())?.to_feature_grid(s)?,
        to_next: estimate_flow(&video.frames[t], &video.frames[t + 1], method, rec_next.as_ref())?.to_feature_grid(s)?,
    };
    let feats: Vec<_> = (t - 1..=t + 1)
        .map(|k| backbone.features_of(&video.frames[k].to_tensor()))
        .collect::<Result<_>>()?;
    let maps: Vec<SaliencyMap> = feats
        .iter()
        .enumerate()
        .map(|(i, f)| cam_map(f, class, t - 1 + i))
        .collect::<Result<_>>()?;
    let prev_w = warp_map(&maps[0], &flows.to_prev, t)?;
    let next_w = warp_map(&maps[2], &flows.to_next, t)?;
    let fused = crate::temporal::fuse_maps(&prev_w, &next_w)?;
    for (m, name) in [
        (&maps[0], "m_prev"),
        (&maps[1], "m_t"),
        (&maps[2], "m_next"),
        (&prev_w, "m_prev_warped"),
        (&next_w, "m_next_warped"),
        (&fused, "m_fused"),
    ] {
        save(m, name)?;
    }
    let graph = crate::tensor::Graph::<f32>::new();
    let vars: Vec<_> = feats.into_iter().map(|f| graph.constant(f)).collect();
    let loss = temporal_loss_from_features([&vars[0], &vars[1], &vars[2]], class, &flows, Default::default())?;
    println!(
        "wrote 6 maps to {}; L_temporal = {}",
        a.out.display(),
        loss.loss.value().data()[0]
    );
    Ok(())
}
