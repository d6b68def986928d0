//! Command-line entry points.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fenerf::camera::CameraPose;
use fenerf::config::Config;
use fenerf::evaluation::{inversion_curve, view_consistency};
use fenerf::generator::Generator;
use fenerf::imageio;
use fenerf::inversion::{invert_full, invert_semantic, local_edit, morph_grid, InversionSettings, Inverted, Target};
use fenerf::renderer::render;
use fenerf::scenegen::{generate_dataset, manifest_path, Dataset};
use fenerf::training::{load_generator, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::artifacts::{check_mask, write, write_render, Latents};
use crate::service::{Service, ServiceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fenerf", version, about = "Semantic radiance field generator: data, training, inversion, editing and serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Procedural dataset tools.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Adversarial training; writes `checkpoint.fnrf` and `train.jsonl` under --out.
    Train(TrainArgs),
    /// Renders image, label map and depth for one latent pair.
    Render(RenderArgs),
    /// Fits latents to a label map (and optionally an aligned image).
    Invert(InvertArgs),
    /// Re-fits the shape latent to an edited label map with the texture latent frozen.
    Edit(EditArgs),
    /// Renders an n x n grid interpolating shape along rows and texture along columns.
    Morph(MorphArgs),
    /// Pose, inversion and view-consistency evaluation of a checkpoint.
    Eval(EvalArgs),
    /// HTTP service for sampling, rendering and inversion jobs.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Writes images, masks and a manifest.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory; generated in memory from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Total iterations; defaults to `train.iterations`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from `checkpoint.fnrf` under --out if present.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Overrides the sampling and inversion sections of the checkpoint's config.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct PoseArgs {
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub pitch: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub yaw: f64,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub pose: PoseArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Latent file; sampled from --seed when absent.
    #[arg(long)]
    pub latents: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub pose: PoseArgs,
    /// Single-channel label PNG at the model resolution.
    #[arg(long)]
    pub target: PathBuf,
    /// Aligned RGB PNG; switches to joint image and label fitting.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// NDJSON trace, one record per iteration.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds the initial latents.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub pose: PoseArgs,
    #[arg(long)]
    pub latents: PathBuf,
    /// Edited single-channel label PNG.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MorphArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub pose: PoseArgs,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out codes for the inversion and consistency protocols.
    #[arg(long, default_value_t = 20)]
    pub codes: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 1234)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub artifacts: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Jobs executing at once.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Jobs allowed to wait for a worker before new ones are refused.
    #[arg(long, default_value_t = 8)]
    pub queue: usize,
    /// Finished jobs kept in memory; older records are served from disk.
    #[arg(long, default_value_t = 256)]
    pub retention: usize,
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset { command: DatasetCommand::Gen { config, out } } => dataset_gen(&config, &out),
        Command::Train(a) => train(&a),
        Command::Render(a) => render_cmd(&a),
        Command::Invert(a) => invert(&a),
        Command::Edit(a) => edit(&a),
        Command::Morph(a) => morph(&a),
        Command::Eval(a) => eval(&a),
        Command::Serve(a) => serve(a),
    }
}

fn dataset_gen(config: &Path, out: &Path) -> Result<()> {
    let cfg = Config::load(config)?;
    let manifest = generate_dataset(&cfg.dataset, &cfg.camera, out)?;
    println!("{} scenes at {}x{} -> {}", manifest.entries.len(), manifest.resolution, manifest.resolution, manifest_path(out).display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = Config::load(&a.config)?;
    let ckpt = a.out.join("checkpoint.fnrf");
    let mut trainer = if a.resume && ckpt.exists() {
        let t = Trainer::load(&ckpt)?;
        if t.cfg != cfg {
            bail!("{} was trained with a different config", ckpt.display());
        }
        t
    } else {
        Trainer::new(&cfg)?
    };
    let data = match &a.data {
        Some(dir) => Dataset::load(dir, &cfg.camera)?,
        None => Dataset::generate(&cfg.dataset, &cfg.camera)?,
    };
    let total = a.steps.unwrap_or(cfg.train.iterations);
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let log_path = a.out.join("train.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    while trainer.iteration < total {
        let rec = trainer.step(&data)?;
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        let every = cfg.train.checkpoint_every.max(1);
        if trainer.iteration % every == 0 {
            trainer.save(&ckpt)?;
        }
    }
    trainer.save(&ckpt)?;
    println!("{} iterations, parameters {}", trainer.iteration, trainer.hash());
    Ok(())
}

/// Loads the generator and the effective config: the checkpoint's, with the sampling and
/// inversion sections optionally replaced from --config.
fn load_model(m: &ModelArgs) -> Result<(Config, Generator<f32>)> {
    let (mut cfg, gen) = load_generator(&m.ckpt)?;
    apply_overrides(&mut cfg, m.config.as_deref())?;
    Ok((cfg, gen))
}

fn apply_overrides(cfg: &mut Config, path: Option<&Path>) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let over = Config::load(path)?;
    if over.generator != cfg.generator {
        bail!("{}: generator section differs from the checkpoint", path.display());
    }
    cfg.sampling = over.sampling;
    cfg.inversion = over.inversion;
    Ok(())
}

fn pose_of(p: PoseArgs, cfg: &Config) -> CameraPose {
    CameraPose::with_camera(p.pitch, p.yaw, &cfg.camera)
}

fn render_cmd(a: &RenderArgs) -> Result<()> {
    let (cfg, gen) = load_model(&a.model)?;
    let latents = match &a.latents {
        Some(p) => Latents::load(p)?,
        None => Latents::sample(&gen, &mut ChaCha8Rng::seed_from_u64(a.seed)),
    };
    let (zs, zt) = latents.tensors(&gen)?;
    let res = a.resolution.unwrap_or(cfg.train.resolution);
    let sampling = fenerf::config::SamplingConfig { stratified: false, ..cfg.sampling };
    let out = render(&gen, &zs, &zt, &pose_of(a.pose, &cfg), &sampling, res, None::<&mut ChaCha8Rng>)?;
    write_render(&a.out, "", &out, sampling.near, sampling.far)?;
    latents.save(&a.out.join("latents.json"))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn read_mask(path: &Path, cfg: &Config) -> Result<Vec<u8>> {
    let (res, mask) = imageio::read_labels(path)?;
    check_mask(&mask, cfg.train.resolution, cfg.generator.classes).with_context(|| format!("{} ({res}x{res})", path.display()))?;
    Ok(mask)
}

fn settings(cfg: &Config, steps: Option<usize>) -> InversionSettings {
    let s = InversionSettings::from_config(cfg);
    InversionSettings { steps: steps.unwrap_or(s.steps), ..s }
}

fn write_inverted(out: &Path, trace: Option<&PathBuf>, inv: &Inverted, gen: &Generator<f32>, cfg: &Config) -> Result<()> {
    let s = &cfg.sampling;
    let fixed = fenerf::config::SamplingConfig { stratified: false, ..*s };
    let r = render(gen, &inv.z_s, &inv.z_t, &inv.pose, &fixed, cfg.train.resolution, None::<&mut ChaCha8Rng>)?;
    write_render(out, "", &r, s.near, s.far)?;
    Latents::from_tensors(&inv.z_s, &inv.z_t).save(&out.join("latents.json"))?;
    let ndjson = inv.trace.to_ndjson();
    write(&out.join("trace.jsonl"), ndjson.as_bytes())?;
    if let Some(t) = trace {
        write(t, ndjson.as_bytes())?;
    }
    let summary = json!({
        "iterations": inv.trace.records.len(),
        "final_miou": inv.trace.final_miou,
        "final_psnr": inv.trace.final_psnr,
        "pose": { "pitch": inv.pose.pitch, "yaw": inv.pose.yaw },
    });
    write(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    println!("final mIoU {:.4}", inv.trace.final_miou);
    Ok(())
}

fn invert(a: &InvertArgs) -> Result<()> {
    let (cfg, gen) = load_model(&a.model)?;
    let mask = read_mask(&a.target, &cfg)?;
    let s = settings(&cfg, a.steps);
    let pose = pose_of(a.pose, &cfg);
    let init = Latents::sample(&gen, &mut ChaCha8Rng::seed_from_u64(a.seed));
    let (zs, zt) = init.tensors(&gen)?;
    let inv = match &a.image {
        Some(p) => {
            let (res, image) = imageio::read_rgb(p)?;
            if res != cfg.train.resolution {
                bail!("{}: image is {res}x{res}, model renders {}", p.display(), cfg.train.resolution);
            }
            invert_full(&gen, &Target { mask, image: Some(image) }, &pose, &s, (&zs, &zt), &mut |_| Ok(()))?
        }
        None => invert_semantic(&gen, &mask, &pose, &s, &zs, &zt, &mut |_| Ok(()))?,
    };
    write_inverted(&a.out, a.trace.as_ref(), &inv, &gen, &cfg)
}

fn edit(a: &EditArgs) -> Result<()> {
    let (cfg, gen) = load_model(&a.model)?;
    let mask = read_mask(&a.mask, &cfg)?;
    let (zs, zt) = Latents::load(&a.latents)?.tensors(&gen)?;
    let inv = local_edit(&gen, (&zs, &zt), &mask, &pose_of(a.pose, &cfg), &settings(&cfg, a.steps), &mut |_| Ok(()))?;
    write_inverted(&a.out, a.trace.as_ref(), &inv, &gen, &cfg)
}

fn morph(a: &MorphArgs) -> Result<()> {
    let (cfg, gen) = load_model(&a.model)?;
    let (sa, ta) = Latents::load(&a.a)?.tensors(&gen)?;
    let (sb, tb) = Latents::load(&a.b)?.tensors(&gen)?;
    let grid = morph_grid(&gen, (&sa, &ta), (&sb, &tb), a.n, &pose_of(a.pose, &cfg), &cfg.sampling, cfg.train.resolution)?;
    for (i, row) in grid.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            write_render(&a.out, &format!("cell_{i}_{j}_"), cell, cfg.sampling.near, cfg.sampling.far)?;
        }
    }
    println!("wrote {0}x{0} grid to {1}", a.n, a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let trainer = Trainer::load(&a.model.ckpt)?;
    let mut cfg = trainer.cfg.clone();
    apply_overrides(&mut cfg, a.model.config.as_deref())?;
    let gen = &trainer.gen;
    let pose = trainer.pose_error(64, a.seed)?;
    let curve = inversion_curve(gen, &cfg, a.codes, a.steps, a.seed)?;
    let views = view_consistency(gen, &cfg, a.codes, 0.2, a.seed)?;
    let report = json!({
        "iteration": trainer.iteration,
        "pose_mae": { "pitch": pose[0], "yaw": pose[1] },
        "inversion": { "codes": curve.codes, "miou_100": curve.at(100), "miou_final": curve.at(a.steps), "mean_miou": curve.mean_miou },
        "reprojection": views,
    });
    write(&a.out.join("eval.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    println!(
        "pose MAE {:.3}/{:.3}  inversion mIoU {:.3} @100, {:.3} final  reprojection {:.4}",
        pose[0],
        pose[1],
        curve.at(100),
        curve.at(a.steps),
        views.error
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = ServiceConfig {
        bind: a.bind,
        checkpoint: a.ckpt,
        artifacts: a.artifacts,
        max_concurrent: a.workers,
        queue_capacity: a.queue,
        retention: a.retention,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let svc = Service::start(cfg).await?;
        println!("listening on http://{}", svc.addr);
        tokio::signal::ctrl_c().await?;
        svc.shutdown().await;
        Ok(())
    })
}
