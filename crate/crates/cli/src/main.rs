use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use splitgs::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use splitgs::dataio::{atomic_write, load_dataset, write_png_rgb, Dataset};
use splitgs::init::init_scene;
use splitgs::lifecycle::{accumulate_visibility, prune_plan, visibility_score, VisibilityStats};
use splitgs::pipeline::{evaluate, render_image, render_view, Phase, Precision, TrainConfig, Trainer};
use splitgs::raster::{render, RenderOptions};
use splitgs::scene::{resolve, Which};
use splitgs::synth::{synth_scene, SynthSpec};

#[derive(Parser)]
#[command(name = "splitgs", version, about = "Static/dynamic Gaussian splatting on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic desk-scale dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frames: Option<usize>,
        /// Resolution as WxH.
        #[arg(long, value_parser = parse_res)]
        res: Option<(usize, usize)>,
    },
    /// Run depth-aware pretraining only.
    Pretrain(TrainArgs),
    /// Run all remaining phases.
    Train(TrainArgs),
    /// Render one view from a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        time: f64,
        #[arg(long, default_value = "both")]
        which: Which,
        /// Index of the stored training camera (default: the one nearest in time).
        #[arg(long)]
        view: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame and average PSNR/SSIM against a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "both")]
        which: Which,
        /// Also write static-only and dynamic-only renders of every frame here.
        #[arg(long)]
        renders: Option<PathBuf>,
    },
    /// Visibility scores of every static Gaussian over the dataset.
    PruneReport {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML or JSON file of TrainConfig keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dap_iterations: Option<usize>,
    #[arg(long)]
    stage1_iterations: Option<usize>,
    #[arg(long)]
    stage2_iterations: Option<usize>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    #[arg(long)]
    no_dap: bool,
    #[arg(long)]
    no_vdp: bool,
    /// Disable both residual appearance networks.
    #[arg(long)]
    no_appearance: bool,
    /// Save a checkpoint every N iterations (0 = only at the end).
    #[arg(long, default_value_t = 500)]
    checkpoint_every: usize,
}

fn parse_res(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w: usize = w.parse().map_err(|_| "bad width")?;
    let h: usize = h.parse().map_err(|_| "bad height")?;
    if w == 0 || h == 0 {
        return Err("resolution must be positive".into());
    }
    Ok((w, h))
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "single" => Ok(Precision::Single),
        "double" => Ok(Precision::Double),
        _ => Err("expected single or double".into()),
    }
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    Ok(cfg)
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.dap_iterations {
            cfg.dap_iterations = n;
        }
        if let Some(n) = self.stage1_iterations {
            cfg.stage1_iterations = n;
        }
        if let Some(n) = self.stage2_iterations {
            cfg.stage2_iterations = n;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        cfg.use_dap &= !self.no_dap;
        cfg.use_vdp &= !self.no_vdp;
        if self.no_appearance {
            cfg.static_appearance = false;
            cfg.dynamic_appearance = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)?;
    Ok(())
}

fn run_training(args: &TrainArgs, dap_only: bool) -> Result<()> {
    let data = load_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    let mut trainer = match &args.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            log::info!("resuming from {} at iteration {}", p.display(), ck.trainer.global_iter);
            if args.config.is_some() || args.seed.is_some() || args.stage1_iterations.is_some() {
                log::warn!("config flags are ignored when resuming; the checkpoint's config is used");
            }
            ck.trainer
        }
        None => {
            let cfg = args.config()?;
            let scene = init_scene(&data, cfg.scene_config())?;
            Trainer::new(cfg, scene)?
        }
    };
    let ckpt_path = args.out.join("checkpoint.ckpt");
    let save = |t: &Trainer| -> Result<()> {
        save_checkpoint(&ckpt_path, &Checkpoint::new(t.clone(), Some(&data)))?;
        Ok(())
    };
    loop {
        trainer.settle(&data);
        if dap_only && trainer.phase != Phase::Dap {
            break;
        }
        match trainer.step(&data) {
            Ok(Some(_)) => {}
            Ok(None) => break,
            Err(e) => {
                let failed = args.out.join("failed_report.json");
                write_json(&failed, &trainer.report)?;
                bail!(
                    "training stopped: {e}; the last good checkpoint is {}",
                    ckpt_path.display()
                );
            }
        }
        if dap_only && trainer.phase != Phase::Dap {
            break;
        }
        if args.checkpoint_every > 0 && trainer.global_iter % args.checkpoint_every == 0 {
            save(&trainer)?;
        }
    }
    save(&trainer)?;
    write_json(&args.out.join("report.json"), &trainer.report)?;
    let metrics = evaluate(&trainer.scene, &data, Which::Both)?;
    write_json(&args.out.join("metrics.json"), &metrics)?;
    eprintln!(
        "done: {} iterations, mean PSNR {:.2} dB, checkpoint {}",
        trainer.global_iter,
        metrics.mean_psnr,
        ckpt_path.display()
    );
    Ok(())
}

fn prune_report(ckpt: &Path, data: &Dataset, out: &Path) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let t = &ck.trainer;
    let scene = &t.scene;
    let mut stats = VisibilityStats::new(scene.num_static());
    let opts = RenderOptions {
        deterministic: true,
        ..Default::default()
    };
    for f in &data.frames {
        let r = resolve(scene, f.time, &f.camera, Which::StaticOnly)?;
        let rendered = render(&r.splats, &f.camera, scene.config.background, &opts)?;
        accumulate_visibility(&mut stats, &rendered.output, &r.static_splat, &r.static_opacity)?;
    }
    let plan = prune_plan(&stats, &t.config.prune);
    let scores = visibility_score(&stats);
    let mut buf = Vec::new();
    for (rec, s) in plan.records.iter().zip(&scores) {
        let line = serde_json::json!({
            "index": rec.index,
            "score": s.score,
            "frequency": s.frequency,
            "pruned": rec.pruned,
        });
        writeln!(buf, "{line}")?;
    }
    atomic_write(out, &buf)?;
    eprintln!("{} of {} static Gaussians would be pruned", plan.removed.len(), scores.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, seed, frames, res } => {
            let mut spec = SynthSpec::default();
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(n) = frames {
                spec.frames = n;
            }
            if let Some((w, h)) = res {
                spec.width = w;
                spec.height = h;
            }
            let d = synth_scene(&spec, &out)?;
            eprintln!("wrote {} frames to {}", d.len(), out.display());
        }
        Command::Pretrain(args) => run_training(&args, true)?,
        Command::Train(args) => run_training(&args, false)?,
        Command::Render { ckpt, time, which, view, out } => {
            if !(0.0..=1.0).contains(&time) {
                bail!("--time must lie in [0, 1]");
            }
            let ck = load_checkpoint(&ckpt)?;
            let v = match view {
                Some(i) => ck.views.get(i).with_context(|| format!("checkpoint has {} views", ck.views.len()))?,
                None => ck.nearest_view(time).context("checkpoint stores no cameras")?,
            };
            let img = render_image(&ck.trainer.scene, time, &v.camera, which)?;
            write_png_rgb(&out, &img)?;
        }
        Command::Eval { ckpt, data, out, which, renders } => {
            let ck = load_checkpoint(&ckpt)?;
            let data = load_dataset(&data)?;
            let report = evaluate(&ck.trainer.scene, &data, which)?;
            write_json(&out, &report)?;
            if let Some(dir) = renders {
                std::fs::create_dir_all(&dir)?;
                for f in &data.frames {
                    for (w, name) in [(Which::StaticOnly, "static"), (Which::DynamicOnly, "dynamic")] {
                        let o = render_view(&ck.trainer.scene, f.time, &f.camera, w, true)?;
                        let img = splitgs::img::Image::new(o.width, o.height, 3, o.color)?;
                        write_png_rgb(&dir.join(format!("{name}_{:04}.png", f.index)), &img)?;
                    }
                }
            }
            eprintln!("mean PSNR {:.3} dB, mean SSIM {:.4}", report.mean_psnr, report.mean_ssim);
        }
        Command::PruneReport { ckpt, data, out } => {
            let data = load_dataset(&data)?;
            prune_report(&ckpt, &data, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
