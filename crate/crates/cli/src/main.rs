use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use smfc_core::entropy::FrameMeta;
use smfc_core::eval::{
    bd_metric, bd_rate, compute_bpp_with, curves_to_svg, held_out_scenes, model_stats, read_curve, run_ablation,
    run_rd_sweep, write_curve, BppDenominator,
};
use smfc_core::model::Model;
use smfc_core::smfc::StereoPair;
use smfc_core::task::{detect, generate_scene, load_rgb, SceneConfig, SyntheticScene};
use smfc_core::train::{run_sweep, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(
    name = "smfc",
    version,
    about = "Stereo multi-scale feature codec for machine vision"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per lambda.
    Train(TrainArgs),
    /// Write freshly initialized weights.
    Init(InitArgs),
    /// Code a stereo pair into a frame.
    Encode(EncodeArgs),
    /// Decode a frame into latent dumps and detections.
    Decode(DecodeArgs),
    /// Evaluate a set of checkpoints into an RD curve.
    RdSweep(SweepArgs),
    /// Bjøntegaard deltas between two RD curves.
    Bd(BdArgs),
    /// Train and compare the joint and separate-branch variants.
    Ablate(AblateArgs),
    /// Parameter count and MACs per stereo pair.
    Stats(StatsArgs),
    /// Export synthetic scenes as images plus box lists.
    GenScene(GenSceneArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Training config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut text = match &self.config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        for kv in &self.set {
            text.push('\n');
            text.push_str(kv);
        }
        if let Some(s) = self.seed {
            text.push_str(&format!("\nseed = {s}"));
        }
        Ok(TrainConfig::parse(&text)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated rate weights; defaults to the config's lambda.
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    /// Output file when training a single lambda.
    #[arg(long, conflicts_with = "out_dir", required_unless_present = "out_dir")]
    out: Option<PathBuf>,
    /// Output directory, one `lambda-<value>.smfw` per lambda.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Header lambda index; defaults to the checkpoint's.
    #[arg(long)]
    lambda_index: Option<u8>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// One checkpoint per lambda.
    #[arg(long, num_args = 1.., required = true)]
    weights: Vec<PathBuf>,
    /// Evaluate on this training config's held-out scenes.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Otherwise generate this many scenes.
    #[arg(long, default_value_t = 32)]
    scenes: usize,
    #[arg(long, default_value_t = 1_000_000)]
    data_seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write an SVG plot of the curve.
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long, default_value = "both", value_parser = ["both", "single"])]
    bpp_denominator: String,
}

#[derive(Args)]
struct BdArgs {
    #[arg(long)]
    anchor: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 4.0, 64.0, 256.0])]
    lambda: Vec<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    weights: PathBuf,
}

#[derive(Args)]
struct GenSceneArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value = "png", value_parser = ["png", "ppm"])]
    format: String,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Init(a) => {
            let cfg = a.cfg.load()?;
            let model = Model::<f32>::new(cfg.model, cfg.seed)?;
            Checkpoint::from_model(model).save(&a.out)?;
            println!("wrote {}", a.out.display());
            Ok(())
        }
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::RdSweep(a) => sweep(a),
        Command::Bd(a) => {
            let anchor = read_curve(&a.anchor).with_context(|| format!("reading {}", a.anchor.display()))?;
            let test = read_curve(&a.test).with_context(|| format!("reading {}", a.test.display()))?;
            println!("BD-rate: {:.6}%", bd_rate(&anchor, &test)?);
            println!("BD-AP: {:.6}", bd_metric(&anchor, &test)?);
            Ok(())
        }
        Command::Ablate(a) => ablate(a),
        Command::Stats(a) => {
            let c = model_stats(&load(&a.weights)?);
            println!("params: {}", c.params);
            println!("macs: {}", c.macs);
            Ok(())
        }
        Command::GenScene(a) => {
            let cfg = SceneConfig {
                width: a.width,
                height: a.height,
                ..SceneConfig::default()
            };
            fs::create_dir_all(&a.out_dir)?;
            for seed in a.seed..a.seed + a.count {
                generate_scene(seed, &cfg)?.export(&a.out_dir, &format!("scene{seed}"), &a.format)?;
            }
            println!("wrote {} scene(s) to {}", a.count, a.out_dir.display());
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let lambdas = if a.lambda.is_empty() {
        vec![cfg.lambda]
    } else {
        a.lambda
    };
    if a.out.is_some() && lambdas.len() != 1 {
        bail!("--out takes a single lambda; use --out-dir for a sweep");
    }
    let runs = run_sweep(&cfg, &lambdas)?;
    for run in &runs {
        let path = match (&a.out, &a.out_dir) {
            (Some(p), _) => p.clone(),
            (None, Some(d)) => {
                fs::create_dir_all(d)?;
                d.join(format!("lambda-{}.smfw", run.checkpoint.lambda))
            }
            (None, None) => unreachable!("clap requires an output"),
        };
        run.checkpoint.save(&path)?;
        let last = run.history.last();
        println!(
            "lambda {}: final loss {:.4}, bpp {:.5} -> {}",
            run.checkpoint.lambda,
            last.map_or(f64::NAN, |s| s.loss),
            last.map_or(f64::NAN, |s| s.bpp),
            path.display()
        );
    }
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let ckpt = load(&a.weights)?;
    let model = &ckpt.model;
    let left = load_rgb(&a.left).with_context(|| format!("reading {}", a.left.display()))?;
    let right = load_rgb(&a.right).with_context(|| format!("reading {}", a.right.display()))?;
    let pair = StereoPair::new(left, right)?;
    let (h, w) = pair.dims();
    let (latents, clamped) = model.encode_pair(&pair)?;
    if clamped > 0 {
        log::warn!("{clamped} latent values were clamped into the symbol range");
    }
    let meta = FrameMeta {
        variant: model.config.smfc.variant,
        lambda_index: a.lambda_index.unwrap_or(ckpt.lambda_index),
        width: u16::try_from(w)?,
        height: u16::try_from(h)?,
    };
    let bytes = model.entropy_codec().encode_latents(&latents, meta)?.to_bytes();
    fs::write(&a.out, &bytes)?;
    let bpp = compute_bpp_with(8 * bytes.len() as u64, w, h, BppDenominator::Both)?;
    println!("{} bytes, {bpp:.6} bpp -> {}", bytes.len(), a.out.display());
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let ckpt = load(&a.weights)?;
    let model = &ckpt.model;
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let (latents, meta) = model.entropy_codec().decode_frame(&bytes)?;
    let pyr = model.decode_latents(&latents)?;
    let pred = model.predict(&pyr)?;
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("left.smfl"), latents.left.to_dump())?;
    fs::write(a.out_dir.join("right.smfl"), latents.right.to_dump())?;
    let mut det = String::from("# score x0 x1 y0 y1 (grid cells)\n");
    for d in detect(&pred) {
        det.push_str(&format!(
            "{:.6} {} {} {} {}\n",
            d.score, d.rect.x0, d.rect.x1, d.rect.y0, d.rect.y1
        ));
    }
    fs::write(a.out_dir.join("detections.txt"), det)?;
    println!(
        "{}x{} frame, lambda index {}, {} symbols -> {}",
        meta.width,
        meta.height,
        meta.lambda_index,
        latents.symbol_count(),
        a.out_dir.display()
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let ckpts = a.weights.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let scenes: Vec<SyntheticScene> = match &a.config {
        Some(p) => held_out_scenes(&TrainConfig::load(p)?)?,
        None => {
            let m = ckpts[0].config();
            let cfg = SceneConfig {
                width: m.width,
                height: m.height,
                grid_stride: m.smfc.strides[1],
                ..SceneConfig::default()
            };
            (0..a.scenes as u64)
                .map(|i| generate_scene(a.data_seed + i, &cfg))
                .collect::<smfc_core::Result<_>>()?
        }
    };
    let denom = BppDenominator::parse(&a.bpp_denominator)?;
    let res = run_rd_sweep(&ckpts, &scenes, denom)?;
    write_curve(&a.out, &res.curve)?;
    if let Some(p) = &a.plot {
        fs::write(p, curves_to_svg(&[("smfc", &res.curve)]))?;
    }
    for p in res.curve.points() {
        println!("lambda {:>6}: {:.6} bpp, AP {:.3}", p.label, p.bpp, p.metric);
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let (report, _) = run_ablation(&cfg, &a.lambda)?;
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("report.txt"), &report.text)?;
    write_curve(&a.out_dir.join("smfc.csv"), &report.smfc.curve)?;
    write_curve(&a.out_dir.join("baseline.csv"), &report.baseline.curve)?;
    fs::write(
        a.out_dir.join("ablation.svg"),
        curves_to_svg(&[("smfc", &report.smfc.curve), ("baseline", &report.baseline.curve)]),
    )?;
    print!("{}", report.text);
    Ok(())
}
