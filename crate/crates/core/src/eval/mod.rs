//! Measurement: bits per pixel, Bjøntegaard deltas, RD sweeps over trained
//! checkpoints, the variant ablation and model cost.

mod bd;
mod csv_io;

use std::fmt::Write as _;

use rayon::prelude::*;

pub use bd::{bd_metric, bd_metric_setup, bd_rate, bd_rate_setup, BdSetup, Pchip, RDCurve, RDPoint, MIN_BD_POINTS};
pub use csv_io::{curve_from_csv, curve_to_csv, curves_to_svg, read_curve, write_curve, CSV_HEADER};

use crate::entropy::FrameMeta;
use crate::error::{Error, Result};
use crate::nn::Cost;
use crate::smfc::Variant;
use crate::task::{
    average_precision, detect, generate_scene, task_distortion, truth_rects, CellRect, Detection, SyntheticScene,
    TaskPrediction, TaskTargets,
};
use crate::tensor::Graph;
use crate::train::{run_sweep, Checkpoint, TrainConfig, TrainRun};

/// Which pixels the rate is divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BppDenominator {
    /// Both views: `2 · W · H`.
    #[default]
    Both,
    /// One view: `W · H`.
    Single,
}

impl BppDenominator {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "single" => Ok(Self::Single),
            _ => Err(Error::Argument(format!(
                "bpp denominator must be both or single, got {s:?}"
            ))),
        }
    }
}

/// Coded bits over the pixels of both views of a `width × height` pair.
pub fn compute_bpp(total_bits: u64, width: usize, height: usize) -> Result<f64> {
    compute_bpp_with(total_bits, width, height, BppDenominator::Both)
}

pub fn compute_bpp_with(total_bits: u64, width: usize, height: usize, denom: BppDenominator) -> Result<f64> {
    if width == 0 || height == 0 {
        return Err(Error::Argument(format!("image size {width}x{height} has no pixels")));
    }
    let views = match denom {
        BppDenominator::Both => 2.0,
        BppDenominator::Single => 1.0,
    };
    Ok(total_bits as f64 / (views * width as f64 * height as f64))
}

/// One scene pushed through the real bitstream.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEval {
    pub bytes: usize,
    pub bpp: f64,
    pub distortion: f64,
    /// Latent values clamped into the symbol range before coding.
    pub clamped: usize,
    pub detections: Vec<Detection>,
    pub truth: Vec<CellRect>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub mean_bpp: f64,
    /// Proxy AP on `[0, 100]` pooled over all scenes.
    pub ap: f64,
    pub mean_distortion: f64,
    pub frames: Vec<FrameEval>,
}

/// Encodes every scene to frame bytes, decodes them, runs the head on the
/// reconstruction and scores it. Scenes run in parallel; results are
/// gathered by scene index.
pub fn evaluate(ckpt: &Checkpoint, scenes: &[SyntheticScene], denom: BppDenominator) -> Result<EvalSummary> {
    if scenes.is_empty() {
        return Err(Error::Argument("no scenes to evaluate".into()));
    }
    let model = &ckpt.model;
    let cfg = &model.config;
    let codec = model.entropy_codec();
    let frames: Vec<FrameEval> = scenes
        .par_iter()
        .map(|scene| -> Result<FrameEval> {
            let (h, w) = scene.pair.dims();
            let (latents, clamped) = model.encode_pair(&scene.pair)?;
            let meta = FrameMeta {
                variant: cfg.smfc.variant,
                lambda_index: ckpt.lambda_index,
                width: dim16(w)?,
                height: dim16(h)?,
            };
            let bytes = codec.encode_latents(&latents, meta)?.to_bytes();
            let (decoded, _) = codec.decode_frame(&bytes)?;
            if decoded != latents {
                return Err(Error::State("bitstream did not reproduce the latents".into()));
            }
            let pyr = model.decode_latents(&decoded)?;
            let targets = TaskTargets::<f32>::from_scene(scene, &cfg.smfc, &cfg.head)?;
            let g = Graph::new();
            let l = pyr.left.clone().map(|t| g.input(t));
            let r = pyr.right.clone().map(|t| g.input(t));
            let p = model.head.forward(&g, &model.store, &l, &r)?;
            let d = task_distortion(&g, &p, &targets)?;
            let pred = TaskPrediction {
                occupancy: g.value(p.occupancy).clone(),
                boxes: g.value(p.boxes).clone(),
                disparity: g.value(p.disparity).clone(),
            };
            let [_, _, gh, gw] = pred.occupancy.dims4()?;
            let distortion = g.value(d.total).item()? as f64;
            Ok(FrameEval {
                bytes: bytes.len(),
                bpp: compute_bpp_with(8 * bytes.len() as u64, w, h, denom)?,
                distortion,
                clamped,
                detections: detect(&pred),
                truth: truth_rects(&scene.boxes, gw, gh),
            })
        })
        .collect::<Result<_>>()?;
    let n = frames.len() as f64;
    let pooled: Vec<(Vec<Detection>, Vec<CellRect>)> =
        frames.iter().map(|f| (f.detections.clone(), f.truth.clone())).collect();
    Ok(EvalSummary {
        mean_bpp: frames.iter().map(|f| f.bpp).sum::<f64>() / n,
        ap: average_precision(&pooled),
        mean_distortion: frames.iter().map(|f| f.distortion).sum::<f64>() / n,
        frames,
    })
}

fn dim16(v: usize) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Argument(format!("dimension {v} does not fit the frame header")))
}

/// The held-out tail of a training configuration's scene set.
pub fn held_out_scenes(cfg: &TrainConfig) -> Result<Vec<SyntheticScene>> {
    let (_, held) = cfg.split();
    held.into_par_iter()
        .map(|i| generate_scene(cfg.data_seed.wrapping_add(i as u64), &cfg.scene))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub lambda: f64,
    pub lambda_index: u8,
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Points in checkpoint order.
    pub points: Vec<SweepPoint>,
    /// The same points sorted by bpp, labelled by lambda.
    pub curve: RDCurve,
}

/// Evaluates one checkpoint per lambda on the same scenes.
pub fn run_rd_sweep(ckpts: &[Checkpoint], scenes: &[SyntheticScene], denom: BppDenominator) -> Result<SweepResult> {
    let first = ckpts
        .first()
        .ok_or_else(|| Error::Argument("rd sweep needs at least one checkpoint".into()))?;
    if ckpts.iter().any(|c| c.config() != first.config()) {
        return Err(Error::Versioning(
            "sweep checkpoints use different model configurations".into(),
        ));
    }
    let mut points = Vec::with_capacity(ckpts.len());
    for c in ckpts {
        let summary = evaluate(c, scenes, denom)?;
        log::info!(
            "lambda {}: {:.5} bpp, AP {:.3}, task loss {:.4}",
            c.lambda,
            summary.mean_bpp,
            summary.ap,
            summary.mean_distortion
        );
        points.push(SweepPoint {
            lambda: c.lambda,
            lambda_index: c.lambda_index,
            summary,
        });
    }
    let curve = RDCurve::from_unsorted(
        points
            .iter()
            .map(|p| RDPoint::new(p.lambda.to_string(), p.summary.mean_bpp, p.summary.ap))
            .collect(),
    )?;
    Ok(SweepResult { points, curve })
}

/// Parameters and multiply-accumulates per stereo pair.
pub fn model_stats(ckpt: &Checkpoint) -> Cost {
    ckpt.model.stats()
}

/// Paired curves of the joint transform and the separate-branch baseline
/// trained under one configuration.
#[derive(Debug, Clone)]
pub struct AblationReport {
    pub smfc: SweepResult,
    pub baseline: SweepResult,
    pub smfc_cost: Cost,
    pub baseline_cost: Cost,
    /// Rate change of the joint transform against the baseline, or why it
    /// is undefined for these curves.
    pub bd_rate: std::result::Result<f64, String>,
    pub bd_metric: std::result::Result<f64, String>,
    pub text: String,
}

/// Trains both variants over `lambdas` and compares them on held-out scenes.
pub fn run_ablation(cfg: &TrainConfig, lambdas: &[f64]) -> Result<(AblationReport, [Vec<TrainRun>; 2])> {
    let scenes = held_out_scenes(cfg)?;
    let mut runs = Vec::new();
    let mut sweeps = Vec::new();
    for variant in [Variant::Smfc, Variant::Baseline] {
        let mut c = cfg.clone();
        c.model.smfc.variant = variant;
        let r = run_sweep(&c, lambdas)?;
        let ckpts: Vec<Checkpoint> = r.iter().map(|t| t.checkpoint.clone()).collect();
        sweeps.push(run_rd_sweep(&ckpts, &scenes, BppDenominator::Both)?);
        runs.push(r);
    }
    let baseline_runs = runs.pop().expect("two variants");
    let smfc_runs = runs.pop().expect("two variants");
    let baseline = sweeps.pop().expect("two variants");
    let smfc = sweeps.pop().expect("two variants");
    let smfc_cost = model_stats(&smfc_runs[0].checkpoint);
    let baseline_cost = model_stats(&baseline_runs[0].checkpoint);
    let report = ablation_report(smfc, baseline, smfc_cost, baseline_cost);
    Ok((report, [smfc_runs, baseline_runs]))
}

/// Assembles the comparison and its text form from evaluated sweeps.
pub fn ablation_report(
    smfc: SweepResult,
    baseline: SweepResult,
    smfc_cost: Cost,
    baseline_cost: Cost,
) -> AblationReport {
    let bd_rate = bd_rate(&baseline.curve, &smfc.curve).map_err(|e| e.to_string());
    let bd_metric = bd_metric(&baseline.curve, &smfc.curve).map_err(|e| e.to_string());
    let mut t = String::new();
    let _ = writeln!(
        t,
        "Ablation: joint multi-scale transform (smfc) vs separate per-scale branches (baseline)"
    );
    let _ = writeln!(t);
    let _ = writeln!(t, "{:<10} {:>12} {:>16}", "variant", "params", "MACs/pair");
    for (name, c) in [("smfc", smfc_cost), ("baseline", baseline_cost)] {
        let _ = writeln!(t, "{:<10} {:>12} {:>16}", name, c.params, c.macs);
    }
    for (name, s) in [("smfc", &smfc), ("baseline", &baseline)] {
        let _ = writeln!(t);
        let _ = writeln!(t, "curve {name}");
        let _ = writeln!(t, "{:>8} {:>12} {:>10} {:>10}", "lambda", "bpp", "AP", "task");
        for p in &s.points {
            let _ = writeln!(
                t,
                "{:>8} {:>12.6} {:>10.4} {:>10.4}",
                p.lambda, p.summary.mean_bpp, p.summary.ap, p.summary.mean_distortion
            );
        }
    }
    let _ = writeln!(t);
    let fmt = |r: &std::result::Result<f64, String>, unit: &str| match r {
        Ok(v) => format!("{v:+.6}{unit}"),
        Err(e) => format!("undefined ({e})"),
    };
    let _ = writeln!(t, "BD-rate smfc vs baseline: {}", fmt(&bd_rate, "%"));
    let _ = writeln!(t, "BD-AP   smfc vs baseline: {}", fmt(&bd_metric, ""));
    AblationReport {
        smfc,
        baseline,
        smfc_cost,
        baseline_cost,
        bd_rate,
        bd_metric,
        text: t,
    }
}
