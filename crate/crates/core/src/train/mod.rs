//! Rate-distortion objective, the three-phase schedule and weight files.

mod checkpoint;
mod config;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{Checkpoint, TrainCursor, MAGIC as WEIGHTS_MAGIC, TRAIN_TENSOR, VERSION as WEIGHTS_VERSION};
pub use config::{TrainConfig, LAMBDA_SWEEP};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::smfc::{quantize, Levels, QuantMode};
use crate::task::{generate_scene, task_distortion, SyntheticScene, TaskTargets};
use crate::tensor::{cosine_lr, Adam, AdamConfig, Graph, Real, Tensor, Var};

/// Parameter-name prefixes trained in the first phase and frozen in the second.
pub const TASK_PREFIXES: [&str; 2] = ["extractor.", "head."];

/// `lambda · distortion + left rate + right rate` on plain numbers.
pub fn rd_loss_value(distortion: f64, rate_left: f64, rate_right: f64, lambda: f64) -> Result<f64> {
    check_terms(distortion, rate_left, rate_right, lambda)?;
    Ok(lambda * distortion + rate_left + rate_right)
}

/// Recorded form of [`rd_loss_value`]; the rates are scalar bits-per-pixel.
pub fn rd_loss<T: Real>(g: &Graph<T>, distortion: Var, rate_left: Var, rate_right: Var, lambda: f64) -> Result<Var> {
    let item = |v: Var| g.value(v).item().map(|x| x.as_f64());
    check_terms(item(distortion)?, item(rate_left)?, item(rate_right)?, lambda)?;
    let d = g.scale(distortion, lambda);
    let s = g.add(d, rate_left)?;
    g.add(s, rate_right)
}

fn check_terms(d: f64, rl: f64, rr: f64, lambda: f64) -> Result<()> {
    if ![d, rl, rr, lambda].iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!(
            "nonfinite loss term: distortion {d}, rates {rl} / {rr}, lambda {lambda}"
        )));
    }
    if rl < 0.0 || rr < 0.0 || lambda < 0.0 {
        return Err(Error::Argument(format!(
            "rates and lambda must be non-negative, got {rl}, {rr}, {lambda}"
        )));
    }
    Ok(())
}

/// Generated scenes with their supervision, indexed by scene number.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<SyntheticScene>,
    pub targets: Vec<TaskTargets>,
}

/// Stacked images and targets of several scenes.
#[derive(Debug, Clone)]
pub struct Batch {
    pub left: Tensor,
    pub right: Tensor,
    pub targets: TaskTargets,
}

impl Dataset {
    /// Scene `i` is generated from `data_seed + i`; order never depends on
    /// thread scheduling.
    pub fn generate(cfg: &TrainConfig) -> Result<Self> {
        let items: Vec<(SyntheticScene, TaskTargets)> = (0..cfg.scenes)
            .into_par_iter()
            .map(|i| {
                let s = generate_scene(cfg.data_seed.wrapping_add(i as u64), &cfg.scene)?;
                let t = TaskTargets::from_scene(&s, &cfg.model.smfc, &cfg.model.head)?;
                Ok((s, t))
            })
            .collect::<Result<_>>()?;
        let (scenes, targets) = items.into_iter().unzip();
        Ok(Self { scenes, targets })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let left: Vec<&Tensor> = idx.iter().map(|&i| &self.scenes[i].pair.left).collect();
        let right: Vec<&Tensor> = idx.iter().map(|&i| &self.scenes[i].pair.right).collect();
        let t: Vec<&TaskTargets> = idx.iter().map(|&i| &self.targets[i]).collect();
        Ok(Batch {
            left: Tensor::stack_batch(&left)?,
            right: Tensor::stack_batch(&right)?,
            targets: TaskTargets::stack(&t)?,
        })
    }
}

/// Batch means of one epoch. `bpp` counts both views' pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub phase: u8,
    pub epoch: usize,
    pub loss: f64,
    pub distortion: f64,
    pub bpp: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Scalar handles of one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct RdVars {
    pub loss: Var,
    pub distortion: Var,
    /// Left and right rate, bits per pixel of one view.
    pub rates: (Var, Var),
}

/// Full pass: features, joint transform, quantization, rate under the
/// prior, reconstruction, head and the weighted objective.
#[allow(clippy::too_many_arguments)]
pub fn rd_forward<T: Real>(
    model: &Model<T>,
    g: &Graph<T>,
    left: &Tensor<T>,
    right: &Tensor<T>,
    targets: &TaskTargets<T>,
    lambda: f64,
    mode: QuantMode,
    rng: &mut ChaCha8Rng,
) -> Result<RdVars> {
    let [n, _, h, w] = left.dims4()?;
    let s = &model.store;
    let (fl, fr) = model.extract(g, left, right)?;
    let (cl, cr) = model.codec.encode(g, s, &fl, &fr)?;
    let ql = quantize(g, cl, mode, rng)?;
    let qr = quantize(g, cr, mode, rng)?;
    let per_px = 1.0 / (n * h * w) as f64;
    let rl = g.scale(model.prior.bits(g, s, ql)?, per_px);
    let rr = g.scale(model.prior.bits(g, s, qr)?, per_px);
    let recon = model.codec.decode(g, s, (ql, qr))?;
    let pred = model.head_forward(g, &recon)?;
    let d = task_distortion(g, &pred, targets)?.total;
    let loss = rd_loss(g, d, rl, rr, lambda)?;
    Ok(RdVars {
        loss,
        distortion: d,
        rates: (rl, rr),
    })
}

/// Task loss with the head reading uncompressed features.
pub fn task_forward<T: Real>(
    model: &Model<T>,
    g: &Graph<T>,
    left: &Tensor<T>,
    right: &Tensor<T>,
    targets: &TaskTargets<T>,
) -> Result<Var> {
    let feats: (Levels, Levels) = model.extract(g, left, right)?;
    let pred = model.head_forward(g, &feats)?;
    Ok(task_distortion(g, &pred, targets)?.total)
}

fn phase_rng(seed: u64, phase: u8) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (phase as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn batches(train: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn abort(cfg: &TrainConfig, model: &Model, phase: u8, epoch: usize, step: usize, what: String) -> Error {
    let mut msg = format!("{what} (phase {phase}, epoch {epoch}, batch {step})");
    if let Some(path) = &cfg.snapshot {
        let mut c = Checkpoint::from_model(model.clone());
        c.lambda = cfg.lambda;
        c.lambda_index = cfg.lambda_index;
        c.cursor = TrainCursor {
            phase,
            epoch: epoch as u32,
        };
        match c.save(path) {
            Ok(()) => msg.push_str(&format!("; last finite state written to {}", path.display())),
            Err(e) => msg.push_str(&format!("; snapshot failed: {e}")),
        }
    }
    Error::Numeric(msg)
}

/// First phase: extractor and head on the task loss alone, every codec
/// and prior parameter frozen. Independent of `lambda`.
pub fn pretrain(cfg: &TrainConfig, data: &Dataset) -> Result<(Model, Vec<EpochStats>)> {
    cfg.validate()?;
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let (train, _) = cfg.split();
    let train: Vec<usize> = train.collect();
    let mut rng = phase_rng(cfg.seed, 1);
    model.store.set_frozen("", true);
    for p in TASK_PREFIXES {
        model.store.set_frozen(p, false);
    }
    let mut adam = Adam::new(&model.store, AdamConfig::default());
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs[0] {
        let mut sum = 0.0;
        let plan = batches(&train, cfg.batch_size, &mut rng);
        for (step, idx) in plan.iter().enumerate() {
            let b = data.batch(idx)?;
            let g = Graph::new();
            let loss = task_forward(&model, &g, &b.left, &b.right, &b.targets)?;
            let v = g.value(loss).item()? as f64;
            if !v.is_finite() {
                return Err(abort(cfg, &model, 1, epoch, step, format!("task loss became {v}")));
            }
            sum += v;
            g.backward(loss, &mut model.store)?;
            adam.step(&mut model.store, cfg.lr_pretrain)?;
        }
        let mean = sum / plan.len() as f64;
        log::info!("phase 1 epoch {}: task loss {mean:.4}", epoch + 1);
        history.push(EpochStats {
            phase: 1,
            epoch,
            loss: mean,
            distortion: mean,
            bpp: 0.0,
        });
    }
    model.store.set_frozen("", false);
    Ok((model, history))
}

/// Second and third phases starting from a pretrained model: codec and
/// prior with the task modules frozen, then everything jointly. The
/// learning rate follows one cosine curve across both phases.
pub fn train_codec(
    cfg: &TrainConfig,
    data: &Dataset,
    mut model: Model,
    mut history: Vec<EpochStats>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let (train, _) = cfg.split();
    let train: Vec<usize> = train.collect();
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs[1] + cfg.epochs[2]) * per_epoch;
    let mut adam = Adam::new(&model.store, AdamConfig::default());
    let mut shuffle = phase_rng(cfg.seed, 2);
    let mut noise = phase_rng(cfg.seed, 4);
    let mut t = 0usize;
    let mut cursor = TrainCursor::default();
    for phase in [2u8, 3] {
        let frozen = phase == 2;
        for p in TASK_PREFIXES {
            model.store.set_frozen(p, frozen);
        }
        for epoch in 0..cfg.epochs[phase as usize - 1] {
            let (mut sl, mut sd, mut sb) = (0.0, 0.0, 0.0);
            let plan = batches(&train, cfg.batch_size, &mut shuffle);
            for (step, idx) in plan.iter().enumerate() {
                let b = data.batch(idx)?;
                let g = Graph::new();
                let vars = rd_forward(
                    &model,
                    &g,
                    &b.left,
                    &b.right,
                    &b.targets,
                    cfg.lambda,
                    QuantMode::Noise,
                    &mut noise,
                )
                .map_err(|e| match e {
                    Error::Numeric(m) => abort(cfg, &model, phase, epoch, step, m),
                    other => other,
                })?;
                let item = |v: Var| g.value(v).item().map(|x| x as f64);
                let loss = item(vars.loss)?;
                if !loss.is_finite() {
                    return Err(abort(cfg, &model, phase, epoch, step, format!("loss became {loss}")));
                }
                sl += loss;
                sd += item(vars.distortion)?;
                sb += (item(vars.rates.0)? + item(vars.rates.1)?) / 2.0;
                g.backward(vars.loss, &mut model.store)?;
                adam.step(&mut model.store, cosine_lr(cfg.lr, cfg.lr_final, t, total))?;
                t += 1;
            }
            let n = plan.len() as f64;
            let stats = EpochStats {
                phase,
                epoch,
                loss: sl / n,
                distortion: sd / n,
                bpp: sb / n,
            };
            log::info!(
                "lambda {} phase {phase} epoch {}: loss {:.4} task {:.4} bpp {:.4}",
                cfg.lambda,
                epoch + 1,
                stats.loss,
                stats.distortion,
                stats.bpp
            );
            history.push(stats);
            cursor = TrainCursor {
                phase,
                epoch: epoch as u32 + 1,
            };
        }
    }
    model.store.set_frozen("", false);
    Ok(TrainRun {
        checkpoint: Checkpoint {
            model,
            optimizer: Some(adam),
            lambda: cfg.lambda,
            lambda_index: cfg.lambda_index,
            cursor,
        },
        history,
    })
}

/// All three phases for one `lambda`.
pub fn run_training(cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let data = Dataset::generate(cfg)?;
    let (model, history) = pretrain(cfg, &data)?;
    train_codec(cfg, &data, model, history)
}

/// One run per `lambda`, sharing the lambda-independent first phase. Each
/// result equals `run_training` with that lambda. Indices come from
/// [`LAMBDA_SWEEP`] when the value is listed there, else the position.
pub fn run_sweep(cfg: &TrainConfig, lambdas: &[f64]) -> Result<Vec<TrainRun>> {
    cfg.validate()?;
    let data = Dataset::generate(cfg)?;
    let (model, history) = pretrain(cfg, &data)?;
    lambdas
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let index = LAMBDA_SWEEP.iter().position(|&s| s == l).unwrap_or(i) as u8;
            let c = cfg.clone().with_lambda(l, index);
            train_codec(&c, &data, model.clone(), history.clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: [1, 1, 1],
            scenes: 12,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn loss_examples() {
        assert!((rd_loss_value(0.3, 0.1, 0.2, 1.0).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(rd_loss_value(0.3, 0.1, 0.2, 0.0).unwrap(), 0.1 + 0.2);
        assert!(matches!(rd_loss_value(f64::NAN, 0.1, 0.2, 1.0), Err(Error::Numeric(_))));
        assert!(matches!(
            rd_loss_value(0.3, f64::INFINITY, 0.2, 1.0),
            Err(Error::Numeric(_))
        ));
        let g = Graph::<f64>::new();
        let v = |x| g.input(Tensor::scalar(x));
        let l = rd_loss(&g, v(0.3), v(0.1), v(0.2), 1.0).unwrap();
        assert!((g.value(l).item().unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn phase_two_leaves_task_modules_untouched() {
        let cfg = TrainConfig {
            epochs: [1, 1, 0],
            ..tiny()
        };
        let data = Dataset::generate(&cfg).unwrap();
        let (model, hist) = pretrain(&cfg, &data).unwrap();
        let run = train_codec(&cfg, &data, model.clone(), hist).unwrap();
        let after = &run.checkpoint.model.store;
        let mut codec_moved = false;
        for ((_, a), (_, b)) in model.store.iter().zip(after.iter()) {
            if TASK_PREFIXES.iter().any(|p| a.name.starts_with(p)) {
                assert_eq!(a.value, b.value, "{} moved", a.name);
            } else {
                codec_moved |= a.value != b.value;
            }
        }
        assert!(codec_moved);
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = tiny();
        let a = run_training(&cfg).unwrap();
        let b = run_training(&cfg).unwrap();
        assert_eq!(a.checkpoint.model.hash(), b.checkpoint.model.hash());
        let sweep = run_sweep(&cfg, &[cfg.lambda]).unwrap();
        assert_eq!(sweep[0].checkpoint.model.hash(), a.checkpoint.model.hash());
        assert_eq!(a.history.len(), 3);
        assert_eq!(a.checkpoint.cursor, TrainCursor { phase: 3, epoch: 1 });
    }

    #[test]
    fn nonfinite_loss_aborts_with_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let snap = dir.path().join("diag.smfw");
        let cfg = TrainConfig {
            snapshot: Some(snap.clone()),
            ..tiny()
        };
        let data = Dataset::generate(&cfg).unwrap();
        let (mut model, hist) = pretrain(&cfg, &data).unwrap();
        let id = model.store.id("smfc.seu0.conv0.weight").unwrap();
        model.store.get_mut(id).value.data_mut()[0] = f32::NAN;
        let e = train_codec(&cfg, &data, model, hist).unwrap_err();
        assert!(matches!(e, Error::Numeric(ref m) if m.contains("phase 2")), "{e}");
        assert!(snap.exists());
    }
}
