use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::smfc::{CrossViewKind, Variant};
use crate::task::SceneConfig;

/// The rate-weight sweep used for published curves.
pub const LAMBDA_SWEEP: [f64; 6] = [0.5, 1.0, 4.0, 16.0, 64.0, 256.0];

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Position of `lambda` in its sweep; carried into frame headers.
    pub lambda_index: u8,
    /// Epochs of task pretraining, codec-only training and joint training.
    pub epochs: [usize; 3],
    pub batch_size: usize,
    /// Constant rate of the pretraining phase.
    pub lr_pretrain: f64,
    /// Cosine schedule from `lr` to `lr_final` across the last two phases.
    pub lr: f64,
    pub lr_final: f64,
    /// Seeds initialization, shuffling and quantization noise.
    pub seed: u64,
    /// Number of generated scenes; the last tenth is held out.
    pub scenes: usize,
    /// Seed of the first scene; scene `i` uses `data_seed + i`.
    pub data_seed: u64,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    /// Where to write the last finite state if the loss blows up.
    pub snapshot: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small model and schedule that trains on one core in minutes.
    pub fn desk() -> Self {
        Self {
            lambda: 64.0,
            lambda_index: 4,
            epochs: [5, 3, 24],
            batch_size: 4,
            lr_pretrain: 2e-3,
            lr: 1e-3,
            lr_final: 5e-5,
            seed: 0,
            scenes: 512,
            data_seed: 0,
            scene: SceneConfig::default(),
            model: ModelConfig::desk(),
            snapshot: None,
        }
    }

    /// Full-width model on the long schedule.
    pub fn full() -> Self {
        Self {
            epochs: [80, 20, 80],
            lr_pretrain: 1e-4,
            lr: 1e-4,
            lr_final: 5e-6,
            model: ModelConfig::default(),
            ..Self::desk()
        }
    }

    pub fn with_lambda(mut self, lambda: f64, index: u8) -> Self {
        self.lambda = lambda;
        self.lambda_index = index;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return bad("lambda must be positive and finite");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        for lr in [self.lr_pretrain, self.lr, self.lr_final] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad("learning rates must be finite and non-negative");
            }
        }
        if self.scenes < 2 {
            return bad("need at least 2 scenes for a train/held-out split");
        }
        self.scene.validate()?;
        self.model.validate()?;
        if (self.scene.width, self.scene.height) != (self.model.width, self.model.height) {
            return bad("scene and model dimensions differ");
        }
        if self.scene.grid_stride != self.model.smfc.strides[1] {
            return bad("scene grid stride must equal the detection level stride");
        }
        Ok(())
    }

    /// Index ranges of the training and held-out scenes.
    pub fn split(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let held = (self.scenes / 10).max(1);
        let cut = self.scenes - held;
        (0..cut, cut..self.scenes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses `key = value` lines. `#` starts a comment. A `preset` line is
    /// applied first wherever it appears; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
            entries.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::desk();
        for (n, k, v) in &entries {
            if k == "preset" {
                cfg = match v.as_str() {
                    "desk" => Self::desk(),
                    "full" => Self::full(),
                    _ => return Err(Error::Parse(format!("line {n}: unknown preset {v:?}"))),
                };
            }
        }
        for (n, k, v) in &entries {
            cfg.set(k, v).map_err(|e| match e {
                Error::Parse(m) => Error::Parse(format!("line {n}: {m}")),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "preset" => {}
            "lambda" => self.lambda = num(key, v)?,
            "lambda_index" => self.lambda_index = num(key, v)?,
            "epochs_pretrain" => self.epochs[0] = num(key, v)?,
            "epochs_codec" => self.epochs[1] = num(key, v)?,
            "epochs_joint" => self.epochs[2] = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr_pretrain" => self.lr_pretrain = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_final" => self.lr_final = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "scenes" => self.scenes = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "snapshot" => self.snapshot = Some(PathBuf::from(v)),
            "width" => {
                self.scene.width = num(key, v)?;
                m.width = self.scene.width;
            }
            "height" => {
                self.scene.height = num(key, v)?;
                m.height = self.scene.height;
            }
            "min_objects" => self.scene.min_objects = num(key, v)?,
            "max_objects" => self.scene.max_objects = num(key, v)?,
            "disparity_min" => self.scene.disparity_min = num(key, v)?,
            "disparity_max" => self.scene.disparity_max = num(key, v)?,
            "variant" => m.smfc.variant = Variant::parse(v)?,
            "cross_view" => m.smfc.cross_view = CrossViewKind::parse(v)?,
            "stem_channels" => m.smfc.stem_channels = num(key, v)?,
            "channels" => m.smfc.channels = triple(key, v)?,
            "latent_channels" => m.smfc.latent_channels = triple(key, v)?,
            "strides" => {
                m.smfc.strides = triple(key, v)?;
                self.scene.grid_stride = m.smfc.strides[1];
            }
            "stage_factors" => m.smfc.stage_factors = triple(key, v)?,
            "head_hidden" => m.head.hidden = num(key, v)?,
            "disparity_bins" => m.head.disparity_bins = num(key, v)?,
            "bin_width" => m.head.bin_width = num(key, v)?,
            _ => return Err(Error::Parse(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Parse(format!("{key}: cannot parse {v:?}")))
}

fn triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v.split(',').map(|p| num(key, p.trim())).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Parse(format!("{key}: expected three comma-separated values")))
}
