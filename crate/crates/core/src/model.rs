//! The complete network: extractor, joint transform, prior and task head
//! sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::entropy::{EntropyCodec, FactorizedPrior, SYMBOL_MAX, SYMBOL_MIN};
use crate::error::{Error, Result};
use crate::nn::Cost;
use crate::smfc::{
    Codec, CrossViewKind, Extractor, FeaturePyramid, Latent, LatentSet, Levels, SmfcConfig, StereoPair, Variant,
    ViewPair,
};
use crate::task::{Head, HeadConfig, PredVars, TaskPrediction};
use crate::tensor::{Graph, ParamStore, Real, Tensor};

/// Version of the numeric config encoding stored in checkpoints.
const CONFIG_ENCODING: f32 = 1.0;
/// Name of the reserved tensor that carries the config in checkpoints.
pub const CONFIG_TENSOR: &str = "meta.config";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub smfc: SmfcConfig,
    pub head: HeadConfig,
    /// Input size used for cost reporting.
    pub width: usize,
    pub height: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            smfc: SmfcConfig::default(),
            head: HeadConfig::default(),
            width: 256,
            height: 64,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            smfc: SmfcConfig::desk(),
            head: HeadConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.smfc.validate()?;
        self.head.validate()?;
        self.smfc.check_dims(self.height, self.width)
    }

    /// Flat numeric encoding (every field is a small integer, exact in f32).
    pub fn to_values(&self) -> Vec<f32> {
        let s = &self.smfc;
        let mut v = vec![CONFIG_ENCODING, s.stem_channels as f32];
        v.extend(s.channels.iter().map(|&x| x as f32));
        v.extend(s.latent_channels.iter().map(|&x| x as f32));
        v.extend(s.strides.iter().map(|&x| x as f32));
        v.extend(s.stage_factors.iter().map(|&x| x as f32));
        v.push(s.cross_view.code() as f32);
        v.push(s.variant.code() as f32);
        v.push(self.head.hidden as f32);
        v.push(self.head.disparity_bins as f32);
        v.push(self.head.bin_width as f32);
        v.push(self.width as f32);
        v.push(self.height as f32);
        v
    }

    pub fn from_values(v: &[f32]) -> Result<Self> {
        if v.first() != Some(&CONFIG_ENCODING) {
            return Err(Error::Versioning(format!(
                "config encoding {:?}, expected {CONFIG_ENCODING}",
                v.first()
            )));
        }
        if v.len() != 21 {
            return Err(Error::Corruption(format!(
                "config record has {} fields, expected 21",
                v.len()
            )));
        }
        let u = |i: usize| -> Result<usize> {
            let x = v[i];
            if x < 0.0 || x.fract() != 0.0 || !x.is_finite() {
                return Err(Error::Corruption(format!("config field {i} = {x} is not a count")));
            }
            Ok(x as usize)
        };
        let tri = |i: usize| -> Result<[usize; 3]> { Ok([u(i)?, u(i + 1)?, u(i + 2)?]) };
        let cfg = Self {
            smfc: SmfcConfig {
                stem_channels: u(1)?,
                channels: tri(2)?,
                latent_channels: tri(5)?,
                strides: tri(8)?,
                stage_factors: tri(11)?,
                cross_view: CrossViewKind::from_code(u(14)? as u8)?,
                variant: Variant::from_code(u(15)? as u8)?,
            },
            head: HeadConfig {
                hidden: u(16)?,
                disparity_bins: u(17)?,
                bin_width: u(18)? as u32,
            },
            width: u(19)?,
            height: u(20)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_tensor(&self) -> Tensor {
        let v = self.to_values();
        Tensor::new(&[v.len()], v).expect("1-d")
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub extractor: Extractor,
    pub codec: Codec,
    pub prior: FactorizedPrior,
    pub head: Head,
}

/// Graph handles of a full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub features: (Levels, Levels),
    pub latents: ViewPair,
    pub quantized: ViewPair,
    pub recon: (Levels, Levels),
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialized model. Parameters are drawn in a fixed
    /// order from a ChaCha8 stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let extractor = Extractor::new(&mut store, &config.smfc, &mut rng)?;
        let codec = Codec::new(&mut store, &config.smfc, &mut rng)?;
        let prior = FactorizedPrior::new(&mut store, "prior", config.smfc.latent_channels[2], &mut rng)?;
        let head = Head::new(&mut store, &config.smfc, &config.head, &mut rng)?;
        Ok(Self {
            config,
            store,
            extractor,
            codec,
            prior,
            head,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            extractor: self.extractor.clone(),
            codec: self.codec.clone(),
            prior: self.prior.clone(),
            head: self.head.clone(),
        }
    }

    /// Truncated SHA-256 over the config record and every parameter's name,
    /// dims and little-endian f32 bytes, in registration order.
    pub fn hash(&self) -> [u8; 16] {
        let mut h = Sha256::new();
        let cfg = self.config.to_tensor();
        hash_tensor(&mut h, CONFIG_TENSOR, cfg.shape(), cfg.data().iter().copied());
        for (_, p) in self.store.iter() {
            hash_tensor(
                &mut h,
                &p.name,
                p.value.shape(),
                p.value.data().iter().map(|v| v.as_f32()),
            );
        }
        h.finalize()[..16].try_into().expect("16 bytes")
    }

    pub fn extract(&self, g: &Graph<T>, left: &Tensor<T>, right: &Tensor<T>) -> Result<(Levels, Levels)> {
        let [_, _, h, w] = left.dims4()?;
        self.config.smfc.check_dims(h, w)?;
        let l = self.extractor.forward(g, &self.store, g.input(left.clone()))?;
        let r = self.extractor.forward(g, &self.store, g.input(right.clone()))?;
        Ok((l, r))
    }

    pub fn head_forward(&self, g: &Graph<T>, recon: &(Levels, Levels)) -> Result<PredVars> {
        self.head.forward(g, &self.store, &recon.0, &recon.1)
    }

    /// The entropy coder for this model's current prior.
    pub fn entropy_codec(&self) -> EntropyCodec {
        EntropyCodec::from_prior(&self.prior.tensors(&self.store), self.hash())
    }

    /// Rounds a pair's latents to codable integers. Returns the set and the
    /// number of values clamped into the symbol range.
    pub fn encode_pair(&self, pair: &StereoPair<T>) -> Result<(LatentSet, usize)> {
        let g = Graph::new();
        let (l, r) = self.extract(&g, &pair.left, &pair.right)?;
        let (cl, cr) = self.codec.encode(&g, &self.store, &l, &r)?;
        let (left, nl) = Latent::from_tensor(&g.value(cl), SYMBOL_MIN, SYMBOL_MAX)?;
        let (right, nr) = Latent::from_tensor(&g.value(cr), SYMBOL_MIN, SYMBOL_MAX)?;
        if nl + nr > 0 {
            log::warn!("{} latent values clamped into [{SYMBOL_MIN}, {SYMBOL_MAX}]", nl + nr);
        }
        Ok((
            LatentSet {
                left,
                right,
                model_hash: self.hash(),
            },
            nl + nr,
        ))
    }

    /// Reconstructs both pyramids from integer latents.
    pub fn decode_latents(&self, latents: &LatentSet) -> Result<FeaturePyramid<T>> {
        if latents.model_hash != self.hash() {
            return Err(Error::Versioning(
                "latents were produced under a different model".into(),
            ));
        }
        let g = Graph::new();
        let cl = g.input(latents.left.to_tensor());
        let cr = g.input(latents.right.to_tensor());
        let (l, r) = self.codec.decode(&g, &self.store, (cl, cr))?;
        let get = |v: &Levels| v.map(|x| g.value(x).clone());
        Ok(FeaturePyramid {
            left: get(&l),
            right: get(&r),
        })
    }

    /// Runs the head on concrete (reconstructed) features.
    pub fn predict(&self, pyr: &FeaturePyramid<T>) -> Result<TaskPrediction> {
        let g = Graph::new();
        let l = pyr.left.clone().map(|t| g.input(t));
        let r = pyr.right.clone().map(|t| g.input(t));
        let p = self.head.forward(&g, &self.store, &l, &r)?;
        let f = |v| g.value(v).cast::<f32>();
        Ok(TaskPrediction {
            occupancy: f(p.occupancy),
            boxes: f(p.boxes),
            disparity: f(p.disparity),
        })
    }

    /// Parameter count and multiply-accumulates for one stereo pair at the
    /// configured input size.
    pub fn stats(&self) -> Cost {
        let (h, w) = (self.config.height, self.config.width);
        let mut c = Cost::default();
        self.extractor.cost(&mut c, h, w);
        self.codec.cost(&mut c, h, w);
        self.head.cost(&mut c, &self.config.smfc, h, w);
        Cost {
            params: self.store.numel() as u64,
            macs: c.macs,
        }
    }
}

fn hash_tensor(h: &mut Sha256, name: &str, dims: &[usize], data: impl Iterator<Item = f32>) {
    h.update((name.len() as u16).to_le_bytes());
    h.update(name.as_bytes());
    h.update([dims.len() as u8]);
    for &d in dims {
        h.update((d as u32).to_le_bytes());
    }
    for v in data {
        h.update(v.to_le_bytes());
    }
}
