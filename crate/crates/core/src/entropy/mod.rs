//! Probability modeling and lossless coding of the integer latents.

mod frame;
mod prior;
pub mod range_coder;
mod tables;

use rayon::prelude::*;

pub use frame::{CodedFrame, FrameMeta, MAGIC, SCALES, VERSION};
pub use prior::FactorizedPrior;
pub use tables::{CdfTables, ChannelTable, SYMBOL_COUNT, SYMBOL_MAX, SYMBOL_MIN};

use crate::error::{Error, Result};
use crate::smfc::{Latent, LatentSet};
use crate::tensor::prior_math::{self, PriorTensors};
use crate::tensor::{round_half_even, Real, Tensor};
use range_coder::{RangeDecoder, RangeEncoder};

/// Checks that every symbol of a `[C, H, W]` latent is codable.
fn check_range(latent: &Latent) -> Result<()> {
    let plane = latent.shape[1] * latent.shape[2];
    for (i, &s) in latent.data.iter().enumerate() {
        if !(SYMBOL_MIN..=SYMBOL_MAX).contains(&s) {
            return Err(Error::Range {
                channel: i / plane.max(1),
                value: s as i64,
                min: SYMBOL_MIN,
                max: SYMBOL_MAX,
            });
        }
    }
    Ok(())
}

/// Rate of a latent under the continuous prior: `-Σ log2 P(x)` with
/// `P(x) = cdf(x + ½) − cdf(x − ½)`, evaluated in `f64` at the rounded values.
pub fn estimate_rate<T: Real>(latent: &Tensor<T>, prior: &PriorTensors<'_, T>) -> Result<f64> {
    let [_, c, h, w] = latent.dims4()?;
    if c != prior.channels() {
        return Err(Error::Shape(format!(
            "latent has {c} channels, prior models {}",
            prior.channels()
        )));
    }
    let plane = h * w;
    let mut rounded = Vec::with_capacity(latent.len());
    for (i, &v) in latent.data().iter().enumerate() {
        let r = round_half_even(v.as_f64());
        if !(SYMBOL_MIN as f64..=SYMBOL_MAX as f64).contains(&r) {
            return Err(Error::Range {
                channel: (i / plane.max(1)) % c,
                value: if r.is_finite() { r as i64 } else { i64::MAX },
                min: SYMBOL_MIN,
                max: SYMBOL_MAX,
            });
        }
        rounded.push(r);
    }
    let owned: Vec<Tensor<f64>> = prior
        .matrices
        .iter()
        .chain(&prior.biases)
        .chain(&prior.factors)
        .map(|t| t.cast())
        .collect();
    let refs: Vec<&Tensor<f64>> = owned.iter().collect();
    let x = Tensor::new(latent.shape(), rounded)?;
    Ok(prior_math::bits_forward(&x, &PriorTensors::from_slice(&refs)))
}

/// Frozen coding tables plus the identity of the model they came from.
#[derive(Debug, Clone)]
pub struct EntropyCodec {
    tables: Option<CdfTables>,
    model_hash: [u8; 16],
}

impl EntropyCodec {
    pub fn new(model_hash: [u8; 16]) -> Self {
        Self {
            tables: None,
            model_hash,
        }
    }

    /// Codec with tables already built from `prior`.
    pub fn from_prior<T: Real>(prior: &PriorTensors<'_, T>, model_hash: [u8; 16]) -> Self {
        let mut c = Self::new(model_hash);
        c.build_cdf_tables(prior);
        c
    }

    pub fn build_cdf_tables<T: Real>(&mut self, prior: &PriorTensors<'_, T>) {
        self.tables = Some(CdfTables::build(prior));
    }

    pub fn set_tables(&mut self, tables: CdfTables) {
        self.tables = Some(tables);
    }

    pub fn tables(&self) -> Result<&CdfTables> {
        self.tables
            .as_ref()
            .ok_or_else(|| Error::State("CDF tables have not been built".into()))
    }

    pub fn model_hash(&self) -> [u8; 16] {
        self.model_hash
    }

    /// Ideal code length of a latent under the frozen tables.
    pub fn table_cross_entropy(&self, latent: &Latent) -> Result<f64> {
        let tables = self.tables()?;
        check_range(latent)?;
        self.check_channels(tables, latent)?;
        Ok((0..latent.shape[0])
            .map(|c| tables.cross_entropy(c, latent.channel(c)))
            .sum())
    }

    fn check_channels(&self, tables: &CdfTables, latent: &Latent) -> Result<()> {
        if !latent.is_empty() && latent.shape[0] != tables.channels.len() {
            return Err(Error::Shape(format!(
                "latent has {} channels, tables cover {}",
                latent.shape[0],
                tables.channels.len()
            )));
        }
        Ok(())
    }

    /// Range-codes one latent, channel-major. An empty latent gives an
    /// empty payload.
    pub fn encode_latent(&self, latent: &Latent) -> Result<Vec<u8>> {
        let tables = self.tables()?;
        check_range(latent)?;
        if latent.is_empty() {
            return Ok(Vec::new());
        }
        self.check_channels(tables, latent)?;
        let mut enc = RangeEncoder::new();
        for c in 0..latent.shape[0] {
            let t = &tables.channels[c];
            for &s in latent.channel(c) {
                let k = (s - SYMBOL_MIN) as usize;
                enc.encode(t.cum[k], t.freq(k));
            }
        }
        Ok(enc.finish())
    }

    pub fn decode_latent(&self, payload: &[u8], shape: [usize; 3]) -> Result<Latent> {
        let tables = self.tables()?;
        let n: usize = shape.iter().product();
        if n == 0 {
            if !payload.is_empty() {
                return Err(Error::Corruption("payload present for an empty latent".into()));
            }
            return Latent::new(shape, Vec::new());
        }
        if shape[0] != tables.channels.len() {
            return Err(Error::Versioning(format!(
                "frame latent has {} channels, model codes {}",
                shape[0],
                tables.channels.len()
            )));
        }
        let plane = shape[1] * shape[2];
        let mut dec = RangeDecoder::new(payload);
        let mut data = Vec::with_capacity(n);
        for c in 0..shape[0] {
            let cum = &tables.channels[c].cum;
            for _ in 0..plane {
                data.push(dec.decode(cum) as i32 + SYMBOL_MIN);
            }
        }
        if dec.position() < payload.len() {
            return Err(Error::Corruption(format!(
                "payload has {} unread bytes",
                payload.len() - dec.position()
            )));
        }
        Latent::new(shape, data)
    }

    pub fn encode_latents(&self, latents: &LatentSet, meta: FrameMeta) -> Result<CodedFrame> {
        let tables = self.tables()?;
        if latents.model_hash != self.model_hash {
            return Err(Error::Versioning("latents were produced by a different model".into()));
        }
        for l in latents.views() {
            check_range(l)?;
            self.check_channels(tables, l)?;
            if l.shape.iter().any(|&d| d > u16::MAX as usize) {
                return Err(Error::Shape(format!(
                    "latent shape {:?} exceeds 16-bit extents",
                    l.shape
                )));
            }
        }
        let payloads: Vec<Vec<u8>> = latents
            .views()
            .par_iter()
            .map(|l| self.encode_latent(l))
            .collect::<Result<_>>()?;
        let dim = |l: &Latent| l.shape.map(|d| d as u16);
        Ok(CodedFrame {
            meta,
            model_hash: self.model_hash,
            shapes: [dim(&latents.left), dim(&latents.right)],
            payloads: payloads.try_into().expect("two views"),
        })
    }

    /// Parses, verifies and decodes a serialized frame.
    pub fn decode_frame(&self, bytes: &[u8]) -> Result<(LatentSet, FrameMeta)> {
        let frame = CodedFrame::from_bytes(bytes)?;
        self.decode_coded(&frame)
    }

    pub fn decode_coded(&self, frame: &CodedFrame) -> Result<(LatentSet, FrameMeta)> {
        if frame.model_hash != self.model_hash {
            return Err(Error::Versioning(format!(
                "frame was coded for model {}, loaded model is {}",
                hex(&frame.model_hash),
                hex(&self.model_hash)
            )));
        }
        self.tables()?;
        let views: Vec<Latent> = (0..2)
            .into_par_iter()
            .map(|v| self.decode_latent(&frame.payloads[v], frame.shapes[v].map(usize::from)))
            .collect::<Result<_>>()?;
        let [left, right]: [Latent; 2] = views.try_into().expect("two views");
        Ok((
            LatentSet {
                left,
                right,
                model_hash: frame.model_hash,
            },
            frame.meta,
        ))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
