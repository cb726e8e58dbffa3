use crate::error::{shape_err, Error, Result};
use crate::tensor::{round_half_even, Real, Tensor};

/// One view's integer latent, `[C, H, W]`, channel-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Latent {
    pub shape: [usize; 3],
    pub data: Vec<i32>,
}

impl Latent {
    pub fn new(shape: [usize; 3], data: Vec<i32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err!(
                "latent shape {:?} needs {} symbols, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Symbols of channel `c`.
    pub fn channel(&self, c: usize) -> &[i32] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Rounds a `[1, C, H, W]` tensor, clamping into `[min, max]`. Returns
    /// the latent and how many elements had to be clamped.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, min: i32, max: i32) -> Result<(Self, usize)> {
        let [n, c, h, w] = t.dims4()?;
        if n != 1 {
            return Err(shape_err!("latent tensor must have batch 1, got {:?}", t.shape()));
        }
        let mut clamped = 0;
        let data = t
            .data()
            .iter()
            .map(|&v| {
                let r = round_half_even(v.as_f64());
                if r < min as f64 || r > max as f64 || r.is_nan() {
                    clamped += 1;
                }
                if r.is_nan() {
                    0
                } else {
                    r.clamp(min as f64, max as f64) as i32
                }
            })
            .collect();
        Ok((Self { shape: [c, h, w], data }, clamped))
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let [c, h, w] = self.shape;
        Tensor::new(&[1, c, h, w], self.data.iter().map(|&v| T::lit(v as f64)).collect()).expect("shape checked")
    }
}

/// Magic of the raw latent dump written by the decoder.
pub const DUMP_MAGIC: &[u8; 4] = b"SMFL";

impl Latent {
    /// Raw dump: magic, `C`, `H`, `W` as u32, then every symbol as i32, all
    /// little-endian.
    pub fn to_dump(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(16 + 4 * self.data.len());
        b.extend_from_slice(DUMP_MAGIC);
        for &d in &self.shape {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_dump(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != DUMP_MAGIC {
            return Err(Error::Corruption("not a latent dump".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        let shape = [word(1) as usize, word(2) as usize, word(3) as usize];
        let n = shape.iter().product::<usize>();
        if bytes.len() != 16 + 4 * n {
            return Err(Error::Truncation(format!(
                "latent dump of shape {shape:?} has {} bytes",
                bytes.len()
            )));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(shape, data)
    }
}

/// Both views' coded latents plus the hash of the model that produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentSet {
    pub left: Latent,
    pub right: Latent,
    pub model_hash: [u8; 16],
}

impl LatentSet {
    pub fn views(&self) -> [&Latent; 2] {
        [&self.left, &self.right]
    }

    pub fn symbol_count(&self) -> usize {
        self.left.len() + self.right.len()
    }
}
