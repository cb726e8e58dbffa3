//! Stereo multi-scale feature coding: a toy pyramid extractor, the stereo
//! encoder/decoder units, and the two joint transforms (progressive merge
//! and the separate-branch baseline).
//!
//! Everything here records onto a [`Graph`]; the same code trains in `f32`
//! and is checked against finite differences in `f64`.

mod config;
mod latent;
mod units;

use rand::Rng;

pub use config::{stage_strides, CrossViewKind, SmfcConfig, Variant};
pub use latent::{Latent, LatentSet, DUMP_MAGIC};
pub use units::{CrossView, Sdu, Seu, ViewPair};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, Cost, LEAKY_SLOPE};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Three pyramid levels of one view, finest first.
pub type Levels = [Var; 3];

/// A rectified stereo pair, `[1, 3, H, W]` per view with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoPair<T: Real = f32> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
}

impl<T: Real> StereoPair<T> {
    pub fn new(left: Tensor<T>, right: Tensor<T>) -> Result<Self> {
        let [_, c, _, _] = left.dims4()?;
        if left.shape() != right.shape() || c != 3 {
            return Err(Error::Shape(format!(
                "stereo views must be equal 3-channel images, got {:?} and {:?}",
                left.shape(),
                right.shape()
            )));
        }
        Ok(Self { left, right })
    }

    /// `(height, width)` of each view.
    pub fn dims(&self) -> (usize, usize) {
        let s = self.left.shape();
        (s[2], s[3])
    }
}

/// Concrete per-view multi-scale features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T: Real = f32> {
    pub left: [Tensor<T>; 3],
    pub right: [Tensor<T>; 3],
}

impl<T: Real> FeaturePyramid<T> {
    pub fn shapes(&self) -> [[Vec<usize>; 3]; 2] {
        let s = |v: &[Tensor<T>; 3]| v.clone().map(|t| t.shape().to_vec());
        [s(&self.left), s(&self.right)]
    }
}

/// Shared-weight strided conv stack that taps features at the three
/// configured strides.
#[derive(Debug, Clone)]
pub struct Extractor {
    blocks: Vec<Conv2d>,
    taps: [usize; 3],
}

impl Extractor {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &SmfcConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut taps = [0; 3];
        let mut cin = 3;
        let mut stride = 1;
        for level in 0..3 {
            while stride < cfg.strides[level] {
                stride *= 2;
                let cout = if stride == cfg.strides[level] {
                    cfg.channels[level]
                } else if level == 0 {
                    cfg.stem_channels
                } else {
                    cfg.channels[level - 1]
                };
                let name = format!("extractor.block{}", blocks.len());
                blocks.push(Conv2d::new(store, &name, cin, cout, 3, 2, rng)?);
                cin = cout;
            }
            taps[level] = blocks.len() - 1;
        }
        Ok(Self { blocks, taps })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, image: Var) -> Result<Levels> {
        let mut out = [image; 3];
        let mut x = image;
        for (j, b) in self.blocks.iter().enumerate() {
            let y = b.forward(g, s, x)?;
            x = g.leaky_relu(y, LEAKY_SLOPE);
            for (level, &t) in self.taps.iter().enumerate() {
                if t == j {
                    out[level] = x;
                }
            }
        }
        Ok(out)
    }

    /// Cost of extracting both views of an `h × w` pair.
    pub fn cost(&self, c: &mut Cost, mut h: usize, mut w: usize) {
        for b in &self.blocks {
            (h, w) = c.conv(b, 2, h, w);
        }
    }
}

/// Progressive joint transform: three encoder units, each consuming the
/// previous stage's latent concatenated with the next pyramid level.
#[derive(Debug, Clone)]
pub struct SmfcCodec {
    cfg: SmfcConfig,
    seu: [Seu; 3],
    sdu: [Sdu; 3],
}

impl SmfcCodec {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &SmfcConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut seu = Vec::new();
        for i in 0..3 {
            seu.push(Seu::new(
                store,
                &format!("smfc.seu{i}"),
                cfg.stage_input_channels(i),
                cfg.latent_channels[i],
                cfg.stage_factors[i],
                cfg.cross_view,
                rng,
            )?);
        }
        let mut sdu = Vec::new();
        for i in 0..3 {
            sdu.push(Sdu::new(
                store,
                &format!("smfc.sdu{i}"),
                cfg.latent_channels[i],
                cfg.stage_input_channels(i),
                cfg.stage_factors[i],
                cfg.cross_view,
                rng,
            )?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            seu: seu.try_into().expect("three stages"),
            sdu: sdu.try_into().expect("three stages"),
        })
    }

    pub fn seu(&self, i: usize) -> &Seu {
        &self.seu[i]
    }

    pub fn sdu(&self, i: usize) -> &Sdu {
        &self.sdu[i]
    }

    /// Channel concat of a stage latent with the next pyramid level, with
    /// mismatches reported against the stage.
    fn merge<T: Real>(g: &Graph<T>, stage: usize, c: Var, f: Var) -> Result<Var> {
        g.concat_channels(c, f).map_err(|e| {
            Error::Config(format!(
                "stage {stage}: latent {:?} cannot be merged with pyramid level {:?} ({e})",
                g.shape(c),
                g.shape(f)
            ))
        })
    }

    pub fn encode<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, l: &Levels, r: &Levels) -> Result<ViewPair> {
        let c0 = self.seu[0].forward(g, s, (l[0], r[0]))?;
        let m1 = (Self::merge(g, 1, c0.0, l[1])?, Self::merge(g, 1, c0.1, r[1])?);
        let c01 = self.seu[1].forward(g, s, m1)?;
        let m2 = (Self::merge(g, 2, c01.0, l[2])?, Self::merge(g, 2, c01.1, r[2])?);
        self.seu[2].forward(g, s, m2)
    }

    pub fn decode<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, c: ViewPair) -> Result<(Levels, Levels)> {
        let lc = &self.cfg.latent_channels;
        let x2 = self.sdu[2].forward(g, s, c)?;
        let (c01l, f2l) = g.split_channels(x2.0, lc[1])?;
        let (c01r, f2r) = g.split_channels(x2.1, lc[1])?;
        let x1 = self.sdu[1].forward(g, s, (c01l, c01r))?;
        let (c0l, f1l) = g.split_channels(x1.0, lc[0])?;
        let (c0r, f1r) = g.split_channels(x1.1, lc[0])?;
        let (f0l, f0r) = self.sdu[0].forward(g, s, (c0l, c0r))?;
        Ok(([f0l, f1l, f2l], [f0r, f1r, f2r]))
    }

    fn cost(&self, c: &mut Cost, h: usize, w: usize) {
        let cfg = &self.cfg;
        let mut dims = [(0, 0); 3];
        for i in 0..3 {
            let (fh, fw) = (h / cfg.strides[i], w / cfg.strides[i]);
            dims[i] = (fh, fw);
            self.seu[i].cost(c, fh, fw);
        }
        for i in 0..3 {
            let f = cfg.stage_factors[i];
            self.sdu[i].cost(c, dims[i].0 / f, dims[i].1 / f);
        }
    }
}

/// Separate-branch transform: every pyramid level is downsampled to the
/// final latent resolution on its own and the three latents are
/// concatenated. The views never interact.
#[derive(Debug, Clone)]
pub struct BaselineCodec {
    cfg: SmfcConfig,
    branch_channels: [usize; 3],
    enc: [Vec<Conv2d>; 3],
    dec: [Vec<ConvTranspose2d>; 3],
}

impl BaselineCodec {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &SmfcConfig, rng: &mut impl Rng) -> Result<Self> {
        let bc = cfg.baseline_branch_channels();
        let mut enc: [Vec<Conv2d>; 3] = Default::default();
        let mut dec: [Vec<ConvTranspose2d>; 3] = Default::default();
        for i in 0..3 {
            let strides = stage_strides(cfg.divisor() / cfg.strides[i]);
            for (j, &st) in strides.iter().enumerate() {
                let ci = if j == 0 { cfg.channels[i] } else { bc[i] };
                enc[i].push(Conv2d::new(
                    store,
                    &format!("baseline.enc{i}.conv{j}"),
                    ci,
                    bc[i],
                    3,
                    st,
                    rng,
                )?);
            }
            let last = strides.len() - 1;
            for (j, &st) in strides.iter().enumerate() {
                let co = if j == last { cfg.channels[i] } else { bc[i] };
                dec[i].push(ConvTranspose2d::new(
                    store,
                    &format!("baseline.dec{i}.deconv{j}"),
                    bc[i],
                    co,
                    st,
                    rng,
                )?);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            branch_channels: bc,
            enc,
            dec,
        })
    }

    /// Latent slice `[start, start + len)` produced by pyramid level `i`.
    pub fn branch_range(&self, i: usize) -> (usize, usize) {
        let start = self.branch_channels[..i].iter().sum();
        (start, self.branch_channels[i])
    }

    fn encode_view<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, f: &Levels) -> Result<Var> {
        let mut parts = Vec::new();
        for (i, convs) in self.enc.iter().enumerate() {
            let mut x = f[i];
            for (j, c) in convs.iter().enumerate() {
                x = c.forward(g, s, x)?;
                if j + 1 < convs.len() {
                    x = g.leaky_relu(x, LEAKY_SLOPE);
                }
            }
            parts.push(x);
        }
        let a = g.concat_channels(parts[0], parts[1])?;
        g.concat_channels(a, parts[2])
            .map_err(|e| Error::Config(format!("baseline bottleneck: {e}")))
    }

    fn decode_view<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, c: Var) -> Result<Levels> {
        let mut out = [c; 3];
        for (i, convs) in self.dec.iter().enumerate() {
            let (start, len) = self.branch_range(i);
            let mut x = g.narrow_channels(c, start, len)?;
            for (j, d) in convs.iter().enumerate() {
                x = d.forward(g, s, x)?;
                if j + 1 < convs.len() {
                    x = g.leaky_relu(x, LEAKY_SLOPE);
                }
            }
            out[i] = x;
        }
        Ok(out)
    }

    pub fn encode<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, l: &Levels, r: &Levels) -> Result<ViewPair> {
        Ok((self.encode_view(g, s, l)?, self.encode_view(g, s, r)?))
    }

    pub fn decode<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, c: ViewPair) -> Result<(Levels, Levels)> {
        Ok((self.decode_view(g, s, c.0)?, self.decode_view(g, s, c.1)?))
    }

    fn cost(&self, c: &mut Cost, h: usize, w: usize) {
        for i in 0..3 {
            let (mut fh, mut fw) = (h / self.cfg.strides[i], w / self.cfg.strides[i]);
            for conv in &self.enc[i] {
                (fh, fw) = c.conv(conv, 2, fh, fw);
            }
            for d in &self.dec[i] {
                (fh, fw) = c.convt(d, 2, fh, fw);
            }
        }
    }
}

/// The configured joint transform.
// one per model, so the size gap between variants does not matter
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Codec {
    Smfc(SmfcCodec),
    Baseline(BaselineCodec),
}

impl Codec {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &SmfcConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(match cfg.variant {
            Variant::Smfc => Codec::Smfc(SmfcCodec::new(store, cfg, rng)?),
            Variant::Baseline => Codec::Baseline(BaselineCodec::new(store, cfg, rng)?),
        })
    }

    /// Continuous joint latent of each view.
    pub fn encode<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, l: &Levels, r: &Levels) -> Result<ViewPair> {
        match self {
            Codec::Smfc(c) => c.encode(g, s, l, r),
            Codec::Baseline(c) => c.encode(g, s, l, r),
        }
    }

    /// Reconstructed pyramids of both views.
    pub fn decode<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, c: ViewPair) -> Result<(Levels, Levels)> {
        match self {
            Codec::Smfc(d) => d.decode(g, s, c),
            Codec::Baseline(d) => d.decode(g, s, c),
        }
    }

    /// Encoder + decoder cost for one stereo pair of size `h × w`.
    pub fn cost(&self, c: &mut Cost, h: usize, w: usize) {
        match self {
            Codec::Smfc(d) => d.cost(c, h, w),
            Codec::Baseline(d) => d.cost(c, h, w),
        }
    }
}

/// How continuous latents become (proxy) integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `U[-0.5, 0.5)` noise, used while training.
    Noise,
    /// Nearest integer, ties to even, straight-through gradient.
    Round,
}

pub fn quantize<T: Real>(g: &Graph<T>, x: Var, mode: QuantMode, rng: &mut impl Rng) -> Result<Var> {
    match mode {
        QuantMode::Round => Ok(g.round_ste(x)),
        QuantMode::Noise => {
            let noise = Tensor::from_fn(&g.shape(x), |_| T::lit(rng.gen::<f64>() - 0.5));
            let u = g.input(noise);
            g.add(x, u)
        }
    }
}
