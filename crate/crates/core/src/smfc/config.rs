use crate::error::{Error, Result};

/// Which joint transform the codec uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Progressive multi-scale merge with cross-view interaction at every stage.
    Smfc,
    /// Each pyramid level downsampled on its own; latents concatenated at the
    /// bottleneck. No cross-view interaction.
    Baseline,
}

impl Variant {
    pub fn code(self) -> u8 {
        match self {
            Variant::Smfc => 0,
            Variant::Baseline => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Variant::Smfc),
            1 => Ok(Variant::Baseline),
            _ => Err(Error::Versioning(format!("unknown variant code {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Smfc => "smfc",
            Variant::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "smfc" => Ok(Variant::Smfc),
            "baseline" | "separate-baseline" => Ok(Variant::Baseline),
            _ => Err(Error::Config(format!("unknown variant {s:?} (smfc|baseline)"))),
        }
    }
}

/// Cross-view interaction used inside the stereo encoder/decoder units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CrossViewKind {
    /// Each view adds a 3×3 fusion of itself and a 1×1 projection of the
    /// other view. Both directions read the pre-update values.
    ProjectFuse,
    /// Identity: the two views are coded independently.
    Disabled,
}

impl CrossViewKind {
    pub fn code(self) -> u8 {
        match self {
            CrossViewKind::ProjectFuse => 0,
            CrossViewKind::Disabled => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(CrossViewKind::ProjectFuse),
            1 => Ok(CrossViewKind::Disabled),
            _ => Err(Error::Config(format!("unknown cross-view code {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CrossViewKind::ProjectFuse => "project-fuse",
            CrossViewKind::Disabled => "disabled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "project-fuse" => Ok(CrossViewKind::ProjectFuse),
            "disabled" | "none" => Ok(CrossViewKind::Disabled),
            _ => Err(Error::Config(format!(
                "unknown cross-view kind {s:?} (project-fuse|disabled)"
            ))),
        }
    }
}

/// Channel and stride plan of the feature pyramid and the joint transform.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SmfcConfig {
    /// Width of the extractor blocks before the first tap.
    pub stem_channels: usize,
    /// Feature channels `ch_i` of pyramid level `i`.
    pub channels: [usize; 3],
    /// Output channels of encoder stage `i`; the last one is the coded latent.
    pub latent_channels: [usize; 3],
    /// Pyramid strides `s_i` relative to the input image.
    pub strides: [usize; 3],
    /// Spatial reduction of encoder stage `i`.
    pub stage_factors: [usize; 3],
    pub cross_view: CrossViewKind,
    pub variant: Variant,
}

impl Default for SmfcConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            channels: [32, 64, 96],
            latent_channels: [64, 96, 128],
            strides: [4, 8, 16],
            stage_factors: [2, 2, 2],
            cross_view: CrossViewKind::ProjectFuse,
            variant: Variant::Smfc,
        }
    }
}

fn log2_exact(v: usize) -> Option<u32> {
    v.is_power_of_two().then(|| v.trailing_zeros())
}

impl SmfcConfig {
    /// Narrow channel plan used for single-core training runs.
    pub fn desk() -> Self {
        Self {
            stem_channels: 8,
            channels: [8, 16, 24],
            latent_channels: [16, 24, 32],
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stem_channels == 0 || self.channels.contains(&0) || self.latent_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self
            .channels
            .iter()
            .chain(&self.latent_channels)
            .any(|&c| c > u16::MAX as usize)
        {
            return bad("channel counts must fit in 16 bits".into());
        }
        for (i, &s) in self.strides.iter().enumerate() {
            if s < 2 || log2_exact(s).is_none() {
                return bad(format!("stride s_{i} = {s} must be a power of two >= 2"));
            }
        }
        for (i, &f) in self.stage_factors.iter().enumerate() {
            if log2_exact(f).is_none() {
                return bad(format!("stage factor {i} = {f} must be a power of two"));
            }
        }
        for i in 0..2 {
            if self.strides[i] * self.stage_factors[i] != self.strides[i + 1] {
                return bad(format!(
                    "stage {i}: stride {} x factor {} must equal next stride {}",
                    self.strides[i],
                    self.stage_factors[i],
                    self.strides[i + 1]
                ));
            }
        }
        if self.variant == Variant::Baseline && self.latent_channels[2] < 3 {
            return bad("baseline needs at least 3 latent channels".into());
        }
        Ok(())
    }

    /// Total stride of the coded latent; image sides must be multiples of it.
    pub fn divisor(&self) -> usize {
        self.strides[2] * self.stage_factors[2]
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let d = self.divisor();
        for (name, v) in [("height", height), ("width", width)] {
            if v == 0 || v % d != 0 {
                return Err(Error::Config(format!(
                    "image {name} {v} must be a positive multiple of {d}"
                )));
            }
        }
        Ok(())
    }

    /// Input channels of encoder stage `i` (also the output of decoder stage `i`).
    pub fn stage_input_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.channels[0]
        } else {
            self.latent_channels[i - 1] + self.channels[i]
        }
    }

    /// `[C, H, W]` of one view's coded latent for an `H × W` image.
    pub fn latent_shape(&self, height: usize, width: usize) -> [usize; 3] {
        let d = self.divisor();
        [self.latent_channels[2], height / d, width / d]
    }

    /// Channel counts of the baseline's three branch latents.
    pub fn baseline_branch_channels(&self) -> [usize; 3] {
        let c = self.latent_channels[2];
        let base = c / 3;
        [c - 2 * base, base, base]
    }
}

/// Strides of the convolutions that realize a spatial factor `f`: two
/// stride-1 convs for `f = 1`, stride 2 then stride 1 for `f = 2`, and one
/// stride-2 conv per octave beyond that.
pub fn stage_strides(factor: usize) -> Vec<usize> {
    match factor {
        1 => vec![1, 1],
        2 => vec![2, 1],
        f => vec![2; f.trailing_zeros() as usize],
    }
}
