use rand::Rng;

use super::scene::SyntheticScene;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, Cost, LEAKY_SLOPE};
use crate::smfc::{Levels, SmfcConfig};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Focal-loss constants for the occupancy term.
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Transition point of the smooth-L1 box term.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Hash, Eq)]
pub struct HeadConfig {
    pub hidden: usize,
    pub disparity_bins: usize,
    /// Width of one disparity bin in pixels; the last bin is open-ended.
    pub bin_width: u32,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            disparity_bins: 8,
            bin_width: 4,
        }
    }
}

impl HeadConfig {
    pub fn desk() -> Self {
        Self {
            hidden: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.disparity_bins < 2 || self.bin_width == 0 {
            return Err(Error::Config(
                "head needs hidden > 0, at least 2 disparity bins and a positive bin width".into(),
            ));
        }
        Ok(())
    }

    pub fn bin_of(&self, disparity: f32) -> usize {
        ((disparity.max(0.0) as u32 / self.bin_width) as usize).min(self.disparity_bins - 1)
    }
}

/// Per-view recorded head outputs.
#[derive(Debug, Clone, Copy)]
pub struct PredVars {
    /// `[N, 1, H/s1, W/s1]`
    pub occupancy: Var,
    /// `[N, 4, H/s1, W/s1]`: center offsets and log extents in cells.
    pub boxes: Var,
    /// `[N, B, H/s0, W/s0]`
    pub disparity: Var,
}

/// Concrete head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrediction {
    pub occupancy: Tensor,
    pub boxes: Tensor,
    pub disparity: Tensor,
}

/// Detection branch on the middle pyramid level (with the coarsest level
/// upsampled into it) and a disparity-classification branch on the finest
/// level. Both branches see the left and right features side by side.
#[derive(Debug, Clone)]
pub struct Head {
    up: ConvTranspose2d,
    det_hidden: Conv2d,
    det_out: Conv2d,
    disp_hidden: Conv2d,
    disp_out: Conv2d,
}

impl Head {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        smfc: &SmfcConfig,
        cfg: &HeadConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let ch = smfc.channels;
        let up = ConvTranspose2d::new(store, "head.up", 2 * ch[2], ch[1], smfc.stage_factors[1], rng)?;
        let det_hidden = Conv2d::new(store, "head.det_hidden", 3 * ch[1], cfg.hidden, 3, 1, rng)?;
        let det_out = Conv2d::new(store, "head.det_out", cfg.hidden, 5, 1, 1, rng)?;
        // start from a 1% object prior so the focal term is not swamped early
        store.get_mut(det_out.bias).value.data_mut()[0] = T::lit(-(99f64.ln()));
        let disp_hidden = Conv2d::new(store, "head.disp_hidden", 2 * ch[0], cfg.hidden, 3, 1, rng)?;
        let disp_out = Conv2d::new(store, "head.disp_out", cfg.hidden, cfg.disparity_bins, 1, 1, rng)?;
        Ok(Self {
            up,
            det_hidden,
            det_out,
            disp_hidden,
            disp_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, l: &Levels, r: &Levels) -> Result<PredVars> {
        let coarse = g.concat_channels(l[2], r[2])?;
        let up = self.up.forward(g, s, coarse)?;
        let mid = g.concat_channels(l[1], r[1])?;
        let det_in = g.concat_channels(mid, up)?;
        let h = self.det_hidden.forward(g, s, det_in)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let det = self.det_out.forward(g, s, h)?;
        let (occupancy, boxes) = g.split_channels(det, 1)?;

        let fine = g.concat_channels(l[0], r[0])?;
        let h = self.disp_hidden.forward(g, s, fine)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let disparity = self.disp_out.forward(g, s, h)?;
        Ok(PredVars {
            occupancy,
            boxes,
            disparity,
        })
    }

    pub fn cost(&self, c: &mut Cost, smfc: &SmfcConfig, h: usize, w: usize) {
        let st = smfc.strides;
        c.convt(&self.up, 1, h / st[2], w / st[2]);
        c.conv(&self.det_hidden, 1, h / st[1], w / st[1]);
        c.conv(&self.det_out, 1, h / st[1], w / st[1]);
        c.conv(&self.disp_hidden, 1, h / st[0], w / st[0]);
        c.conv(&self.disp_out, 1, h / st[0], w / st[0]);
    }
}

/// Supervision derived from a scene for a given head/pyramid layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskTargets<T: Real = f32> {
    /// `[N, 1, gh, gw]` in {0, 1}; also the mask of the box term.
    pub occupancy: Tensor<T>,
    /// `[N, 4, gh, gw]`; zero outside occupied cells.
    pub boxes: Tensor<T>,
    /// Disparity bin per finest-level cell, `N · h0 · w0` entries.
    pub disparity: Vec<usize>,
}

impl<T: Real> TaskTargets<T> {
    pub fn from_scene(scene: &SyntheticScene, smfc: &SmfcConfig, head: &HeadConfig) -> Result<Self> {
        let (h, w) = scene.pair.dims();
        if scene.grid_stride != smfc.strides[1] {
            return Err(Error::Config(format!(
                "scene grid stride {} differs from the detection level stride {}",
                scene.grid_stride, smfc.strides[1]
            )));
        }
        let [_, _, gh, gw] = scene.occupancy.dims4()?;
        let cells = gh * gw;
        let mut boxes = vec![T::zero(); 4 * cells];
        for gy in 0..gh {
            for gx in 0..gw {
                // the nearest object wins where boxes overlap
                let owner = scene.boxes.iter().rev().find(|b| {
                    let (x0, x1, y0, y1) = b.cells();
                    (x0..x1).contains(&gx) && (y0..y1).contains(&gy)
                });
                if let Some(b) = owner {
                    let i = gy * gw + gx;
                    boxes[i] = T::lit(b.cx - (gx as f64 + 0.5));
                    boxes[cells + i] = T::lit(b.cy - (gy as f64 + 0.5));
                    boxes[2 * cells + i] = T::lit(b.w.ln());
                    boxes[3 * cells + i] = T::lit(b.h.ln());
                }
            }
        }
        let s0 = smfc.strides[0];
        let (h0, w0) = (h / s0, w / s0);
        let d = scene.disparity.data();
        let disparity = (0..h0 * w0)
            .map(|i| {
                let (y, x) = (i / w0 * s0 + s0 / 2, i % w0 * s0 + s0 / 2);
                head.bin_of(d[y * w + x])
            })
            .collect();
        Ok(Self {
            occupancy: scene.occupancy.cast(),
            boxes: Tensor::new(&[1, 4, gh, gw], boxes)?,
            disparity,
        })
    }

    /// Concatenates single-scene targets along the batch axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let occ: Vec<&Tensor<T>> = items.iter().map(|t| &t.occupancy).collect();
        let bx: Vec<&Tensor<T>> = items.iter().map(|t| &t.boxes).collect();
        Ok(Self {
            occupancy: Tensor::stack_batch(&occ)?,
            boxes: Tensor::stack_batch(&bx)?,
            disparity: items.iter().flat_map(|t| t.disparity.iter().copied()).collect(),
        })
    }
}

/// The three distortion terms, recorded separately.
#[derive(Debug, Clone, Copy)]
pub struct DistortionVars {
    pub cls: Var,
    pub reg: Var,
    pub dis: Var,
    pub total: Var,
}

/// `D_v = L_cls + L_reg + L_dis` with unit weights.
pub fn task_distortion<T: Real>(g: &Graph<T>, pred: &PredVars, t: &TaskTargets<T>) -> Result<DistortionVars> {
    let cls = g.focal_loss(pred.occupancy, t.occupancy.clone(), FOCAL_ALPHA, FOCAL_GAMMA)?;
    let reg = g.smooth_l1(pred.boxes, t.boxes.clone(), t.occupancy.clone(), SMOOTH_L1_BETA)?;
    let dis = g.softmax_cross_entropy(pred.disparity, t.disparity.clone())?;
    let s = g.add(cls, reg)?;
    let total = g.add(s, dis)?;
    Ok(DistortionVars { cls, reg, dis, total })
}
