//! Procedural rectified stereo scenes: a full-frame background plus a few
//! grid-aligned rectangular objects, each a fronto-parallel plane with an
//! integer disparity. Views are painted far to near.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::smfc::StereoPair;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Cell size of the occupancy grid, in pixels.
    pub grid_stride: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Inclusive integer disparity range shared by all layers.
    pub disparity_min: u32,
    pub disparity_max: u32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 64,
            grid_stride: 8,
            min_objects: 1,
            max_objects: 4,
            disparity_min: 1,
            disparity_max: 30,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_stride == 0
            || !self.width.is_multiple_of(self.grid_stride)
            || !self.height.is_multiple_of(self.grid_stride)
        {
            return bad(format!(
                "scene {}x{} is not a multiple of grid stride {}",
                self.width, self.height, self.grid_stride
            ));
        }
        if self.grid_w() < 2 || self.grid_h() < 2 {
            return bad("occupancy grid must be at least 2x2 cells".into());
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects".into());
        }
        // background takes one disparity, each object needs a distinct larger one
        if self.disparity_min + self.max_objects as u32 > self.disparity_max {
            return bad(format!(
                "disparity range {}..={} cannot hold {} distinct object layers",
                self.disparity_min, self.disparity_max, self.max_objects
            ));
        }
        Ok(())
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.grid_stride
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.grid_stride
    }
}

/// An object box in grid cells: center and extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub disparity: u32,
}

impl SceneBox {
    /// Cell range `[x0, x1) × [y0, y1)`.
    pub fn cells(&self) -> (usize, usize, usize, usize) {
        let x0 = (self.cx - self.w / 2.0).round() as usize;
        let y0 = (self.cy - self.h / 2.0).round() as usize;
        (x0, x0 + self.w.round() as usize, y0, y0 + self.h.round() as usize)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    /// Support in left-view pixels, `[x0, x1) × [y0, y1)`.
    rect: (usize, usize, usize, usize),
    disparity: u32,
    base: [f64; 3],
    block: usize,
    amp: f64,
    key: u64,
}

impl Layer {
    fn covers(&self, x: i64, y: usize) -> bool {
        let (x0, x1, y0, y1) = self.rect;
        x >= x0 as i64 && x < x1 as i64 && y >= y0 && y < y1
    }

    /// Texture value at left-view coordinate `(x, y)`; defined for any `x`.
    fn texel(&self, x: i64, y: usize, c: usize) -> f64 {
        let bx = x.div_euclid(self.block as i64);
        let by = (y / self.block) as i64;
        let coarse = hash_unit(self.key, bx, by, c as i64);
        let fine = hash_unit(self.key ^ 0x9e37_79b9_7f4a_7c15, x, y as i64, c as i64);
        (self.base[c] + self.amp * coarse + 0.05 * fine).clamp(0.0, 1.0)
    }
}

/// Deterministic value in `[-1, 1)` from integer coordinates (splitmix64).
fn hash_unit(key: u64, a: i64, b: i64, c: i64) -> f64 {
    let mut z = key
        .wrapping_add((a as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((b as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f))
        .wrapping_add((c as u64).wrapping_mul(0x1656_67b1_9e37_79f9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub pair: StereoPair,
    /// Left-referenced disparity in pixels, `[1, 1, H, W]`.
    pub disparity: Tensor,
    /// Object presence per grid cell, `[1, 1, H/s, W/s]`.
    pub occupancy: Tensor,
    /// Objects ordered far to near.
    pub boxes: Vec<SceneBox>,
    pub seed: u64,
    pub grid_stride: usize,
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h, s) = (cfg.width, cfg.height, cfg.grid_stride);
    let (gw, gh) = (cfg.grid_w(), cfg.grid_h());
    let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);

    let bg_top = (cfg.disparity_max - n_obj as u32).min(cfg.disparity_min + 3);
    let bg_d = rng.gen_range(cfg.disparity_min..=bg_top);
    let mut pool: Vec<u32> = (bg_d + 1..=cfg.disparity_max).collect();
    pool.shuffle(&mut rng);
    let mut obj_d: Vec<u32> = pool[..n_obj].to_vec();
    obj_d.sort_unstable();

    let layer = |rect, disparity, rng: &mut ChaCha8Rng| Layer {
        rect,
        disparity,
        base: [
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
        ],
        block: rng.gen_range(2..=6),
        amp: rng.gen_range(0.08..0.2),
        key: rng.gen(),
    };
    let mut layers = vec![layer((0, w, 0, h), bg_d, &mut rng)];
    let span = (cfg.disparity_max - cfg.disparity_min).max(1) as f64;
    let mut boxes = Vec::with_capacity(n_obj);
    for &d in &obj_d {
        // nearer objects are drawn larger
        let t = (d - cfg.disparity_min) as f64 / span;
        let bw = ((2.0 + t * (gw as f64 / 4.0)).round() as usize + rng.gen_range(0..=1)).clamp(1, gw);
        let bh = ((2.0 + t * (gh as f64 / 3.0)).round() as usize + rng.gen_range(0..=1)).clamp(1, gh);
        let x0 = rng.gen_range(0..=gw - bw);
        let y0 = rng.gen_range(0..=gh - bh);
        boxes.push(SceneBox {
            cx: x0 as f64 + bw as f64 / 2.0,
            cy: y0 as f64 + bh as f64 / 2.0,
            w: bw as f64,
            h: bh as f64,
            disparity: d,
        });
        layers.push(layer((x0 * s, (x0 + bw) * s, y0 * s, (y0 + bh) * s), d, &mut rng));
    }

    let plane = w * h;
    let mut left = vec![0f32; 3 * plane];
    let mut right = vec![0f32; 3 * plane];
    let mut disp = vec![0f32; plane];
    for l in &layers {
        let d = l.disparity as i64;
        for y in 0..h {
            for x in 0..w {
                let xi = x as i64;
                if l.covers(xi, y) {
                    for c in 0..3 {
                        left[c * plane + y * w + x] = l.texel(xi, y, c) as f32;
                    }
                    disp[y * w + x] = l.disparity as f32;
                }
                // right pixel x shows the left-view point x + d
                if l.covers(xi + d, y) {
                    for c in 0..3 {
                        right[c * plane + y * w + x] = l.texel(xi + d, y, c) as f32;
                    }
                }
            }
        }
    }

    let mut occ = vec![0f32; gw * gh];
    for b in &boxes {
        let (x0, x1, y0, y1) = b.cells();
        for gy in y0..y1 {
            for gx in x0..x1 {
                occ[gy * gw + gx] = 1.0;
            }
        }
    }

    Ok(SyntheticScene {
        pair: StereoPair::new(Tensor::new(&[1, 3, h, w], left)?, Tensor::new(&[1, 3, h, w], right)?)?,
        disparity: Tensor::new(&[1, 1, h, w], disp)?,
        occupancy: Tensor::new(&[1, 1, gh, gw], occ)?,
        boxes,
        seed,
        grid_stride: s,
    })
}

impl SyntheticScene {
    /// Writes `<stem>_left.<ext>`, `<stem>_right.<ext>` and `<stem>_boxes.txt`
    /// (one `cx cy w h disparity` line per object, grid-cell units) into
    /// `dir`. `ext` picks the image format (`png` or `ppm`).
    pub fn export(&self, dir: &Path, stem: &str, ext: &str) -> Result<()> {
        let format = match ext {
            "png" => image::ImageFormat::Png,
            "ppm" => image::ImageFormat::Pnm,
            _ => return Err(Error::Argument(format!("unsupported image format {ext:?} (png|ppm)"))),
        };
        std::fs::create_dir_all(dir)?;
        for (name, t) in [("left", &self.pair.left), ("right", &self.pair.right)] {
            let img = tensor_to_rgb(t)?;
            img.save_with_format(dir.join(format!("{stem}_{name}.{ext}")), format)?;
        }
        let mut txt = String::new();
        for b in &self.boxes {
            writeln!(txt, "{} {} {} {} {}", b.cx, b.cy, b.w, b.h, b.disparity).expect("string write");
        }
        std::fs::write(dir.join(format!("{stem}_boxes.txt")), txt)?;
        Ok(())
    }
}

/// `[1, 3, H, W]` in `[0, 1]` to 8-bit RGB.
pub fn tensor_to_rgb(t: &Tensor) -> Result<image::RgbImage> {
    let [_, c, h, w] = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = t.data();
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(d[i]), q(d[plane + i]), q(d[2 * plane + i])])
    }))
}

/// Loads an image file as a `[1, 3, H, W]` tensor in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = p[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        let a = generate_scene(11, &cfg).unwrap();
        let b = generate_scene(11, &cfg).unwrap();
        assert_eq!(a.pair, b.pair);
        assert_eq!(a.disparity, b.disparity);
        assert_eq!(a.boxes, b.boxes);
        assert_ne!(generate_scene(12, &cfg).unwrap().pair, a.pair);
    }

    #[test]
    fn background_only_scene_is_a_shift() {
        let cfg = SceneConfig {
            min_objects: 0,
            max_objects: 0,
            ..SceneConfig::default()
        };
        let s = generate_scene(4, &cfg).unwrap();
        let d = s.disparity.data()[0] as usize;
        assert!(s.disparity.data().iter().all(|&v| v as usize == d));
        let (h, w) = s.pair.dims();
        let (l, r) = (s.pair.left.data(), s.pair.right.data());
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w - d {
                    let i = c * h * w + y * w;
                    assert_eq!(r[i + x], l[i + x + d]);
                }
            }
        }
    }

    #[test]
    fn nearest_layer_holds_max_disparity() {
        for seed in 0..20 {
            let s = generate_scene(seed, &SceneConfig::default()).unwrap();
            let near = s.boxes.last().unwrap();
            let max = s.disparity.data().iter().cloned().fold(0f32, f32::max);
            assert_eq!(max, near.disparity as f32);
            let ds: Vec<u32> = s.boxes.iter().map(|b| b.disparity).collect();
            assert!(ds.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn occupancy_is_box_rasterization() {
        for seed in 0..20 {
            let s = generate_scene(seed, &SceneConfig::default()).unwrap();
            let gw = s.occupancy.shape()[3];
            let mut expect = std::collections::BTreeSet::new();
            for b in &s.boxes {
                let (x0, x1, y0, y1) = b.cells();
                for y in y0..y1 {
                    for x in x0..x1 {
                        expect.insert(y * gw + x);
                    }
                }
            }
            let got: std::collections::BTreeSet<usize> = (0..s.occupancy.len())
                .filter(|&i| s.occupancy.data()[i] == 1.0)
                .collect();
            assert_eq!(got, expect);
        }
    }
}
