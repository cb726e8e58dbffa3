//! Random transform configurations and probes of how information flows
//! between views and pyramid levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smfc_core::smfc::{Codec, CrossViewKind, Levels, SmfcConfig, Variant};
use smfc_core::tensor::{Graph, ParamStore, Tensor};

/// A valid random plan plus an image size it accepts.
pub fn random_config(rng: &mut ChaCha8Rng, variant: Variant) -> (SmfcConfig, usize, usize) {
    let s0 = [2, 4][rng.gen_range(0..2)];
    let f0 = [1, 2, 4][rng.gen_range(0..3)];
    let f1 = [1, 2][rng.gen_range(0..2)];
    let f2 = [1, 2][rng.gen_range(0..2)];
    let mut ch = || rng.gen_range(1..=5);
    let cfg = SmfcConfig {
        stem_channels: ch(),
        channels: [ch(), ch(), ch()],
        latent_channels: [ch(), ch(), ch() + 2],
        strides: [s0, s0 * f0, s0 * f0 * f1],
        stage_factors: [f0, f1, f2],
        cross_view: CrossViewKind::ProjectFuse,
        variant,
    };
    let d = cfg.divisor();
    let (h, w) = (d * rng.gen_range(1..=2), d * rng.gen_range(1..=3));
    (cfg, h, w)
}

fn features(cfg: &SmfcConfig, h: usize, w: usize, rng: &mut ChaCha8Rng) -> [Tensor<f64>; 3] {
    std::array::from_fn(|i| {
        let s = cfg.strides[i];
        Tensor::from_fn(&[1, cfg.channels[i], h / s, w / s], |_| rng.gen_range(-1.0..1.0))
    })
}

struct Probe {
    store: ParamStore<f64>,
    codec: Codec,
}

struct Outputs {
    latents: [Tensor<f64>; 2],
    recon: [[Tensor<f64>; 3]; 2],
}

impl Probe {
    fn new(cfg: &SmfcConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let codec = Codec::new(&mut store, cfg, rng).expect("valid config");
        Self { store, codec }
    }

    fn run(&self, l: &[Tensor<f64>; 3], r: &[Tensor<f64>; 3]) -> Outputs {
        let g = Graph::new();
        let lv: Levels = std::array::from_fn(|i| g.input(l[i].clone()));
        let rv: Levels = std::array::from_fn(|i| g.input(r[i].clone()));
        let c = self.codec.encode(&g, &self.store, &lv, &rv).expect("encode");
        let (rl, rr) = self.codec.decode(&g, &self.store, c).expect("decode");
        let val = |v| g.value(v).clone();
        Outputs {
            latents: [val(c.0), val(c.1)],
            recon: [rl.map(val), rr.map(val)],
        }
    }

    /// Reconstruction from given latents, bypassing the encoder.
    fn decode(&self, latents: &[Tensor<f64>; 2]) -> [[Tensor<f64>; 3]; 2] {
        let g = Graph::new();
        let c = (g.input(latents[0].clone()), g.input(latents[1].clone()));
        let (rl, rr) = self.codec.decode(&g, &self.store, c).expect("decode");
        [rl.map(|v| g.value(v).clone()), rr.map(|v| g.value(v).clone())]
    }
}

/// Reconstructed levels have the shapes of the input levels and the latent
/// has the configured shape, for both variants.
pub fn shape_symmetry(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for variant in [Variant::Smfc, Variant::Baseline] {
        let (cfg, h, w) = random_config(&mut rng, variant);
        let p = Probe::new(&cfg, &mut rng);
        let (l, r) = (features(&cfg, h, w, &mut rng), features(&cfg, h, w, &mut rng));
        let out = p.run(&l, &r);
        let [lc, lh, lw] = cfg.latent_shape(h, w);
        for (v, inputs) in [&l, &r].into_iter().enumerate() {
            if out.latents[v].shape() != [1, lc, lh, lw] {
                return Err(format!("{cfg:?} {h}x{w}: latent {:?}", out.latents[v].shape()));
            }
            for (i, input) in inputs.iter().enumerate() {
                if out.recon[v][i].shape() != input.shape() {
                    return Err(format!(
                        "{cfg:?} {h}x{w}: view {v} level {i} {:?} != {:?}",
                        out.recon[v][i].shape(),
                        input.shape()
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Largest change in the left view's latent and reconstruction after
/// perturbing only the right view's features.
pub fn cross_view_response(seed: u64, variant: Variant) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cfg, h, w) = random_config(&mut rng, variant);
    let p = Probe::new(&cfg, &mut rng);
    let (l, r) = (features(&cfg, h, w, &mut rng), features(&cfg, h, w, &mut rng));
    let base = p.run(&l, &r);
    let r2 = r.clone().map(|t| t.map(|v| v + 0.25));
    let moved = p.run(&l, &r2);
    let mut d = base.latents[0].max_abs_diff(&moved.latents[0]);
    for i in 0..3 {
        d = d.max(base.recon[0][i].max_abs_diff(&moved.recon[0][i]));
    }
    d
}

/// In the separate-branch baseline, level `i` only reaches its own latent
/// slice and that slice only reaches reconstructed level `i`.
pub fn baseline_independence(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cfg, h, w) = random_config(&mut rng, Variant::Baseline);
    let p = Probe::new(&cfg, &mut rng);
    let Codec::Baseline(b) = &p.codec else {
        return Err("expected the baseline transform".into());
    };
    let (l, r) = (features(&cfg, h, w, &mut rng), features(&cfg, h, w, &mut rng));
    let base = p.run(&l, &r);
    for i in 0..3 {
        let (start, len) = b.branch_range(i);
        let mut l2 = l.clone();
        l2[i] = l2[i].map(|v| v * 1.5 + 0.3);
        let moved = p.run(&l2, &r);
        if moved.latents[1] != base.latents[1] {
            return Err(format!("level {i} of the left view reached the right latent"));
        }
        let (a, b2) = (base.latents[0].data(), moved.latents[0].data());
        let plane = a.len() / cfg.latent_channels[2];
        let changed_outside = (0..a.len()).any(|k| !(start..start + len).contains(&(k / plane)) && a[k] != b2[k]);
        if changed_outside {
            return Err(format!(
                "level {i} reached latent channels outside [{start}, {})",
                start + len
            ));
        }
        if (start * plane..(start + len) * plane).all(|k| a[k] == b2[k]) {
            return Err(format!("level {i} did not reach its own latent slice"));
        }
        let mut lat = base.latents.clone();
        let d = lat[0].data_mut();
        for v in &mut d[start * plane..(start + len) * plane] {
            *v += 1.0;
        }
        let rec = p.decode(&lat);
        for j in (0..3).filter(|&j| j != i) {
            if rec[0][j] != base.recon[0][j] {
                return Err(format!("latent slice {i} reached reconstructed level {j}"));
            }
        }
    }
    Ok(())
}
