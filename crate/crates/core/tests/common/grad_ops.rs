//! Random instances of every differentiable layer and loss, each reduced
//! to a scalar and checked against central differences in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smfc_core::entropy::FactorizedPrior;
use smfc_core::model::{Model, ModelConfig};
use smfc_core::smfc::{CrossView, CrossViewKind, Extractor, Levels, QuantMode, Sdu, Seu, SmfcConfig, Variant};
use smfc_core::task::{task_distortion, Head, HeadConfig, PredVars, TaskTargets};
use smfc_core::tensor::gradcheck::{check_gradients, GradCheckOptions, GradReport};
use smfc_core::tensor::{Graph, ParamStore, Tensor, Var};
use smfc_core::train::{rd_forward, rd_loss};
use smfc_core::Result;

pub type OpCase = fn(&mut ChaCha8Rng) -> Result<GradReport>;

pub const OPS: &[(&str, OpCase)] = &[
    ("conv2d", conv2d),
    ("conv_transpose2d", conv_transpose2d),
    ("leaky_relu", leaky_relu),
    ("concat_narrow_split", concat_narrow),
    ("add_mul", add_mul),
    ("scale_sum_mean", scale_sum_mean),
    ("weighted_sum", weighted_sum),
    ("focal_loss", focal),
    ("smooth_l1", smooth_l1),
    ("softmax_cross_entropy", softmax_ce),
    ("prior_bits", prior_bits),
    ("cross_view", cross_view),
    ("seu", seu),
    ("sdu", sdu),
    ("extractor", extractor),
    ("task_head", head),
    ("task_distortion", distortion),
    ("rd_loss", rd_loss_case),
    ("rd_forward", rd_forward_case),
];

/// Runs `instances` random cases of every op; returns one merged report per op.
pub fn run_suite(instances: usize, seed: u64) -> Vec<(&'static str, GradReport)> {
    OPS.iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut total = GradReport::default();
            for k in 0..instances {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 32) ^ k as u64);
                let r = case(&mut rng).unwrap_or_else(|e| panic!("{name} instance {k}: {e}"));
                total.merge(&r);
            }
            (*name, total)
        })
        .collect()
}

fn opts(coords: usize) -> GradCheckOptions {
    GradCheckOptions {
        coords_per_tensor: coords,
        ..GradCheckOptions::default()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Random projection to a scalar so every output element matters.
fn project(g: &Graph<f64>, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = uniform(rng, &g.shape(x), 1.0);
    g.weighted_sum(x, w)
}

fn project_all(g: &Graph<f64>, xs: &[Var], rng: &mut ChaCha8Rng) -> Result<Var> {
    let mut acc = project(g, xs[0], rng)?;
    for &x in &xs[1..] {
        let p = project(g, x, rng)?;
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

/// Moves every parameter off its initial value so zero biases and shared
/// init constants do not hide indexing errors.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

/// `f` gets a fresh projection RNG per evaluation so all evaluations agree.
fn run<F>(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, coords: usize, f: F) -> Result<GradReport>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>, &mut ChaCha8Rng) -> Result<Var>,
{
    let proj_seed: u64 = rng.gen();
    check_gradients(
        store,
        |g, s| f(g, s, &mut ChaCha8Rng::seed_from_u64(proj_seed)),
        opts(coords),
        rng,
    )
}

fn conv2d(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let k = [1, 2, 3][rng.gen_range(0..3)];
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=k / 2);
    let (h, w) = (rng.gen_range(k.max(2)..=6), rng.gen_range(k.max(2)..=6));
    let mut s = ParamStore::new();
    let x = s.add("x", uniform(rng, &[n, cin, h, w], 1.0))?;
    let wt = s.add("w", uniform(rng, &[cout, cin, k, k], 1.0))?;
    let b = s.add("b", uniform(rng, &[cout], 1.0))?;
    run(&mut s, rng, 8, |g, s, r| {
        let y = g.conv2d(g.param(s, x), g.param(s, wt), g.param(s, b), stride, pad)?;
        project(g, y, r)
    })
}

fn conv_transpose2d(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let stride = rng.gen_range(1..=3);
    let k = stride + rng.gen_range(0..=2);
    let pad = rng.gen_range(0..=(k - 1) / 2);
    let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let mut s = ParamStore::new();
    let x = s.add("x", uniform(rng, &[n, cin, h, w], 1.0))?;
    let wt = s.add("w", uniform(rng, &[cin, cout, k, k], 1.0))?;
    let b = s.add("b", uniform(rng, &[cout], 1.0))?;
    run(&mut s, rng, 8, |g, s, r| {
        let y = g.conv_transpose2d(g.param(s, x), g.param(s, wt), g.param(s, b), stride, pad)?;
        project(g, y, r)
    })
}

fn leaky_relu(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParamStore::new();
    let x = s.add("x", uniform(rng, &[1, 2, 3, 3], 1.0))?;
    let slope = rng.gen_range(0.0..0.5);
    run(&mut s, rng, 18, |g, s, r| {
        let y = g.leaky_relu(g.param(s, x), slope);
        project(g, y, r)
    })
}

fn concat_narrow(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let (ca, cb) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let mut s = ParamStore::new();
    let a = s.add("a", uniform(rng, &[2, ca, 2, 3], 1.0))?;
    let b = s.add("b", uniform(rng, &[2, cb, 2, 3], 1.0))?;
    let start = rng.gen_range(0..ca + cb);
    let len = rng.gen_range(1..=ca + cb - start);
    let cut = rng.gen_range(1..ca + cb);
    run(&mut s, rng, 12, |g, s, r| {
        let c = g.concat_channels(g.param(s, a), g.param(s, b))?;
        let nw = g.narrow_channels(c, start, len)?;
        let (p, q) = g.split_channels(c, cut)?;
        project_all(g, &[nw, p, q], r)
    })
}

fn add_mul(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let shape = [1, rng.gen_range(1..=3), 2, rng.gen_range(1..=4)];
    let mut s = ParamStore::new();
    let a = s.add("a", uniform(rng, &shape, 2.0))?;
    let b = s.add("b", uniform(rng, &shape, 2.0))?;
    run(&mut s, rng, 10, |g, s, r| {
        let (a, b) = (g.param(s, a), g.param(s, b));
        let sum = g.add(a, b)?;
        let prod = g.mul(a, b)?;
        let sq = g.mul(sum, sum)?;
        project_all(g, &[sum, prod, sq], r)
    })
}

fn scale_sum_mean(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParamStore::new();
    let a = s.add("a", uniform(rng, &[2, 3, 2, 2], 2.0))?;
    let c = rng.gen_range(-3.0..3.0);
    run(&mut s, rng, 10, |g, s, _| {
        let a = g.param(s, a);
        let sc = g.scale(a, c);
        let sq = g.mul(sc, a)?;
        let total = g.sum(sq);
        let m = g.mean(sq);
        let m = g.scale(m, 2.5);
        g.add(total, m)
    })
}

fn weighted_sum(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParamStore::new();
    let a = s.add("a", uniform(rng, &[1, 2, 3, 4], 2.0))?;
    run(&mut s, rng, 10, |g, s, r| {
        let a = g.param(s, a);
        let sq = g.mul(a, a)?;
        project(g, sq, r)
    })
}

fn focal(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let shape = [rng.gen_range(1..=2), 1, rng.gen_range(2..=4), rng.gen_range(2..=5)];
    let mut s = ParamStore::new();
    let z = s.add("logits", uniform(rng, &shape, 4.0))?;
    let t = Tensor::from_fn(&shape, |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
    let (alpha, gamma) = (rng.gen_range(0.1..0.9), [0.0, 1.0, 2.0, 2.5][rng.gen_range(0..4)]);
    run(&mut s, rng, 12, move |g, s, _| {
        g.focal_loss(g.param(s, z), t.clone(), alpha, gamma)
    })
}

fn smooth_l1(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let shape = [1, 4, rng.gen_range(1..=3), rng.gen_range(1..=4)];
    let mut s = ParamStore::new();
    let p = s.add("pred", uniform(rng, &shape, 3.0))?;
    let t = uniform(rng, &shape, 3.0);
    let plane = shape[2] * shape[3];
    let cells: Vec<f64> = (0..plane).map(|_| if rng.gen_bool(0.6) { 1.0 } else { 0.0 }).collect();
    let mut mask = Tensor::from_fn(&[1, 1, shape[2], shape[3]], |i| cells[i]);
    if mask.data().iter().all(|&v| v == 0.0) {
        mask.data_mut()[0] = 1.0;
    }
    let beta = rng.gen_range(0.5..2.0);
    run(&mut s, rng, 12, move |g, s, _| {
        g.smooth_l1(g.param(s, p), t.clone(), mask.clone(), beta)
    })
}

fn softmax_ce(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let (n, c, h, w) = (
        rng.gen_range(1..=2),
        rng.gen_range(2..=6),
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
    );
    let mut s = ParamStore::new();
    let z = s.add("logits", uniform(rng, &[n, c, h, w], 3.0))?;
    let t: Vec<usize> = (0..n * h * w).map(|_| rng.gen_range(0..c)).collect();
    run(&mut s, rng, 12, move |g, s, _| {
        g.softmax_cross_entropy(g.param(s, z), t.clone())
    })
}

fn prior_bits(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let c = rng.gen_range(1..=3);
    let mut s = ParamStore::new();
    let prior = FactorizedPrior::new(&mut s, "prior", c, rng)?;
    jitter(&mut s, rng, 0.3);
    let n = rng.gen_range(1..=2);
    let x = s.add("x", uniform(rng, &[n, c, 2, 2], 4.0))?;
    run(&mut s, rng, 6, move |g, s, _| prior.bits(g, s, g.param(s, x)))
}

fn pair_inputs(
    s: &mut ParamStore<f64>,
    rng: &mut ChaCha8Rng,
    shape: &[usize],
) -> Result<(smfc_core::tensor::ParamId, smfc_core::tensor::ParamId)> {
    Ok((
        s.add("l", uniform(rng, shape, 1.0))?,
        s.add("r", uniform(rng, shape, 1.0))?,
    ))
}

fn cross_view(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let c = rng.gen_range(1..=3);
    let mut s = ParamStore::new();
    let cv = CrossView::new(&mut s, "cv", CrossViewKind::ProjectFuse, c, rng)?;
    jitter(&mut s, rng, 0.1);
    let (l, r) = pair_inputs(&mut s, rng, &[1, c, 3, 4])?;
    run(&mut s, rng, 5, move |g, s, pr| {
        let (a, b) = cv.apply(g, s, (g.param(s, l), g.param(s, r)))?;
        project_all(g, &[a, b], pr)
    })
}

fn seu(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let factor = [1, 2, 4][rng.gen_range(0..3)];
    let mut s = ParamStore::new();
    let unit = Seu::new(&mut s, "seu", cin, cout, factor, CrossViewKind::ProjectFuse, rng)?;
    jitter(&mut s, rng, 0.1);
    let (l, r) = pair_inputs(&mut s, rng, &[1, cin, 8, 8])?;
    run(&mut s, rng, 4, move |g, s, pr| {
        let (a, b) = unit.forward(g, s, (g.param(s, l), g.param(s, r)))?;
        project_all(g, &[a, b], pr)
    })
}

fn sdu(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let factor = [1, 2, 4][rng.gen_range(0..3)];
    let mut s = ParamStore::new();
    let unit = Sdu::new(&mut s, "sdu", cin, cout, factor, CrossViewKind::ProjectFuse, rng)?;
    jitter(&mut s, rng, 0.1);
    let (l, r) = pair_inputs(&mut s, rng, &[1, cin, 2, 3])?;
    run(&mut s, rng, 4, move |g, s, pr| {
        let (a, b) = unit.forward(g, s, (g.param(s, l), g.param(s, r)))?;
        project_all(g, &[a, b], pr)
    })
}

fn tiny_smfc(rng: &mut ChaCha8Rng) -> SmfcConfig {
    SmfcConfig {
        stem_channels: 2,
        channels: [rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3)],
        latent_channels: [rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(3..=4)],
        strides: [4, 8, 16],
        stage_factors: [2, 2, 2],
        cross_view: CrossViewKind::ProjectFuse,
        variant: if rng.gen_bool(0.5) {
            Variant::Smfc
        } else {
            Variant::Baseline
        },
    }
}

fn extractor(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let cfg = tiny_smfc(rng);
    let mut s = ParamStore::new();
    let e = Extractor::new(&mut s, &cfg, rng)?;
    jitter(&mut s, rng, 0.1);
    let x = s.add("image", uniform(rng, &[1, 3, 16, 16], 1.0))?;
    run(&mut s, rng, 3, move |g, s, pr| {
        let lv = e.forward(g, s, g.param(s, x))?;
        project_all(g, &lv, pr)
    })
}

fn random_targets(rng: &mut ChaCha8Rng, n: usize, gh: usize, gw: usize, fine: usize, bins: usize) -> TaskTargets<f64> {
    let occ = Tensor::from_fn(&[n, 1, gh, gw], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
    let boxes = uniform(rng, &[n, 4, gh, gw], 1.5);
    let boxes = Tensor::from_fn(boxes.shape(), |i| {
        let cell = (i / (4 * gh * gw)) * gh * gw + i % (gh * gw);
        boxes.data()[i] * occ.data()[cell]
    });
    TaskTargets {
        occupancy: occ,
        boxes,
        disparity: (0..fine).map(|_| rng.gen_range(0..bins)).collect(),
    }
}

fn head(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let cfg = tiny_smfc(rng);
    let hc = HeadConfig {
        hidden: rng.gen_range(2..=4),
        disparity_bins: rng.gen_range(2..=5),
        bin_width: 4,
    };
    let mut s = ParamStore::new();
    let h = Head::new(&mut s, &cfg, &hc, rng)?;
    jitter(&mut s, rng, 0.1);
    let ch = cfg.channels;
    let dims = [(4, 8), (2, 4), (1, 2)];
    let mut ids = Vec::new();
    for view in ["l", "r"] {
        for i in 0..3 {
            let (hh, ww) = dims[i];
            ids.push(s.add(format!("{view}{i}"), uniform(rng, &[1, ch[i], hh, ww], 1.0))?);
        }
    }
    let t = random_targets(rng, 1, 2, 4, 32, hc.disparity_bins);
    run(&mut s, rng, 3, move |g, s, _| {
        let lv: Levels = [g.param(s, ids[0]), g.param(s, ids[1]), g.param(s, ids[2])];
        let rv: Levels = [g.param(s, ids[3]), g.param(s, ids[4]), g.param(s, ids[5])];
        let p = h.forward(g, s, &lv, &rv)?;
        Ok(task_distortion(g, &p, &t)?.total)
    })
}

fn distortion(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let (n, gh, gw, bins) = (
        rng.gen_range(1..=2),
        rng.gen_range(1..=3),
        rng.gen_range(1..=4),
        rng.gen_range(2..=5),
    );
    let mut s = ParamStore::new();
    let occ = s.add("occ", uniform(rng, &[n, 1, gh, gw], 3.0))?;
    let bx = s.add("boxes", uniform(rng, &[n, 4, gh, gw], 2.0))?;
    let dis = s.add("disp", uniform(rng, &[n, bins, 2 * gh, 2 * gw], 2.0))?;
    let mut t = random_targets(rng, n, gh, gw, n * 4 * gh * gw, bins);
    t.occupancy.data_mut()[0] = 1.0;
    run(&mut s, rng, 8, move |g, s, _| {
        let p = PredVars {
            occupancy: g.param(s, occ),
            boxes: g.param(s, bx),
            disparity: g.param(s, dis),
        };
        Ok(task_distortion(g, &p, &t)?.total)
    })
}

fn rd_loss_case(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParamStore::new();
    let d = s.add("d", Tensor::scalar(rng.gen_range(0.0..3.0)))?;
    let rl = s.add("rl", Tensor::scalar(rng.gen_range(0.0..2.0)))?;
    let rr = s.add("rr", Tensor::scalar(rng.gen_range(0.0..2.0)))?;
    let lambda = [0.0, 0.5, 1.0, 4.0, 16.0, 64.0, 256.0][rng.gen_range(0..7)];
    run(&mut s, rng, 1, move |g, s, _| {
        let (d, rl, rr) = (g.param(s, d), g.param(s, rl), g.param(s, rr));
        // squared terms keep the check away from a purely linear map
        let d2 = g.mul(d, d)?;
        let l2 = g.mul(rl, rl)?;
        rd_loss(g, d2, l2, rr, lambda)
    })
}

fn rd_forward_case(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let cfg = ModelConfig {
        smfc: tiny_smfc(rng),
        head: HeadConfig {
            hidden: 2,
            disparity_bins: 3,
            bin_width: 4,
        },
        width: 32,
        height: 32,
    };
    let seed: u64 = rng.gen();
    let mut model = Model::<f64>::new(cfg, seed)?;
    jitter(&mut model.store, rng, 0.05);
    let left = uniform(rng, &[1, 3, 32, 32], 1.0).map(|v| v.abs());
    let right = uniform(rng, &[1, 3, 32, 32], 1.0).map(|v| v.abs());
    let t = random_targets(rng, 1, 4, 4, 64, 3);
    let lambda = rng.gen_range(0.5..64.0);
    let noise_seed: u64 = rng.gen();
    let mut store = std::mem::take(&mut model.store);
    let shell = model;
    check_gradients(
        &mut store,
        |g, s| {
            let m = Model {
                store: s.clone(),
                ..shell.clone()
            };
            let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
            Ok(rd_forward(&m, g, &left, &right, &t, lambda, QuantMode::Noise, &mut noise)?.loss)
        },
        opts(2),
        rng,
    )
}

/// `<convT(x), y> == <x, conv(y)>` when both use the same kernel tensor.
pub fn transpose_adjoint_gap(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (cin, cout) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let stride = rng.gen_range(1..=3);
    let k = stride + rng.gen_range(0..=2);
    let pad = rng.gen_range(0..=(k - 1) / 2);
    let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
    let x = uniform(rng, &[1, cin, h, w], 1.0);
    let wt = uniform(rng, &[cin, cout, k, k], 1.0);
    let g = Graph::<f64>::new();
    let zero_out = g.input(Tensor::zeros(&[cout]));
    let zero_in = g.input(Tensor::zeros(&[cin]));
    let wv = g.input(wt);
    let up = g.conv_transpose2d(g.input(x.clone()), wv, zero_out, stride, pad)?;
    let y = uniform(rng, &g.shape(up), 1.0);
    let down = g.conv2d(g.input(y.clone()), wv, zero_in, stride, pad)?;
    if g.shape(down) != x.shape() {
        return Err(smfc_core::Error::Shape("adjoint shapes disagree".into()));
    }
    let lhs = g.value(up).dot(&y);
    let rhs = x.dot(&g.value(down));
    Ok((lhs - rhs).abs())
}
