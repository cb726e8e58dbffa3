//! Random priors and latents for the entropy coder, with an ideal code
//! length computed directly from the frequency tables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smfc_core::entropy::range_coder::TOTAL;
use smfc_core::entropy::{ChannelTable, EntropyCodec, FactorizedPrior, FrameMeta, SYMBOL_MAX, SYMBOL_MIN};
use smfc_core::smfc::{Latent, LatentSet, Variant};
use smfc_core::tensor::ParamStore;

pub struct Case {
    pub codec: EntropyCodec,
    pub latents: LatentSet,
    pub meta: FrameMeta,
}

fn sample(t: &ChannelTable, rng: &mut ChaCha8Rng) -> i32 {
    let u = rng.gen_range(0..TOTAL);
    (t.cum.partition_point(|&c| c <= u) - 1) as i32 + SYMBOL_MIN
}

fn latent(codec: &EntropyCodec, shape: [usize; 3], outliers: f64, rng: &mut ChaCha8Rng) -> Latent {
    let tables = codec.tables().expect("tables built");
    let plane = shape[1] * shape[2];
    let data = (0..shape[0] * plane)
        .map(|i| {
            if rng.gen_bool(outliers) {
                rng.gen_range(SYMBOL_MIN..=SYMBOL_MAX)
            } else {
                sample(&tables.channels[i / plane], rng)
            }
        })
        .collect();
    Latent::new(shape, data).expect("consistent shape")
}

/// A random prior and a frame drawn mostly from it. `outliers` is the share
/// of symbols drawn uniformly over the whole alphabet instead.
pub fn random_case(rng: &mut ChaCha8Rng, max_side: usize, outliers: f64) -> Case {
    let channels = rng.gen_range(1..=8);
    let mut store = ParamStore::<f64>::new();
    let prior = FactorizedPrior::new(&mut store, "prior", channels, rng).expect("prior");
    let spread = rng.gen_range(0.0..1.5);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-spread..=spread);
        }
    }
    let codec = EntropyCodec::from_prior(&prior.tensors(&store), rng.gen());
    let mut shape = || [channels, rng.gen_range(0..=max_side), rng.gen_range(1..=max_side)];
    let (ls, rs) = (shape(), shape());
    let latents = LatentSet {
        left: latent(&codec, ls, outliers, rng),
        right: latent(&codec, rs, outliers, rng),
        model_hash: codec.model_hash(),
    };
    let meta = FrameMeta {
        variant: if rng.gen_bool(0.5) {
            Variant::Smfc
        } else {
            Variant::Baseline
        },
        lambda_index: rng.gen(),
        width: rng.gen(),
        height: rng.gen(),
    };
    Case { codec, latents, meta }
}

/// `-Σ log2(freq / TOTAL)` over every symbol of both views.
pub fn ideal_bits(codec: &EntropyCodec, latents: &LatentSet) -> f64 {
    let tables = codec.tables().expect("tables built");
    latents
        .views()
        .iter()
        .map(|l| {
            let plane = l.shape[1] * l.shape[2];
            l.data
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let cum = &tables.channels[i / plane].cum;
                    let k = (s - SYMBOL_MIN) as usize;
                    -((cum[k + 1] - cum[k]) as f64 / TOTAL as f64).log2()
                })
                .sum::<f64>()
        })
        .sum()
}

/// Encodes, decodes and compares; then corrupts every byte in turn with a
/// random nonzero mask and requires each copy to be rejected.
pub fn round_trip_and_corruption(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = random_case(&mut rng, 6, 0.05);
    let bytes = c
        .codec
        .encode_latents(&c.latents, c.meta)
        .map_err(|e| format!("seed {seed}: encode: {e}"))?
        .to_bytes();
    let (back, meta) = c
        .codec
        .decode_frame(&bytes)
        .map_err(|e| format!("seed {seed}: decode: {e}"))?;
    if back != c.latents || meta != c.meta {
        return Err(format!("seed {seed}: decoded frame differs"));
    }
    let mut damaged = bytes.clone();
    for i in 0..bytes.len() {
        damaged[i] ^= rng.gen_range(1..=255u8);
        if c.codec.decode_frame(&damaged).is_ok() {
            return Err(format!(
                "seed {seed}: corrupting byte {i} of {} went unnoticed",
                bytes.len()
            ));
        }
        damaged[i] = bytes[i];
    }
    Ok(())
}

/// Actual payload bits and the ideal code length of one random frame.
pub fn coding_cost(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = random_case(&mut rng, 16, 0.0);
    let frame = c.codec.encode_latents(&c.latents, c.meta).expect("encodable");
    ((frame.payload_bytes() * 8) as f64, ideal_bits(&c.codec, &c.latents))
}
