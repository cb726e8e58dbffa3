//! Committed bitstream fixtures: weights, input images and the frames they
//! must encode to.

use std::path::{Path, PathBuf};

use smfc_core::entropy::FrameMeta;
use smfc_core::smfc::StereoPair;
use smfc_core::task::load_rgb;
use smfc_core::train::Checkpoint;

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/golden")
}

/// Re-encodes every fixture scene with every fixture model and compares the
/// bytes; also decodes the committed frames. Returns the number of frames.
pub fn verify_golden_frames() -> Result<usize, String> {
    let dir = golden_dir();
    let mut frames = 0;
    for variant in ["smfc", "baseline"] {
        let ckpt = Checkpoint::load(&dir.join(format!("{variant}.smfw"))).map_err(|e| format!("{variant}: {e}"))?;
        let model = &ckpt.model;
        let codec = model.entropy_codec();
        for s in 0..3 {
            let img = |side: &str| load_rgb(&dir.join(format!("scene{s}_{side}.png"))).map_err(|e| e.to_string());
            let pair = StereoPair::new(img("left")?, img("right")?).map_err(|e| e.to_string())?;
            let (h, w) = pair.dims();
            let (latents, _) = model.encode_pair(&pair).map_err(|e| e.to_string())?;
            let meta = FrameMeta {
                variant: model.config.smfc.variant,
                lambda_index: ckpt.lambda_index,
                width: w as u16,
                height: h as u16,
            };
            let bytes = codec
                .encode_latents(&latents, meta)
                .map_err(|e| e.to_string())?
                .to_bytes();
            let name = format!("{variant}-scene{s}.smfc");
            let want = std::fs::read(dir.join(&name)).map_err(|e| format!("{name}: {e}"))?;
            if bytes != want {
                return Err(format!(
                    "{name}: re-encoded {} bytes differ from the committed {}",
                    bytes.len(),
                    want.len()
                ));
            }
            let (back, m) = codec.decode_frame(&want).map_err(|e| format!("{name}: {e}"))?;
            if back != latents || m != meta {
                return Err(format!("{name}: decoding the committed frame disagrees"));
            }
            frames += 1;
        }
    }
    Ok(frames)
}
