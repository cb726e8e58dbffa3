#![allow(dead_code)]

//! Drives the `smfc` binary through files and compares against the library.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use smfc_core::eval::model_stats;
use smfc_core::smfc::{Latent, StereoPair};
use smfc_core::task::load_rgb;
use smfc_core::train::Checkpoint;

pub fn smfc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smfc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Result<String, String> {
    let out = smfc(args);
    if !out.status.success() {
        return Err(format!(
            "smfc {args:?} exited with {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// Fresh desk weights and one exported scene in `dir`.
pub fn fixture(dir: &Path) -> Result<(), String> {
    ok(&["init", "--seed", "7", "--out", p(&dir.join("w.smfw"))])?;
    ok(&["gen-scene", "--seed", "3", "--count", "1", "--out-dir", p(dir)])?;
    Ok(())
}

/// `encode` then `decode` through files gives the latents the library
/// computes in process from the same images.
pub fn encode_decode_round_trip(dir: &Path) -> Result<(), String> {
    let (w, l, r) = (
        dir.join("w.smfw"),
        dir.join("scene3_left.png"),
        dir.join("scene3_right.png"),
    );
    let frame = dir.join("f.smfc");
    let out = dir.join("decoded");
    ok(&[
        "encode",
        "--weights",
        p(&w),
        "--left",
        p(&l),
        "--right",
        p(&r),
        "--out",
        p(&frame),
    ])?;
    ok(&["decode", "--weights", p(&w), "--in", p(&frame), "--out-dir", p(&out)])?;
    let ckpt = Checkpoint::load(&w).map_err(|e| e.to_string())?;
    let pair = StereoPair::new(load_rgb(&l).unwrap(), load_rgb(&r).unwrap()).map_err(|e| e.to_string())?;
    let (latents, _) = ckpt.model.encode_pair(&pair).map_err(|e| e.to_string())?;
    for (name, want) in [("left.smfl", &latents.left), ("right.smfl", &latents.right)] {
        let bytes = fs::read(out.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let got = Latent::from_dump(&bytes).map_err(|e| e.to_string())?;
        if &got != want {
            return Err(format!("{name} differs from the in-process latent"));
        }
    }
    if !out.join("detections.txt").exists() {
        return Err("decode wrote no detections".into());
    }
    Ok(())
}

/// `bd` on two copies of one curve reports zero deltas.
pub fn bd_on_identical_curves(dir: &Path) -> Result<(), String> {
    let csv = "label,bpp,metric\n0.5,0.05,20\n4,0.1,30\n64,0.2,36\n256,0.4,40\n";
    let (a, b) = (dir.join("a.csv"), dir.join("b.csv"));
    fs::write(&a, csv).unwrap();
    fs::write(&b, csv).unwrap();
    let stdout = ok(&["bd", "--anchor", p(&a), "--test", p(&b)])?;
    if stdout != "BD-rate: 0.000000%\nBD-AP: 0.000000\n" {
        return Err(format!("unexpected output {stdout:?}"));
    }
    Ok(())
}

/// Usage errors exit with 2, runtime failures with 1 and a message on
/// stderr, success with 0.
pub fn exit_codes(dir: &Path) -> Result<(), String> {
    let (missing, weights) = (dir.join("missing.smfw"), dir.join("w.smfw"));
    let cases: [(&[&str], i32); 5] = [
        (&["frobnicate"], 2),
        (&["stats", "--no-such-flag"], 2),
        (&["bd", "--anchor", "only.csv"], 2),
        (&["stats", "--weights", p(&missing)], 1),
        (&["stats", "--weights", p(&weights)], 0),
    ];
    for (args, want) in cases {
        let out = smfc(args);
        if out.status.code() != Some(want) {
            return Err(format!(
                "smfc {args:?} exited with {:?}, expected {want}",
                out.status.code()
            ));
        }
        if want != 0 && out.stderr.is_empty() {
            return Err(format!("smfc {args:?} failed silently"));
        }
    }
    Ok(())
}

/// `stats` prints the library's counts.
pub fn stats_match(dir: &Path) -> Result<(), String> {
    let w = dir.join("w.smfw");
    let c = model_stats(&Checkpoint::load(&w).map_err(|e| e.to_string())?);
    let stdout = ok(&["stats", "--weights", p(&w)])?;
    let want = format!("params: {}\nmacs: {}\n", c.params, c.macs);
    if stdout != want {
        return Err(format!("{stdout:?} != {want:?}"));
    }
    Ok(())
}
