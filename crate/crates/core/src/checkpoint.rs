//! Checkpoint directory format: a text manifest plus one flat little-endian
//! 32-bit-float binary per tensor (network parameters and Adam moments).
//! Loading verifies per-tensor SHA-256 digests and the config fingerprint;
//! save -> load -> save is byte-identical.

use crate::optim::AdamState;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{hex_of, Stage, TrainConfig, TrainState};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

const FORMAT_LINE: &str = "crossview-checkpoint 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("config fingerprint mismatch: manifest {manifest}, expected {expected}")]
    FingerprintMismatch { manifest: String, expected: String },
    #[error("tensor {name}: {reason}")]
    Tensor { name: String, reason: String },
    #[error("train config: {0}")]
    Config(String),
}

fn tensor_bytes<F: Scalar>(t: &Tensor<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.into_f32().to_le_bytes());
    }
    out
}

fn tensor_from_bytes<F: Scalar>(rows: usize, cols: usize, bytes: &[u8]) -> Option<Tensor<F>> {
    if bytes.len() != rows * cols * 4 {
        return None;
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| F::of_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Some(Tensor::from_vec(rows, cols, data))
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_of(&h.finalize())
}

/// All tensors of a state in a fixed order: parameters then Adam moments.
fn named_tensors<F: Scalar>(state: &TrainState<F>) -> Vec<(String, Tensor<F>)> {
    let mut out: Vec<(String, Tensor<F>)> = Vec::new();
    for (net, adam) in [
        (state.encoder.tensors(), &state.adam_e),
        (state.generator.tensors(), &state.adam_g),
        (state.discriminator.tensors(), &state.adam_d),
    ] {
        for (i, (name, t)) in net.iter().enumerate() {
            out.push((name.clone(), (*t).clone()));
            out.push((format!("{name}.m"), adam.moments[i].m.clone()));
            out.push((format!("{name}.v"), adam.moments[i].v.clone()));
        }
    }
    out
}

/// Write a checkpoint directory (created if absent, contents overwritten).
pub fn save<F: Scalar>(state: &TrainState<F>, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let tensors = named_tensors(state);
    let mut manifest = String::new();
    manifest.push_str(FORMAT_LINE);
    manifest.push('\n');
    manifest.push_str(&format!("step {}\n", state.step));
    manifest.push_str(&format!("stage {}\n", state.stage.as_str()));
    manifest.push_str(&format!("stage_step {}\n", state.stage_step));
    manifest.push_str(&format!("config_fingerprint {}\n", state.config.fingerprint()));
    for (name, rng) in [
        ("latent", &state.rngs.latent),
        ("eps", &state.rngs.eps),
        ("pair", &state.rngs.pair),
        ("order", &state.rngs.order_base),
    ] {
        manifest.push_str(&format!("rng {name} {} {}\n", rng.seed(), rng.counter()));
    }
    manifest.push_str(&format!(
        "adam_steps {} {} {}\n",
        state.adam_e.step, state.adam_g.step, state.adam_d.step
    ));
    manifest.push_str("config_begin\n");
    manifest.push_str(&state.config.canonical_kv());
    manifest.push_str("config_end\n");
    for (name, t) in &tensors {
        let bytes = tensor_bytes(t);
        let file = format!("{name}.bin");
        fs::write(dir.join(&file), &bytes)?;
        manifest.push_str(&format!(
            "tensor {name} {} {} {} {file}\n",
            t.rows(),
            t.cols(),
            sha_hex(&bytes)
        ));
    }
    let mut f = fs::File::create(dir.join("manifest.txt"))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

struct ManifestData {
    step: u64,
    stage: Stage,
    stage_step: u64,
    fingerprint: String,
    rngs: BTreeMap<String, (u64, u64)>,
    adam_steps: (u64, u64, u64),
    config_kv: String,
    tensors: Vec<(String, usize, usize, String, String)>,
}

fn parse_manifest(text: &str) -> Result<ManifestData, CheckpointError> {
    let mut lines = text.lines();
    if lines.next() != Some(FORMAT_LINE) {
        return Err(CheckpointError::Manifest("unknown format line".into()));
    }
    let mut step = None;
    let mut stage = None;
    let mut stage_step = None;
    let mut fingerprint = None;
    let mut rngs = BTreeMap::new();
    let mut adam_steps = None;
    let mut config_kv = String::new();
    let mut tensors = Vec::new();
    let mut in_config = false;
    for line in lines {
        if in_config {
            if line == "config_end" {
                in_config = false;
            } else {
                config_kv.push_str(line);
                config_kv.push('\n');
            }
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("step") => step = parts.next().and_then(|v| v.parse().ok()),
            Some("stage") => stage = parts.next().and_then(Stage::parse),
            Some("stage_step") => stage_step = parts.next().and_then(|v| v.parse().ok()),
            Some("config_fingerprint") => fingerprint = parts.next().map(String::from),
            Some("rng") => {
                let name = parts.next().unwrap_or_default().to_string();
                let seed = parts.next().and_then(|v| v.parse().ok());
                let counter = parts.next().and_then(|v| v.parse().ok());
                match (seed, counter) {
                    (Some(s), Some(c)) => {
                        rngs.insert(name, (s, c));
                    }
                    _ => return Err(CheckpointError::Manifest(format!("bad rng line: {line}"))),
                }
            }
            Some("adam_steps") => {
                let vals: Vec<u64> = parts.filter_map(|v| v.parse().ok()).collect();
                if vals.len() != 3 {
                    return Err(CheckpointError::Manifest("bad adam_steps line".into()));
                }
                adam_steps = Some((vals[0], vals[1], vals[2]));
            }
            Some("config_begin") => in_config = true,
            Some("tensor") => {
                let name = parts.next().unwrap_or_default().to_string();
                let rows = parts.next().and_then(|v| v.parse().ok());
                let cols = parts.next().and_then(|v| v.parse().ok());
                let sha = parts.next().map(String::from);
                let file = parts.next().map(String::from);
                match (rows, cols, sha, file) {
                    (Some(r), Some(c), Some(s), Some(f)) => tensors.push((name, r, c, s, f)),
                    _ => return Err(CheckpointError::Manifest(format!("bad tensor line: {line}"))),
                }
            }
            Some(other) => {
                return Err(CheckpointError::Manifest(format!("unknown directive {other}")))
            }
            None => {}
        }
    }
    Ok(ManifestData {
        step: step.ok_or_else(|| CheckpointError::Manifest("missing step".into()))?,
        stage: stage.ok_or_else(|| CheckpointError::Manifest("missing stage".into()))?,
        stage_step: stage_step.ok_or_else(|| CheckpointError::Manifest("missing stage_step".into()))?,
        fingerprint: fingerprint.ok_or_else(|| CheckpointError::Manifest("missing fingerprint".into()))?,
        rngs,
        adam_steps: adam_steps.ok_or_else(|| CheckpointError::Manifest("missing adam_steps".into()))?,
        config_kv,
        tensors,
    })
}

/// Load a checkpoint directory into a fresh state.
pub fn load<F: Scalar>(dir: &Path) -> Result<TrainState<F>, CheckpointError> {
    let manifest = parse_manifest(&fs::read_to_string(dir.join("manifest.txt"))?)?;
    let config = TrainConfig::from_kv(&manifest.config_kv).map_err(CheckpointError::Config)?;
    if config.fingerprint() != manifest.fingerprint {
        return Err(CheckpointError::FingerprintMismatch {
            manifest: manifest.fingerprint,
            expected: config.fingerprint(),
        });
    }
    let mut state = TrainState::<F>::new(config).map_err(|e| CheckpointError::Config(e.to_string()))?;

    let mut stored: BTreeMap<String, Tensor<F>> = BTreeMap::new();
    for (name, rows, cols, sha, file) in &manifest.tensors {
        let bytes = fs::read(dir.join(file))?;
        if sha_hex(&bytes) != *sha {
            return Err(CheckpointError::Tensor {
                name: name.clone(),
                reason: "digest mismatch".into(),
            });
        }
        let t = tensor_from_bytes(*rows, *cols, &bytes).ok_or_else(|| CheckpointError::Tensor {
            name: name.clone(),
            reason: "size mismatch".into(),
        })?;
        stored.insert(name.clone(), t);
    }

    fill_net(&mut state.encoder.tensors().iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
             state.encoder.tensors_mut(), &mut state.adam_e, &stored)?;
    fill_net(&mut state.generator.tensors().iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
             state.generator.tensors_mut(), &mut state.adam_g, &stored)?;
    fill_net(&mut state.discriminator.tensors().iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
             state.discriminator.tensors_mut(), &mut state.adam_d, &stored)?;

    let get_rng = |name: &str| -> Result<RngStream, CheckpointError> {
        manifest
            .rngs
            .get(name)
            .map(|&(s, c)| RngStream::restore(s, c))
            .ok_or_else(|| CheckpointError::Manifest(format!("missing rng {name}")))
    };
    state.rngs.latent = get_rng("latent")?;
    state.rngs.eps = get_rng("eps")?;
    state.rngs.pair = get_rng("pair")?;
    state.rngs.order_base = get_rng("order")?;
    state.adam_e.step = manifest.adam_steps.0;
    state.adam_g.step = manifest.adam_steps.1;
    state.adam_d.step = manifest.adam_steps.2;
    state.step = manifest.step;
    state.stage = manifest.stage;
    state.stage_step = manifest.stage_step;
    Ok(state)
}

fn fill_net<F: Scalar>(
    names: &mut Vec<String>,
    tensors: Vec<&mut Tensor<F>>,
    adam: &mut AdamState<F>,
    stored: &BTreeMap<String, Tensor<F>>,
) -> Result<(), CheckpointError> {
    let fetch = |name: &str| -> Result<Tensor<F>, CheckpointError> {
        stored.get(name).cloned().ok_or_else(|| CheckpointError::Tensor {
            name: name.to_string(),
            reason: "missing from manifest".into(),
        })
    };
    for (i, (name, t)) in names.iter().zip(tensors).enumerate() {
        let loaded = fetch(name)?;
        if loaded.shape() != t.shape() {
            return Err(CheckpointError::Tensor {
                name: name.clone(),
                reason: format!("shape {:?} expected {:?}", loaded.shape(), t.shape()),
            });
        }
        *t = loaded;
        adam.moments[i].m = fetch(&format!("{name}.m"))?;
        adam.moments[i].v = fetch(&format!("{name}.v"))?;
    }
    Ok(())
}

/// Load and require the checkpoint's config to match `expected` (resume).
pub fn load_expecting<F: Scalar>(dir: &Path, expected: &TrainConfig) -> Result<TrainState<F>, CheckpointError> {
    let state = load::<F>(dir)?;
    if state.config.fingerprint() != expected.fingerprint() {
        return Err(CheckpointError::FingerprintMismatch {
            manifest: state.config.fingerprint(),
            expected: expected.fingerprint(),
        });
    }
    Ok(state)
}

/// The manifest text of a saved checkpoint (replay comparisons).
pub fn manifest_text(dir: &Path) -> Result<String, CheckpointError> {
    Ok(fs::read_to_string(dir.join("manifest.txt"))?)
}
