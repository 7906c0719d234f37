//! Binary checkpoint format:
//!
//! ```text
//! b"MRSRCKPT" | u32 LE version | u64 LE header length | JSON header | payload
//! ```
//!
//! The payload is every array listed in the header, in order, as
//! little-endian `f64`. The header carries the payload's SHA-256.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Phase, TrainState};
use crate::error::{Error, Result};
use crate::model::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::nn::{Adam, AdamConfig, AdamState, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MRSRCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    phase: Phase,
    pretrain_epochs_done: usize,
    adversarial_epochs_done: usize,
    generator_steps: u64,
    discriminator_steps: u64,
    g_optimizer: OptimizerHeader,
    d_optimizer: OptimizerHeader,
    rng: RngState,
    arrays: Vec<ArrayEntry>,
    payload_sha256: String,
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

fn push_group<'a>(
    entries: &mut Vec<ArrayEntry>,
    arrays: &mut Vec<&'a ArrayD<f64>>,
    group: &str,
    store: &ParamStore,
    values: impl IntoIterator<Item = &'a ArrayD<f64>>,
) {
    for (p, v) in store.params().iter().zip(values) {
        entries.push(ArrayEntry {
            group: group.to_string(),
            name: p.name.clone(),
            shape: v.shape().to_vec(),
        });
        arrays.push(v);
    }
}

fn encode(state: &TrainState) -> Vec<u8> {
    let g = state.generator.store();
    let d = state.discriminator.store();
    let mut entries = Vec::new();
    let mut arrays = Vec::new();
    push_group(
        &mut entries,
        &mut arrays,
        "generator",
        g,
        g.params().iter().map(|p| &p.value),
    );
    push_group(
        &mut entries,
        &mut arrays,
        "discriminator",
        d,
        d.params().iter().map(|p| &p.value),
    );
    push_group(
        &mut entries,
        &mut arrays,
        "g_optimizer.m",
        g,
        &state.g_optimizer.state.m,
    );
    push_group(
        &mut entries,
        &mut arrays,
        "g_optimizer.v",
        g,
        &state.g_optimizer.state.v,
    );
    push_group(
        &mut entries,
        &mut arrays,
        "d_optimizer.m",
        d,
        &state.d_optimizer.state.m,
    );
    push_group(
        &mut entries,
        &mut arrays,
        "d_optimizer.v",
        d,
        &state.d_optimizer.state.v,
    );

    let mut payload = Vec::with_capacity(arrays.iter().map(|a| a.len() * 8).sum());
    for a in &arrays {
        for v in a.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let rng = state.rng();
    let header = Header {
        generator: state.generator.config().clone(),
        discriminator: state.discriminator.config().clone(),
        phase: state.phase,
        pretrain_epochs_done: state.pretrain_epochs_done,
        adversarial_epochs_done: state.adversarial_epochs_done,
        generator_steps: state.generator_steps,
        discriminator_steps: state.discriminator_steps,
        g_optimizer: OptimizerHeader {
            config: state.g_optimizer.config,
            step: state.g_optimizer.state.step,
        },
        d_optimizer: OptimizerHeader {
            config: state.d_optimizer.config,
            step: state.d_optimizer.state.step,
        },
        rng: RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        },
        arrays: entries,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

/// Writes atomically: the data goes to a sibling temporary file first.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, encode(state)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn split_file<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Header, &'a [u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(
            path,
            format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| bad(path, format!("corrupt header: {e}")))?;
    let payload = &bytes[header_end..];
    let expected: usize = header
        .arrays
        .iter()
        .map(|a| a.shape.iter().product::<usize>() * 8)
        .sum();
    if payload.len() != expected {
        return Err(bad(
            path,
            format!("payload has {} bytes, expected {expected}", payload.len()),
        ));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(bad(path, "payload checksum mismatch"));
    }
    Ok((header, payload))
}

struct Arrays<'a> {
    entries: std::iter::Peekable<std::slice::Iter<'a, ArrayEntry>>,
    payload: &'a [u8],
    offset: usize,
}

impl Arrays<'_> {
    fn group(
        &mut self,
        path: &Path,
        group: &str,
        store: &ParamStore,
    ) -> Result<Vec<(String, ArrayD<f64>)>> {
        let mut out = Vec::with_capacity(store.len());
        while let Some(e) = self.entries.next_if(|e| e.group == group) {
            let n: usize = e.shape.iter().product();
            let data: Vec<f64> = self.payload[self.offset..self.offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            self.offset += n * 8;
            let a = ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|err| bad(path, err))?;
            out.push((e.name.clone(), a));
        }
        if out.len() != store.len() {
            return Err(bad(
                path,
                format!(
                    "group `{group}` has {} arrays, expected {}",
                    out.len(),
                    store.len()
                ),
            ));
        }
        Ok(out)
    }

    fn moments(
        &mut self,
        path: &Path,
        group: &str,
        store: &ParamStore,
    ) -> Result<Vec<ArrayD<f64>>> {
        let values = self.group(path, group, store)?;
        for (p, (name, v)) in store.params().iter().zip(&values) {
            if &p.name != name || p.value.shape() != v.shape() {
                return Err(bad(
                    path,
                    format!("`{group}` entry `{name}` does not match `{}`", p.name),
                ));
            }
        }
        Ok(values.into_iter().map(|(_, v)| v).collect())
    }
}

fn decode(
    path: &Path,
    bytes: &[u8],
    with_training: bool,
) -> Result<(Header, Generator, Option<TrainState>)> {
    let (header, payload) = split_file(path, bytes)?;
    let mut g = Generator::build(header.generator.clone(), 0).map_err(|e| bad(path, e))?;
    let mut arrays = Arrays {
        entries: header.arrays.iter().peekable(),
        payload,
        offset: 0,
    };
    let gv = arrays.group(path, "generator", g.store())?;
    g.store_mut().load_values(gv).map_err(|e| bad(path, e))?;
    if !with_training {
        return Ok((header, g, None));
    }
    let mut d = Discriminator::build(header.discriminator.clone(), 0).map_err(|e| bad(path, e))?;
    let dv = arrays.group(path, "discriminator", d.store())?;
    d.store_mut().load_values(dv).map_err(|e| bad(path, e))?;
    let g_opt = Adam {
        config: header.g_optimizer.config,
        state: AdamState {
            step: header.g_optimizer.step,
            m: arrays.moments(path, "g_optimizer.m", g.store())?,
            v: arrays.moments(path, "g_optimizer.v", g.store())?,
        },
    };
    let d_opt = Adam {
        config: header.d_optimizer.config,
        state: AdamState {
            step: header.d_optimizer.step,
            m: arrays.moments(path, "d_optimizer.m", d.store())?,
            v: arrays.moments(path, "d_optimizer.v", d.store())?,
        },
    };
    let mut seed = [0u8; 32];
    hex::decode_to_slice(&header.rng.seed, &mut seed)
        .map_err(|e| bad(path, format!("rng seed: {e}")))?;
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|e| bad(path, format!("rng position: {e}")))?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);
    let state = TrainState {
        generator: g.clone(),
        discriminator: d,
        g_optimizer: g_opt,
        d_optimizer: d_opt,
        phase: header.phase,
        pretrain_epochs_done: header.pretrain_epochs_done,
        adversarial_epochs_done: header.adversarial_epochs_done,
        generator_steps: header.generator_steps,
        discriminator_steps: header.discriminator_steps,
        rng,
    };
    Ok((header, g, Some(state)))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, _, state) = decode(path, &bytes, true)?;
    Ok(state.expect("training state requested"))
}

/// Only the generator, for inference.
pub fn load_generator(path: &Path) -> Result<Generator> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, g, _) = decode(path, &bytes, false)?;
    Ok(g)
}

/// Directory holding `latest.ckpt` plus one snapshot per finished epoch,
/// named `pretrain_epoch_0003.ckpt` or `adversarial_epoch_0012.ckpt`.
#[derive(Debug, Clone)]
pub struct CheckpointDir {
    root: PathBuf,
}

impl CheckpointDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CheckpointDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn latest(&self) -> PathBuf {
        self.root.join("latest.ckpt")
    }

    pub fn epoch_path(&self, phase: Phase, epoch: usize) -> PathBuf {
        self.root.join(format!("{phase}_epoch_{epoch:04}.ckpt"))
    }

    /// Snapshot named after the state's phase and last finished epoch, then
    /// `latest.ckpt`.
    pub fn save_epoch(&self, state: &TrainState) -> Result<()> {
        let epoch = match state.phase {
            Phase::Pretrain => state.pretrain_epochs_done,
            Phase::Adversarial => state.adversarial_epochs_done,
        };
        save_checkpoint(state, &self.epoch_path(state.phase, epoch))?;
        save_checkpoint(state, &self.latest())
    }

    pub fn load_latest(&self) -> Result<Option<TrainState>> {
        let p = self.latest();
        if p.exists() {
            load_checkpoint(&p).map(Some)
        } else {
            Ok(None)
        }
    }
}
