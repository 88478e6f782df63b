//! `MCKP0001` checkpoint container: magic followed by length-prefixed named
//! buffers (`u32` name length, name bytes, `u64` payload length, payload), all
//! little-endian. Buffer order is fixed, so save → load → save is byte-identical.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::boundary_net::{BoundaryAwareNet, NetworkConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::layers::ParamStore;
use crate::tensor::Tensor;
use crate::training::{AdamState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCKP0001";

/// Serialisable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Completed optimiser steps.
    pub step: u64,
    pub epoch: u64,
    pub rng: RngState,
}

/// Hex SHA-256 over the canonical text of both configs.
pub fn config_hash(network: &NetworkConfig, train: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(network.to_text().as_bytes());
    h.update(b"\n--\n");
    h.update(train.to_text().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.network, &self.train)
    }

    /// Rebuild the network with this checkpoint's parameters.
    pub fn network(&self) -> Result<BoundaryAwareNet<f32>> {
        let mut net = BoundaryAwareNet::build(self.network, 0)?;
        let ps = net.params_mut();
        for (id, (name, t)) in ps.ids().zip(self.params.iter()).collect::<Vec<_>>() {
            if ps.name(id) != name || ps.get(id).shape() != t.shape() {
                return Err(CheckpointError::Malformed {
                    name: format!("param/{name}"),
                    detail: "does not match the network layout".into(),
                }
                .into());
            }
            *ps.get_mut(id) = t.clone();
        }
        if ps.len() != self.params.len() {
            return Err(CheckpointError::Malformed {
                name: "param/*".into(),
                detail: format!("{} tensors, network has {}", self.params.len(), ps.len()),
            }
            .into());
        }
        Ok(net)
    }
}

fn put(out: &mut Vec<u8>, name: &str, payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn tensor_bytes(shape: &[usize], data: &[f32]) -> Vec<u8> {
    let mut b = Vec::with_capacity(4 + 4 * shape.len() + 4 * data.len());
    b.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        b.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in data {
        b.extend_from_slice(&x.to_le_bytes());
    }
    b
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    put(&mut out, "config/network", ck.network.to_text().as_bytes());
    put(&mut out, "config/train", ck.train.to_text().as_bytes());
    put(&mut out, "config/hash", ck.config_hash().as_bytes());
    put(&mut out, "state/step", &ck.step.to_le_bytes());
    put(&mut out, "state/epoch", &ck.epoch.to_le_bytes());
    put(&mut out, "rng/seed", &ck.rng.seed);
    put(&mut out, "rng/stream", &ck.rng.stream.to_le_bytes());
    put(&mut out, "rng/word_pos", &ck.rng.word_pos.to_le_bytes());
    put(&mut out, "adam/t", &ck.adam.t.to_le_bytes());
    for (i, (name, t)) in ck.params.iter().enumerate() {
        put(&mut out, &format!("param/{name}"), &tensor_bytes(t.shape(), t.data()));
        put(&mut out, &format!("adam_m/{name}"), &tensor_bytes(t.shape(), &ck.adam.m[i]));
        put(&mut out, &format!("adam_v/{name}"), &tensor_bytes(t.shape(), &ck.adam.v[i]));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated { what: what.into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn buffer(&mut self) -> Result<(String, &'a [u8]), CheckpointError> {
        let n = u32::from_le_bytes(self.take(4, "buffer name length")?.try_into().expect("4"));
        let name = String::from_utf8(self.take(n as usize, "buffer name")?.to_vec()).map_err(|_| {
            CheckpointError::Malformed {
                name: "<name>".into(),
                detail: "buffer name is not UTF-8".into(),
            }
        })?;
        let len = u64::from_le_bytes(self.take(8, &name)?.try_into().expect("8"));
        let payload = self.take(usize::try_from(len).unwrap_or(usize::MAX), &name)?;
        Ok((name, payload))
    }

    fn expect(&mut self, name: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos == self.bytes.len() {
            return Err(CheckpointError::MissingBuffer(name.into()));
        }
        let (found, payload) = self.buffer()?;
        if found != name {
            return Err(CheckpointError::Malformed {
                name: found,
                detail: format!("expected buffer {name:?} at this position"),
            });
        }
        Ok(payload)
    }
}

fn fixed<const N: usize>(name: &str, b: &[u8]) -> Result<[u8; N], CheckpointError> {
    b.try_into().map_err(|_| CheckpointError::Malformed {
        name: name.into(),
        detail: format!("expected {N} bytes, found {}", b.len()),
    })
}

fn text(name: &str, b: &[u8]) -> Result<String, CheckpointError> {
    String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Malformed {
        name: name.into(),
        detail: "not UTF-8".into(),
    })
}

fn decode_tensor(name: &str, b: &[u8], shape: &[usize]) -> Result<Vec<f32>, CheckpointError> {
    let bad = |detail: String| CheckpointError::Malformed {
        name: name.into(),
        detail,
    };
    if b.len() < 4 {
        return Err(bad("missing rank".into()));
    }
    let rank = u32::from_le_bytes(b[..4].try_into().expect("4")) as usize;
    let head = 4 + 4 * rank;
    if b.len() < head {
        return Err(bad("truncated shape".into()));
    }
    let dims: Vec<usize> = b[4..head]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4")) as usize)
        .collect();
    if dims != shape {
        return Err(bad(format!("shape {dims:?}, network expects {shape:?}")));
    }
    let n: usize = dims.iter().product();
    if b.len() - head != 4 * n {
        return Err(bad(format!("{} payload bytes for {n} values", b.len() - head)));
    }
    Ok(b[head..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
        .collect())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..bytes.len().min(8)].to_vec(),
        }
        .into());
    }
    let mut r = Reader { bytes, pos: 8 };
    let net_text = text("config/network", r.expect("config/network")?)?;
    let train_text = text("config/train", r.expect("config/train")?)?;
    let stored_hash = text("config/hash", r.expect("config/hash")?)?;
    let network = NetworkConfig::from_text(&net_text)?;
    let train = TrainConfig::from_text(&train_text)?;
    let actual = config_hash(&network, &train);
    if actual != stored_hash {
        return Err(CheckpointError::ConfigHashMismatch {
            expected: actual,
            found: stored_hash,
        }
        .into());
    }
    let step = u64::from_le_bytes(fixed("state/step", r.expect("state/step")?)?);
    let epoch = u64::from_le_bytes(fixed("state/epoch", r.expect("state/epoch")?)?);
    let rng = RngState {
        seed: fixed("rng/seed", r.expect("rng/seed")?)?,
        stream: u64::from_le_bytes(fixed("rng/stream", r.expect("rng/stream")?)?),
        word_pos: u128::from_le_bytes(fixed("rng/word_pos", r.expect("rng/word_pos")?)?),
    };
    let t = u64::from_le_bytes(fixed("adam/t", r.expect("adam/t")?)?);

    // The layout (names and shapes) comes from the embedded network config.
    let template = BoundaryAwareNet::<f32>::build(network, 0)?;
    let mut params = ParamStore::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for (name, t) in template.params().iter() {
        let pname = format!("param/{name}");
        let data = decode_tensor(&pname, r.expect(&pname)?, t.shape())?;
        params.add(name, Tensor::new(t.shape(), data)?);
        let mname = format!("adam_m/{name}");
        m.push(decode_tensor(&mname, r.expect(&mname)?, t.shape())?);
        let vname = format!("adam_v/{name}");
        v.push(decode_tensor(&vname, r.expect(&vname)?, t.shape())?);
    }
    if r.pos != bytes.len() {
        let (name, _) = r.buffer()?;
        return Err(CheckpointError::Malformed {
            name,
            detail: "unexpected trailing buffer".into(),
        }
        .into());
    }
    let adam = AdamState {
        m,
        v,
        t,
        beta1: train.adam_beta1,
        beta2: train.adam_beta2,
        eps: train.adam_eps,
    };
    Ok(Checkpoint {
        network,
        train,
        params,
        adam,
        step,
        epoch,
        rng,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Load and refuse unless the checkpoint was written under exactly these configs.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    network: &NetworkConfig,
    train: &TrainConfig,
) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let expected = config_hash(network, train);
    let found = ck.config_hash();
    if expected != found {
        return Err(Error::Checkpoint(CheckpointError::ConfigHashMismatch { expected, found }));
    }
    Ok(ck)
}
