//! `MVOL` container: little-endian, magic `MVOL0001`, kind byte
//! (0 = f32 intensities, 1 = u8 labels), 3×u32 dims, 3×f64 spacing, then the
//! payload in x-fastest order.

use std::fs;
use std::path::Path;

use crate::data::volume::{LabelVolume, Volume};
use crate::error::{MvolError, Result};

pub const MAGIC: &[u8; 8] = b"MVOL0001";
pub const HEADER_LEN: usize = 8 + 1 + 3 * 4 + 3 * 8;
pub const IMAGE_SUFFIX: &str = ".img.mvol";
pub const LABEL_SUFFIX: &str = ".lbl.mvol";

#[derive(Clone, Debug, PartialEq)]
pub enum MvolData {
    Intensity(Volume),
    Labels(LabelVolume),
}

impl MvolData {
    fn kind_name(&self) -> &'static str {
        match self {
            MvolData::Intensity(_) => "intensity",
            MvolData::Labels(_) => "label",
        }
    }
}

fn header(kind: u8, dims: [usize; 3], spacing: [f64; 3], payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len);
    out.extend_from_slice(MAGIC);
    out.push(kind);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = header(0, v.dims(), v.spacing_mm(), v.data().len() * 4);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_labels(v: &LabelVolume) -> Vec<u8> {
    let mut out = header(1, v.dims(), v.spacing_mm(), v.labels().len());
    out.extend_from_slice(v.labels());
    out
}

pub fn decode(bytes: &[u8]) -> Result<MvolData, MvolError> {
    if bytes.len() < MAGIC.len() || &bytes[..8] != MAGIC {
        return Err(MvolError::BadMagic {
            found: bytes[..bytes.len().min(8)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(MvolError::TruncatedHeader {
            expected: HEADER_LEN,
            got: bytes.len(),
        });
    }
    let kind = bytes[8];
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let dims = [u32_at(9), u32_at(13), u32_at(17)];
    let spacing = [f64_at(21), f64_at(29), f64_at(37)];
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(MvolError::InvalidSpacing(spacing));
    }
    let elem = match kind {
        0 => 4,
        1 => 1,
        k => return Err(MvolError::UnknownKind(k)),
    };
    let count: usize = dims.iter().product();
    let expected = count * elem;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(MvolError::TruncatedPayload {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(MvolError::TrailingBytes {
            extra: payload.len() - expected,
        });
    }
    // Zero extents would make an empty payload; the volume types reject them.
    if count == 0 {
        return Err(MvolError::TruncatedPayload { expected: 1, got: 0 });
    }
    match kind {
        0 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Ok(MvolData::Intensity(
                Volume::new(dims, spacing, data).expect("header validated"),
            ))
        }
        _ => {
            if let Some(index) = payload.iter().position(|&l| l > 2) {
                return Err(MvolError::InvalidLabel {
                    index,
                    value: payload[index],
                });
            }
            Ok(MvolData::Labels(
                LabelVolume::new(dims, spacing, payload.to_vec()).expect("header validated"),
            ))
        }
    }
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<MvolData> {
    let bytes = fs::read(path)?;
    Ok(decode(&bytes)?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match read_mvol(path)? {
        MvolData::Intensity(v) => Ok(v),
        other => Err(MvolError::WrongKind {
            expected: "intensity",
            found: other.kind_name(),
        }
        .into()),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match read_mvol(path)? {
        MvolData::Labels(v) => Ok(v),
        other => Err(MvolError::WrongKind {
            expected: "label",
            found: other.kind_name(),
        }
        .into()),
    }
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v))?;
    Ok(())
}

pub fn write_labels(path: impl AsRef<Path>, v: &LabelVolume) -> Result<()> {
    fs::write(path, encode_labels(v))?;
    Ok(())
}
