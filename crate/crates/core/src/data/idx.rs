//! IDX tensors (the MNIST / Fashion-MNIST distribution format).
//!
//! Layout: big-endian magic `0x0000 TT NN` (`TT` = element type, only `0x08`
//! unsigned bytes are supported; `NN` = number of dimensions), `NN` big-endian
//! `u32` sizes, then the row-major payload.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

const UNSIGNED_BYTE: u8 = 0x08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::mismatch("idx payload", expected, data.len()));
        }
        Ok(Self { dims, data })
    }

    /// Number of items along the first axis.
    pub fn items(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    /// Elements per item (product of the trailing dimensions).
    pub fn item_len(&self) -> usize {
        self.dims.iter().skip(1).product()
    }
}

pub fn read_idx(bytes: &[u8]) -> Result<IdxTensor> {
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or(Error::TruncatedPayload {
                expected: at + 4,
                available: bytes.len(),
            })
    };
    let magic = word(0)?;
    let [z0, z1, kind, ndim] = magic.to_be_bytes();
    if z0 != 0 || z1 != 0 || kind != UNSIGNED_BYTE || !(1..=3).contains(&ndim) {
        return Err(Error::BadMagic(magic));
    }
    let ndim = ndim as usize;
    let dims = (0..ndim)
        .map(|k| word(4 + 4 * k).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::TruncatedPayload {
            expected: usize::MAX,
            available: bytes.len() - header,
        })?;
    let available = bytes.len() - header;
    if payload > available {
        return Err(Error::TruncatedPayload {
            expected: payload,
            available,
        });
    }
    Ok(IdxTensor {
        dims,
        data: bytes[header..header + payload].to_vec(),
    })
}

pub fn write_idx(tensor: &IdxTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * tensor.dims.len() + tensor.data.len());
    out.extend_from_slice(&[0, 0, UNSIGNED_BYTE, tensor.dims.len() as u8]);
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&tensor.data);
    out
}

/// Reads an IDX file, gunzipping it first when it starts with `1f 8b`.
pub fn load_idx_file(path: &Path) -> Result<IdxTensor> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut bytes = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        read_idx(&bytes)
    } else {
        read_idx(&raw)
    }
}
