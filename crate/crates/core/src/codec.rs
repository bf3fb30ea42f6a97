//! Bit-packed latent codes and the code-file container.
//!
//! A code of `dim` bits packs into `ceil(dim / 8)` bytes. Bit `i` lands in
//! byte `i / 8` at position `i % 8`, least significant bit first; unused
//! high bits of the final byte are zero.
//!
//! Code files carry a 16-byte little-endian header followed by the packed
//! codes back to back:
//!
//! | offset | size | field                 |
//! |-------:|-----:|-----------------------|
//! | 0      | 4    | magic `VABC`          |
//! | 4      | 4    | `dim_z` (u32)         |
//! | 8      | 8    | number of codes (u64) |

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CODE_FILE_MAGIC: &[u8; 4] = b"VABC";
pub const CODE_FILE_HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentCode {
    bits: Vec<bool>,
}

impl LatentCode {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Input("latent code needs at least one bit".into()));
        }
        Ok(Self { bits })
    }

    /// Bit `j` is set iff `row[j] >= 0.5`.
    pub fn from_row(row: &[f64]) -> Result<Self> {
        Self::new(row.iter().map(|&v| v >= 0.5).collect())
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn to_row(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

pub fn packed_len(dim: usize) -> usize {
    dim.div_ceil(8)
}

pub fn pack_bits(code: &LatentCode) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(code.dim())];
    for (i, _) in code.bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], dim: usize) -> Result<LatentCode> {
    if dim == 0 {
        return Err(Error::Input("code dimension must be positive".into()));
    }
    let need = packed_len(dim);
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need,
            actual: bytes.len(),
        });
    }
    LatentCode::new((0..dim).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeFile {
    pub dim_z: usize,
    pub codes: Vec<LatentCode>,
}

impl CodeFile {
    pub fn from_hard_codes(codes: &Tensor) -> Result<Self> {
        let dim_z = codes.cols();
        let codes = codes.iter_rows().map(LatentCode::from_row).collect::<Result<_>>()?;
        Ok(Self { dim_z, codes })
    }

    /// Codes as a `[count × dim_z]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = self.codes.iter().flat_map(LatentCode::to_row).collect();
        Tensor::matrix(self.codes.len(), self.dim_z, data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim = u32::try_from(self.dim_z)
            .map_err(|_| Error::Input(format!("dim_z {} does not fit the header", self.dim_z)))?;
        let mut out = Vec::with_capacity(CODE_FILE_HEADER_LEN + self.codes.len() * packed_len(self.dim_z));
        out.extend_from_slice(CODE_FILE_MAGIC);
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&(self.codes.len() as u64).to_le_bytes());
        for code in &self.codes {
            if code.dim() != self.dim_z {
                return Err(Error::dim("code file", &[code.dim()], &[self.dim_z]));
            }
            out.extend(pack_bits(code));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CODE_FILE_HEADER_LEN {
            return Err(Error::Truncated {
                expected: CODE_FILE_HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != CODE_FILE_MAGIC {
            return Err(Error::BadMagic {
                expected: CODE_FILE_MAGIC.to_vec(),
                found: bytes[..4].to_vec(),
            });
        }
        let dim_z = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if dim_z == 0 {
            return Err(Error::Format("code file declares dim_z = 0".into()));
        }
        let stride = packed_len(dim_z);
        let payload = &bytes[CODE_FILE_HEADER_LEN..];
        let expected = count.checked_mul(stride).ok_or_else(|| Error::Format("code count overflows".into()))?;
        if payload.len() != expected {
            return Err(Error::Truncated {
                expected: CODE_FILE_HEADER_LEN + expected,
                actual: bytes.len(),
            });
        }
        let codes = payload
            .chunks_exact(stride)
            .map(|chunk| unpack_bits(chunk, dim_z))
            .collect::<Result<_>>()?;
        Ok(Self { dim_z, codes })
    }
}
