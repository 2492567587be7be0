use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::canonical::Digest;
use crate::geo::TILE_SIZE;

const MAGIC: &[u8; 4] = b"ADF1";
const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 1 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::U8 => 1,
            DType::I16 => 2,
            DType::I32 => 3,
            DType::F32 => 4,
            DType::F64 => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => DType::U8,
            2 => DType::I16,
            3 => DType::I32,
            4 => DType::F32,
            5 => DType::F64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I16 => 2,
            DType::I32 | DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }

    /// True when `v` is exactly representable in this type.
    pub fn represents(self, v: f64) -> bool {
        match self {
            DType::U8 => v.fract() == 0.0 && (0.0..=255.0).contains(&v),
            DType::I16 => v.fract() == 0.0 && (-32768.0..=32767.0).contains(&v),
            DType::I32 => v.fract() == 0.0 && (-2147483648.0..=2147483647.0).contains(&v),
            DType::F32 => v.is_nan() || (v as f32) as f64 == v,
            DType::F64 => true,
        }
    }

    /// Fallback NODATA used when an operation must mark cells missing in a
    /// source that declared none.
    pub fn default_nodata(self) -> f64 {
        match self {
            DType::U8 => 255.0,
            DType::I16 => -32768.0,
            DType::I32 => -2147483648.0,
            DType::F32 | DType::F64 => -3.4e38_f32 as f64,
        }
    }
}

/// One band of one tile. Values are held as `f64`, which represents every
/// supported dtype exactly; the dtype governs the canonical encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub dtype: DType,
    pub width: u32,
    pub height: u32,
    pub nodata: Option<f64>,
    pub values: Vec<f64>,
}

impl Chunk {
    pub fn new(
        dtype: DType,
        width: u32,
        height: u32,
        nodata: Option<f64>,
        values: Vec<f64>,
    ) -> Result<Self, StoreError> {
        let chunk = Chunk { dtype, width, height, nodata, values };
        chunk.validate()?;
        Ok(chunk)
    }

    /// A full-size tile filled with one value.
    pub fn filled(dtype: DType, nodata: Option<f64>, value: f64) -> Self {
        let n = (TILE_SIZE * TILE_SIZE) as usize;
        Chunk { dtype, width: TILE_SIZE, height: TILE_SIZE, nodata, values: vec![value; n] }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let n = self.width as usize * self.height as usize;
        if self.values.len() != n {
            return Err(StoreError::InvalidChunk(format!(
                "{} values for a {}x{} chunk",
                self.values.len(),
                self.width,
                self.height
            )));
        }
        if let Some(nd) = self.nodata {
            if !nd.is_finite() || !self.dtype.represents(nd) {
                return Err(StoreError::InvalidChunk(format!("nodata {nd} not a {:?}", self.dtype)));
            }
        }
        if let Some(bad) = self.values.iter().find(|v| !self.dtype.represents(**v)) {
            return Err(StoreError::InvalidChunk(format!("value {bad} not a {:?}", self.dtype)));
        }
        Ok(())
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        match self.nodata {
            Some(nd) if nd.is_nan() => v.is_nan(),
            Some(nd) => v == nd,
            None => false,
        }
    }

    pub fn get(&self, col: u32, row: u32) -> f64 {
        self.values[(row * self.width + col) as usize]
    }

    pub fn set(&mut self, col: u32, row: u32, v: f64) {
        self.values[(row * self.width + col) as usize] = v;
    }

    /// Canonical byte form: `"ADF1"`, dtype code, width and height as u32 LE,
    /// nodata flag, nodata as f64 bits LE (zeros when absent), then values
    /// row-major little-endian in the declared dtype.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * self.dtype.size());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype.code());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        match self.nodata {
            Some(nd) => {
                out.push(1);
                out.extend_from_slice(&nd.to_bits().to_le_bytes());
            }
            None => {
                out.push(0);
                out.extend_from_slice(&[0u8; 8]);
            }
        }
        match self.dtype {
            DType::U8 => out.extend(self.values.iter().map(|&v| v as u8)),
            DType::I16 => {
                for &v in &self.values {
                    out.extend_from_slice(&(v as i16).to_le_bytes());
                }
            }
            DType::I32 => {
                for &v in &self.values {
                    out.extend_from_slice(&(v as i32).to_le_bytes());
                }
            }
            DType::F32 => {
                for &v in &self.values {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in &self.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn chunk_ref(&self) -> ChunkRef {
        ChunkRef(Digest::of(&self.canonical_bytes()))
    }

    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let bad = |m: &str| StoreError::InvalidChunk(m.to_string());
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(bad("missing ADF1 header"));
        }
        let dtype = DType::from_code(bytes[4]).ok_or_else(|| bad("unknown dtype code"))?;
        let width = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
        let height = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
        let nodata_bits = f64::from_bits(u64::from_le_bytes(bytes[14..22].try_into().unwrap()));
        let nodata = match bytes[13] {
            0 => None,
            1 => Some(nodata_bits),
            _ => return Err(bad("bad nodata flag")),
        };
        let body = &bytes[HEADER_LEN..];
        let n = width as usize * height as usize;
        if body.len() != n * dtype.size() {
            return Err(bad("payload length does not match dimensions"));
        }
        let values: Vec<f64> = match dtype {
            DType::U8 => body.iter().map(|&b| b as f64).collect(),
            DType::I16 => body
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
                .collect(),
            DType::I32 => body
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F32 => body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok(Chunk { dtype, width, height, nodata, values })
    }
}

/// Content address of a chunk: SHA-256 of its canonical bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChunkRef(pub Digest);

impl std::fmt::Display for ChunkRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_all_zero_u8_tile() {
        // Digest computed with Python hashlib over the documented layout.
        let c = Chunk::filled(DType::U8, None, 0.0);
        let bytes = c.canonical_bytes();
        assert_eq!(bytes.len(), 1_048_598);
        assert_eq!(
            c.chunk_ref().0.to_hex(),
            "2830cf0197ad8865421d93fcea1fcf17fd9e8d6dc2c9b8a2cc91ba226f74720c"
        );
    }

    #[test]
    fn golden_small_f32_with_nodata() {
        let c = Chunk::new(DType::F32, 2, 2, Some(-9999.0), vec![1.5, -9999.0, 0.0, 2.25]).unwrap();
        assert_eq!(
            hex::encode(c.canonical_bytes()),
            "4144463104020000000200000001000000008087c3c00000c03f003c1cc60000000000001040"
        );
        assert_eq!(
            c.chunk_ref().0.to_hex(),
            "eb70186f898785a68db5e16a039a57a69300c0c599cba99c2530e6625ccaef35"
        );
    }

    #[test]
    fn equal_content_equal_hash_and_flip_changes_it() {
        let a = Chunk::new(DType::I16, 3, 1, None, vec![-1.0, 0.0, 300.0]).unwrap();
        let b = Chunk::new(DType::I16, 3, 1, None, vec![-1.0, 0.0, 300.0]).unwrap();
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());
        let mut c = b.clone();
        c.values[2] = 301.0;
        assert_ne!(a.chunk_ref(), c.chunk_ref());
    }

    #[test]
    fn decode_inverts_encode_for_every_dtype() {
        for (dt, vals) in [
            (DType::U8, vec![0.0, 255.0]),
            (DType::I16, vec![-32768.0, 32767.0]),
            (DType::I32, vec![-5.0, 2147483647.0]),
            (DType::F32, vec![0.1f32 as f64, -3.5]),
            (DType::F64, vec![0.1, f64::MIN_POSITIVE]),
        ] {
            let c = Chunk::new(dt, 2, 1, Some(dt.default_nodata()), vals).unwrap();
            assert_eq!(Chunk::from_canonical_bytes(&c.canonical_bytes()).unwrap(), c);
        }
    }

    #[test]
    fn rejects_values_outside_dtype() {
        assert!(Chunk::new(DType::U8, 1, 1, None, vec![256.0]).is_err());
        assert!(Chunk::new(DType::I16, 1, 1, None, vec![0.5]).is_err());
        assert!(Chunk::new(DType::F32, 1, 1, None, vec![0.1]).is_err());
        assert!(Chunk::new(DType::U8, 2, 1, None, vec![1.0]).is_err());
    }
}
