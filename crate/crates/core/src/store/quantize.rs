//! Optional lossy compression by uniform scalar quantization.
//!
//! Values are snapped to the grid `min + k * step` with `step` just under
//! `2 * max_abs_error`, so every reconstructed cell lies within the bound. The
//! grid depends only on the chunk minimum and the bound, which makes the
//! quantizer idempotent on its own output.

use serde::{Deserialize, Serialize};

use super::{Chunk, DType, StoreError};

/// Relative slack taken off the step so that f64 rounding in the
/// reconstruction never pushes a cell past the bound.
const STEP_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub min: f64,
    pub step: f64,
    /// Bits per value needed for the largest code.
    pub bits: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    /// Reconstructed values, always `f64` so they sit exactly on the grid.
    pub chunk: Chunk,
    pub codebook: Codebook,
    /// One code per cell; NODATA cells carry code 0.
    pub codes: Vec<u32>,
}

/// Bits needed to encode a value range at the given bound.
pub fn bits_for_range(min: f64, max: f64, max_abs_error: f64) -> u32 {
    ((max - min) / (2.0 * max_abs_error) + 1.0).log2().ceil() as u32
}

pub fn lossy_quantize(chunk: &Chunk, max_abs_error: f64) -> Result<Quantized, StoreError> {
    if !chunk.dtype.is_float() {
        return Err(StoreError::NotFloat);
    }
    if !(max_abs_error > 0.0 && max_abs_error.is_finite()) {
        return Err(StoreError::InvalidBound);
    }
    let data = || chunk.values.iter().copied().filter(|v| !chunk.is_nodata(*v) && v.is_finite());
    let min = data().fold(f64::INFINITY, f64::min);
    let min = if min.is_finite() { min } else { 0.0 };
    let step = 2.0 * max_abs_error * (1.0 - STEP_SLACK);

    let mut codes = Vec::with_capacity(chunk.values.len());
    let mut values = Vec::with_capacity(chunk.values.len());
    let mut max_code = 0u32;
    for &v in &chunk.values {
        if chunk.is_nodata(v) || !v.is_finite() {
            // NODATA and non-finite cells pass through untouched.
            codes.push(0);
            values.push(v);
            continue;
        }
        let k = ((v - min) / step).round() as u32;
        let (code, recon) = [k.saturating_sub(1), k, k + 1]
            .into_iter()
            .map(|c| (c, min + c as f64 * step))
            .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
            .expect("three candidates");
        if (recon - v).abs() > max_abs_error {
            return Err(StoreError::InvalidBound);
        }
        max_code = max_code.max(code);
        codes.push(code);
        values.push(recon);
    }
    let bits = if max_code == 0 { 0 } else { 32 - max_code.leading_zeros() };
    let out = Chunk {
        dtype: DType::F64,
        width: chunk.width,
        height: chunk.height,
        nodata: chunk.nodata,
        values,
    };
    Ok(Quantized { chunk: out, codebook: Codebook { min, step, bits }, codes })
}
