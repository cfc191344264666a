//! Half/single precision conversion kernels.
//!
//! Gradients stay in FP16 in host memory through the backward pass and are
//! widened to FP32 only when their subgroup is about to be updated. Updated
//! FP32 parameters are narrowed back to FP16 for the device copy.

use half::f16;
use half::slice::HalfFloatSliceExt;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::exec::{Exec, CHUNK};

pub type TensorF32 = Vec<f32>;

/// Host-resident FP16 gradient accumulation buffer of one subgroup.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBufferF16 {
    data: Vec<f16>,
    accumulation_steps: u32,
}

impl GradBufferF16 {
    pub fn new(len: usize) -> Self {
        Self {
            data: vec![f16::ZERO; len],
            accumulation_steps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f16] {
        &self.data
    }

    pub fn accumulation_steps(&self) -> u32 {
        self.accumulation_steps
    }

    /// Zeroes the buffer at the start of a new accumulation window.
    pub fn reset(&mut self) {
        self.data.fill(f16::ZERO);
        self.accumulation_steps = 0;
    }

    /// Adds one micro-batch gradient. The sum is formed in FP32 and rounded
    /// back to FP16 once per step.
    pub fn accumulate(&mut self, micro: &[f16]) -> Result<()> {
        if micro.len() != self.data.len() {
            return Err(Error::LengthMismatch {
                expected: self.data.len(),
                got: micro.len(),
            });
        }
        if self.accumulation_steps == 0 {
            self.data.copy_from_slice(micro);
        } else {
            for (acc, g) in self.data.iter_mut().zip(micro) {
                *acc = f16::from_f32(acc.to_f32() + g.to_f32());
            }
        }
        self.accumulation_steps += 1;
        Ok(())
    }

    /// Index of the first NaN or infinite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// Widens FP16 gradients to a new FP32 tensor.
pub fn upscale_f16_to_f32(g16: &[f16]) -> Result<TensorF32> {
    let mut out = vec![0.0f32; g16.len()];
    upscale_into(g16, &mut out, Exec::default())?;
    Ok(out)
}

/// Widens `src` into `dst`. Every FP16 value is exactly representable in
/// FP32, so the result does not depend on `exec`.
///
/// Returns [`Error::GradientOverflow`] when `src` holds a NaN or infinity;
/// `dst` contents are unspecified in that case.
pub fn upscale_into(src: &[f16], dst: &mut [f32], exec: Exec) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch {
            expected: src.len(),
            got: dst.len(),
        });
    }
    let chunk = |(k, (s, d)): (usize, (&[f16], &mut [f32]))| -> Option<usize> {
        s.convert_to_f32_slice(d);
        d.iter().position(|v| !v.is_finite()).map(|p| k * CHUNK + p)
    };
    let bad = match exec {
        Exec::Sequential => src
            .chunks(CHUNK)
            .zip(dst.chunks_mut(CHUNK))
            .enumerate()
            .filter_map(chunk)
            .min(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => src
            .par_chunks(CHUNK)
            .zip(dst.par_chunks_mut(CHUNK))
            .enumerate()
            .filter_map(chunk)
            .min(),
    };
    match bad {
        Some(index) => Err(Error::GradientOverflow { index }),
        None => Ok(()),
    }
}

/// Narrows `src` into `dst` with round-to-nearest-even. Finite inputs that
/// round past the FP16 range become infinities; their count is returned.
pub fn downscale_f32_to_f16(src: &[f32], dst: &mut [f16]) -> Result<usize> {
    downscale_into(src, dst, Exec::default())
}

pub fn downscale_into(src: &[f32], dst: &mut [f16], exec: Exec) -> Result<usize> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch {
            expected: src.len(),
            got: dst.len(),
        });
    }
    let chunk = |(s, d): (&[f32], &mut [f16])| -> usize {
        d.convert_from_f32_slice(s);
        s.iter()
            .zip(d.iter())
            .filter(|(x, h)| x.is_finite() && h.is_infinite())
            .count()
    };
    let overflow = match exec {
        Exec::Sequential => src.chunks(CHUNK).zip(dst.chunks_mut(CHUNK)).map(chunk).sum(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => src
            .par_chunks(CHUNK)
            .zip(dst.par_chunks_mut(CHUNK))
            .map(chunk)
            .sum(),
    };
    Ok(overflow)
}
