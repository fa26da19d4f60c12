//! Uniform quantization with a learnable clip and straight-through gradients.
//!
//! Activations are clipped to `[0, alpha]` and snapped to one of `2^b`
//! uniformly spaced levels; `alpha` is a trained parameter. Weights use a
//! per-tensor symmetric 8-bit scheme over a full-precision master copy
//! (the optimizer updates the master, the forward pass sees the quantized
//! view).

use crate::tensor::Tensor;
use thiserror::Error;

/// Smallest clip value kept after an optimizer step; below this the level
/// set degenerates.
pub const ALPHA_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("bit width {0} outside [1, 8]")]
    BadBits(u8),
    #[error("clip alpha must be positive, got {0}")]
    BadAlpha(f64),
    #[error("value {value} at index {index} is not on a quantization level (nearest {nearest})")]
    OffLevel {
        index: usize,
        value: f64,
        nearest: f64,
    },
}

/// Per-site activation quantizer: learnable clip `alpha` and bit width `b`.
///
/// The level set is `q_i = alpha * i / (2^b - 1)` for `i in 0..2^b`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerState {
    alpha: f64,
    bits: u8,
}

impl QuantizerState {
    pub fn new(alpha: f64, bits: u8) -> Result<Self, QuantError> {
        if !(1..=8).contains(&bits) {
            return Err(QuantError::BadBits(bits));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(QuantError::BadAlpha(alpha));
        }
        Ok(QuantizerState { alpha, bits })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn num_levels(&self) -> usize {
        1usize << self.bits
    }

    pub fn levels(&self) -> Vec<f64> {
        let last = (self.num_levels() - 1) as f64;
        (0..self.num_levels())
            .map(|i| self.alpha * i as f64 / last)
            .collect()
    }

    /// Clip to `[0, alpha]` then snap to the nearest level; exact midpoints
    /// round to the higher level index.
    pub fn quantize_value(&self, x: f64) -> f64 {
        let last = (self.num_levels() - 1) as f64;
        let idx = self.quantize_index(x);
        self.alpha * idx as f64 / last
    }

    /// Level index of the quantized value.
    pub fn quantize_index(&self, x: f64) -> u16 {
        let last = (self.num_levels() - 1) as f64;
        let clipped = x.clamp(0.0, self.alpha);
        // round() on a non-negative argument rounds midpoints up.
        (clipped / self.alpha * last).round() as u16
    }
}

/// Elementwise clip-and-snap over a tensor.
pub fn quantize_activation(x: &Tensor, qs: &QuantizerState) -> Tensor {
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().map(|&v| qs.quantize_value(v)).collect(),
    )
    .expect("shape preserved")
}

/// Straight-through gradients for the clip-and-snap operation.
///
/// Rounding is treated as identity inside the clip range, so the input
/// gradient passes where `0 < x < alpha` and is zero elsewhere. The clip
/// gradient collects the upstream gradient over saturated-high elements:
/// `dalpha = sum over i of dy[i] * [x[i] >= alpha]`.
pub fn quantize_backward_ste(dy: &[f64], x: &[f64], qs: &QuantizerState) -> (Vec<f64>, f64) {
    debug_assert_eq!(dy.len(), x.len());
    let alpha = qs.alpha();
    let mut dx = vec![0.0; x.len()];
    let mut dalpha = 0.0;
    for i in 0..x.len() {
        if x[i] >= alpha {
            dalpha += dy[i];
        } else if x[i] > 0.0 {
            dx[i] = dy[i];
        }
    }
    (dx, dalpha)
}

/// Full-precision master copy of a weight tensor with its symmetric 8-bit
/// quantized view.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowWeights {
    master: Tensor,
}

impl ShadowWeights {
    pub fn new(master: Tensor) -> Self {
        ShadowWeights { master }
    }

    pub fn master(&self) -> &Tensor {
        &self.master
    }

    pub fn master_mut(&mut self) -> &mut Tensor {
        &mut self.master
    }

    /// Per-tensor symmetric scale. An all-zero tensor gets scale 1 so the
    /// quantized view stays all-zero.
    pub fn scale(&self) -> f64 {
        let max_abs = self
            .master
            .data()
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        if max_abs == 0.0 {
            1.0
        } else {
            max_abs / 127.0
        }
    }

    /// Quantized view of the master copy. Gradients pass straight through
    /// to the master (handled by the tape op).
    pub fn quantized(&self) -> Tensor {
        let scale = self.scale();
        quantize_weights_with_scale(self.master.data(), scale, self.master.shape())
    }
}

pub(crate) fn quantize_weights_with_scale(data: &[f64], scale: f64, shape: &[usize]) -> Tensor {
    let q: Vec<f64> = data
        .iter()
        .map(|&w| (w / scale).round().clamp(-127.0, 127.0) * scale)
        .collect();
    Tensor::new(shape.to_vec(), q).expect("shape preserved")
}

/// Map already-quantized values to their level indices.
///
/// Every element must sit on a level (1e-12 absolute tolerance); anything
/// else indicates an internal inconsistency upstream.
pub fn symbol_indices(xq: &Tensor, qs: &QuantizerState) -> Result<Vec<u16>, QuantError> {
    let mut out = Vec::with_capacity(xq.len());
    for (i, &v) in xq.data().iter().enumerate() {
        let idx = qs.quantize_index(v);
        let level = qs.alpha() * idx as f64 / (qs.num_levels() - 1) as f64;
        if (v - level).abs() > 1e-12 {
            return Err(QuantError::OffLevel {
                index: i,
                value: v,
                nearest: level,
            });
        }
        out.push(idx);
    }
    Ok(out)
}

/// Clip threshold from a calibration sample: the 99.9th percentile
/// (nearest-rank) of absolute values, floored at [`ALPHA_FLOOR`].
pub fn calibrate_alpha(values: &[f64]) -> f64 {
    if values.is_empty() {
        return ALPHA_FLOOR;
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.999 * abs.len() as f64).ceil() as usize).clamp(1, abs.len());
    abs[rank - 1].max(ALPHA_FLOOR)
}
