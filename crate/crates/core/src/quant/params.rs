//! Uniform 8-bit affine quantization parameters.
//!
//! Rounding is ties-away-from-zero (`f32::round`) everywhere.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const BITS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScheme {
    /// uint8 in [0, 255] with a zero point; used for activations.
    PerTensorAsymmetric,
    /// int8 in [-127, 127], zero point 0, one scale per channel; used for weights.
    PerChannelSymmetric,
}

impl QuantScheme {
    pub fn qrange(self) -> (f32, f32) {
        match self {
            QuantScheme::PerTensorAsymmetric => (0.0, 255.0),
            QuantScheme::PerChannelSymmetric => (-127.0, 127.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scheme: QuantScheme,
    pub bits: u8,
    /// One entry for per-tensor, one per channel for per-channel.
    pub scale: Vec<f32>,
    pub zero_point: i32,
    /// Channel axis for per-channel params.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
}

impl QuantParams {
    pub fn per_tensor(scale: f32, zero_point: i32) -> Self {
        Self {
            scheme: QuantScheme::PerTensorAsymmetric,
            bits: BITS,
            scale: vec![scale],
            zero_point,
            axis: None,
        }
    }

    pub fn per_channel(scales: Vec<f32>, axis: usize) -> Self {
        Self {
            scheme: QuantScheme::PerChannelSymmetric,
            bits: BITS,
            scale: scales,
            zero_point: 0,
            axis: Some(axis),
        }
    }

    /// Checks the scheme invariants.
    pub fn is_valid(&self) -> bool {
        let scales_ok =
            !self.scale.is_empty() && self.scale.iter().all(|s| *s > 0.0 && s.is_finite());
        let zp_ok = match self.scheme {
            QuantScheme::PerTensorAsymmetric => {
                self.scale.len() == 1 && (0..=255).contains(&self.zero_point)
            }
            QuantScheme::PerChannelSymmetric => self.zero_point == 0 && self.axis.is_some(),
        };
        self.bits == BITS && scales_ok && zp_ok
    }

    /// Real-valued interval covered by the integer grid for channel `c`.
    pub fn representable_range(&self, c: usize) -> (f32, f32) {
        let (qmin, qmax) = self.scheme.qrange();
        let s = self.scale[c.min(self.scale.len() - 1)];
        let zp = self.zero_point as f32;
        ((qmin - zp) * s, (qmax - zp) * s)
    }
}

/// Per-channel symmetric weight params: `scale[c] = max|w[c, ...]| / 127`, all-zero channel -> 1.
pub fn compute_weight_qparams(weights: &Tensor, channel_axis: usize) -> QuantParams {
    let shape = weights.shape();
    let channels = shape[channel_axis];
    let inner: usize = shape[channel_axis + 1..].iter().product();
    let mut absmax = vec![0.0f32; channels];
    for (i, chunk) in weights.data().chunks(inner).enumerate() {
        let c = i % channels;
        for v in chunk {
            absmax[c] = absmax[c].max(v.abs());
        }
    }
    let scales = absmax
        .into_iter()
        .map(|m| if m > 0.0 { m / 127.0 } else { 1.0 })
        .collect();
    QuantParams::per_channel(scales, channel_axis)
}

/// Per-tensor asymmetric params for an observed range; the range is widened to include 0.
/// A degenerate range (`min == max`) maps to scale 1, zero point 0.
pub fn activation_qparams(min: f32, max: f32) -> QuantParams {
    if max.is_nan() || min.is_nan() || max <= min {
        return QuantParams::per_tensor(1.0, 0);
    }
    let lo = min.min(0.0);
    let hi = max.max(0.0);
    let scale = (hi - lo) / 255.0;
    let zp = (-lo / scale).round().clamp(0.0, 255.0) as i32;
    QuantParams::per_tensor(scale, zp)
}

#[inline]
pub fn fake_quantize_value(x: f32, scale: f32, zero_point: f32, qmin: f32, qmax: f32) -> f32 {
    let q = ((x / scale).round() + zero_point).clamp(qmin, qmax);
    (q - zero_point) * scale
}

/// Quantize-dequantize round trip.
pub fn fake_quantize(x: &Tensor, qp: &QuantParams) -> Tensor {
    let (qmin, qmax) = qp.scheme.qrange();
    let zp = qp.zero_point as f32;
    match qp.axis {
        Some(axis) if qp.scheme == QuantScheme::PerChannelSymmetric => {
            let shape = x.shape();
            let channels = shape[axis];
            assert_eq!(
                channels,
                qp.scale.len(),
                "per-channel params do not match tensor channels"
            );
            let inner: usize = shape[axis + 1..].iter().product();
            let mut out = x.clone();
            for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
                let s = qp.scale[i % channels];
                for v in chunk {
                    *v = fake_quantize_value(*v, s, zp, qmin, qmax);
                }
            }
            out
        }
        _ => {
            let s = qp.scale[0];
            x.map(|v| fake_quantize_value(v, s, zp, qmin, qmax))
        }
    }
}
