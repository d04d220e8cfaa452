//! Affine quantization primitives.
//!
//! `q = clamp(round(x / scale) + zero_point, qmin, qmax)` with rounding half
//! away from zero, and `x̂ = (q - zero_point) * scale`. The quotient is taken
//! in `f32` like a float32 runtime would; rounding, offsets and clamping are
//! done in `f64` so wide bit widths stay exact.

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bit_width: u32,
    pub scheme: Scheme,
    pub granularity: Granularity,
    pub scales: Vec<f32>,
    pub zero_points: Vec<i64>,
}

/// Integer range for a bit width: symmetric uses the restricted signed
/// range `[-(2^(b-1)-1), 2^(b-1)-1]`, asymmetric the unsigned `[0, 2^b-1]`.
pub fn qrange(bit_width: u32, scheme: Scheme) -> (i64, i64) {
    assert!((2..=32).contains(&bit_width), "bit width {bit_width} unsupported");
    match scheme {
        Scheme::Symmetric => {
            let m = (1i64 << (bit_width - 1)) - 1;
            (-m, m)
        }
        Scheme::Asymmetric => (0, (1i64 << bit_width) - 1),
    }
}

const MIN_SCALE: f64 = 1e-12;

fn params_from_range(lo: f32, hi: f32, bit_width: u32, scheme: Scheme) -> (f32, i64) {
    let (qmin, qmax) = qrange(bit_width, scheme);
    match scheme {
        Scheme::Symmetric => {
            let a = lo.abs().max(hi.abs()) as f64;
            let scale = (a / qmax as f64).max(MIN_SCALE);
            (scale as f32, 0)
        }
        Scheme::Asymmetric => {
            let lo = lo.min(0.0) as f64;
            let hi = hi.max(0.0) as f64;
            let scale = ((hi - lo) / (qmax - qmin) as f64).max(MIN_SCALE);
            let scale32 = scale as f32;
            let zp = (qmin as f64 - round_half_away((lo as f32 / scale32) as f64)).clamp(qmin as f64, qmax as f64);
            (scale32, zp as i64)
        }
    }
}

#[inline]
pub fn round_half_away(v: f64) -> f64 {
    // f64::round rounds half away from zero
    v.round()
}

impl QuantSpec {
    /// Per-tensor spec covering `[lo, hi]` (widened to include 0 when asymmetric).
    pub fn per_tensor(lo: f32, hi: f32, bit_width: u32, scheme: Scheme) -> Self {
        let (s, z) = params_from_range(lo, hi, bit_width, scheme);
        Self {
            bit_width,
            scheme,
            granularity: Granularity::PerTensor,
            scales: vec![s],
            zero_points: vec![z],
        }
    }

    /// Per-channel spec from per-channel `(lo, hi)` ranges.
    pub fn per_channel(ranges: &[(f32, f32)], axis: usize, bit_width: u32, scheme: Scheme) -> Self {
        let (scales, zero_points) = ranges
            .iter()
            .map(|&(lo, hi)| params_from_range(lo, hi, bit_width, scheme))
            .unzip();
        Self {
            bit_width,
            scheme,
            granularity: Granularity::PerChannel { axis },
            scales,
            zero_points,
        }
    }

    /// Symmetric per-output-channel (axis 0) spec from a weight tensor's max-abs.
    pub fn for_weight(w: &Tensor, bit_width: u32) -> Self {
        let o = w.shape()[0];
        let per = w.numel() / o.max(1);
        let ranges: Vec<(f32, f32)> = (0..o)
            .map(|c| {
                let a = w.data()[c * per..(c + 1) * per].iter().fold(0f32, |m, v| m.max(v.abs()));
                (-a, a)
            })
            .collect();
        Self::per_channel(&ranges, 0, bit_width, Scheme::Symmetric)
    }

    pub fn qrange(&self) -> (i64, i64) {
        qrange(self.bit_width, self.scheme)
    }

    pub fn validate(&self) -> Result<()> {
        let n = match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel { .. } => self.scales.len(),
        };
        if self.scales.len() != n || self.zero_points.len() != n || n == 0 {
            return Err(Error::Argument("quant spec scale/zero-point counts disagree".into()));
        }
        let (qmin, qmax) = self.qrange();
        for (&s, &z) in self.scales.iter().zip(&self.zero_points) {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Argument(format!("quant scale {s} must be positive")));
            }
            if z < qmin || z > qmax {
                return Err(Error::Argument(format!("zero point {z} outside [{qmin}, {qmax}]")));
            }
            if self.scheme == Scheme::Symmetric && z != 0 {
                return Err(Error::Argument("symmetric spec needs zero point 0".into()));
            }
        }
        Ok(())
    }

    /// Channel index of each flat element, for a tensor of `shape`.
    fn channel_of(&self, shape: &[usize]) -> impl Fn(usize) -> usize + '_ {
        let (dim, inner) = match self.granularity {
            Granularity::PerTensor => (1, 1),
            Granularity::PerChannel { axis } => {
                let inner: usize = shape[axis + 1..].iter().product();
                (shape[axis], inner)
            }
        };
        move |i| (i / inner) % dim
    }

    fn check_shape(&self, shape: &[usize]) {
        if let Granularity::PerChannel { axis } = self.granularity {
            assert_eq!(shape[axis], self.scales.len(), "per-channel spec does not match tensor axis {axis}");
        }
    }

    /// Real interval representable without saturation for channel `c`.
    pub fn real_range(&self, c: usize) -> (f64, f64) {
        let (qmin, qmax) = self.qrange();
        let s = self.scales[c] as f64;
        let z = self.zero_points[c];
        ((qmin - z) as f64 * s, (qmax - z) as f64 * s)
    }

    #[inline]
    fn q(&self, x: f32, c: usize, qmin: i64, qmax: i64) -> i64 {
        let v = round_half_away((x / self.scales[c]) as f64) + self.zero_points[c] as f64;
        v.clamp(qmin as f64, qmax as f64) as i64
    }

    #[inline]
    fn dq(&self, q: i64, c: usize) -> f32 {
        ((q - self.zero_points[c]) as f64 * self.scales[c] as f64) as f32
    }
}

pub fn quantize(x: &Tensor, spec: &QuantSpec) -> Vec<i64> {
    spec.check_shape(x.shape());
    let (qmin, qmax) = spec.qrange();
    let ch = spec.channel_of(x.shape());
    x.data().iter().enumerate().map(|(i, &v)| spec.q(v, ch(i), qmin, qmax)).collect()
}

pub fn dequantize(q: &[i64], shape: &[usize], spec: &QuantSpec) -> Tensor {
    spec.check_shape(shape);
    let ch = spec.channel_of(shape);
    let data = q.iter().enumerate().map(|(i, &v)| spec.dq(v, ch(i))).collect();
    Tensor::from_vec(shape, data)
}

/// Quantize-dequantize in one pass.
pub fn fake_quant_forward(x: &Tensor, spec: &QuantSpec) -> Tensor {
    fake_quant_with_mask(x, spec).0
}

/// Forward value plus the in-range indicator used by the clipped
/// straight-through gradient.
pub fn fake_quant_with_mask(x: &Tensor, spec: &QuantSpec) -> (Tensor, Vec<bool>) {
    spec.check_shape(x.shape());
    let (qmin, qmax) = spec.qrange();
    let ch = spec.channel_of(x.shape());
    let mut out = Vec::with_capacity(x.numel());
    let mut mask = Vec::with_capacity(x.numel());
    for (i, &v) in x.data().iter().enumerate() {
        let c = ch(i);
        out.push(spec.dq(spec.q(v, c, qmin, qmax), c));
        let (lo, hi) = spec.real_range(c);
        mask.push((v as f64) >= lo && (v as f64) <= hi);
    }
    (Tensor::from_vec(x.shape(), out), mask)
}

/// Clipped straight-through estimator: the upstream gradient passes where
/// `x` is inside the representable range and is zeroed where it saturates.
pub fn fake_quant_backward(upstream: &Tensor, x: &Tensor, spec: &QuantSpec) -> Tensor {
    assert_eq!(upstream.shape(), x.shape());
    let (_, mask) = fake_quant_with_mask(x, spec);
    let data = upstream
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, m)| if m { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Running min/max of one tensor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RangeObserver {
    pub min: f32,
    pub max: f32,
    pub count: u64,
}

impl RangeObserver {
    fn batch_range(t: &Tensor) -> (f32, f32) {
        t.data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Plain running min/max.
    pub fn observe_minmax(&mut self, t: &Tensor) {
        let (lo, hi) = Self::batch_range(t);
        if self.count == 0 {
            self.min = lo;
            self.max = hi;
        } else {
            self.min = self.min.min(lo);
            self.max = self.max.max(hi);
        }
        self.count += 1;
    }

    /// Exponential moving average of per-batch min/max; the first
    /// observation initializes both.
    pub fn observe_ema(&mut self, t: &Tensor, momentum: f32) {
        let (lo, hi) = Self::batch_range(t);
        if self.count == 0 {
            self.min = lo;
            self.max = hi;
        } else {
            self.min = momentum * self.min + (1.0 - momentum) * lo;
            self.max = momentum * self.max + (1.0 - momentum) * hi;
        }
        self.count += 1;
    }

    pub fn spec(&self, bit_width: u32) -> QuantSpec {
        QuantSpec::per_tensor(self.min, self.max, bit_width, Scheme::Asymmetric)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_maps_to_zero_point_and_saturates() {
        let spec = QuantSpec::per_tensor(-1.0, 3.0, 8, Scheme::Asymmetric);
        let q = quantize(&Tensor::from_vec(&[3], vec![0.0, 100.0, -100.0]), &spec);
        assert_eq!(q, vec![spec.zero_points[0], 255, 0]);
        let dq = dequantize(&[spec.zero_points[0]], &[1], &spec);
        assert_eq!(dq.data(), &[0.0]);
    }

    #[test]
    fn tie_rounds_away_from_zero() {
        let spec = QuantSpec {
            bit_width: 8,
            scheme: Scheme::Symmetric,
            granularity: Granularity::PerTensor,
            scales: vec![0.1],
            zero_points: vec![0],
        };
        let q = quantize(&Tensor::from_vec(&[2], vec![0.25, -0.25]), &spec);
        assert_eq!(q, vec![3, -3]);
    }

    #[test]
    fn constant_activation_range_starts_at_zero() {
        let mut obs = RangeObserver::default();
        obs.observe_minmax(&Tensor::full(&[4], 2.55));
        let spec = obs.spec(8);
        assert_eq!(spec.zero_points[0], 0);
        let (lo, hi) = spec.real_range(0);
        assert_eq!(lo, 0.0);
        assert!((hi - 2.55).abs() < 1e-6);
    }

    #[test]
    fn per_channel_matches_slicewise_scalar_specs() {
        let w = Tensor::from_vec(&[2, 3], vec![0.1, -0.5, 0.25, 4.0, -2.0, 1.0]);
        let spec = QuantSpec::for_weight(&w, 8);
        assert!(spec.zero_points.iter().all(|&z| z == 0));
        let q = quantize(&w, &spec);
        for c in 0..2 {
            let s = QuantSpec {
                granularity: Granularity::PerTensor,
                scales: vec![spec.scales[c]],
                zero_points: vec![0],
                ..spec.clone()
            };
            let slice = Tensor::from_vec(&[3], w.data()[c * 3..c * 3 + 3].to_vec());
            assert_eq!(quantize(&slice, &s), q[c * 3..c * 3 + 3]);
        }
    }

    #[test]
    fn ste_mask_is_range_indicator() {
        let spec = QuantSpec::per_tensor(-1.0, 1.0, 8, Scheme::Symmetric);
        let x = Tensor::from_vec(&[4], vec![-2.0, -0.5, 0.9, 1.5]);
        let g = fake_quant_backward(&Tensor::full(&[4], 1.0), &x, &spec);
        assert_eq!(g.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn ema_observer_initializes_then_smooths() {
        let mut o = RangeObserver::default();
        o.observe_ema(&Tensor::from_vec(&[2], vec![-1.0, 1.0]), 0.99);
        assert_eq!((o.min, o.max), (-1.0, 1.0));
        o.observe_ema(&Tensor::from_vec(&[2], vec![-3.0, 3.0]), 0.99);
        assert!((o.max - 1.02).abs() < 1e-6);
        assert!((o.min + 1.02).abs() < 1e-6);
    }
}
