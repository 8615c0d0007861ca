//! Affine int8 quantization parameters, range observers and fake quantization.

use crate::tensor::{Real, Tensor};

/// Smallest half-width a degenerate range is widened to.
pub const MIN_RANGE: f64 = 1e-6;
pub const OBSERVER_MOMENTUM: f64 = 0.99;

/// `real = scale * (code - zero_point)`.
///
/// Activations use the full asymmetric int8 range `[-128, 127]`; weights are
/// symmetric with `zero_point = 0` and codes in `[-127, 127]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub symmetric: bool,
}

pub fn round_half_even(v: f64) -> f64 {
    v.round_ties_even()
}

impl QuantParams {
    /// Asymmetric parameters covering `[min, max]`, widened to contain zero.
    pub fn from_range(min: f64, max: f64) -> Self {
        let mut lo = min.min(0.0);
        let mut hi = max.max(0.0);
        if hi - lo < 2.0 * MIN_RANGE {
            lo = lo.min(-MIN_RANGE);
            hi = hi.max(MIN_RANGE);
        }
        let scale = ((hi - lo) / 255.0) as f32;
        let zp = round_half_even(-128.0 - lo / scale as f64).clamp(-128.0, 127.0) as i32;
        Self {
            scale,
            zero_point: zp,
            symmetric: false,
        }
    }

    /// Symmetric parameters for values in `[-abs_max, abs_max]`.
    pub fn symmetric(abs_max: f64) -> Self {
        let m = abs_max.max(MIN_RANGE);
        Self {
            scale: (m / 127.0) as f32,
            zero_point: 0,
            symmetric: true,
        }
    }

    pub fn qmin(&self) -> i32 {
        if self.symmetric {
            -127
        } else {
            -128
        }
    }

    pub fn qmax(&self) -> i32 {
        127
    }

    /// Code before clamping.
    fn raw_code(&self, x: f64) -> f64 {
        round_half_even(x / self.scale as f64) + self.zero_point as f64
    }

    pub fn quantize(&self, x: f64) -> i32 {
        self.raw_code(x)
            .clamp(self.qmin() as f64, self.qmax() as f64) as i32
    }

    pub fn dequantize(&self, q: i32) -> f64 {
        (q - self.zero_point) as f64 * self.scale as f64
    }

    /// True when `x` lies inside the representable range (where the straight-through
    /// gradient passes).
    pub fn in_range(&self, x: f64) -> bool {
        let r = self.raw_code(x);
        r >= self.qmin() as f64 && r <= self.qmax() as f64
    }

    pub fn is_valid(&self) -> bool {
        self.scale > 0.0
            && self.scale.is_finite()
            && (-128..=127).contains(&self.zero_point)
            && (!self.symmetric || self.zero_point == 0)
    }
}

/// `(clamp(round(x / s) + z) - z) * s`.
pub fn fake_quant<R: Real>(x: R, qp: &QuantParams) -> R {
    R::lit(qp.dequantize(qp.quantize(x.as_f64())))
}

/// Fake-quantizes a tensor with symmetric per-tensor parameters taken from its own range.
pub fn fake_quant_weights<R: Real>(w: &Tensor<R>) -> (Tensor<R>, QuantParams) {
    let qp = QuantParams::symmetric(w.max_abs().as_f64());
    (w.map(|v| fake_quant(v, &qp)), qp)
}

/// Exponential moving average of per-batch min/max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observer {
    pub min: f64,
    pub max: f64,
    pub initialized: bool,
    pub momentum: f64,
}

impl Default for Observer {
    fn default() -> Self {
        Self {
            min: 0.0,
            max: 0.0,
            initialized: false,
            momentum: OBSERVER_MOMENTUM,
        }
    }
}

impl Observer {
    pub fn update(&mut self, batch_min: f64, batch_max: f64) {
        if !self.initialized {
            self.min = batch_min;
            self.max = batch_max;
            self.initialized = true;
        } else {
            let m = self.momentum;
            self.min = m * self.min + (1.0 - m) * batch_min;
            self.max = m * self.max + (1.0 - m) * batch_max;
        }
    }

    pub fn qparams(&self) -> QuantParams {
        QuantParams::from_range(self.min, self.max)
    }
}
