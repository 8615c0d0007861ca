//! BatchNorm folding, observer calibration, int8 export and integer-only inference.

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::quant::{Observer, QuantParams, Requant};
use crate::tensor::Tensor;
use crate::zoo::{
    argmax, ConvBlock, Family, Frame, Model, ModelSpec, QatState, TemporalLayer, FRAME_PIXELS,
    FRAME_SIDE,
};

/// Absorbs inference-mode BatchNorm into the preceding convolutions.
pub fn fold_batchnorm(model: &Model<f32>) -> Model<f32> {
    let mut out = model.clone();
    for block in &mut out.layers.blocks {
        let Some(bn) = block.bn.take() else { continue };
        *block = fold_block(&block.conv, &bn);
    }
    out
}

fn fold_block(
    conv: &crate::nn::Conv2dParams<f32>,
    bn: &crate::nn::BatchNorm<f32>,
) -> ConvBlock<f32> {
    let (a, b) = bn.folded_affine();
    let cout = conv.out_channels();
    let mut c = conv.clone();
    for (i, k) in c.kernel.data_mut().iter_mut().enumerate() {
        *k *= a[i % cout];
    }
    for (o, v) in c.bias.data_mut().iter_mut().enumerate() {
        *v = a[o] * *v + b[o];
    }
    ConvBlock { conv: c, bn: None }
}

/// Runs calibration batches through a BatchNorm-free model and returns the
/// resulting activation observers (EMA min/max).
pub fn calibrate(model: &Model<f32>, batches: &[Vec<&[Frame]>]) -> Result<QatState> {
    if model.layers.has_batchnorm() {
        return Err(Error::Invalid("calibrate expects a folded model".into()));
    }
    if !model.spec.family.supports_int8() {
        return Err(Error::QuantUnsupported(model.spec.family.to_string()));
    }
    if batches.iter().all(|b| b.is_empty()) {
        return Err(Error::Empty("calibration set".into()));
    }
    let mut m = model.clone();
    m.qat = Some(QatState::for_spec(&m.spec));
    for batch in batches.iter().filter(|b| !b.is_empty()) {
        let out = m.forward_batch(batch, Mode::Train)?;
        m.commit(out.update);
    }
    Ok(m.qat.expect("calibrated state"))
}

/// One int8 layer: weights, int32 bias and requantization to the output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub shape: Vec<usize>,
    pub weights: Vec<i8>,
    pub weight_scale: f32,
    /// Quantized with scale `s_in * s_w`, before zero-point folding.
    pub bias: Vec<i32>,
    pub input: QuantParams,
    pub output: QuantParams,
    pub requant: Requant,
    pub relu: bool,
}

impl QuantLayer {
    fn new(
        weight: &Tensor<f32>,
        bias: &Tensor<f32>,
        input: QuantParams,
        output: QuantParams,
        relu: bool,
    ) -> Result<Self> {
        let wq = QuantParams::symmetric(weight.max_abs() as f64);
        let weights = weight
            .data()
            .iter()
            .map(|&v| wq.quantize(v as f64) as i8)
            .collect();
        let acc_scale = input.scale as f64 * wq.scale as f64;
        let bias = bias
            .data()
            .iter()
            .map(|&b| {
                (b as f64 / acc_scale)
                    .round_ties_even()
                    .clamp(i32::MIN as f64, i32::MAX as f64) as i32
            })
            .collect();
        Ok(Self {
            shape: weight.shape().to_vec(),
            weights,
            weight_scale: wq.scale,
            bias,
            input,
            output,
            requant: Requant::from_real(acc_scale / output.scale as f64)?,
            relu,
        })
    }

    pub fn out_features(&self) -> usize {
        *self.shape.last().expect("weight rank >= 2")
    }

    /// Bias with the input zero point folded in: `b - z_in * sum_k w[k, o]`.
    fn folded_bias(&self) -> Vec<i32> {
        let n_out = self.out_features();
        let mut sums = vec![0i64; n_out];
        for (i, &w) in self.weights.iter().enumerate() {
            sums[i % n_out] += w as i64;
        }
        self.bias
            .iter()
            .zip(&sums)
            .map(|(&b, &s)| (b as i64 - self.input.zero_point as i64 * s) as i32)
            .collect()
    }

    /// Accumulator -> int8 code in the output grid.
    fn finish(&self, acc: i32) -> i8 {
        let lo = if self.relu {
            self.output.zero_point.max(self.output.qmin())
        } else {
            self.output.qmin()
        };
        (self.output.zero_point as i64 + self.requant.apply(acc))
            .clamp(lo as i64, self.output.qmax() as i64) as i8
    }
}

/// A fully integer model. Only the input quantizer and the output dequantizer touch reals.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub spec: ModelSpec,
    pub input: QuantParams,
    pub blocks: Vec<QuantLayer>,
    pub pool_after_first: bool,
    pub tcn: Option<QuantLayer>,
    pub hidden: Option<QuantLayer>,
    pub output: QuantLayer,
}

/// Converts a folded, calibrated model to int8.
pub fn export_int8(model: &Model<f32>) -> Result<QuantModel> {
    if !model.spec.family.supports_int8() {
        return Err(Error::QuantUnsupported(model.spec.family.to_string()));
    }
    if model.layers.has_batchnorm() {
        return Err(Error::Invalid("fold BatchNorm before export".into()));
    }
    let qat = model
        .qat
        .as_ref()
        .ok_or_else(|| Error::Invalid("model has no calibrated observers".into()))?;
    let l = &model.layers;
    let input = qat.input.qparams();
    let mut prev = input;
    let mut blocks = Vec::new();
    for (b, obs) in l.blocks.iter().zip(&qat.blocks) {
        let out = obs.qparams();
        blocks.push(QuantLayer::new(
            &b.conv.kernel,
            &b.conv.bias,
            prev,
            out,
            true,
        )?);
        prev = out;
    }
    let tcn = match &l.temporal {
        TemporalLayer::Tcn(p) => {
            let out = qat.temporal.as_ref().map(Observer::qparams).unwrap_or(prev);
            let layer = QuantLayer::new(&p.kernel, &p.bias, prev, out, true)?;
            prev = out;
            Some(layer)
        }
        TemporalLayer::Lstm(_) => unreachable!("rejected above"),
        _ => None,
    };
    let hidden = match &l.hidden {
        Some(h) => {
            let out = qat.hidden.as_ref().map(Observer::qparams).unwrap_or(prev);
            let layer = QuantLayer::new(&h.weight, &h.bias, prev, out, true)?;
            prev = out;
            Some(layer)
        }
        None => None,
    };
    let output = QuantLayer::new(
        &l.output.weight,
        &l.output.bias,
        prev,
        qat.logits.qparams(),
        false,
    )?;
    Ok(QuantModel {
        spec: model.spec.clone(),
        input,
        blocks,
        pool_after_first: l.pool_after_first,
        tcn,
        hidden,
        output,
    })
}

/// Integer activations of one image, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct QImage {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<i8>,
}

/// Int8 inference result for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct IntPrediction {
    /// Output codes, one row per evaluated network pass (W rows for majority voting).
    pub logits: Vec<Vec<i8>>,
    pub count: usize,
}

fn conv_int(x: &QImage, layer: &QuantLayer) -> QImage {
    let cout = layer.out_features();
    let bias = layer.folded_bias();
    let (oh, ow) = (x.h - 2, x.w - 2);
    let mut out = Vec::with_capacity(oh * ow * cout);
    for i in 0..oh {
        for j in 0..ow {
            for o in 0..cout {
                let mut acc = bias[o];
                for di in 0..3 {
                    for dj in 0..3 {
                        let px = ((i + di) * x.w + (j + dj)) * x.c;
                        let kb = (di * 3 + dj) * x.c;
                        for ci in 0..x.c {
                            acc = acc.wrapping_add(
                                x.data[px + ci] as i32 * layer.weights[(kb + ci) * cout + o] as i32,
                            );
                        }
                    }
                }
                out.push(layer.finish(acc));
            }
        }
    }
    QImage {
        h: oh,
        w: ow,
        c: cout,
        data: out,
    }
}

fn pool_int(x: &QImage) -> QImage {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Vec::with_capacity(oh * ow * x.c);
    for i in 0..oh {
        for j in 0..ow {
            for c in 0..x.c {
                let mut m = i8::MIN;
                for di in 0..2 {
                    for dj in 0..2 {
                        m = m.max(x.data[((2 * i + di) * x.w + 2 * j + dj) * x.c + c]);
                    }
                }
                out.push(m);
            }
        }
    }
    QImage {
        h: oh,
        w: ow,
        c: x.c,
        data: out,
    }
}

fn dense_int(x: &[i8], layer: &QuantLayer) -> Vec<i8> {
    let n_out = layer.out_features();
    let mut acc = layer.folded_bias();
    for (i, &xv) in x.iter().enumerate() {
        let row = &layer.weights[i * n_out..(i + 1) * n_out];
        for (a, &w) in acc.iter_mut().zip(row) {
            *a = a.wrapping_add(xv as i32 * w as i32);
        }
    }
    acc.into_iter().map(|a| layer.finish(a)).collect()
}

/// Causal temporal convolution over `[T, Cin]` codes; padding uses the input zero point.
fn tcn_int(seq: &[Vec<i8>], layer: &QuantLayer) -> Vec<i8> {
    let cout = layer.out_features();
    let cin = seq[0].len();
    let bias = layer.folded_bias();
    let pad = vec![layer.input.zero_point as i8; cin];
    let mut out = Vec::with_capacity(seq.len() * cout);
    for t in 0..seq.len() {
        for o in 0..cout {
            let mut acc = bias[o];
            for k in 0..3 {
                let x = if t + k >= 2 { &seq[t + k - 2] } else { &pad };
                for (ci, &xv) in x.iter().enumerate() {
                    acc = acc
                        .wrapping_add(xv as i32 * layer.weights[(k * cin + ci) * cout + o] as i32);
                }
            }
            out.push(layer.finish(acc));
        }
    }
    out
}

impl QuantModel {
    /// Quantizes an already normalized frame with the input parameters.
    pub fn quantize_frame(&self, f: &Frame) -> QImage {
        QImage {
            h: FRAME_SIDE,
            w: FRAME_SIDE,
            c: 1,
            data: f
                .iter()
                .map(|&v| self.input.quantize(v as f64) as i8)
                .collect(),
        }
    }

    /// Quantizes a normalized window into the model's input images
    /// (one per frame, or one stacked image for multi-channel models).
    pub fn quantize_window(&self, window: &[Frame]) -> Result<Vec<QImage>> {
        let w = self.spec.window;
        if window.len() != w {
            return Err(Error::Invalid(format!(
                "window has {} frames, model expects {w}",
                window.len()
            )));
        }
        Ok(match self.spec.family {
            Family::Sf => vec![self.quantize_frame(&window[w - 1])],
            Family::Mc => {
                let mut data = vec![0i8; FRAME_PIXELS * w];
                for (c, f) in window.iter().enumerate() {
                    for (p, &v) in f.iter().enumerate() {
                        data[p * w + c] = self.input.quantize(v as f64) as i8;
                    }
                }
                vec![QImage {
                    h: FRAME_SIDE,
                    w: FRAME_SIDE,
                    c: w,
                    data,
                }]
            }
            _ => window.iter().map(|f| self.quantize_frame(f)).collect(),
        })
    }

    /// Feature extractor on one quantized image; returns flattened codes.
    pub fn extract(&self, image: &QImage) -> Vec<i8> {
        let mut x = image.clone();
        for (i, layer) in self.blocks.iter().enumerate() {
            x = conv_int(&x, layer);
            if i == 0 && self.pool_after_first {
                x = pool_int(&x);
            }
        }
        x.data
    }

    fn head(&self, features: &[i8]) -> Vec<i8> {
        match &self.hidden {
            Some(h) => dense_int(&dense_int(features, h), &self.output),
            None => dense_int(features, &self.output),
        }
    }

    /// Integer-only forward pass on quantized input images.
    pub fn forward_int(&self, images: &[QImage]) -> Result<IntPrediction> {
        let expected = match self.spec.family {
            Family::Sf | Family::Mc => 1,
            _ => self.spec.window,
        };
        if images.len() != expected {
            return Err(Error::Invalid(format!(
                "expected {expected} input images, got {}",
                images.len()
            )));
        }
        let ch = self.spec.input_channels();
        if images
            .iter()
            .any(|im| im.h != FRAME_SIDE || im.w != FRAME_SIDE || im.c != ch)
        {
            return Err(Error::Invalid(
                "input images must be 8x8 with the model's channels".into(),
            ));
        }
        let feats: Vec<Vec<i8>> = images.iter().map(|im| self.extract(im)).collect();
        let logits: Vec<Vec<i8>> = match self.spec.family {
            Family::Sf | Family::Mc => vec![self.head(&feats[0])],
            Family::Mv => feats.iter().map(|f| self.head(f)).collect(),
            Family::Cat => vec![self.head(&feats.concat())],
            Family::Tcn => {
                let layer = self.tcn.as_ref().expect("tcn layer");
                vec![self.head(&tcn_int(&feats, layer))]
            }
            Family::Lstm => unreachable!("never exported"),
        };
        let count = if self.spec.family == Family::Mv {
            vote_int(&logits, self.output.output.zero_point)
        } else {
            argmax(&logits[0])
        };
        Ok(IntPrediction { logits, count })
    }

    pub fn predict(&self, window: &[Frame]) -> Result<IntPrediction> {
        self.forward_int(&self.quantize_window(window)?)
    }

    /// Dequantized logits of every network pass.
    pub fn dequantize_logits(&self, p: &IntPrediction) -> Vec<Vec<f64>> {
        let qp = self.output.output;
        p.logits
            .iter()
            .map(|row| row.iter().map(|&q| qp.dequantize(q as i32)).collect())
            .collect()
    }
}

/// Majority vote over per-frame integer logits; ties go to the larger summed
/// logit, then to the smaller count.
pub fn vote_int(logits: &[Vec<i8>], zero_point: i32) -> usize {
    let k = logits[0].len();
    let mut tally = vec![0usize; k];
    let mut mass = vec![0i64; k];
    for row in logits {
        tally[argmax(row)] += 1;
        for (m, &q) in mass.iter_mut().zip(row) {
            *m += q as i64 - zero_point as i64;
        }
    }
    let top = *tally.iter().max().expect("nonempty");
    let mut best: Option<usize> = None;
    for c in 0..k {
        if tally[c] == top && best.is_none_or(|b| mass[c] > mass[b]) {
            best = Some(c);
        }
    }
    best.expect("some class has the top tally")
}
