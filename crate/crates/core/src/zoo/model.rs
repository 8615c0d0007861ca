//! Instantiated models: parameters, batched forward/backward and prediction.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::nn::{
    batchnorm_backward, batchnorm_batch_stats, batchnorm_infer_batch, causal_conv1d,
    causal_conv1d_backward, conv2d3x3, conv2d3x3_backward, fully_connected,
    fully_connected_backward, lstm_sequence, lstm_sequence_backward, maxpool2x2,
    maxpool2x2_backward, relu, softmax, Activation, BatchNorm, BatchStats, BnCache, Conv1dParams,
    Conv2dParams, DenseParams, LstmGrads, LstmParams, LstmStepCache, Mode,
};
use crate::quant::{fake_quant, fake_quant_weights, Observer};
use crate::tensor::{Real, Tensor};
use crate::zoo::arch::{Family, ModelSpec, TemporalSpec, FRAME_SIDE};

pub const FRAME_PIXELS: usize = FRAME_SIDE * FRAME_SIDE;

/// One 8x8 thermal frame, row-major.
pub type Frame = [f32; FRAME_PIXELS];

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<R = f32> {
    pub conv: Conv2dParams<R>,
    /// `None` once folded into the conv.
    pub bn: Option<BatchNorm<R>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TemporalLayer<R = f32> {
    None,
    Cat,
    Lstm(LstmParams<R>),
    Tcn(Conv1dParams<R>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layers<R = f32> {
    pub blocks: Vec<ConvBlock<R>>,
    pub pool_after_first: bool,
    pub temporal: TemporalLayer<R>,
    pub hidden: Option<DenseParams<R>>,
    pub output: DenseParams<R>,
}

/// Activation observers used by quantization-aware training, one per quantization point.
#[derive(Debug, Clone, PartialEq)]
pub struct QatState {
    pub input: Observer,
    pub blocks: Vec<Observer>,
    pub temporal: Option<Observer>,
    pub hidden: Option<Observer>,
    pub logits: Observer,
}

impl QatState {
    pub fn for_spec(spec: &ModelSpec) -> Self {
        Self {
            input: Observer::default(),
            blocks: vec![Observer::default(); spec.extractor().convs.len()],
            temporal: matches!(spec.temporal(), TemporalSpec::Tcn(_)).then(Observer::default),
            hidden: spec.hidden_units().map(|_| Observer::default()),
            logits: Observer::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<R = f32> {
    pub spec: ModelSpec,
    pub seed: u64,
    pub layers: Layers<R>,
    pub qat: Option<QatState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub count: usize,
    /// Per-frame class votes (majority-voting models only).
    pub votes: Option<Vec<usize>>,
}

fn he_normal<R: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<R> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| R::lit(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

fn xavier_uniform<R: Real>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<R> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| R::lit(rng.random_range(-limit..limit)))
        .collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

/// Builds a model with deterministic initialization from `(spec, seed)`.
///
/// Convs and FC layers use He-normal weights, LSTM matrices Xavier-uniform;
/// biases start at zero except the LSTM forget gate (1.0).
pub fn build_model<R: Real>(spec: &ModelSpec, seed: u64) -> Result<Model<R>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ex = spec.extractor();
    let mut blocks = Vec::new();
    let mut cin = spec.input_channels();
    for &cout in &ex.convs {
        let mut conv = Conv2dParams::zeros(cin, cout);
        conv.kernel = he_normal(&mut rng, &[9, cin, cout], 9 * cin);
        blocks.push(ConvBlock {
            conv,
            bn: Some(BatchNorm::new(cout)?),
        });
        cin = cout;
    }
    let feat = ex.feature_len();
    let temporal = match spec.temporal() {
        TemporalSpec::None => TemporalLayer::None,
        TemporalSpec::Cat => TemporalLayer::Cat,
        TemporalSpec::Lstm(h) => {
            let mut p = LstmParams::zeros(feat, h);
            p.w_input = xavier_uniform(&mut rng, &[4 * h, feat], feat, 4 * h);
            p.w_recurrent = xavier_uniform(&mut rng, &[4 * h, h], h, 4 * h);
            for v in &mut p.bias.data_mut()[h..2 * h] {
                *v = R::one();
            }
            TemporalLayer::Lstm(p)
        }
        TemporalSpec::Tcn(c) => {
            let mut p = Conv1dParams::zeros(feat, c);
            p.kernel = he_normal(&mut rng, &[3, feat, c], 3 * feat);
            TemporalLayer::Tcn(p)
        }
    };
    let mut n_in = spec.head_inputs();
    let hidden = spec.hidden_units().map(|units| {
        let mut d = DenseParams::zeros(n_in, units);
        d.weight = he_normal(&mut rng, &[n_in, units], n_in);
        n_in = units;
        d
    });
    let mut output = DenseParams::zeros(n_in, spec.classes);
    output.weight = he_normal(&mut rng, &[n_in, spec.classes], n_in);
    Ok(Model {
        spec: spec.clone(),
        seed,
        layers: Layers {
            blocks,
            pool_after_first: ex.pool,
            temporal,
            hidden,
            output,
        },
        qat: None,
    })
}

impl<R: Real> Layers<R> {
    pub fn cast<S: Real>(&self) -> Layers<S> {
        Layers {
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    conv: b.conv.cast(),
                    bn: b.bn.as_ref().map(|bn| bn.cast()),
                })
                .collect(),
            pool_after_first: self.pool_after_first,
            temporal: match &self.temporal {
                TemporalLayer::None => TemporalLayer::None,
                TemporalLayer::Cat => TemporalLayer::Cat,
                TemporalLayer::Lstm(p) => TemporalLayer::Lstm(p.cast()),
                TemporalLayer::Tcn(p) => TemporalLayer::Tcn(p.cast()),
            },
            hidden: self.hidden.as_ref().map(|d| d.cast()),
            output: self.output.cast(),
        }
    }

    /// Trainable tensors in canonical order.
    pub fn params(&self) -> Vec<&Tensor<R>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<R>)> {
        let mut v: Vec<(String, &Tensor<R>)> = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("block{i}.kernel"), &b.conv.kernel));
            v.push((format!("block{i}.bias"), &b.conv.bias));
            if let Some(bn) = &b.bn {
                v.push((format!("block{i}.bn.gamma"), &bn.gamma));
                v.push((format!("block{i}.bn.beta"), &bn.beta));
            }
        }
        match &self.temporal {
            TemporalLayer::Lstm(p) => {
                v.push(("lstm.w_input".into(), &p.w_input));
                v.push(("lstm.w_recurrent".into(), &p.w_recurrent));
                v.push(("lstm.bias".into(), &p.bias));
            }
            TemporalLayer::Tcn(p) => {
                v.push(("tcn.kernel".into(), &p.kernel));
                v.push(("tcn.bias".into(), &p.bias));
            }
            TemporalLayer::None | TemporalLayer::Cat => {}
        }
        if let Some(h) = &self.hidden {
            v.push(("hidden.weight".into(), &h.weight));
            v.push(("hidden.bias".into(), &h.bias));
        }
        v.push(("output.weight".into(), &self.output.weight));
        v.push(("output.bias".into(), &self.output.bias));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut v: Vec<&mut Tensor<R>> = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.conv.kernel);
            v.push(&mut b.conv.bias);
            if let Some(bn) = &mut b.bn {
                v.push(&mut bn.gamma);
                v.push(&mut bn.beta);
            }
        }
        match &mut self.temporal {
            TemporalLayer::Lstm(p) => {
                v.push(&mut p.w_input);
                v.push(&mut p.w_recurrent);
                v.push(&mut p.bias);
            }
            TemporalLayer::Tcn(p) => {
                v.push(&mut p.kernel);
                v.push(&mut p.bias);
            }
            TemporalLayer::None | TemporalLayer::Cat => {}
        }
        if let Some(h) = &mut self.hidden {
            v.push(&mut h.weight);
            v.push(&mut h.bias);
        }
        v.push(&mut self.output.weight);
        v.push(&mut self.output.bias);
        v
    }

    /// Non-trainable tensors (BatchNorm running statistics).
    pub fn named_buffers(&self) -> Vec<(String, &Tensor<R>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(bn) = &b.bn {
                v.push((format!("block{i}.bn.running_mean"), &bn.running_mean));
                v.push((format!("block{i}.bn.running_var"), &bn.running_var));
            }
        }
        v
    }

    pub fn has_batchnorm(&self) -> bool {
        self.blocks.iter().any(|b| b.bn.is_some())
    }

    /// Copy with every conv, TCN and FC weight tensor fake-quantized (symmetric, per tensor).
    fn fake_quantized(&self) -> Self {
        let mut out = self.clone();
        for b in &mut out.blocks {
            b.conv.kernel = fake_quant_weights(&b.conv.kernel).0;
        }
        if let TemporalLayer::Tcn(p) = &mut out.temporal {
            p.kernel = fake_quant_weights(&p.kernel).0;
        }
        if let Some(h) = &mut out.hidden {
            h.weight = fake_quant_weights(&h.weight).0;
        }
        out.output.weight = fake_quant_weights(&out.output.weight).0;
        out
    }
}

/// State changes produced by a training-mode pass, applied with [`Model::commit`].
#[derive(Debug, Clone)]
pub struct StateUpdate<R = f32> {
    bn_stats: Vec<Option<BatchStats<R>>>,
    qat: Option<QatState>,
}

#[derive(Debug, Clone)]
struct BlockTrace<R> {
    input: Vec<Tensor<R>>,
    bn: Option<BnCache<R>>,
    act: Vec<Tensor<R>>,
    fq_mask: Option<Vec<Vec<bool>>>,
}

#[derive(Debug, Clone)]
enum TemporalTrace<R> {
    None,
    Cat,
    Lstm(Vec<Vec<LstmStepCache<R>>>),
    Tcn {
        inputs: Vec<Tensor<R>>,
        outputs: Vec<Tensor<R>>,
        fq_mask: Option<Vec<Vec<bool>>>,
    },
}

/// Everything a backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<R = f32> {
    /// Fake-quantized copy of the layers when quantization-aware.
    effective: Option<Layers<R>>,
    samples: usize,
    frames: usize,
    blocks: Vec<BlockTrace<R>>,
    pool: Option<(Vec<usize>, Vec<Vec<usize>>)>,
    feature_shape: Vec<usize>,
    temporal: TemporalTrace<R>,
    head_in: Vec<Tensor<R>>,
    hidden_out: Option<Vec<Tensor<R>>>,
    hidden_mask: Option<Vec<Vec<bool>>>,
    logits_pre: Vec<Tensor<R>>,
    logits_mask: Option<Vec<Vec<bool>>>,
}

impl<R: Real> ForwardTrace<R> {
    /// Fingerprint of every piecewise-linear branch taken (ReLU signs, pooling argmax,
    /// fake-quant clamp masks). Two passes with equal fingerprints lie on the same
    /// smooth piece of the loss surface.
    pub fn branch_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for b in &self.blocks {
            for a in &b.act {
                for &v in a.data() {
                    (v > R::zero()).hash(&mut h);
                }
            }
            b.fq_mask.hash(&mut h);
        }
        if let Some((_, arg)) = &self.pool {
            arg.hash(&mut h);
        }
        if let TemporalTrace::Tcn {
            outputs, fq_mask, ..
        } = &self.temporal
        {
            for o in outputs {
                for &v in o.data() {
                    (v > R::zero()).hash(&mut h);
                }
            }
            fq_mask.hash(&mut h);
        }
        if let Some(hs) = &self.hidden_out {
            for o in hs {
                for &v in o.data() {
                    (v > R::zero()).hash(&mut h);
                }
            }
        }
        self.hidden_mask.hash(&mut h);
        self.logits_mask.hash(&mut h);
        h.finish()
    }
}

/// Output of [`Model::forward_batch`].
#[derive(Debug, Clone)]
pub struct BatchOutput<R = f32> {
    pub logits: Vec<Vec<R>>,
    pub trace: ForwardTrace<R>,
    pub update: StateUpdate<R>,
}

fn batch_min_max<R: Real>(xs: &[Tensor<R>]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
            let (a, b) = t.min_max();
            (lo.min(a.as_f64()), hi.max(b.as_f64()))
        })
}

/// Applies activation fake quantization in place; returns per-tensor straight-through masks.
fn fq_activations<R: Real>(xs: &mut [Tensor<R>], obs: &mut Observer, mode: Mode) -> Vec<Vec<bool>> {
    if mode == Mode::Train {
        let (lo, hi) = batch_min_max(xs);
        obs.update(lo, hi);
    }
    let qp = obs.qparams();
    xs.iter_mut()
        .map(|t| {
            t.data_mut()
                .iter_mut()
                .map(|v| {
                    let inside = qp.in_range(v.as_f64());
                    *v = fake_quant(*v, &qp);
                    inside
                })
                .collect()
        })
        .collect()
}

fn apply_mask<R: Real>(g: &mut Tensor<R>, mask: &[bool]) {
    for (v, &m) in g.data_mut().iter_mut().zip(mask) {
        if !m {
            *v = R::zero();
        }
    }
}

impl<R: Real> Model<R> {
    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            spec: self.spec.clone(),
            seed: self.seed,
            layers: self.layers.cast(),
            qat: self.qat.clone(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<R>> {
        self.layers.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        self.layers.params_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn commit(&mut self, update: StateUpdate<R>) {
        for (b, stats) in self.layers.blocks.iter_mut().zip(update.bn_stats) {
            if let (Some(bn), Some(s)) = (b.bn.as_mut(), stats) {
                bn.update_running(&s);
            }
        }
        if update.qat.is_some() {
            self.qat = update.qat;
        }
    }

    /// Builds the extractor inputs for a batch of windows.
    ///
    /// Single-frame and majority-voting models take the last frame, multi-channel
    /// models stack the window as channels, and the other families get one image
    /// per frame (sample-major).
    fn extractor_images(&self, windows: &[&[Frame]]) -> Result<(Vec<Tensor<R>>, usize)> {
        let w = self.spec.window;
        let mut images = Vec::new();
        for win in windows {
            if win.len() != w {
                return Err(Error::Invalid(format!(
                    "window has {} frames, model expects {w}",
                    win.len()
                )));
            }
            match self.spec.family {
                Family::Sf | Family::Mv => images.push(frame_image(&win[w - 1], 1)),
                Family::Mc => {
                    let mut data = vec![R::zero(); FRAME_PIXELS * w];
                    for (c, f) in win.iter().enumerate() {
                        for (p, &v) in f.iter().enumerate() {
                            data[p * w + c] = R::lit(v as f64);
                        }
                    }
                    images.push(Tensor::from_vec(&[FRAME_SIDE, FRAME_SIDE, w], data)?);
                }
                Family::Cat | Family::Lstm | Family::Tcn => {
                    images.extend(win.iter().map(|f| frame_image(f, 1)));
                }
            }
        }
        let frames = if self.spec.family.is_per_frame() && self.spec.family != Family::Mv {
            w
        } else {
            1
        };
        Ok((images, frames))
    }

    /// Batched forward pass returning logits and the trace for [`Model::backward`].
    ///
    /// Majority-voting models run their per-frame network on each window's last
    /// frame here; voting happens in [`Model::predict`].
    /// Training mode uses batch statistics; the resulting running-statistic and
    /// observer updates are returned, not applied.
    pub fn forward_batch(&self, windows: &[&[Frame]], mode: Mode) -> Result<BatchOutput<R>> {
        if windows.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let (mut images, frames) = self.extractor_images(windows)?;
        let samples = windows.len();
        let effective = self.qat.as_ref().map(|_| self.layers.fake_quantized());
        let layers = effective.as_ref().unwrap_or(&self.layers);
        let mut qat = self.qat.clone();

        if let Some(q) = qat.as_mut() {
            // the input mask never reaches a parameter, so it is not kept
            fq_activations(&mut images, &mut q.input, mode);
        }

        let mut blocks = Vec::with_capacity(layers.blocks.len());
        let mut bn_stats = Vec::with_capacity(layers.blocks.len());
        let mut pool = None;
        let mut x = images;
        for (bi, block) in layers.blocks.iter().enumerate() {
            let conv_out = x
                .iter()
                .map(|im| conv2d3x3(im, &block.conv))
                .collect::<Result<Vec<_>>>()?;
            let (normed, bn_cache) = match (&block.bn, mode) {
                (Some(bn), Mode::Train) => {
                    let (y, c, s) = batchnorm_batch_stats(&conv_out, bn)?;
                    bn_stats.push(Some(s));
                    (y, Some(c))
                }
                (Some(bn), Mode::Infer) => {
                    let (y, c) = batchnorm_infer_batch(&conv_out, bn)?;
                    bn_stats.push(None);
                    (y, Some(c))
                }
                (None, _) => {
                    bn_stats.push(None);
                    (conv_out, None)
                }
            };
            let mut act: Vec<Tensor<R>> = normed.iter().map(relu).collect();
            let fq_mask = qat
                .as_mut()
                .map(|q| fq_activations(&mut act, &mut q.blocks[bi], mode));
            let next = if bi == 0 && layers.pool_after_first {
                let mut pooled = Vec::with_capacity(act.len());
                let mut args = Vec::with_capacity(act.len());
                for a in &act {
                    let (p, arg) = maxpool2x2(a)?;
                    pooled.push(p);
                    args.push(arg);
                }
                pool = Some((act[0].shape().to_vec(), args));
                pooled
            } else {
                act.clone()
            };
            blocks.push(BlockTrace {
                input: x,
                bn: bn_cache,
                act,
                fq_mask,
            });
            x = next;
        }
        let feature_shape = x[0].shape().to_vec();
        let features: Vec<Tensor<R>> = x.into_iter().map(|t| t.flatten()).collect();
        let feat_len = features[0].len();

        let (head_in, temporal) = match &layers.temporal {
            TemporalLayer::None => (features, TemporalTrace::None),
            TemporalLayer::Cat => {
                let joined = features
                    .chunks(frames)
                    .map(|fs| {
                        let data: Vec<R> =
                            fs.iter().flat_map(|f| f.data().iter().copied()).collect();
                        Tensor::from_vec(&[data.len()], data)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (joined, TemporalTrace::Cat)
            }
            TemporalLayer::Lstm(p) => {
                let mut hs = Vec::with_capacity(samples);
                let mut caches = Vec::with_capacity(samples);
                for fs in features.chunks(frames) {
                    let (h, c) = lstm_sequence(fs, p)?;
                    hs.push(h);
                    caches.push(c);
                }
                (hs, TemporalTrace::Lstm(caches))
            }
            TemporalLayer::Tcn(p) => {
                let inputs = features
                    .chunks(frames)
                    .map(|fs| {
                        let data: Vec<R> =
                            fs.iter().flat_map(|f| f.data().iter().copied()).collect();
                        Tensor::from_vec(&[frames, feat_len], data)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut outputs = inputs
                    .iter()
                    .map(|s| causal_conv1d(s, p))
                    .collect::<Result<Vec<_>>>()?;
                let fq_mask = qat.as_mut().map(|q| {
                    fq_activations(
                        &mut outputs,
                        q.temporal.as_mut().expect("tcn observer"),
                        mode,
                    )
                });
                let flat = outputs.iter().map(|o| o.clone().flatten()).collect();
                (
                    flat,
                    TemporalTrace::Tcn {
                        inputs,
                        outputs,
                        fq_mask,
                    },
                )
            }
        };

        let (hidden_out, hidden_mask, last) = match &layers.hidden {
            Some(h) => {
                let mut outs = head_in
                    .iter()
                    .map(|x| fully_connected(x, h, Activation::Relu))
                    .collect::<Result<Vec<_>>>()?;
                let mask = qat.as_mut().map(|q| {
                    fq_activations(&mut outs, q.hidden.as_mut().expect("hidden observer"), mode)
                });
                (Some(outs.clone()), mask, outs)
            }
            None => (None, None, head_in.clone()),
        };
        let logits_pre: Vec<Tensor<R>> = last
            .iter()
            .map(|x| fully_connected(x, &layers.output, Activation::None))
            .collect::<Result<Vec<_>>>()?;
        let mut logits_t = logits_pre.clone();
        let logits_mask = qat
            .as_mut()
            .map(|q| fq_activations(&mut logits_t, &mut q.logits, mode));
        let logits = logits_t.into_iter().map(|t| t.into_vec()).collect();

        let update = StateUpdate {
            bn_stats,
            qat: if mode == Mode::Train { qat } else { None },
        };
        Ok(BatchOutput {
            logits,
            trace: ForwardTrace {
                effective,
                samples,
                frames,
                blocks,
                pool,
                feature_shape,
                temporal,
                head_in,
                hidden_out,
                hidden_mask,
                logits_pre,
                logits_mask,
            },
            update,
        })
    }

    /// Gradients of the loss for every trainable tensor, in [`Layers::params`] order.
    /// Under quantization-aware training the straight-through estimator is used.
    pub fn backward(
        &self,
        trace: &ForwardTrace<R>,
        grad_logits: &[Vec<R>],
    ) -> Result<Vec<Tensor<R>>> {
        if grad_logits.len() != trace.samples {
            return shape_err("logit gradient batch size mismatch");
        }
        let layers = trace.effective.as_ref().unwrap_or(&self.layers);
        let k = layers.output.outputs();
        let mut g_logits = grad_logits
            .iter()
            .map(|g| Tensor::from_vec(&[k], g.clone()))
            .collect::<Result<Vec<_>>>()?;
        if let Some(masks) = &trace.logits_mask {
            for (g, m) in g_logits.iter_mut().zip(masks) {
                apply_mask(g, m);
            }
        }

        // output layer
        let head_last: &Vec<Tensor<R>> = trace.hidden_out.as_ref().unwrap_or(&trace.head_in);
        let mut d_out_w = Tensor::zeros(layers.output.weight.shape());
        let mut d_out_b = Tensor::zeros(layers.output.bias.shape());
        let mut d_last = Vec::with_capacity(trace.samples);
        for ((x, g), pre) in head_last.iter().zip(&g_logits).zip(&trace.logits_pre) {
            let gr = fully_connected_backward(x, &layers.output, pre, Activation::None, g)?;
            d_out_w.add_assign(&gr.weight);
            d_out_b.add_assign(&gr.bias);
            d_last.push(gr.input);
        }

        // hidden layer
        let mut hidden_grads = None;
        let d_head_in = if let (Some(h), Some(outs)) = (&layers.hidden, &trace.hidden_out) {
            let mut dw = Tensor::zeros(h.weight.shape());
            let mut db = Tensor::zeros(h.bias.shape());
            let mut d_in = Vec::with_capacity(trace.samples);
            for (i, (x, o)) in trace.head_in.iter().zip(outs).enumerate() {
                let mut g = d_last[i].clone();
                if let Some(masks) = &trace.hidden_mask {
                    apply_mask(&mut g, &masks[i]);
                }
                let gr = fully_connected_backward(x, h, o, Activation::Relu, &g)?;
                dw.add_assign(&gr.weight);
                db.add_assign(&gr.bias);
                d_in.push(gr.input);
            }
            hidden_grads = Some((dw, db));
            d_in
        } else {
            d_last
        };

        // temporal stage -> per-image feature gradients
        let feat_len: usize = trace.feature_shape.iter().product();
        let mut temporal_grads: Vec<Tensor<R>> = Vec::new();
        let d_features: Vec<Tensor<R>> = match (&trace.temporal, &layers.temporal) {
            (TemporalTrace::None, _) => d_head_in,
            (TemporalTrace::Cat, _) => {
                let mut out = Vec::with_capacity(trace.samples * trace.frames);
                for g in &d_head_in {
                    for chunk in g.data().chunks(feat_len) {
                        out.push(Tensor::from_vec(&[feat_len], chunk.to_vec())?);
                    }
                }
                out
            }
            (TemporalTrace::Lstm(caches), TemporalLayer::Lstm(p)) => {
                let mut grads = LstmGrads::zeros_like(p);
                let mut out = Vec::with_capacity(trace.samples * trace.frames);
                for (c, g) in caches.iter().zip(&d_head_in) {
                    let dxs = lstm_sequence_backward(c, p, g.data(), &mut grads);
                    for dx in dxs {
                        out.push(Tensor::from_vec(&[feat_len], dx)?);
                    }
                }
                temporal_grads = vec![grads.w_input, grads.w_recurrent, grads.bias];
                out
            }
            (
                TemporalTrace::Tcn {
                    inputs,
                    outputs,
                    fq_mask,
                },
                TemporalLayer::Tcn(p),
            ) => {
                let mut dk = Tensor::zeros(p.kernel.shape());
                let mut db = Tensor::zeros(p.bias.shape());
                let mut out = Vec::with_capacity(trace.samples * trace.frames);
                for (i, ((x, o), g)) in inputs.iter().zip(outputs).zip(&d_head_in).enumerate() {
                    let mut g = g.clone().reshape(o.shape())?;
                    if let Some(masks) = fq_mask {
                        apply_mask(&mut g, &masks[i]);
                    }
                    let gr = causal_conv1d_backward(x, p, o, &g)?;
                    dk.add_assign(&gr.kernel);
                    db.add_assign(&gr.bias);
                    for chunk in gr.input.data().chunks(feat_len) {
                        out.push(Tensor::from_vec(&[feat_len], chunk.to_vec())?);
                    }
                }
                temporal_grads = vec![dk, db];
                out
            }
            _ => return Err(Error::Invalid("trace does not match model".into())),
        };

        // extractor, last block first
        let mut d_x: Vec<Tensor<R>> = d_features
            .into_iter()
            .map(|t| t.reshape(&trace.feature_shape))
            .collect::<Result<Vec<_>>>()?;
        let mut block_grads: Vec<Vec<Tensor<R>>> = vec![Vec::new(); layers.blocks.len()];
        for bi in (0..layers.blocks.len()).rev() {
            let block = &layers.blocks[bi];
            let bt = &trace.blocks[bi];
            if bi == 0 && layers.pool_after_first {
                let (shape, args) = trace.pool.as_ref().expect("pool trace");
                d_x = d_x
                    .iter()
                    .zip(args)
                    .map(|(g, a)| maxpool2x2_backward(shape, a, g))
                    .collect::<Result<Vec<_>>>()?;
            }
            let mut d_act = d_x;
            for (i, g) in d_act.iter_mut().enumerate() {
                if let Some(masks) = &bt.fq_mask {
                    apply_mask(g, &masks[i]);
                }
                // ReLU
                let relu_g = crate::nn::relu_mask_backward(&bt.act[i], g);
                *g = Tensor::from_vec(g.shape(), relu_g)?;
            }
            let (d_conv_out, bn_grads) = match (&block.bn, &bt.bn) {
                (Some(bn), Some(cache)) => {
                    let gr = batchnorm_backward(cache, bn, &d_act)?;
                    (gr.inputs, Some((gr.gamma, gr.beta)))
                }
                _ => (d_act, None),
            };
            let mut dk = Tensor::zeros(block.conv.kernel.shape());
            let mut db = Tensor::zeros(block.conv.bias.shape());
            let mut d_in = Vec::with_capacity(d_conv_out.len());
            for (x, g) in bt.input.iter().zip(&d_conv_out) {
                let gr = conv2d3x3_backward(x, &block.conv, g)?;
                dk.add_assign(&gr.kernel);
                db.add_assign(&gr.bias);
                if bi > 0 {
                    d_in.push(gr.input);
                }
            }
            let mut gs = vec![dk, db];
            if let Some((gg, gb)) = bn_grads {
                gs.push(gg);
                gs.push(gb);
            }
            block_grads[bi] = gs;
            d_x = d_in;
        }

        let mut grads: Vec<Tensor<R>> = block_grads.into_iter().flatten().collect();
        grads.extend(temporal_grads);
        if let Some((dw, db)) = hidden_grads {
            grads.push(dw);
            grads.push(db);
        }
        grads.push(d_out_w);
        grads.push(d_out_b);
        Ok(grads)
    }

    /// Inference-mode logits for a batch of windows (per-frame logits are not voted).
    pub fn logits(&self, windows: &[&[Frame]]) -> Result<Vec<Vec<R>>> {
        Ok(self.forward_batch(windows, Mode::Infer)?.logits)
    }

    /// Predicts the people count of one window.
    pub fn predict(&self, window: &[Frame]) -> Result<Prediction> {
        Ok(self
            .predict_batch(&[window])?
            .pop()
            .expect("one prediction"))
    }

    pub fn predict_batch(&self, windows: &[&[Frame]]) -> Result<Vec<Prediction>> {
        check_frames(windows, self.spec.window)?;
        if self.spec.family == Family::Mv {
            let w = self.spec.window;
            let singles: Vec<&[Frame]> = windows
                .iter()
                .flat_map(|win| win.iter().map(std::slice::from_ref))
                .collect();
            let per_frame = self.cast_per_frame();
            let logits = per_frame.logits(&singles)?;
            let probs: Vec<Vec<f64>> = logits
                .iter()
                .map(|l| softmax(l).into_iter().map(|p| p.as_f64()).collect())
                .collect();
            return Ok(probs.chunks(w).map(|p| majority_vote(p)).collect());
        }
        let logits = self.logits(windows)?;
        Ok(logits
            .iter()
            .map(|l| {
                let probabilities: Vec<f64> = softmax(l).into_iter().map(|p| p.as_f64()).collect();
                Prediction {
                    count: argmax(&probabilities),
                    probabilities,
                    votes: None,
                }
            })
            .collect())
    }

    /// The per-frame network of a majority-voting model, viewed as a single-frame model.
    pub fn cast_per_frame(&self) -> Model<R> {
        Model {
            spec: self.spec.per_frame_spec(),
            seed: self.seed,
            layers: self.layers.clone(),
            qat: self.qat.clone(),
        }
    }
}

fn check_frames(windows: &[&[Frame]], w: usize) -> Result<()> {
    for win in windows {
        if win.len() != w {
            return Err(Error::Invalid(format!(
                "window has {} frames, model expects {w}",
                win.len()
            )));
        }
    }
    Ok(())
}

fn frame_image<R: Real>(f: &Frame, _ch: usize) -> Tensor<R> {
    Tensor::from_vec(
        &[FRAME_SIDE, FRAME_SIDE, 1],
        f.iter().map(|&v| R::lit(v as f64)).collect(),
    )
    .expect("8x8 frame")
}

/// Index of the largest value; the smallest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Mode of per-frame argmax votes. Ties go to the tied class with the larger summed
/// probability over the window, then to the smaller count.
pub fn majority_vote(per_frame_probs: &[Vec<f64>]) -> Prediction {
    let k = per_frame_probs[0].len();
    let votes: Vec<usize> = per_frame_probs.iter().map(|p| argmax(p)).collect();
    let mut tally = vec![0usize; k];
    for &v in &votes {
        tally[v] += 1;
    }
    let mut mass = vec![0.0f64; k];
    for p in per_frame_probs {
        for (m, &v) in mass.iter_mut().zip(p) {
            *m += v;
        }
    }
    let top = *tally.iter().max().expect("nonempty");
    let mut count = usize::MAX;
    for c in 0..k {
        if tally[c] == top && (count == usize::MAX || mass[c] > mass[count]) {
            count = c;
        }
    }
    let n = per_frame_probs.len() as f64;
    Prediction {
        probabilities: mass.iter().map(|m| m / n).collect(),
        count,
        votes: Some(votes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(c: usize, p: f64) -> Vec<f64> {
        let mut v = vec![(1.0 - p) / 3.0; 4];
        v[c] = p;
        v
    }

    #[test]
    fn unanimous_vote() {
        let p = majority_vote(&[onehot(2, 0.9), onehot(2, 0.6), onehot(2, 0.7)]);
        assert_eq!(p.count, 2);
    }

    #[test]
    fn strict_majority() {
        let p = majority_vote(&[onehot(1, 0.5), onehot(1, 0.5), onehot(2, 0.99)]);
        assert_eq!(p.count, 1);
        assert_eq!(p.votes, Some(vec![1, 1, 2]));
    }

    #[test]
    fn tie_goes_to_larger_mass_then_smaller_count() {
        let frames = [
            onehot(2, 0.9),
            onehot(2, 0.9),
            onehot(1, 0.4),
            onehot(1, 0.4),
            onehot(0, 0.9),
        ];
        assert_eq!(majority_vote(&frames).count, 2);
        let frames = [
            onehot(2, 0.4),
            onehot(2, 0.4),
            onehot(1, 0.9),
            onehot(1, 0.9),
            onehot(0, 0.9),
        ];
        assert_eq!(majority_vote(&frames).count, 1);
        // exact symmetric tie
        let frames = [onehot(3, 0.7), onehot(1, 0.7)];
        assert_eq!(majority_vote(&frames).count, 1);
    }

    #[test]
    fn deterministic_init() {
        let spec = ModelSpec::parse("lstm:w3:C8-P-C8-L16-FC").unwrap();
        let a: Model = build_model(&spec, 7).unwrap();
        let b: Model = build_model(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c: Model = build_model(&spec, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn window_length_checked() {
        let spec = ModelSpec::parse("mc:w3:C8-FC").unwrap();
        let m: Model = build_model(&spec, 1).unwrap();
        let f = [0.0f32; FRAME_PIXELS];
        assert!(m.predict(&[f, f]).is_err());
        assert!(m.predict(&[f, f, f]).is_ok());
    }
}
