//! Adam, the plateau/early-stopping schedule and the float and quantization-aware
//! training loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{WindowSet, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::FoldMetrics;
use crate::nn::{weighted_softmax_xent, Mode};
use crate::quant::{calibrate, fold_batchnorm, QuantModel};
use crate::tensor::{Real, Tensor};
use crate::zoo::{Frame, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr0: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    /// Smallest loss decrease that counts as an improvement.
    pub min_delta: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Batches used to initialize activation observers before quantization-aware training.
    pub calibration_batches: usize,
}

impl TrainConfig {
    pub fn float() -> Self {
        Self {
            max_epochs: 500,
            lr0: 1e-3,
            plateau_factor: 0.3,
            plateau_patience: 5,
            early_stop_patience: 10,
            min_delta: 1e-4,
            batch_size: 128,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            calibration_batches: 8,
        }
    }

    pub fn qat() -> Self {
        Self {
            lr0: 5e-4,
            plateau_patience: 10,
            early_stop_patience: 20,
            ..Self::float()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Invalid("plateau factor must be in (0, 1)".into()));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Invalid("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Invalid(
                "batch size and epoch budget must be positive".into(),
            ));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Stable text form, used for config digests.
    pub fn canonical(&self) -> String {
        format!(
            "max_epochs={};lr0={:e};factor={:e};plateau={};stop={};min_delta={:e};batch={};seed={};b1={:e};b2={:e};eps={:e};calib={}",
            self.max_epochs,
            self.lr0,
            self.plateau_factor,
            self.plateau_patience,
            self.early_stop_patience,
            self.min_delta,
            self.batch_size,
            self.seed,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.calibration_batches
        )
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R = f32> {
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
    pub step: u64,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &[&Tensor<R>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<R: Real>(
    params: &mut [&mut Tensor<R>],
    grads: &[Tensor<R>],
    state: &mut AdamState<R>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1r, b2r) = (R::lit(b1), R::lit(b2));
    let (one_b1, one_b2) = (R::lit(1.0 - b1), R::lit(1.0 - b2));
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1r * *mv + one_b1 * gv;
            *vv = b2r * *vv + one_b2 * gv * gv;
            let mhat = mv.as_f64() / c1;
            let vhat = vv.as_f64() / c2;
            *pv -= R::lit(lr * mhat / (vhat.sqrt() + cfg.epsilon));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxEpochs => "max_epochs",
        }
    }
}

/// Learning-rate reduction on plateau plus early stopping, both watching the training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    best: f64,
    plateau_wait: usize,
    stop_wait: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr0,
            best: f64::INFINITY,
            plateau_wait: 0,
            stop_wait: 0,
        }
    }

    /// Records one epoch's loss; returns true when training should stop.
    pub fn observe(&mut self, loss: f64, cfg: &TrainConfig) -> bool {
        if loss < self.best - cfg.min_delta {
            self.best = loss;
            self.plateau_wait = 0;
            self.stop_wait = 0;
            return false;
        }
        self.plateau_wait += 1;
        self.stop_wait += 1;
        if self.plateau_wait >= cfg.plateau_patience {
            self.lr *= cfg.plateau_factor;
            self.plateau_wait = 0;
        }
        self.stop_wait >= cfg.early_stop_patience
    }
}

/// Replays a loss history through the schedule: `(learning rate for the next epoch, stop)`.
pub fn plateau_and_stop(losses: &[f64], cfg: &TrainConfig) -> (f64, bool) {
    let mut s = Schedule::new(cfg);
    let mut stop = false;
    for &l in losses {
        stop = s.observe(l, cfg);
    }
    (s.lr, stop)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
    /// Learning rate used in each epoch.
    pub lrs: Vec<f64>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.losses.len()
    }

    pub fn best_loss(&self) -> f64 {
        self.losses[self.best_epoch]
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    idx.shuffle(&mut rng);
    idx
}

/// Mean weighted cross-entropy and its logit gradients (already divided by batch size).
pub fn batch_loss<R: Real>(
    logits: &[Vec<R>],
    labels: &[usize],
    class_weights: &[R],
) -> Result<(f64, Vec<Vec<R>>)> {
    let n = R::lit(logits.len() as f64);
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        let (l, g) = weighted_softmax_xent(z, y, class_weights)?;
        total += l.as_f64();
        grads.push(g.into_iter().map(|v| v / n).collect());
    }
    Ok((total / logits.len() as f64, grads))
}

/// Mini-batch training with a best-loss snapshot.
///
/// With `quant_aware`, BatchNorm is folded, observers are calibrated on the
/// first batches of the (unshuffled) training set and weights/activations are
/// fake-quantized with straight-through gradients.
pub fn train(
    model: &Model<f32>,
    data: &WindowSet,
    class_weights: &[f64],
    cfg: &TrainConfig,
    quant_aware: bool,
) -> Result<(Model<f32>, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if class_weights.len() != model.spec.classes {
        return Err(Error::Shape(
            "one class weight per output class required".into(),
        ));
    }
    let mut model = model.clone();
    if quant_aware {
        if !model.spec.family.supports_int8() {
            return Err(Error::QuantUnsupported(model.spec.family.to_string()));
        }
        model = fold_batchnorm(&model);
        if model.qat.is_none() {
            let windows = data.windows();
            let batches: Vec<Vec<&[Frame]>> = windows
                .chunks(cfg.batch_size)
                .take(cfg.calibration_batches.max(1))
                .map(|c| c.to_vec())
                .collect();
            model.qat = Some(calibrate(&model, &batches)?);
        }
    }
    let weights: Vec<f32> = class_weights.iter().map(|&w| w as f32).collect();
    let labels = data.labels();
    let mut adam = AdamState::new(&model.params());
    let mut schedule = Schedule::new(cfg);
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut history = TrainHistory {
        losses: Vec::new(),
        lrs: Vec::new(),
        stop_reason: StopReason::MaxEpochs,
        best_epoch: 0,
    };
    for epoch in 0..cfg.max_epochs {
        let lr = schedule.lr;
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let windows: Vec<&[Frame]> = chunk.iter().map(|&i| data.window(i)).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let out = model.forward_batch(&windows, Mode::Train)?;
            let (loss, dlogits) = batch_loss(&out.logits, &ys, &weights)?;
            let grads = model.backward(&out.trace, &dlogits)?;
            model.commit(out.update);
            adam_step(&mut model.params_mut(), &grads, &mut adam, lr, cfg)?;
            sum += loss * chunk.len() as f64;
        }
        let epoch_loss = sum / data.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Invalid(format!(
                "training diverged at epoch {epoch}"
            )));
        }
        history.losses.push(epoch_loss);
        history.lrs.push(lr);
        if epoch_loss < best_loss {
            best_loss = epoch_loss;
            best = model.clone();
            history.best_epoch = epoch;
        }
        if schedule.observe(epoch_loss, cfg) {
            history.stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    log::debug!(
        "{}: {} epochs, best loss {:.5} at epoch {}",
        model.spec,
        history.epochs(),
        best_loss,
        history.best_epoch
    );
    Ok((best, history))
}

const EVAL_CHUNK: usize = 256;

/// Predicted counts for every window of `data`.
pub fn predict_counts(model: &Model<f32>, data: &WindowSet) -> Result<Vec<usize>> {
    let windows = data.windows();
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_CHUNK) {
        out.extend(model.predict_batch(chunk)?.into_iter().map(|p| p.count));
    }
    Ok(out)
}

pub fn predict_counts_int(model: &QuantModel, data: &WindowSet) -> Result<Vec<usize>> {
    (0..data.len())
        .map(|i| model.predict(data.window(i)).map(|p| p.count))
        .collect()
}

pub fn evaluate(model: &Model<f32>, data: &WindowSet) -> Result<FoldMetrics> {
    FoldMetrics::from_predictions(&data.labels(), &predict_counts(model, data)?, NUM_CLASSES)
}

pub fn evaluate_int(model: &QuantModel, data: &WindowSet) -> Result<FoldMetrics> {
    FoldMetrics::from_predictions(
        &data.labels(),
        &predict_counts_int(model, data)?,
        NUM_CLASSES,
    )
}
