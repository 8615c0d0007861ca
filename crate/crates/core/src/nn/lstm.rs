//! Single-layer LSTM cell.
//!
//! Gate rows are stacked in the order input `i`, forget `f`, cell `g`, output `o`:
//! rows `[0, H)` belong to `i`, `[H, 2H)` to `f`, and so on.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<R = f32> {
    /// `[4H, In]`
    pub w_input: Tensor<R>,
    /// `[4H, H]`
    pub w_recurrent: Tensor<R>,
    /// `[4H]`
    pub bias: Tensor<R>,
}

impl<R: Real> LstmParams<R> {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            w_input: Tensor::zeros(&[4 * hidden, inputs]),
            w_recurrent: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_recurrent.shape()[1]
    }

    pub fn inputs(&self) -> usize {
        self.w_input.shape()[1]
    }

    pub fn cast<S: Real>(&self) -> LstmParams<S> {
        LstmParams {
            w_input: self.w_input.cast(),
            w_recurrent: self.w_recurrent.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Everything the backward pass needs from one step.
#[derive(Debug, Clone)]
pub struct LstmStepCache<R = f32> {
    x: Vec<R>,
    h_prev: Vec<R>,
    c_prev: Vec<R>,
    i: Vec<R>,
    f: Vec<R>,
    g: Vec<R>,
    o: Vec<R>,
    tanh_c: Vec<R>,
}

#[derive(Debug, Clone)]
pub struct LstmGrads<R = f32> {
    pub w_input: Tensor<R>,
    pub w_recurrent: Tensor<R>,
    pub bias: Tensor<R>,
}

impl<R: Real> LstmGrads<R> {
    pub fn zeros_like(p: &LstmParams<R>) -> Self {
        Self {
            w_input: Tensor::zeros(p.w_input.shape()),
            w_recurrent: Tensor::zeros(p.w_recurrent.shape()),
            bias: Tensor::zeros(p.bias.shape()),
        }
    }
}

fn sigmoid<R: Real>(v: R) -> R {
    R::one() / (R::one() + (-v).exp())
}

pub fn lstm_cell_step<R: Real>(
    x: &Tensor<R>,
    h_prev: &Tensor<R>,
    c_prev: &Tensor<R>,
    params: &LstmParams<R>,
) -> Result<(Tensor<R>, Tensor<R>, LstmStepCache<R>)> {
    let hsz = params.hidden();
    let isz = params.inputs();
    if x.len() != isz {
        return shape_err(format!("lstm expects {isz} inputs, got {}", x.len()));
    }
    if h_prev.len() != hsz || c_prev.len() != hsz {
        return shape_err(format!(
            "lstm hidden size {hsz}, got h {} / c {}",
            h_prev.len(),
            c_prev.len()
        ));
    }
    let wi = params.w_input.data();
    let wh = params.w_recurrent.data();
    let mut z = params.bias.data().to_vec();
    for (r, zr) in z.iter_mut().enumerate() {
        let mut s = R::zero();
        for (&w, &v) in wi[r * isz..][..isz].iter().zip(x.data()) {
            s += w * v;
        }
        for (&w, &v) in wh[r * hsz..][..hsz].iter().zip(h_prev.data()) {
            s += w * v;
        }
        *zr += s;
    }
    let i: Vec<R> = z[..hsz].iter().map(|&v| sigmoid(v)).collect();
    let f: Vec<R> = z[hsz..2 * hsz].iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<R> = z[2 * hsz..3 * hsz].iter().map(|&v| v.tanh()).collect();
    let o: Vec<R> = z[3 * hsz..].iter().map(|&v| sigmoid(v)).collect();
    let c: Vec<R> = (0..hsz)
        .map(|k| f[k] * c_prev.data()[k] + i[k] * g[k])
        .collect();
    let tanh_c: Vec<R> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<R> = (0..hsz).map(|k| o[k] * tanh_c[k]).collect();
    let cache = LstmStepCache {
        x: x.data().to_vec(),
        h_prev: h_prev.data().to_vec(),
        c_prev: c_prev.data().to_vec(),
        i,
        f,
        g,
        o,
        tanh_c,
    };
    Ok((
        Tensor::from_vec(&[hsz], h)?,
        Tensor::from_vec(&[hsz], c)?,
        cache,
    ))
}

/// Backward through one step. Accumulates parameter gradients into `grads` and
/// returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_cell_step_backward<R: Real>(
    cache: &LstmStepCache<R>,
    params: &LstmParams<R>,
    grad_h: &[R],
    grad_c: &[R],
    grads: &mut LstmGrads<R>,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let hsz = params.hidden();
    let isz = params.inputs();
    let mut dz = vec![R::zero(); 4 * hsz];
    let mut dc_prev = vec![R::zero(); hsz];
    for k in 0..hsz {
        let do_ = grad_h[k] * cache.tanh_c[k];
        let dc =
            grad_c[k] + grad_h[k] * cache.o[k] * (R::one() - cache.tanh_c[k] * cache.tanh_c[k]);
        let di = dc * cache.g[k];
        let df = dc * cache.c_prev[k];
        let dg = dc * cache.i[k];
        dc_prev[k] = dc * cache.f[k];
        dz[k] = di * cache.i[k] * (R::one() - cache.i[k]);
        dz[hsz + k] = df * cache.f[k] * (R::one() - cache.f[k]);
        dz[2 * hsz + k] = dg * (R::one() - cache.g[k] * cache.g[k]);
        dz[3 * hsz + k] = do_ * cache.o[k] * (R::one() - cache.o[k]);
    }
    let wi = params.w_input.data();
    let wh = params.w_recurrent.data();
    let mut dx = vec![R::zero(); isz];
    let mut dh_prev = vec![R::zero(); hsz];
    {
        let gwi = grads.w_input.data_mut();
        for (r, &d) in dz.iter().enumerate() {
            for c in 0..isz {
                gwi[r * isz + c] += d * cache.x[c];
                dx[c] += d * wi[r * isz + c];
            }
        }
    }
    {
        let gwh = grads.w_recurrent.data_mut();
        for (r, &d) in dz.iter().enumerate() {
            for c in 0..hsz {
                gwh[r * hsz + c] += d * cache.h_prev[c];
                dh_prev[c] += d * wh[r * hsz + c];
            }
        }
    }
    for (b, &d) in grads.bias.data_mut().iter_mut().zip(&dz) {
        *b += d;
    }
    (dx, dh_prev, dc_prev)
}

/// Runs the cell over a sequence from zero state and returns the last hidden state.
pub fn lstm_sequence<R: Real>(
    xs: &[Tensor<R>],
    params: &LstmParams<R>,
) -> Result<(Tensor<R>, Vec<LstmStepCache<R>>)> {
    let hsz = params.hidden();
    let mut h = Tensor::zeros(&[hsz]);
    let mut c = Tensor::zeros(&[hsz]);
    let mut caches = Vec::with_capacity(xs.len());
    for x in xs {
        let (h2, c2, cache) = lstm_cell_step(x, &h, &c, params)?;
        h = h2;
        c = c2;
        caches.push(cache);
    }
    Ok((h, caches))
}

/// Backpropagation through time from a gradient on the last hidden state.
/// Returns per-step input gradients.
pub fn lstm_sequence_backward<R: Real>(
    caches: &[LstmStepCache<R>],
    params: &LstmParams<R>,
    grad_last_h: &[R],
    grads: &mut LstmGrads<R>,
) -> Vec<Vec<R>> {
    let hsz = params.hidden();
    let mut dh = grad_last_h.to_vec();
    let mut dc = vec![R::zero(); hsz];
    let mut dxs = vec![Vec::new(); caches.len()];
    for (t, cache) in caches.iter().enumerate().rev() {
        let (dx, dh_prev, dc_prev) = lstm_cell_step_backward(cache, params, &dh, &dc, grads);
        dxs[t] = dx;
        dh = dh_prev;
        dc = dc_prev;
    }
    dxs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_give_zero_state() {
        let p = LstmParams::<f64>::zeros(3, 4);
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let (h, c, _) = lstm_cell_step(&x, &Tensor::zeros(&[4]), &Tensor::zeros(&[4]), &p).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let hsz = 2;
        let mut p = LstmParams::<f64>::zeros(3, hsz);
        for k in hsz..2 * hsz {
            p.bias.data_mut()[k] = 10.0;
        }
        let c_prev = Tensor::from_vec(&[2], vec![0.8, -1.3]).unwrap();
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let (_, c, _) = lstm_cell_step(&x, &Tensor::zeros(&[2]), &c_prev, &p).unwrap();
        let s10 = 1.0 / (1.0 + (-10.0f64).exp());
        for (cv, pv) in c.data().iter().zip(c_prev.data()) {
            // input gate 0.5 times g = tanh(0) = 0 leaves only the forget path
            assert!((cv - pv * s10).abs() < 1e-4);
            assert!((cv - pv).abs() < 1e-4);
        }
    }

    #[test]
    fn hidden_mismatch_rejected() {
        let p = LstmParams::<f32>::zeros(2, 3);
        let x = Tensor::zeros(&[2]);
        assert!(lstm_cell_step(&x, &Tensor::zeros(&[2]), &Tensor::zeros(&[3]), &p).is_err());
    }
}
