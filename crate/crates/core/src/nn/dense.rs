use crate::error::{shape_err, Result};
use crate::nn::{relu_mask_backward, Activation};
use crate::tensor::{Real, Tensor};

/// Fully connected layer; weight is `[In, Out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<R = f32> {
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
}

impl<R: Real> DenseParams<R> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cast<S: Real>(&self) -> DenseParams<S> {
        DenseParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseGrads<R = f32> {
    pub input: Tensor<R>,
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
}

/// `act(W^T x + b)` over the flattened input.
pub fn fully_connected<R: Real>(
    input: &Tensor<R>,
    params: &DenseParams<R>,
    activation: Activation,
) -> Result<Tensor<R>> {
    let n_in = params.inputs();
    if input.len() != n_in {
        return shape_err(format!(
            "dense layer expects {n_in} inputs, got {}",
            input.len()
        ));
    }
    let n_out = params.outputs();
    let w = params.weight.data();
    let mut out = params.bias.data().to_vec();
    for (i, &xv) in input.data().iter().enumerate() {
        if xv == R::zero() {
            continue;
        }
        let row = &w[i * n_out..][..n_out];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xv * wv;
        }
    }
    if activation == Activation::Relu {
        out.iter_mut().for_each(|v| *v = v.max(R::zero()));
    }
    Tensor::from_vec(&[n_out], out)
}

/// `output` is the forward result (post-activation).
pub fn fully_connected_backward<R: Real>(
    input: &Tensor<R>,
    params: &DenseParams<R>,
    output: &Tensor<R>,
    activation: Activation,
    grad_out: &Tensor<R>,
) -> Result<DenseGrads<R>> {
    let n_out = params.outputs();
    if grad_out.len() != n_out || output.len() != n_out {
        return shape_err("dense gradient length mismatch");
    }
    let g = match activation {
        Activation::Relu => relu_mask_backward(output, grad_out),
        Activation::None => grad_out.data().to_vec(),
    };
    let w = params.weight.data();
    let mut dw = vec![R::zero(); w.len()];
    let mut dx = vec![R::zero(); input.len()];
    for (i, &xv) in input.data().iter().enumerate() {
        let row = &w[i * n_out..][..n_out];
        let drow = &mut dw[i * n_out..][..n_out];
        let mut s = R::zero();
        for o in 0..n_out {
            drow[o] = xv * g[o];
            s += row[o] * g[o];
        }
        dx[i] = s;
    }
    Ok(DenseGrads {
        input: Tensor::from_vec(input.shape(), dx)?,
        weight: Tensor::from_vec(params.weight.shape(), dw)?,
        bias: Tensor::from_vec(&[n_out], g)?,
    })
}
