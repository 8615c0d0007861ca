//! 3x3 valid 2D convolution and the 3-tap causal 1D convolution.

use crate::error::{shape_err, Result};
use crate::nn::relu_mask_backward;
use crate::tensor::{Real, Tensor};

/// Kernel is stored as `[9, Cin, Cout]`: the 3x3 taps flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams<R = f32> {
    pub kernel: Tensor<R>,
    pub bias: Tensor<R>,
}

impl<R: Real> Conv2dParams<R> {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[9, cin, cout]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn cast<S: Real>(&self) -> Conv2dParams<S> {
        Conv2dParams {
            kernel: self.kernel.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<R = f32> {
    pub input: Tensor<R>,
    pub kernel: Tensor<R>,
    pub bias: Tensor<R>,
}

fn image_dims<R: Real>(input: &Tensor<R>) -> Result<(usize, usize, usize)> {
    match *input.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => shape_err(format!("expected HxWxC image, got {:?}", input.shape())),
    }
}

/// Valid (unpadded) 3x3 convolution, stride 1.
pub fn conv2d3x3<R: Real>(input: &Tensor<R>, params: &Conv2dParams<R>) -> Result<Tensor<R>> {
    let (h, w, cin) = image_dims(input)?;
    if cin != params.in_channels() {
        return shape_err(format!(
            "conv input has {cin} channels, kernel expects {}",
            params.in_channels()
        ));
    }
    if h < 3 || w < 3 {
        return shape_err(format!("conv needs at least 3x3 input, got {h}x{w}"));
    }
    let cout = params.out_channels();
    let (oh, ow) = (h - 2, w - 2);
    let x = input.data();
    let k = params.kernel.data();
    let mut out = Vec::with_capacity(oh * ow * cout);
    for i in 0..oh {
        for j in 0..ow {
            let start = out.len();
            out.extend_from_slice(params.bias.data());
            let acc = &mut out[start..];
            for di in 0..3 {
                for dj in 0..3 {
                    let tap = di * 3 + dj;
                    let px = &x[((i + di) * w + j + dj) * cin..][..cin];
                    for (c, &xv) in px.iter().enumerate() {
                        let krow = &k[(tap * cin + c) * cout..][..cout];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow, cout], out)
}

pub fn conv2d3x3_backward<R: Real>(
    input: &Tensor<R>,
    params: &Conv2dParams<R>,
    grad_out: &Tensor<R>,
) -> Result<Conv2dGrads<R>> {
    let (h, w, cin) = image_dims(input)?;
    let cout = params.out_channels();
    let (oh, ow) = (h - 2, w - 2);
    if grad_out.shape() != [oh, ow, cout] {
        return shape_err(format!(
            "conv grad has shape {:?}, expected [{oh}, {ow}, {cout}]",
            grad_out.shape()
        ));
    }
    let x = input.data();
    let k = params.kernel.data();
    let g = grad_out.data();
    let mut dx = vec![R::zero(); x.len()];
    let mut dk = vec![R::zero(); k.len()];
    let mut db = vec![R::zero(); cout];
    for i in 0..oh {
        for j in 0..ow {
            let go = &g[(i * ow + j) * cout..][..cout];
            for (b, &gv) in db.iter_mut().zip(go) {
                *b += gv;
            }
            for di in 0..3 {
                for dj in 0..3 {
                    let tap = di * 3 + dj;
                    let base = ((i + di) * w + j + dj) * cin;
                    for c in 0..cin {
                        let xv = x[base + c];
                        let off = (tap * cin + c) * cout;
                        let mut s = R::zero();
                        for o in 0..cout {
                            dk[off + o] += xv * go[o];
                            s += k[off + o] * go[o];
                        }
                        dx[base + c] += s;
                    }
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::from_vec(input.shape(), dx)?,
        kernel: Tensor::from_vec(params.kernel.shape(), dk)?,
        bias: Tensor::from_vec(&[cout], db)?,
    })
}

/// Kernel is stored as `[3, Cin, Cout]`; tap 2 reads the current step, tap 0 reads two steps back.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dParams<R = f32> {
    pub kernel: Tensor<R>,
    pub bias: Tensor<R>,
}

impl<R: Real> Conv1dParams<R> {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[3, cin, cout]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn cast<S: Real>(&self) -> Conv1dParams<S> {
        Conv1dParams {
            kernel: self.kernel.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv1dGrads<R = f32> {
    pub input: Tensor<R>,
    pub kernel: Tensor<R>,
    pub bias: Tensor<R>,
}

/// Causal 3-tap convolution over a `T x Cin` sequence followed by ReLU.
/// The sequence is left-padded with two zero steps so the output keeps length `T`.
pub fn causal_conv1d<R: Real>(input: &Tensor<R>, params: &Conv1dParams<R>) -> Result<Tensor<R>> {
    let (t_len, cin) = match *input.shape() {
        [t, c] => (t, c),
        _ => return shape_err(format!("expected TxC sequence, got {:?}", input.shape())),
    };
    if cin != params.in_channels() {
        return shape_err(format!(
            "tcn input has {cin} channels, kernel expects {}",
            params.in_channels()
        ));
    }
    let cout = params.out_channels();
    let x = input.data();
    let k = params.kernel.data();
    let mut out = Vec::with_capacity(t_len * cout);
    for t in 0..t_len {
        let start = out.len();
        out.extend_from_slice(params.bias.data());
        let acc = &mut out[start..];
        for tap in 0..3 {
            let Some(src) = (t + tap).checked_sub(2) else {
                continue;
            };
            for c in 0..cin {
                let xv = x[src * cin + c];
                let krow = &k[(tap * cin + c) * cout..][..cout];
                for (a, &kv) in acc.iter_mut().zip(krow) {
                    *a += xv * kv;
                }
            }
        }
        for a in acc.iter_mut() {
            *a = a.max(R::zero());
        }
    }
    Tensor::from_vec(&[t_len, cout], out)
}

/// Backward pass of [`causal_conv1d`]; `output` is the post-ReLU forward result.
pub fn causal_conv1d_backward<R: Real>(
    input: &Tensor<R>,
    params: &Conv1dParams<R>,
    output: &Tensor<R>,
    grad_out: &Tensor<R>,
) -> Result<Conv1dGrads<R>> {
    let t_len = input.shape()[0];
    let cin = params.in_channels();
    let cout = params.out_channels();
    if grad_out.shape() != output.shape() || output.shape() != [t_len, cout] {
        return shape_err("tcn gradient shape does not match its output");
    }
    let g = relu_mask_backward(output, grad_out);
    let x = input.data();
    let k = params.kernel.data();
    let mut dx = vec![R::zero(); x.len()];
    let mut dk = vec![R::zero(); k.len()];
    let mut db = vec![R::zero(); cout];
    for t in 0..t_len {
        let go = &g[t * cout..][..cout];
        for (b, &gv) in db.iter_mut().zip(go) {
            *b += gv;
        }
        for tap in 0..3 {
            let Some(src) = (t + tap).checked_sub(2) else {
                continue;
            };
            for c in 0..cin {
                let xv = x[src * cin + c];
                let off = (tap * cin + c) * cout;
                let mut s = R::zero();
                for o in 0..cout {
                    dk[off + o] += xv * go[o];
                    s += k[off + o] * go[o];
                }
                dx[src * cin + c] += s;
            }
        }
    }
    Ok(Conv1dGrads {
        input: Tensor::from_vec(input.shape(), dx)?,
        kernel: Tensor::from_vec(params.kernel.shape(), dk)?,
        bias: Tensor::from_vec(&[cout], db)?,
    })
}
