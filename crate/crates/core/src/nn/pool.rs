use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// 2x2 max pooling, stride 2. Returns the pooled image and, for each output
/// element, the flat input index it was taken from (first maximum in scan order).
pub fn maxpool2x2<R: Real>(input: &Tensor<R>) -> Result<(Tensor<R>, Vec<usize>)> {
    let (h, w, c) = match *input.shape() {
        [h, w, c] => (h, w, c),
        _ => return shape_err(format!("expected HxWxC image, got {:?}", input.shape())),
    };
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("max pooling needs even extents, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let mut best_idx = ((2 * i) * w + 2 * j) * c + ch;
                let mut best = x[best_idx];
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * i + di) * w + 2 * j + dj) * c + ch;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_vec(&[oh, ow, c], out)?, argmax))
}

pub fn maxpool2x2_backward<R: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<R>,
) -> Result<Tensor<R>> {
    if argmax.len() != grad_out.len() {
        return shape_err("pool gradient does not match its argmax map");
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}
