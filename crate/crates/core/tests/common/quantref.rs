//! Straightforward integer reference for int8 models.
//!
//! Works channel-first on i64 accumulators, subtracts zero points explicitly and
//! rounds the requantized product with Euclidean division.

use ircount::quant::{calibrate, export_int8, fold_batchnorm, QuantLayer, QuantModel, QuantParams};
use ircount::tensor::Tensor;
use ircount::zoo::{build_model, Family, Frame, Model, ModelSpec, FRAME_PIXELS, FRAME_SIDE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `[channel][row][col]` codes.
pub type Planes = Vec<Vec<Vec<i64>>>;

pub fn quantize(x: f64, qp: &QuantParams) -> i64 {
    let lo = if qp.symmetric { -127.0 } else { -128.0 };
    ((x / qp.scale as f64).round_ties_even() + qp.zero_point as f64).clamp(lo, 127.0) as i64
}

/// `round(acc * mult / 2^shift)`, ties to even.
pub fn rescale(acc: i64, mult: i32, shift: i32) -> i64 {
    let num = acc as i128 * mult as i128;
    let den = 1i128 << shift;
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    let up = 2 * r > den || (2 * r == den && q % 2 != 0);
    (q + up as i128) as i64
}

fn requantize(acc: i64, l: &QuantLayer) -> i64 {
    let z = l.output.zero_point as i64;
    let v = z + rescale(acc, l.requant.multiplier, l.requant.shift);
    let lo = if l.relu { z.max(-128) } else { -128 };
    v.clamp(lo, 127)
}

fn conv(x: &Planes, l: &QuantLayer) -> Planes {
    let cin = x.len();
    let cout = *l.shape.last().unwrap();
    let (h, w) = (x[0].len(), x[0][0].len());
    let zin = l.input.zero_point as i64;
    let weight = |di: usize, dj: usize, ci: usize, o: usize| {
        l.weights[((di * 3 + dj) * cin + ci) * cout + o] as i64
    };
    (0..cout)
        .map(|o| {
            (0..h - 2)
                .map(|i| {
                    (0..w - 2)
                        .map(|j| {
                            let mut acc = l.bias[o] as i64;
                            for di in 0..3 {
                                for dj in 0..3 {
                                    for (ci, plane) in x.iter().enumerate() {
                                        acc += (plane[i + di][j + dj] - zin) * weight(di, dj, ci, o);
                                    }
                                }
                            }
                            requantize(acc, l)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn pool(x: &Planes) -> Planes {
    x.iter()
        .map(|p| {
            (0..p.len() / 2)
                .map(|i| {
                    (0..p[0].len() / 2)
                        .map(|j| {
                            *[p[2 * i][2 * j], p[2 * i][2 * j + 1], p[2 * i + 1][2 * j], p[2 * i + 1][2 * j + 1]]
                                .iter()
                                .max()
                                .unwrap()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Channel-last flattening, matching the float model's feature order.
fn flatten(x: &Planes) -> Vec<i64> {
    let (h, w) = (x[0].len(), x[0][0].len());
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            for p in x {
                out.push(p[i][j]);
            }
        }
    }
    out
}

fn dense(x: &[i64], l: &QuantLayer) -> Vec<i64> {
    let n_out = *l.shape.last().unwrap();
    let zin = l.input.zero_point as i64;
    (0..n_out)
        .map(|o| {
            let acc = x
                .iter()
                .enumerate()
                .map(|(i, &v)| (v - zin) * l.weights[i * n_out + o] as i64)
                .sum::<i64>()
                + l.bias[o] as i64;
            requantize(acc, l)
        })
        .collect()
}

/// Causal kernel-3 convolution; steps before the window read the zero code.
fn tcn(seq: &[Vec<i64>], l: &QuantLayer) -> Vec<i64> {
    let cin = seq[0].len();
    let cout = *l.shape.last().unwrap();
    let zin = l.input.zero_point as i64;
    let mut out = Vec::new();
    for t in 0..seq.len() {
        for o in 0..cout {
            let mut acc = l.bias[o] as i64;
            for k in 0..3usize {
                let Some(src) = (t + k).checked_sub(2) else { continue };
                for ci in 0..cin {
                    acc += (seq[src][ci] - zin) * l.weights[(k * cin + ci) * cout + o] as i64;
                }
            }
            out.push(requantize(acc, l));
        }
    }
    out
}

fn extract(m: &QuantModel, mut x: Planes) -> Vec<i64> {
    for (i, l) in m.blocks.iter().enumerate() {
        x = conv(&x, l);
        if i == 0 && m.pool_after_first {
            x = pool(&x);
        }
    }
    flatten(&x)
}

fn head(m: &QuantModel, f: &[i64]) -> Vec<i64> {
    match &m.hidden {
        Some(h) => dense(&dense(f, h), &m.output),
        None => dense(f, &m.output),
    }
}

fn frame_planes(frames: &[&Frame], qp: &QuantParams) -> Planes {
    frames
        .iter()
        .map(|f| {
            (0..FRAME_SIDE)
                .map(|i| (0..FRAME_SIDE).map(|j| quantize(f[i * FRAME_SIDE + j] as f64, qp)).collect())
                .collect()
        })
        .collect()
}

/// Output codes of every network pass for one normalized window.
pub fn forward(m: &QuantModel, window: &[Frame]) -> Vec<Vec<i64>> {
    let w = window.len();
    match m.spec.family {
        Family::Sf => vec![head(m, &extract(m, frame_planes(&[&window[w - 1]], &m.input)))],
        Family::Mc => {
            let all: Vec<&Frame> = window.iter().collect();
            vec![head(m, &extract(m, frame_planes(&all, &m.input)))]
        }
        Family::Mv => window
            .iter()
            .map(|f| head(m, &extract(m, frame_planes(&[f], &m.input))))
            .collect(),
        Family::Cat => {
            let f: Vec<i64> = window
                .iter()
                .flat_map(|f| extract(m, frame_planes(&[f], &m.input)))
                .collect();
            vec![head(m, &f)]
        }
        Family::Tcn => {
            let seq: Vec<Vec<i64>> = window
                .iter()
                .map(|f| extract(m, frame_planes(&[f], &m.input)))
                .collect();
            vec![head(m, &tcn(&seq, m.tcn.as_ref().unwrap()))]
        }
        Family::Lstm => panic!("lstm has no int8 form"),
    }
}

/// Random window of normalized frames.
pub fn random_window(rng: &mut ChaCha8Rng, w: usize) -> Vec<Frame> {
    (0..w)
        .map(|_| {
            let mut f = [0f32; FRAME_PIXELS];
            f.iter_mut().for_each(|v| *v = rng.random_range(-2.5..2.5));
            f
        })
        .collect()
}

/// A random valid non-LSTM spec.
pub fn random_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    loop {
        let family = ["sf", "mc", "mv", "cat", "tcn"][rng.random_range(0..5)];
        let w = if family == "sf" { 1 } else { rng.random_range(2..=5) };
        let mut tokens = vec![format!("C{}", [2, 4, 8][rng.random_range(0..3)])];
        let pool = rng.random_bool(0.5);
        if pool {
            tokens.push("P".into());
        }
        if rng.random_bool(0.5) {
            tokens.push(format!("C{}", [2, 4, 8][rng.random_range(0..3)]));
        }
        match family {
            "cat" => tokens.push("Cat".into()),
            "tcn" => tokens.push(format!("T{}", rng.random_range(2..=6))),
            _ => {}
        }
        if family == "cat" || rng.random_bool(0.5) {
            tokens.push(format!("FC{}", rng.random_range(3..=12)));
        }
        tokens.push("FC".into());
        if let Ok(s) = ModelSpec::parse(&format!("{family}:w{w}:{}", tokens.join("-"))) {
            return s;
        }
    }
}

fn jitter(t: &mut Tensor<f32>, rng: &mut ChaCha8Rng, scale: f32) {
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v += rng.random_range(-scale..scale));
}

/// Float model with non-trivial BatchNorm statistics and biases.
pub fn random_float_model(rng: &mut ChaCha8Rng) -> Model<f32> {
    let spec = random_spec(rng);
    let mut m: Model<f32> = build_model(&spec, rng.random()).unwrap();
    for p in m.params_mut() {
        jitter(p, rng, 0.1);
    }
    for b in &mut m.layers.blocks {
        let bn = b.bn.as_mut().unwrap();
        jitter(&mut bn.running_mean, rng, 0.5);
        bn.running_var
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.3..2.0));
    }
    m
}

/// Folds, calibrates on random windows and exports.
pub fn export_random(m: &Model<f32>, rng: &mut ChaCha8Rng) -> QuantModel {
    let mut folded = fold_batchnorm(m);
    let data: Vec<Vec<Frame>> = (0..32).map(|_| random_window(rng, m.spec.window)).collect();
    let batches: Vec<Vec<&[Frame]>> = data
        .chunks(8)
        .map(|c| c.iter().map(|w| w.as_slice()).collect())
        .collect();
    folded.qat = Some(calibrate(&folded, &batches).unwrap());
    export_int8(&folded).unwrap()
}

/// Compares the library's integer forward with [`forward`] on `windows` random windows.
/// Returns the first mismatch.
pub fn check_bit_exact(seed: u64, windows: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = random_float_model(&mut rng);
    let q = export_random(&m, &mut rng);
    for _ in 0..windows {
        let win = random_window(&mut rng, m.spec.window);
        let got: Vec<Vec<i64>> = q
            .predict(&win)
            .unwrap()
            .logits
            .iter()
            .map(|r| r.iter().map(|&v| v as i64).collect())
            .collect();
        let want = forward(&q, &win);
        if got != want {
            return Err(format!("{}: {got:?} != {want:?}", m.spec));
        }
    }
    Ok(())
}
