//! Central finite-difference checks of every hand-written backward pass, in f64.

use ircount::nn::*;
use ircount::tensor::Tensor;
use ircount::zoo::{build_model, Frame, Model, ModelSpec, FRAME_PIXELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const MAX_REL_ERR: f64 = 1e-4;
/// Denominator floor for the relative error; gradients below it are compared absolutely.
const REL_FLOOR: f64 = 1e-6;
/// At most this fraction of coordinates may be skipped because `±STEP` crosses a kink.
const MAX_SKIPPED: f64 = 0.10;
const SEEDS: u64 = 20;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks `analytic` against the five-point central difference of `loss` w.r.t. `x`.
/// `loss` also returns a branch fingerprint; coordinates whose stencil crosses a kink are skipped.
fn check(
    name: &str,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    mut loss: impl FnMut(&Tensor<f64>) -> (f64, u64),
) -> (usize, usize) {
    let (_, base_fp) = loss(x);
    let mut skipped = 0;
    'coords: for i in 0..x.len() {
        let mut f = [0.0; 4];
        for (slot, k) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
            let mut xs = x.clone();
            xs.data_mut()[i] += k * STEP;
            let (l, fp) = loss(&xs);
            if fp != base_fp {
                skipped += 1;
                continue 'coords;
            }
            f[slot] = l;
        }
        let numeric = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * STEP);
        let a = analytic.data()[i];
        let e = rel_err(a, numeric);
        assert!(
            e < MAX_REL_ERR,
            "{name}[{i}]: analytic {a:e} numeric {numeric:e} rel err {e:e}"
        );
    }
    (skipped, x.len())
}

fn relu_fp(t: &Tensor<f64>) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for &v in t.data() {
        (v > 0.0).hash(&mut h);
    }
    h.finish()
}

pub fn conv2d_gradients() {
    let mut skipped = 0;
    let mut total = 0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[6, 5, 3], 1.0);
        let p = Conv2dParams {
            kernel: rand_tensor(&mut rng, &[9, 3, 4], 0.5),
            bias: rand_tensor(&mut rng, &[4], 0.5),
        };
        let r = rand_tensor(&mut rng, &[4, 3, 4], 1.0);
        let g = conv2d3x3_backward(&x, &p, &r).unwrap();
        let f = |x: &Tensor<f64>, p: &Conv2dParams<f64>| (dot(&conv2d3x3(x, p).unwrap(), &r), 0);
        check("conv.input", &x, &g.input, |x| f(x, &p));
        check("conv.kernel", &p.kernel, &g.kernel, |k| {
            f(
                &x,
                &Conv2dParams {
                    kernel: k.clone(),
                    bias: p.bias.clone(),
                },
            )
        });
        let (s, n) = check("conv.bias", &p.bias, &g.bias, |b| {
            f(
                &x,
                &Conv2dParams {
                    kernel: p.kernel.clone(),
                    bias: b.clone(),
                },
            )
        });
        skipped += s;
        total += n;
    }
    assert_eq!(skipped, 0, "{total}");
}

pub fn causal_conv1d_gradients() {
    let (mut skipped, mut total) = (0, 0);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_tensor(&mut rng, &[5, 3], 1.0);
        let p = Conv1dParams {
            kernel: rand_tensor(&mut rng, &[3, 3, 4], 0.5),
            bias: rand_tensor(&mut rng, &[4], 0.5),
        };
        let r = rand_tensor(&mut rng, &[5, 4], 1.0);
        let y = causal_conv1d(&x, &p).unwrap();
        let g = causal_conv1d_backward(&x, &p, &y, &r).unwrap();
        let f = |x: &Tensor<f64>, p: &Conv1dParams<f64>| {
            let y = causal_conv1d(x, p).unwrap();
            (dot(&y, &r), relu_fp(&y))
        };
        for (name, s) in [
            ("tcn.input", check("tcn.input", &x, &g.input, |x| f(x, &p))),
            (
                "tcn.kernel",
                check("tcn.kernel", &p.kernel, &g.kernel, |k| {
                    f(
                        &x,
                        &Conv1dParams {
                            kernel: k.clone(),
                            bias: p.bias.clone(),
                        },
                    )
                }),
            ),
            (
                "tcn.bias",
                check("tcn.bias", &p.bias, &g.bias, |b| {
                    f(
                        &x,
                        &Conv1dParams {
                            kernel: p.kernel.clone(),
                            bias: b.clone(),
                        },
                    )
                }),
            ),
        ] {
            let _ = name;
            skipped += s.0;
            total += s.1;
        }
    }
    assert!(
        (skipped as f64) < MAX_SKIPPED * total as f64,
        "{skipped}/{total}"
    );
}

pub fn dense_gradients() {
    for act in [Activation::None, Activation::Relu] {
        let (mut skipped, mut total) = (0, 0);
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let x = rand_tensor(&mut rng, &[7], 1.0);
            let p = DenseParams {
                weight: rand_tensor(&mut rng, &[7, 5], 0.5),
                bias: rand_tensor(&mut rng, &[5], 0.5),
            };
            let r = rand_tensor(&mut rng, &[5], 1.0);
            let y = fully_connected(&x, &p, act).unwrap();
            let g = fully_connected_backward(&x, &p, &y, act, &r).unwrap();
            let f = |x: &Tensor<f64>, p: &DenseParams<f64>| {
                let y = fully_connected(x, p, act).unwrap();
                (dot(&y, &r), relu_fp(&y))
            };
            for s in [
                check("fc.input", &x, &g.input, |x| f(x, &p)),
                check("fc.weight", &p.weight, &g.weight, |w| {
                    f(
                        &x,
                        &DenseParams {
                            weight: w.clone(),
                            bias: p.bias.clone(),
                        },
                    )
                }),
                check("fc.bias", &p.bias, &g.bias, |b| {
                    f(
                        &x,
                        &DenseParams {
                            weight: p.weight.clone(),
                            bias: b.clone(),
                        },
                    )
                }),
            ] {
                skipped += s.0;
                total += s.1;
            }
        }
        assert!(
            (skipped as f64) < MAX_SKIPPED * total as f64,
            "{skipped}/{total}"
        );
    }
}

pub fn batchnorm_training_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let xs: Vec<Tensor<f64>> = (0..3)
            .map(|_| rand_tensor(&mut rng, &[2, 2, 3], 2.0))
            .collect();
        let mut bn = BatchNorm::<f64>::new(3).unwrap();
        bn.gamma = rand_tensor(&mut rng, &[3], 1.5);
        bn.beta = rand_tensor(&mut rng, &[3], 1.0);
        let rs: Vec<Tensor<f64>> = (0..3)
            .map(|_| rand_tensor(&mut rng, &[2, 2, 3], 1.0))
            .collect();
        let loss = |xs: &[Tensor<f64>], bn: &BatchNorm<f64>| {
            let (ys, _, _) = batchnorm_batch_stats(xs, bn).unwrap();
            (ys.iter().zip(&rs).map(|(y, r)| dot(y, r)).sum::<f64>(), 0)
        };
        let (_, cache, _) = batchnorm_batch_stats(&xs, &bn).unwrap();
        let g = batchnorm_backward(&cache, &bn, &rs).unwrap();
        for b in 0..xs.len() {
            check("bn.input", &xs[b], &g.inputs[b], |x| {
                let mut v = xs.clone();
                v[b] = x.clone();
                loss(&v, &bn)
            });
        }
        check("bn.gamma", &bn.gamma, &g.gamma, |t| {
            let mut b2 = bn.clone();
            b2.gamma = t.clone();
            loss(&xs, &b2)
        });
        check("bn.beta", &bn.beta, &g.beta, |t| {
            let mut b2 = bn.clone();
            b2.beta = t.clone();
            loss(&xs, &b2)
        });
    }
}

pub fn batchnorm_inference_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(350 + seed);
        let xs: Vec<Tensor<f64>> = (0..2)
            .map(|_| rand_tensor(&mut rng, &[2, 2, 3], 2.0))
            .collect();
        let mut bn = BatchNorm::<f64>::new(3).unwrap();
        bn.gamma = rand_tensor(&mut rng, &[3], 1.5);
        bn.beta = rand_tensor(&mut rng, &[3], 1.0);
        bn.running_mean = rand_tensor(&mut rng, &[3], 1.0);
        bn.running_var = rand_tensor(&mut rng, &[3], 1.0).map(|v| v.abs() + 0.5);
        let rs: Vec<Tensor<f64>> = (0..2)
            .map(|_| rand_tensor(&mut rng, &[2, 2, 3], 1.0))
            .collect();
        let loss = |xs: &[Tensor<f64>], bn: &BatchNorm<f64>| {
            let (ys, _) = batchnorm_infer_batch(xs, bn).unwrap();
            (ys.iter().zip(&rs).map(|(y, r)| dot(y, r)).sum::<f64>(), 0)
        };
        let (_, cache) = batchnorm_infer_batch(&xs, &bn).unwrap();
        let g = batchnorm_backward(&cache, &bn, &rs).unwrap();
        check("bn.input", &xs[0], &g.inputs[0], |x| {
            loss(&[x.clone(), xs[1].clone()], &bn)
        });
        check("bn.gamma", &bn.gamma, &g.gamma, |t| {
            let mut b2 = bn.clone();
            b2.gamma = t.clone();
            loss(&xs, &b2)
        });
        check("bn.beta", &bn.beta, &g.beta, |t| {
            let mut b2 = bn.clone();
            b2.beta = t.clone();
            loss(&xs, &b2)
        });
    }
}

pub fn maxpool_gradients() {
    let (mut skipped, mut total) = (0, 0);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = rand_tensor(&mut rng, &[6, 6, 2], 1.0);
        let r = rand_tensor(&mut rng, &[3, 3, 2], 1.0);
        let (_, arg) = maxpool2x2(&x).unwrap();
        let g = maxpool2x2_backward(x.shape(), &arg, &r).unwrap();
        let s = check("pool.input", &x, &g, |x| {
            let (y, a) = maxpool2x2(x).unwrap();
            use std::hash::{Hash, Hasher};
            let mut h = std::collections::hash_map::DefaultHasher::new();
            a.hash(&mut h);
            (dot(&y, &r), h.finish())
        });
        skipped += s.0;
        total += s.1;
    }
    assert!(
        (skipped as f64) < MAX_SKIPPED * total as f64,
        "{skipped}/{total}"
    );
}

pub fn lstm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (n_in, h, t) = (3, 4, 3);
        let xs: Vec<Tensor<f64>> = (0..t)
            .map(|_| rand_tensor(&mut rng, &[n_in], 1.0))
            .collect();
        let p = LstmParams {
            w_input: rand_tensor(&mut rng, &[4 * h, n_in], 0.7),
            w_recurrent: rand_tensor(&mut rng, &[4 * h, h], 0.7),
            bias: rand_tensor(&mut rng, &[4 * h], 0.5),
        };
        let r = rand_tensor(&mut rng, &[h], 1.0);
        let loss = |xs: &[Tensor<f64>], p: &LstmParams<f64>| {
            let (hl, _) = lstm_sequence(xs, p).unwrap();
            (dot(&hl, &r), 0)
        };
        let (_, caches) = lstm_sequence(&xs, &p).unwrap();
        let mut g = LstmGrads::zeros_like(&p);
        let dxs = lstm_sequence_backward(&caches, &p, r.data(), &mut g);
        for (step, dx) in dxs.iter().enumerate() {
            let dx = Tensor::from_vec(&[n_in], dx.clone()).unwrap();
            check("lstm.x", &xs[step], &dx, |x| {
                let mut v = xs.clone();
                v[step] = x.clone();
                loss(&v, &p)
            });
        }
        check("lstm.w_input", &p.w_input, &g.w_input, |w| {
            loss(
                &xs,
                &LstmParams {
                    w_input: w.clone(),
                    ..p.clone()
                },
            )
        });
        check("lstm.w_recurrent", &p.w_recurrent, &g.w_recurrent, |w| {
            loss(
                &xs,
                &LstmParams {
                    w_recurrent: w.clone(),
                    ..p.clone()
                },
            )
        });
        check("lstm.bias", &p.bias, &g.bias, |b| {
            loss(
                &xs,
                &LstmParams {
                    bias: b.clone(),
                    ..p.clone()
                },
            )
        });
    }
}

pub fn weighted_xent_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let z = rand_tensor(&mut rng, &[4], 3.0);
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..3.0)).collect();
        let label = rng.random_range(0..4);
        let (_, g) = weighted_softmax_xent(z.data(), label, &w).unwrap();
        let g = Tensor::from_vec(&[4], g).unwrap();
        check("xent.logits", &z, &g, |z| {
            (weighted_softmax_xent(z.data(), label, &w).unwrap().0, 0)
        });
    }
}

const FAMILY_SPECS: [&str; 7] = [
    "sf:w1:C4-P-C4-FC8-FC",
    "sf:w1:C3-FC",
    "mc:w3:C4-P-C4-FC",
    "mv:w3:C4-P-FC6-FC",
    "cat:w3:C3-P-C4-Cat-FC8-FC",
    "lstm:w3:C3-P-C4-L5-FC",
    "tcn:w3:C3-P-C4-T4-FC",
];

fn random_windows(rng: &mut ChaCha8Rng, n: usize, w: usize) -> Vec<Vec<Frame>> {
    (0..n)
        .map(|_| {
            (0..w)
                .map(|_| {
                    let mut f = [0f32; FRAME_PIXELS];
                    f.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
                    f
                })
                .collect()
        })
        .collect()
}

fn batch_loss(
    model: &Model<f64>,
    windows: &[&[Frame]],
    labels: &[usize],
    w: &[f64],
    mode: Mode,
) -> (f64, Vec<Vec<f64>>, u64) {
    let out = model.forward_batch(windows, mode).unwrap();
    let n = windows.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (z, &y) in out.logits.iter().zip(labels) {
        let (l, g) = weighted_softmax_xent(z, y, w).unwrap();
        total += l / n;
        grads.push(g.into_iter().map(|v| v / n).collect());
    }
    (total, grads, out.trace.branch_fingerprint())
}

fn check_model(spec: &str, seed: u64, mode: Mode) -> (usize, usize) {
    let spec = ModelSpec::parse(spec).unwrap();
    let mut model: Model<f64> = build_model(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    // move BN away from identity so its parameters matter
    for b in &mut model.layers.blocks {
        let bn = b.bn.as_mut().unwrap();
        let c = bn.channels();
        bn.gamma = rand_tensor(&mut rng, &[c], 0.5).map(|v| v + 1.0);
        bn.beta = rand_tensor(&mut rng, &[c], 0.3);
        bn.running_mean = rand_tensor(&mut rng, &[c], 0.3);
        bn.running_var = rand_tensor(&mut rng, &[c], 0.75).map(|v| v + 1.25);
    }
    let data = random_windows(&mut rng, 3, spec.window);
    let windows: Vec<&[Frame]> = data.iter().map(|w| w.as_slice()).collect();
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..2.0)).collect();

    let out = model.forward_batch(&windows, mode).unwrap();
    let (_, dl, _) = batch_loss(&model, &windows, &labels, &w, mode);
    let grads = model.backward(&out.trace, &dl).unwrap();
    assert_eq!(grads.len(), model.params().len());
    let names: Vec<String> = model
        .layers
        .named_params()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let (mut skipped, mut total) = (0, 0);
    for (pi, g) in grads.iter().enumerate() {
        assert_eq!(g.shape(), model.params()[pi].shape(), "{}", names[pi]);
        let x = model.params()[pi].clone();
        let s = check(&format!("{spec}/{}", names[pi]), &x, g, |t| {
            let mut m = model.clone();
            *m.params_mut()[pi] = t.clone();
            let (l, _, fp) = batch_loss(&m, &windows, &labels, &w, mode);
            (l, fp)
        });
        skipped += s.0;
        total += s.1;
    }
    (skipped, total)
}

pub fn full_model_gradients_training_mode() {
    for spec in FAMILY_SPECS {
        let (mut skipped, mut total) = (0, 0);
        for seed in 0..SEEDS {
            let s = check_model(spec, seed, Mode::Train);
            skipped += s.0;
            total += s.1;
        }
        assert!(
            (skipped as f64) < MAX_SKIPPED * total as f64,
            "{spec}: {skipped}/{total}"
        );
    }
}

pub fn full_model_gradients_inference_mode() {
    for spec in FAMILY_SPECS {
        let (mut skipped, mut total) = (0, 0);
        for seed in 0..SEEDS {
            let s = check_model(spec, 1000 + seed, Mode::Infer);
            skipped += s.0;
            total += s.1;
        }
        assert!(
            (skipped as f64) < MAX_SKIPPED * total as f64,
            "{spec}: {skipped}/{total}"
        );
    }
}

/// Every check, by name.
pub const SUITE: [(&str, fn()); 10] = [
    ("conv2d_gradients", conv2d_gradients),
    ("causal_conv1d_gradients", causal_conv1d_gradients),
    ("dense_gradients", dense_gradients),
    ("batchnorm_training_gradients", batchnorm_training_gradients),
    ("batchnorm_inference_gradients", batchnorm_inference_gradients),
    ("maxpool_gradients", maxpool_gradients),
    ("lstm_gradients", lstm_gradients),
    ("weighted_xent_gradients", weighted_xent_gradients),
    ("full_model_gradients_training_mode", full_model_gradients_training_mode),
    ("full_model_gradients_inference_mode", full_model_gradients_inference_mode),
];
