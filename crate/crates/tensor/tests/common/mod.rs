#![allow(dead_code)]

use camseg_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

/// Values bounded away from zero so ReLU-style kinks are never crossed by a
/// finite-difference step.
pub fn random_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.random_range(0.05f32..1.0);
        if rng.random_bool(0.5) { mag } else { -mag }
    })
}

/// ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂), accumulated in f64.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 { diff } else { diff / scale }
}

/// Central finite-difference check of `f` w.r.t. each of `inputs`.
///
/// The scalar probed is L = Σ_j c_j · y_j with fixed random coefficients `c`,
/// evaluated in f64 from the f32 outputs. Returns the worst per-input
/// relative error.
pub fn check_gradients(inputs: &[Tensor], seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let forward = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_grad())).collect();
        let y = f(&mut tape, &vars);
        (tape, vars, y)
    };
    let (probe_tape, _, y) = forward(inputs);
    let out_shape = probe_tape.shape(y).to_vec();
    let mut r = rng(seed);
    let coeffs = random(&out_shape, &mut r);

    let (mut tape, vars, y) = forward(inputs);
    let c = tape.constant(coeffs.clone());
    let weighted = tape.mul(y, c).expect("same shape");
    let loss = tape.sum(weighted);
    tape.backward(loss).expect("scalar loss");

    let probe = |xs: &[Tensor]| -> f64 {
        let (tape, _, y) = forward(xs);
        tape.value(y).data().iter().zip(coeffs.data()).map(|(&v, &c)| v as f64 * c as f64).sum()
    };

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*var) {
            Some(g) => g.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; inputs[i].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP as f32;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP as f32;
            let h = plus[i].data()[j] as f64 - minus[i].data()[j] as f64;
            numeric.push((probe(&plus) - probe(&minus)) / h);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Direct quadruple-loop convolution, accumulated in f64.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = x.dims4("ref").unwrap();
    let [o, _, k, _] = w.dims4("ref").unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0f32; n * o * oh * ow];
    for bi in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[oc] as f64;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((bi * c + ic) * h + y as usize) * wd + xx as usize] as f64;
                                let wv = wdat[((oc * c + ic) * k + ky) * k + kx] as f64;
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Scatter-based transposed convolution: every input pixel adds a weighted
/// copy of the kernel into the output.
pub fn naive_conv_transpose2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = x.dims4("ref").unwrap();
    let [_, o, k, _] = w.dims4("ref").unwrap();
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (wd - 1) * stride + k - 2 * pad;
    let mut acc = vec![0.0f64; n * o * oh * ow];
    for bi in 0..n {
        for ic in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    let xv = x.data()[((bi * c + ic) * h + y) * wd + xx] as f64;
                    for oc in 0..o {
                        for ky in 0..k {
                            for kx in 0..k {
                                let ty = (y * stride + ky) as isize - pad as isize;
                                let tx = (xx * stride + kx) as isize - pad as isize;
                                if ty < 0 || tx < 0 || ty >= oh as isize || tx >= ow as isize {
                                    continue;
                                }
                                let wv = w.data()[((ic * o + oc) * k + ky) * k + kx] as f64;
                                acc[((bi * o + oc) * oh + ty as usize) * ow + tx as usize] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    for bi in 0..n {
        for oc in 0..o {
            for p in 0..oh * ow {
                acc[(bi * o + oc) * oh * ow + p] += b.data()[oc] as f64;
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], acc.into_iter().map(|v| v as f32).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

pub fn inner(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}
