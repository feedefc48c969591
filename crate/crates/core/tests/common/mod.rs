//! Brute-force oracles, finite-difference cases and the symbolic shape
//! calculus shared by the integration suites.
#![allow(dead_code)]

use colearn::gradcheck::{finite_diff_check, Probes};
use colearn::model::{ColearnConfig, ForwardOptions, Network, Variant};
use colearn::ops::conv::Padding;
use colearn::training::{scaled_ce_loss, LossConfig};
use colearn::{Mode, ModelParams, Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Magnitudes in `[margin, 1]` with random signs.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(margin..1.0);
        if rng.gen() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values on a grid of spacing 0.05, shuffled.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- oracles

fn same_pad(n: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = n.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(n);
    (out, total / 2)
}

/// Nested-loop cross-correlation, `x: [b,h,w,ci]`, `w: [k,k,ci,co]`.
pub fn conv2d_oracle(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, padding: Padding) -> (Vec<usize>, Vec<f64>) {
    let s = x.shape();
    let (b, h, wd, ci) = (s[0], s[1], s[2], s[3]);
    let (k, co) = (w.shape()[0], w.shape()[3]);
    let ((oh, pt), (ow, pl)) = match padding {
        Padding::Same => (same_pad(h, k, stride), same_pad(wd, k, stride)),
        Padding::Valid => (((h - k) / stride + 1, 0), ((wd - k) / stride + 1, 0)),
    };
    let xv = |n: usize, y: isize, xx: isize, c: usize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[((n * h + y as usize) * wd + xx as usize) * ci + c] as f64
        }
    };
    let mut out = Vec::with_capacity(b * oh * ow * co);
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = bias.data()[o] as f64;
                    for i in 0..k {
                        for j in 0..k {
                            for c in 0..ci {
                                let y = (oy * stride + i) as isize - pt as isize;
                                let xx = (ox * stride + j) as isize - pl as isize;
                                acc += xv(n, y, xx, c) * w.data()[((i * k + j) * ci + c) * co + o] as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![b, oh, ow, co], out)
}

/// `x: [b,h,w,m,c]`, `w: [k,k,m,c,co]`, spatial same padding, the kernel
/// covering the whole modality axis.
pub fn conv3d_oracle(x: &Tensor, w: &Tensor, bias: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let s = x.shape();
    let (b, h, wd, m, c) = (s[0], s[1], s[2], s[3], s[4]);
    let (k, co) = (w.shape()[0], w.shape()[4]);
    let p = (k / 2) as isize;
    let mut out = Vec::with_capacity(b * h * wd * co);
    for n in 0..b {
        for y in 0..h {
            for xx in 0..wd {
                for o in 0..co {
                    let mut acc = bias.data()[o] as f64;
                    for i in 0..k {
                        for j in 0..k {
                            let (sy, sx) = (y as isize + i as isize - p, xx as isize + j as isize - p);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            for l in 0..m {
                                for ch in 0..c {
                                    let xi = (((n * h + sy as usize) * wd + sx as usize) * m + l) * c + ch;
                                    let wi = (((i * k + j) * m + l) * c + ch) * co + o;
                                    acc += x.data()[xi] as f64 * w.data()[wi] as f64;
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![b, h, wd, co], out)
}

pub fn softmax_oracle(x: &Tensor) -> Vec<f64> {
    let c = *x.shape().last().unwrap();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        let e: Vec<f64> = row.iter().map(|&v| (v as f64).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

pub fn max_pool_oracle(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let at = |n: usize, y: usize, xx: usize, ch: usize| x.data()[((n * h + y) * w + xx) * c + ch] as f64;
    let mut out = Vec::new();
    for n in 0..b {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                for ch in 0..c {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(at(n, 2 * y + dy, 2 * xx + dx, ch));
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

pub fn upsample_oracle(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::new();
    for n in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                for ch in 0..c {
                    out.push(x.data()[((n * h + y / 2) * w + xx / 2) * c + ch] as f64);
                }
            }
        }
    }
    out
}

/// Class-scaled cross-entropy straight from its definition.
pub fn loss_oracle(prob: &Tensor, labels: &[u8], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let s = 1.0 - counts[l as usize] as f64 / n;
        let p = (prob.data()[i * classes + l as usize] as f64).max(1e-12);
        total += s * -p.ln();
    }
    total / n
}

pub fn lrelu(v: f64, alpha: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        alpha * v
    }
}

// ------------------------------------------------------ oracle instances

pub fn oracle_conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, h, w) = (r.gen_range(1..=2), r.gen_range(1..=6), r.gen_range(1..=6));
    let (ci, co) = (r.gen_range(1..=4), r.gen_range(1..=4));
    let k = [1, 3, 5][r.gen_range(0..3)];
    let stride = r.gen_range(1..=2);
    let padding = if h >= k && w >= k && r.gen() { Padding::Valid } else { Padding::Same };
    let x = uniform(&mut r, &[b, h, w, ci], -1.0, 1.0);
    let wt = uniform(&mut r, &[k, k, ci, co], -1.0, 1.0);
    let bias = uniform(&mut r, &[co], -1.0, 1.0);
    let y = colearn::ops::conv::conv2d_forward(&x, &wt, &bias, stride, padding).unwrap();
    let (shape, want) = conv2d_oracle(&x, &wt, &bias, stride, padding);
    assert_eq!(y.shape(), shape.as_slice());
    max_abs_diff(y.data(), &want)
}

pub fn oracle_conv3d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, h, w) = (r.gen_range(1..=2), r.gen_range(1..=6), r.gen_range(1..=6));
    let (c, co) = (r.gen_range(1..=3), r.gen_range(1..=6));
    let k = [1, 3][r.gen_range(0..2)];
    let x = uniform(&mut r, &[b, h, w, 2, c], -1.0, 1.0);
    let wt = uniform(&mut r, &[k, k, 2, c, co], -1.0, 1.0);
    let bias = uniform(&mut r, &[co], -1.0, 1.0);
    let y = colearn::ops::conv::conv3d_modality_forward(&x, &wt, &bias).unwrap();
    let (shape, want) = conv3d_oracle(&x, &wt, &bias);
    assert_eq!(y.shape(), shape.as_slice());
    max_abs_diff(y.data(), &want)
}

pub fn oracle_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(2..=5)];
    let x = uniform(&mut r, &shape, -5.0, 5.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let p = tape.softmax(v);
    max_abs_diff(tape.value(p).data(), &softmax_oracle(&x))
}

pub fn oracle_loss(seed: u64) -> f64 {
    let mut r = rng(seed);
    let classes = r.gen_range(2..=5);
    let shape = [r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4), classes];
    let logits = uniform(&mut r, &shape, -3.0, 3.0);
    let n = shape[0] * shape[1] * shape[2];
    let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..classes) as u8).collect();
    let mut tape = Tape::new();
    let v = tape.constant(logits);
    let p = tape.softmax(v);
    let cfg = LossConfig {
        lambda: 0.0,
        num_classes: classes,
    };
    let l = scaled_ce_loss(&mut tape, p, &labels, &ModelParams::new(), &cfg).unwrap();
    let want = loss_oracle(tape.value(p), &labels, classes);
    (tape.value(l).item() as f64 - want).abs()
}

pub fn oracle_pool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=2), 2 * r.gen_range(1..=3), 2 * r.gen_range(1..=3), r.gen_range(1..=4)];
    let x = uniform(&mut r, &shape, -1.0, 1.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.max_pool2d(v).unwrap();
    max_abs_diff(tape.value(y).data(), &max_pool_oracle(&x))
}

pub fn oracle_upsample(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=4)];
    let x = uniform(&mut r, &shape, -1.0, 1.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.upsample_nearest(v).unwrap();
    max_abs_diff(tape.value(y).data(), &upsample_oracle(&x))
}

pub type OracleCase = (&'static str, fn(u64) -> f64);

pub const ORACLE_CASES: [OracleCase; 6] = [
    ("conv2d", oracle_conv2d),
    ("conv3d_modality", oracle_conv3d),
    ("softmax", oracle_softmax),
    ("loss", oracle_loss),
    ("max_pool2d", oracle_pool),
    ("upsample_nearest", oracle_upsample),
];

/// Uniform predictions over four classes with equal counts and no weight
/// penalty; the loss must equal `0.75 ln 4`.
pub fn uniform_prediction_loss() -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::full([1, 2, 4, 4], 0.25));
    let labels = [0u8, 1, 2, 3, 3, 2, 1, 0];
    let cfg = LossConfig {
        lambda: 0.0,
        num_classes: 4,
    };
    let l = scaled_ce_loss(&mut tape, p, &labels, &ModelParams::new(), &cfg).unwrap();
    tape.value(l).item() as f64
}

// ----------------------------------------------------- gradient instances

/// `sum(y * r)` for a fixed random `r` scaled so the loss stays O(1).
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n = tape.value(y).len() as f32;
    let mut r = rng(seed ^ 0x9e37_79b9);
    let weights = Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0) / n.sqrt());
    let c = tape.constant(weights);
    let m = tape.mul(y, c)?;
    Ok(tape.sum(m))
}

/// Largest relative error over every component of every parameter.
pub fn check_all<F>(params: &mut ModelParams, eps: f32, mut f: F) -> f64
where
    F: FnMut(&ModelParams, &mut Tape) -> Result<Var>,
{
    let ids: Vec<String> = params.ids().map(str::to_string).collect();
    ids.iter()
        .map(|id| {
            finite_diff_check(params, id, eps, Probes::All, &mut f)
                .unwrap()
                .max_rel_error
        })
        .fold(0.0, f64::max)
}

fn params_of(entries: Vec<(&str, Tensor)>) -> ModelParams {
    let mut p = ModelParams::new();
    for (id, t) in entries {
        p.insert(id, t).unwrap();
    }
    p
}

pub fn grad_conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, h, w) = (r.gen_range(1..=2), r.gen_range(3..=5), r.gen_range(3..=5));
    let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
    let k = [1, 3][r.gen_range(0..2)];
    let stride = r.gen_range(1..=2);
    let padding = if r.gen() { Padding::Same } else { Padding::Valid };
    let mut p = params_of(vec![
        ("x", uniform(&mut r, &[b, h, w, ci], -1.0, 1.0)),
        ("w", uniform(&mut r, &[k, k, ci, co], -1.0, 1.0)),
        ("b", uniform(&mut r, &[co], -1.0, 1.0)),
    ]);
    check_all(&mut p, 1e-2, |p, t| {
        let (x, w, b) = (t.param(p, "x")?, t.param(p, "w")?, t.param(p, "b")?);
        let y = t.conv2d(x, w, b, stride, padding)?;
        project(t, y, seed)
    })
}

pub fn grad_conv3d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, h, w) = (r.gen_range(1..=2), r.gen_range(2..=4), r.gen_range(2..=4));
    let (c, co) = (r.gen_range(1..=2), r.gen_range(1..=4));
    let mut p = params_of(vec![
        ("x", uniform(&mut r, &[b, h, w, 2, c], -1.0, 1.0)),
        ("w", uniform(&mut r, &[3, 3, 2, c, co], -1.0, 1.0)),
        ("b", uniform(&mut r, &[co], -1.0, 1.0)),
    ]);
    check_all(&mut p, 1e-2, |p, t| {
        let (x, w, b) = (t.param(p, "x")?, t.param(p, "w")?, t.param(p, "b")?);
        let y = t.conv3d_modality(x, w, b)?;
        project(t, y, seed)
    })
}

pub fn grad_leaky_relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=3)];
    let alpha = r.gen_range(0.01..0.3);
    let mut p = params_of(vec![("x", away_from_zero(&mut r, &shape, 1e-2))]);
    check_all(&mut p, 5e-3, |p, t| {
        let x = t.param(p, "x")?;
        let y = t.leaky_relu(x, alpha)?;
        project(t, y, seed)
    })
}

pub fn grad_batch_norm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(2..=3), r.gen_range(1..=3), r.gen_range(2..=3), r.gen_range(1..=3)];
    let c = shape[3];
    let mut p = ModelParams::new();
    p.insert_batch_norm("bn", c).unwrap();
    p.get_mut("bn.gamma").unwrap().value = uniform(&mut r, &[c], 0.5, 1.5);
    p.get_mut("bn.beta").unwrap().value = uniform(&mut r, &[c], -0.5, 0.5);
    p.insert("x", uniform(&mut r, &shape, -1.0, 1.0)).unwrap();
    check_all(&mut p, 1e-3, |p, t| {
        let x = t.param(p, "x")?;
        let y = t.batch_norm(x, p, "bn", Mode::Train)?;
        project(t, y, seed)
    })
}

pub fn grad_max_pool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=2), 2 * r.gen_range(1..=2), 2 * r.gen_range(1..=2), r.gen_range(1..=3)];
    let mut p = params_of(vec![("x", distinct(&mut r, &shape))]);
    check_all(&mut p, 1e-2, |p, t| {
        let x = t.param(p, "x")?;
        let y = t.max_pool2d(x)?;
        project(t, y, seed)
    })
}

pub fn grad_upsample(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3)];
    let mut p = params_of(vec![("x", uniform(&mut r, &shape, -1.0, 1.0))]);
    check_all(&mut p, 1e-2, |p, t| {
        let x = t.param(p, "x")?;
        let y = t.upsample_nearest(x)?;
        project(t, y, seed)
    })
}

pub fn grad_concat_stack(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3)];
    let mut shape_b = shape;
    shape_b[3] = r.gen_range(1..=3);
    let mut p = params_of(vec![
        ("a", uniform(&mut r, &shape, -1.0, 1.0)),
        ("b", uniform(&mut r, &shape_b, -1.0, 1.0)),
        ("c", uniform(&mut r, &shape, -1.0, 1.0)),
    ]);
    check_all(&mut p, 1e-2, |p, t| {
        let (a, b, c) = (t.param(p, "a")?, t.param(p, "b")?, t.param(p, "c")?);
        let ab = t.concat_channels(a, b)?;
        let ac = t.stack_modality(a, c)?;
        let l1 = project(t, ab, seed)?;
        let l2 = project(t, ac, seed + 1)?;
        t.add(l1, l2)
    })
}

pub fn grad_mul_add_scale(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3)];
    let factor = r.gen_range(-2.0..2.0);
    let mut p = params_of(vec![
        ("a", uniform(&mut r, &shape, -1.0, 1.0)),
        ("b", uniform(&mut r, &shape, -1.0, 1.0)),
    ]);
    check_all(&mut p, 1e-2, |p, t| {
        let (a, b) = (t.param(p, "a")?, t.param(p, "b")?);
        let m = t.mul(a, b)?;
        let s = t.add(m, a)?;
        let y = t.scale(s, factor);
        project(t, y, seed)
    })
}

pub fn grad_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(2..=5)];
    let mut p = params_of(vec![("x", uniform(&mut r, &shape, -2.0, 2.0))]);
    check_all(&mut p, 1e-3, |p, t| {
        let x = t.param(p, "x")?;
        let y = t.softmax(x);
        project(t, y, seed)
    })
}

/// Class-scaled cross-entropy of softmax logits on a 4x4 slice, with the
/// weight penalty on a separate kernel.
pub fn grad_loss(seed: u64) -> f64 {
    let mut r = rng(seed);
    let labels: Vec<u8> = (0..16).map(|_| r.gen_range(0..4) as u8).collect();
    let mut p = params_of(vec![
        ("logits", uniform(&mut r, &[1, 4, 4, 4], -2.0, 2.0)),
        ("k.w", uniform(&mut r, &[3], -1.0, 1.0)),
    ]);
    let cfg = LossConfig {
        lambda: 0.1,
        num_classes: 4,
    };
    check_all(&mut p, 1e-3, |p, t| {
        let x = t.param(p, "logits")?;
        let prob = t.softmax(x);
        scaled_ce_loss(t, prob, &labels, p, &cfg)
    })
}

pub type GradCase = (&'static str, fn(u64) -> f64);

pub const GRAD_CASES: [GradCase; 11] = [
    ("conv2d", grad_conv2d),
    ("conv3d_modality", grad_conv3d),
    ("leaky_relu", grad_leaky_relu),
    ("batch_norm", grad_batch_norm),
    ("max_pool2d", grad_max_pool),
    ("upsample_nearest", grad_upsample),
    ("concat/stack", grad_concat_stack),
    ("mul/add/scale", grad_mul_add_scale),
    ("softmax", grad_softmax),
    ("scaled_ce_loss", grad_loss),
    ("sum_squares", grad_sum_squares),
];

pub fn grad_sum_squares(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..=5);
    let mut p = params_of(vec![
        ("a", uniform(&mut r, &[n], -1.0, 1.0)),
        ("b", uniform(&mut r, &[2, 2], -1.0, 1.0)),
    ]);
    check_all(&mut p, 1e-2, |p, t| {
        let (a, b) = (t.param(p, "a")?, t.param(p, "b")?);
        Ok(t.sum_squares(&[a, b]))
    })
}

pub fn small_config(size: usize, channels: usize) -> ColearnConfig {
    ColearnConfig {
        input_size: [size, size],
        channels,
        ..ColearnConfig::default()
    }
}

/// Random CT/PET batch in `[0, 1]` with random labels.
pub fn random_batch(seed: u64, b: usize, size: usize) -> (Tensor, Tensor, Vec<u8>) {
    let mut r = rng(seed);
    let ct = uniform(&mut r, &[b, size, size, 1], 0.0, 1.0);
    let pet = uniform(&mut r, &[b, size, size, 1], 0.0, 1.0);
    let labels = (0..b * size * size).map(|_| r.gen_range(0..4) as u8).collect();
    (ct, pet, labels)
}

/// Finite-difference check of the whole network at 16x16, c = 4: `probes`
/// random components of every parameter tensor.
pub fn grad_network(variant: Variant, seed: u64, probes: usize) -> f64 {
    let ratio = (variant == Variant::Fs).then(|| colearn::model::FusionRatio::new(0.5).unwrap());
    let net = Network::new(variant, small_config(16, 4), ratio).unwrap();
    let mut params = net.init_params(seed).unwrap();
    let mut r = rng(seed);
    // Non-trivial affine terms so their gradients are exercised too.
    let ids: Vec<String> = params.ids().map(str::to_string).collect();
    for id in &ids {
        if id.ends_with(".gamma") || id.ends_with(".beta") || id.ends_with(".b") {
            let p = params.get_mut(id).unwrap();
            let base = if id.ends_with(".gamma") { 1.0 } else { 0.0 };
            for v in p.value.data_mut() {
                *v = base + r.gen_range(-0.2..0.2);
            }
        }
    }
    let (ct, pet, labels) = random_batch(seed, 2, 16);
    // A small penalty keeps the loss O(1), so f32 rounding of the loss value
    // stays well below the finite-difference signal.
    let cfg = LossConfig {
        lambda: 1e-3,
        num_classes: 4,
    };
    let opts = ForwardOptions::default();
    let mut f = |p: &ModelParams, t: &mut Tape| -> Result<Var> {
        let out = net.forward(t, p, &ct, &pet, Mode::Train, &opts)?;
        scaled_ce_loss(t, out.prob, &labels, p, &cfg)
    };
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        // Small step: the network is full of activation and pooling switch
        // points that a coarser step would straddle.
        let rep = finite_diff_check(
            &mut params,
            id,
            1e-4,
            Probes::Random {
                count: probes,
                seed: seed * 1000 + k as u64,
            },
            &mut f,
        )
        .unwrap();
        worst = worst.max(rep.max_rel_error);
    }
    worst
}

/// One co-learning unit on 4x4 feature maps: `lrelu(conv3d(stack) + b) * concat`.
pub fn grad_colearn_unit(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.gen_range(1..=3);
    let mut p = params_of(vec![
        ("ct", uniform(&mut r, &[1, 4, 4, c], -1.0, 1.0)),
        ("pet", uniform(&mut r, &[1, 4, 4, c], -1.0, 1.0)),
        ("w", uniform(&mut r, &[3, 3, 2, c, 2 * c], -0.5, 0.5)),
        ("b", uniform(&mut r, &[2 * c], -0.5, 0.5)),
    ]);
    check_all(&mut p, 1e-3, |p, t| {
        let (ct, pet) = (t.param(p, "ct")?, t.param(p, "pet")?);
        let (w, b) = (t.param(p, "w")?, t.param(p, "b")?);
        let stacked = t.stack_modality(ct, pet)?;
        let pre = t.conv3d_modality(stacked, w, b)?;
        let map = t.leaky_relu(pre, 0.1)?;
        let both = t.concat_channels(ct, pet)?;
        let fused = t.mul(map, both)?;
        project(t, fused, seed)
    })
}

// ------------------------------------------------------- shape calculus

/// The layer trace a forward pass must produce, derived from the block
/// structure alone: `(layer, [b, h, w, channels])`.
pub fn expected_trace(variant: Variant, cfg: &ColearnConfig, batch: usize) -> Vec<(String, Vec<usize>)> {
    let [h, w] = cfg.input_size;
    let c = cfg.channels;
    let at = |s: usize, ch: usize| vec![batch, h >> s, w >> s, ch];
    let encoders: &[&str] = match variant {
        Variant::Colearn | Variant::Mb => &["ct", "pet"],
        Variant::Mc | Variant::Fs => &["mix"],
    };
    let mut out = Vec::new();
    for e in encoders {
        for s in 0..4 {
            out.push((format!("enc.{e}.b{s}"), at(s, c)));
            out.push((format!("enc.{e}.b{s}.pool"), at(s + 1, c)));
        }
    }
    for s in 0..4 {
        match variant {
            Variant::Colearn => {
                out.push((format!("colearn.u{s}"), at(s, 2 * c)));
                out.push((format!("fused.u{s}"), at(s, 2 * c)));
            }
            Variant::Mb => out.push((format!("skip.s{s}"), at(s, 2 * c))),
            _ => {}
        }
    }
    out.push(("bottleneck".into(), at(4, c * encoders.len())));
    for j in 0..4 {
        out.push((format!("rec.b{j}"), at(3 - j, c)));
    }
    out.push(("head".into(), at(0, cfg.num_rois + 1)));
    out
}
