#![allow(dead_code)]

use critlab_core::tensor::{Tape, Tensor, Var};
use critlab_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Values bounded away from zero, for checks through ReLU kinks.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Largest norm-wise relative error between reverse-mode and central
/// finite-difference gradients of `sum(coeffs * f(leaves))`, over all leaves.
pub fn gradcheck<F>(leaves: &[Tensor], coeff_seed: u64, h: f64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ls: &[Tensor]| -> (Vec<f64>, f64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ls.iter().map(|t| tape.variable(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        let values = tape.value(out).data().to_vec();
        (values, 0.0)
    };
    let (base, _) = eval(leaves);
    let mut crng = rng(coeff_seed);
    let coeffs: Vec<f64> = (0..base.len())
        .map(|_| crng.random_range(-1.0..1.0))
        .collect();
    let objective = |ls: &[Tensor]| -> f64 {
        let (v, _) = eval(ls);
        v.iter().zip(&coeffs).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward_with_seed(out, &coeffs).unwrap();

    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .wrt(vars[li])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut numeric = vec![0.0; leaf.numel()];
        for i in 0..leaf.numel() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[i] += h;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[i] -= h;
            numeric[i] = (objective(&plus) - objective(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
            + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

/// Direct six-nested-loop convolution.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, k, oh, ow]);
    for s in 0..n {
        for kk in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[kk];
                    for ch in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[s, ch, iy as usize, ix as usize])
                                        * w.at(&[kk, ch, i, j]);
                                }
                            }
                        }
                    }
                    let off = out.offset(&[s, kk, oy, ox]);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}
