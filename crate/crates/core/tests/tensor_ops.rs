mod common;

use common::*;
use critlab_core::tensor::{BatchNormMode, RunningStats, Tape, Tensor, BN_MOMENTUM};
use critlab_core::Error;
use proptest::prelude::*;

#[test]
fn conv_identity_kernel_is_identity() {
    let mut r = rng(1);
    let x = random_tensor(&mut r, &[2, 3, 5, 4], 1.0);
    // 1x1 kernel mapping channel c to channel c
    let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w);
    let bv = tape.constant(Tensor::zeros(&[3]));
    let y = tape.conv2d(xv, wv, Some(bv), 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_stride_two_halves_spatial_size() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 32, 32]));
    let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 4, 16, 16]);
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 4, 32, 32]);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut r = rng(2);
    let x = random_tensor(&mut r, &[2, 3, 5, 5], 1.0);
    let w = random_tensor(&mut r, &[4, 3, 3, 3], 1.0);
    let b = random_tensor(&mut r, &[4], 1.0);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let expect = conv_oracle(&x, &w, b.data(), stride, pad);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        assert_eq!(tape.value(y).shape(), expect.shape());
        assert!(max_rel_diff(tape.value(y).data(), expect.data()) < 1e-6);
    }
}

#[test]
fn conv_channel_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[2, 5, 3, 3]));
    let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 5, 3, 3]"),
        "{msg}"
    );
}

#[test]
fn linear_identity_and_zero_input() {
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[3, 4], 1.0);
    let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let bias = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();

    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(eye));
    let zb = tape.constant(Tensor::zeros(&[4]));
    let y = tape.linear(xv, wv, Some(zb)).unwrap();
    assert_eq!(tape.value(y), &x);

    let zero = tape.constant(Tensor::zeros(&[3, 4]));
    let bv = tape.constant(bias.clone());
    let y = tape.linear(zero, wv, Some(bv)).unwrap();
    for row in tape.value(y).data().chunks(4) {
        assert_eq!(row, bias.data());
    }
}

#[test]
fn linear_matches_loop_oracle() {
    let mut r = rng(4);
    let x = random_tensor(&mut r, &[3, 4], 1.0);
    let w = random_tensor(&mut r, &[2, 4], 1.0);
    let b = random_tensor(&mut r, &[2], 1.0);
    let mut expect = vec![0.0; 6];
    for n in 0..3 {
        for m in 0..2 {
            expect[n * 2 + m] = b.data()[m];
            for d in 0..4 {
                expect[n * 2 + m] += x.at(&[n, d]) * w.at(&[m, d]);
            }
        }
    }
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let y = tape.linear(xv, wv, Some(bv)).unwrap();
    assert!(max_rel_diff(tape.value(y).data(), &expect) < 1e-6);

    let bad = tape.constant(Tensor::zeros(&[3, 5]));
    assert!(matches!(
        tape.linear(bad, wv, None),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn batchnorm_eval_with_unit_stats_is_identity() {
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[4, 3, 2, 2], 1.0);
    let mut stats = RunningStats::new(3);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape
        .batch_norm(xv, g, b, &mut stats, BatchNormMode::Eval)
        .unwrap();
    // eps = 1e-5 scales by 1/sqrt(1 + 1e-5)
    assert!(max_rel_diff(tape.value(y).data(), x.data()) < 1e-5);
}

#[test]
fn batchnorm_train_normalizes_each_channel() {
    let mut r = rng(6);
    let x = Tensor::from_fn(&[8, 3, 2, 2], |i| {
        3.0 + 2.0 * ((i * 7919 % 101) as f64 / 50.0 - 1.0)
    });
    let _ = &mut r;
    let mut stats = RunningStats::new(3);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape
        .batch_norm(xv, g, b, &mut stats, BatchNormMode::Train)
        .unwrap();
    let out = tape.value(y);
    for ch in 0..3 {
        let vals: Vec<f64> = (0..8)
            .flat_map(|n| (0..4).map(move |j| (n, j)))
            .map(|(n, j)| out.data()[(n * 3 + ch) * 4 + j])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5);
        // eps shrinks the variance by var/(var+eps)
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

#[test]
fn batchnorm_running_stats_follow_ema_oracle() {
    let mut r = rng(7);
    let batches = [
        random_tensor(&mut r, &[5, 2], 2.0),
        random_tensor(&mut r, &[5, 2], 3.0),
    ];
    let mut stats = RunningStats::new(2);
    let (mut em, mut ev) = (vec![0.0, 0.0], vec![1.0, 1.0]);
    for x in &batches {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        tape.batch_norm(xv, g, b, &mut stats, BatchNormMode::Train)
            .unwrap();
        for ch in 0..2 {
            let col: Vec<f64> = (0..5).map(|n| x.at(&[n, ch])).collect();
            let mean = col.iter().sum::<f64>() / 5.0;
            let unbiased = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            em[ch] = (1.0 - BN_MOMENTUM) * em[ch] + BN_MOMENTUM * mean;
            ev[ch] = (1.0 - BN_MOMENTUM) * ev[ch] + BN_MOMENTUM * unbiased;
        }
    }
    assert!(max_rel_diff(&stats.mean, &em) < 1e-12);
    assert!(max_rel_diff(&stats.var, &ev) < 1e-12);
}

#[test]
fn batchnorm_train_rejects_single_sample() {
    let mut stats = RunningStats::new(2);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(
        tape.batch_norm(x, g, b, &mut stats, BatchNormMode::Train),
        Err(Error::DegenerateBatch(1))
    ));
}

#[test]
fn relu_and_pooling_basics() {
    let mut tape = Tape::new();
    let neg = tape.constant(Tensor::full(&[2, 3], -1.5));
    let y = tape.relu(neg);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = Tensor::from_fn(&[2, 3, 4, 4], |i| (i / 16) as f64 * 0.5);
    let xv = tape.constant(x);
    let p = tape.global_avg_pool(xv).unwrap();
    assert_eq!(tape.value(p).shape(), &[2, 3]);
    for (i, v) in tape.value(p).data().iter().enumerate() {
        assert_eq!(*v, i as f64 * 0.5);
    }
    assert!(tape.global_avg_pool(neg).is_err());
}

#[test]
fn relu_backward_masks_by_sign() {
    let mut r = rng(8);
    let x = random_away_from_zero(&mut r, &[3, 7]);
    let err = gradcheck(std::slice::from_ref(&x), 9, 1e-6, |t, v| Ok(t.relu(v[0])));
    assert!(err < 1e-8, "relu gradcheck {err}");

    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let y = tape.relu(xv);
    let seed = vec![1.0; x.numel()];
    let g = tape.backward_with_seed(y, &seed).unwrap();
    for (gi, xi) in g.wrt(xv).unwrap().iter().zip(x.data()) {
        assert_eq!(*gi, if *xi > 0.0 { 1.0 } else { 0.0 });
    }
}

#[test]
fn cross_entropy_reference_values() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 10]));
    let out = tape.softmax_cross_entropy(z, &[3]).unwrap();
    assert!((out.loss - 10f64.ln()).abs() < 1e-12);
    assert!((out.loss - std::f64::consts::LN_10).abs() < 1e-12);

    let mut logits = vec![0.0; 10];
    logits[4] = 50.0;
    let z = tape.constant(Tensor::new(vec![1, 10], logits).unwrap());
    let out = tape.softmax_cross_entropy(z, &[4]).unwrap();
    assert!(out.loss < 1e-9);

    assert!(matches!(
        tape.softmax_cross_entropy(z, &[10]),
        Err(Error::LabelOutOfRange {
            label: 10,
            classes: 10
        })
    ));
}

#[test]
fn cross_entropy_matches_direct_oracle() {
    let mut r = rng(10);
    let z = random_tensor(&mut r, &[4, 10], 5.0);
    let labels = [1, 9, 0, 4];
    let mut expect = 0.0;
    let mut post = vec![];
    for (n, &l) in labels.iter().enumerate() {
        let row = &z.data()[n * 10..(n + 1) * 10];
        let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
        let total: f64 = exps.iter().sum();
        post.extend(exps.iter().map(|e| e / total));
        expect -= (exps[l] / total).ln();
    }
    expect /= 4.0;
    let mut tape = Tape::new();
    let zv = tape.constant(z);
    let out = tape.softmax_cross_entropy(zv, &labels).unwrap();
    assert!((out.loss - expect).abs() / expect < 1e-6);
    assert!(max_rel_diff(out.posterior.data(), &post) < 1e-6);
}

#[test]
fn independent_parameter_gets_zero_gradient() {
    let mut r = rng(11);
    let x = random_tensor(&mut r, &[2, 3], 1.0);
    let w = random_tensor(&mut r, &[4, 3], 1.0);
    let unused = random_tensor(&mut r, &[4], 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let wv = tape.param(&w);
    let uv = tape.param(&unused);
    let y = tape.linear(xv, wv, None).unwrap();
    let loss = tape.softmax_cross_entropy(y, &[0, 1]).unwrap();
    let g = tape.backward(loss.var).unwrap();
    assert!(g.wrt(uv).is_none());
    assert!(g.wrt(wv).unwrap().iter().any(|v| *v != 0.0));
}

fn mlp_loss<'p>(
    tape: &mut Tape<'p>,
    x: &Tensor,
    labels: &[usize],
    params: &'p [Tensor],
) -> critlab_core::Result<(
    critlab_core::tensor::LossOutput,
    Vec<critlab_core::tensor::Var>,
)> {
    let xv = tape.constant(x.clone());
    let vars: Vec<_> = params.iter().map(|p| tape.param(p)).collect();
    let h = tape.linear(xv, vars[0], Some(vars[1]))?;
    let h = tape.relu(h);
    let z = tape.linear(h, vars[2], Some(vars[3]))?;
    Ok((tape.softmax_cross_entropy(z, labels)?, vars))
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut r = rng(12);
    let x = random_tensor(&mut r, &[5, 6], 1.0);
    let labels = [0, 2, 1, 2, 0];
    let params = vec![
        random_tensor(&mut r, &[8, 6], 0.5),
        random_tensor(&mut r, &[8], 0.5),
        random_tensor(&mut r, &[3, 8], 0.5),
        random_tensor(&mut r, &[3], 0.5),
    ];
    let mut tape = Tape::new();
    let (loss, vars) = mlp_loss(&mut tape, &x, &labels, &params).unwrap();
    let grads = tape.backward(loss.var).unwrap();
    let h = 1e-4;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).unwrap();
        for i in 0..params[pi].numel() {
            let mut plus = params.clone();
            plus[pi].data_mut()[i] += h;
            let mut minus = params.clone();
            minus[pi].data_mut()[i] -= h;
            let lp = mlp_loss(&mut Tape::new(), &x, &labels, &plus)
                .unwrap()
                .0
                .loss;
            let lm = mlp_loss(&mut Tape::new(), &x, &labels, &minus)
                .unwrap()
                .0
                .loss;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {pi}[{i}]: {a} vs {numeric}");
        }
    }
}

#[test]
fn backward_twice_doubles_accumulated_gradients() {
    let mut r = rng(13);
    let x = random_tensor(&mut r, &[4, 6], 1.0);
    let mut params = vec![
        random_tensor(&mut r, &[8, 6], 0.5),
        random_tensor(&mut r, &[8], 0.5),
        random_tensor(&mut r, &[3, 8], 0.5),
        random_tensor(&mut r, &[3], 0.5),
    ];
    let snapshot = params.clone();
    let (once, twice): (Vec<Vec<f64>>, Vec<Vec<f64>>) = {
        let mut tape = Tape::new();
        let (loss, vars) = mlp_loss(&mut tape, &x, &[0, 1, 2, 0], &snapshot).unwrap();
        let g1 = tape.backward(loss.var).unwrap();
        let g2 = tape.backward(loss.var).unwrap();
        let once = vars.iter().map(|v| g1.wrt(*v).unwrap().to_vec()).collect();
        let twice = vars.iter().map(|v| g2.wrt(*v).unwrap().to_vec()).collect();
        (once, twice)
    };
    for (p, (a, b)) in params.iter_mut().zip(once.iter().zip(&twice)) {
        p.accumulate_grad(a);
        p.accumulate_grad(b);
    }
    for (p, a) in params.iter().zip(&once) {
        let doubled: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        assert_eq!(p.grad().unwrap(), doubled.as_slice());
    }
}

#[test]
fn backward_without_forward_is_an_error() {
    let tape = Tape::new();
    let mut other = Tape::new();
    let v = other.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(v), Err(Error::NoForwardRecord(_))));
    // a bare leaf has no recorded operation either
    assert!(matches!(other.backward(v), Err(Error::NoForwardRecord(_))));
}

#[test]
fn replay_visits_each_operation_once_in_reverse() {
    let mut r = rng(14);
    let params = vec![
        random_tensor(&mut r, &[8, 6], 0.5),
        random_tensor(&mut r, &[8], 0.5),
        random_tensor(&mut r, &[3, 8], 0.5),
        random_tensor(&mut r, &[3], 0.5),
    ];
    let x = random_tensor(&mut r, &[4, 6], 1.0);
    let mut tape = Tape::new();
    let (loss, _) = mlp_loss(&mut tape, &x, &[0, 1, 2, 0], &params).unwrap();
    let g = tape.backward(loss.var).unwrap();
    let visited = g.visited_ops();
    assert_eq!(visited.len(), 4); // linear, relu, linear, loss
    assert!(visited.windows(2).all(|w| w[0] > w[1]));
}

#[test]
fn batchnorm_train_gradcheck() {
    let mut r = rng(15);
    for cfg in 0..3 {
        let shape: &[usize] = if cfg % 2 == 0 { &[4, 3] } else { &[3, 2, 2, 2] };
        let c = shape[1];
        let x = random_tensor(&mut r, shape, 1.0);
        let g = random_tensor(&mut r, &[c], 1.0);
        let b = random_tensor(&mut r, &[c], 1.0);
        let err = gradcheck(&[x, g, b], 100 + cfg, 1e-5, |t, v| {
            let mut s = RunningStats::new(c);
            t.batch_norm(v[0], v[1], v[2], &mut s, BatchNormMode::Train)
        });
        assert!(err < 1e-3, "bn train gradcheck {err}");
    }
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(16);
    let x = random_tensor(&mut r, &[2, 3, 6, 6], 1.0);
    let w = random_tensor(&mut r, &[4, 3, 3, 3], 1.0);
    let run = || {
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.conv2d(xv, wv, None, 2, 1).unwrap();
        t.value(y).data().to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 30)) {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![3, 10], values).unwrap());
        let out = tape.softmax_cross_entropy(z, &[0, 5, 9]).unwrap();
        for row in out.posterior.data().chunks(10) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_and_linear_are_linear_in_input(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[2, 2, 5, 5], 1.0);
        let y = random_tensor(&mut r, &[2, 2, 5, 5], 1.0);
        let w = random_tensor(&mut r, &[3, 2, 3, 3], 1.0);
        let combo = Tensor::from_fn(&[2, 2, 5, 5], |i| a * x.data()[i] + b * y.data()[i]);
        let conv = |input: &Tensor| {
            let mut t = Tape::new();
            let (xv, wv) = (t.constant(input.clone()), t.constant(w.clone()));
            let o = t.conv2d(xv, wv, None, 1, 1).unwrap();
            t.value(o).data().to_vec()
        };
        let (fx, fy, fc) = (conv(&x), conv(&y), conv(&combo));
        for i in 0..fc.len() {
            prop_assert!((fc[i] - (a * fx[i] + b * fy[i])).abs() < 1e-6);
        }

        let lw = random_tensor(&mut r, &[4, 50], 1.0);
        let flat = |input: &Tensor| {
            let mut t = Tape::new();
            let xv = t.constant(input.clone().reshape(vec![2, 50]).unwrap());
            let wv = t.constant(lw.clone());
            let o = t.linear(xv, wv, None).unwrap();
            t.value(o).data().to_vec()
        };
        let (lx, ly, lc) = (flat(&x), flat(&y), flat(&combo));
        for i in 0..lc.len() {
            prop_assert!((lc[i] - (a * lx[i] + b * ly[i])).abs() < 1e-6);
        }
    }
}
