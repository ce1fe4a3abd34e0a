mod common;

use common::*;
use critlab_core::models::checkpoint::Checkpoint;
use critlab_core::models::{
    build_allcnn, build_fc, build_reslite, build_vardepth, LayerSpec, Model, ModelSpec, ModelState,
};
use critlab_core::tensor::{BatchNormMode, Tape};
use critlab_core::Error;

fn finite_logits(spec: ModelSpec, batch: usize) {
    let classes = spec.class_count;
    let shape = spec.input_shape;
    let mut model = Model::new(spec, 3).unwrap();
    let mut r = rng(21);
    let x = random_tensor(&mut r, &[batch, shape[0], shape[1], shape[2]], 1.0);
    for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
        let z = model.logits(&x, mode).unwrap();
        assert_eq!(z.shape(), &[batch, classes]);
        assert!(z.all_finite());
    }
}

#[test]
fn every_builder_produces_finite_logits() {
    finite_logits(build_allcnn(0.1, 10).unwrap(), 2);
    finite_logits(build_vardepth(2, 0.1, 10).unwrap(), 2);
    finite_logits(build_fc(&[16, 8], [1, 32, 32], 10).unwrap(), 3);
    finite_logits(build_fc(&[1], [1, 32, 32], 10).unwrap(), 3);
    finite_logits(build_reslite(&[1, 1], 0.125, 10).unwrap(), 2);
}

#[test]
fn groups_partition_the_parameters() {
    for spec in [
        build_allcnn(0.25, 10).unwrap(),
        build_reslite(&[2, 2], 0.125, 10).unwrap(),
        build_fc(&[64, 32], [1, 32, 32], 10).unwrap(),
    ] {
        let state = ModelState::init(&spec, 0).unwrap();
        let per_group: usize = state.group_param_counts().iter().sum();
        assert_eq!(per_group, state.param_count());
        let mut seen = vec![0; state.params.len()];
        for g in &state.groups {
            for &i in &g.params {
                seen[i] += 1;
                assert_eq!(state.params[i].group, g.id);
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }
}

/// kh*kw*cin*cout for the weight, plus 2*cout for batch-norm affine
/// parameters or cout for a bias.
fn conv_count(cin: usize, cout: usize, k: usize, bn: bool) -> usize {
    k * k * cin * cout + if bn { 2 * cout } else { cout }
}

#[test]
fn full_width_parameter_counts_match_fixtures() {
    let allcnn = ModelState::init(&build_allcnn(1.0, 10).unwrap(), 0).unwrap();
    let by_formula = conv_count(3, 96, 3, true)
        + conv_count(96, 96, 3, true)
        + conv_count(96, 192, 3, true)
        + 4 * conv_count(192, 192, 3, true)
        + conv_count(192, 192, 1, true)
        + conv_count(192, 10, 1, false);
    assert_eq!(by_formula, 1_620_010);
    assert_eq!(allcnn.param_count(), 1_620_010);

    let vd = ModelState::init(&build_vardepth(2, 1.0, 10).unwrap(), 0).unwrap();
    let by_formula = conv_count(3, 96, 3, true)
        + conv_count(96, 96, 3, true)
        + conv_count(96, 192, 3, true)
        + conv_count(192, 192, 3, true)
        + conv_count(192, 384, 3, true)
        + conv_count(384, 384, 3, true)
        + conv_count(384, 384, 1, true)
        + conv_count(384, 10, 1, false);
    assert_eq!(vd.param_count(), by_formula);

    let fc = ModelState::init(
        &build_fc(&[2500, 2000, 1500, 1000, 500], [1, 32, 32], 10).unwrap(),
        0,
    )
    .unwrap();
    assert_eq!(fc.param_count(), 12_580_010);
}

#[test]
fn zero_residual_branch_passes_input_through() {
    let spec = ModelSpec {
        name: "one-block".into(),
        layers: vec![
            LayerSpec::Residual {
                out_channels: 4,
                stride: 1,
            },
            LayerSpec::GlobalAvgPool,
        ],
        class_count: 4,
        input_shape: [4, 6, 6],
        width_scale: 1.0,
    };
    let mut model = Model::new(spec, 0).unwrap();
    for p in &mut model.state.params {
        if p.name == "weight" {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[2, 4, 6, 6], 1.0);
    let x = critlab_core::Tensor::from_fn(x.shape(), |i| x.data()[i].abs());
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = model.forward(&mut tape, xv, BatchNormMode::Eval).unwrap();
    // logits are the pooled block output; compare against pooled input
    let pooled: Vec<f64> = x
        .data()
        .chunks(36)
        .map(|c| c.iter().sum::<f64>() / 36.0)
        .collect();
    assert!(max_rel_diff(tape.value(fwd.logits).data(), &pooled) < 1e-12);
}

#[test]
fn strided_stage_halves_space_and_doubles_channels() {
    let spec = build_reslite(&[1, 1], 0.125, 10).unwrap();
    let shapes = spec.output_shapes().unwrap();
    assert_eq!(shapes[1], vec![8, 32, 32]);
    assert_eq!(shapes[2], vec![16, 16, 16]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let spec = build_fc(&[12, 6], [1, 8, 8], 10).unwrap();
    let mut model = Model::new(spec.clone(), 9).unwrap();
    // give the running stats non-default values
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[4, 1, 8, 8], 1.0);
    model.logits(&x, BatchNormMode::Train).unwrap();

    let ckpt = Checkpoint::from_state(&spec, &model.state, 17, 9);
    let bytes = ckpt.to_bytes();
    assert_eq!(&bytes[..5], b"PLAB1");
    let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), bytes);
    let state = back.restore(&spec).unwrap();
    assert_eq!(state.digest(), model.state.digest());
    assert_eq!(state, model.state);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.write(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::read(&path).unwrap(), ckpt);
}

#[test]
fn checkpoint_rejects_corruption() {
    let spec = build_fc(&[4], [1, 4, 4], 3).unwrap();
    let state = ModelState::init(&spec, 0).unwrap();
    let bytes = Checkpoint::from_state(&spec, &state, 0, 0).to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bad, "x"),
        Err(Error::Format { offset: 0, .. })
    ));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "x"),
        Err(Error::Format { .. })
    ));
    let other = build_fc(&[5], [1, 4, 4], 3).unwrap();
    let ckpt = Checkpoint::from_bytes(&bytes, "x").unwrap();
    assert!(ckpt.restore(&other).is_err());
}

#[test]
fn spec_hash_is_stable_and_discriminating() {
    let a = build_allcnn(0.25, 10).unwrap();
    assert_eq!(a.hash(), build_allcnn(0.25, 10).unwrap().hash());
    assert_ne!(a.hash(), build_allcnn(0.5, 10).unwrap().hash());
}

#[test]
fn model_parameters_pass_gradient_check() {
    // small conv net with batch norm in eval mode: all parameter gradients
    let spec = ModelSpec {
        name: "tiny".into(),
        layers: vec![
            LayerSpec::Conv {
                out_channels: 3,
                kernel: 3,
                stride: 2,
                batch_norm: true,
                relu: true,
            },
            LayerSpec::Residual {
                out_channels: 4,
                stride: 1,
            },
            LayerSpec::Conv {
                out_channels: 3,
                kernel: 1,
                stride: 1,
                batch_norm: false,
                relu: false,
            },
            LayerSpec::GlobalAvgPool,
        ],
        class_count: 3,
        input_shape: [2, 6, 6],
        width_scale: 1.0,
    };
    let mut model = Model::new(spec, 1).unwrap();
    let mut r = rng(8);
    let x = random_tensor(&mut r, &[3, 2, 6, 6], 1.0);
    // populate running stats so eval mode is non-trivial
    model.logits(&x, BatchNormMode::Train).unwrap();
    let labels = [0, 2, 1];
    let loss_of = |m: &mut Model| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fwd = m.forward(&mut tape, xv, BatchNormMode::Eval).unwrap();
        tape.softmax_cross_entropy(fwd.logits, &labels)
            .unwrap()
            .loss
    };
    let (grads, vars) = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fwd = model.forward(&mut tape, xv, BatchNormMode::Eval).unwrap();
        let loss = tape.softmax_cross_entropy(fwd.logits, &labels).unwrap();
        let g = tape.backward(loss.var).unwrap();
        let per: Vec<Vec<f64>> = fwd
            .param_vars
            .iter()
            .map(|v| g.wrt(*v).unwrap().to_vec())
            .collect();
        (per, fwd.param_vars.len())
    };
    assert_eq!(vars, model.state.params.len());
    let h = 1e-5;
    for pi in 0..model.state.params.len() {
        let n = model.state.params[pi].tensor.numel();
        let mut diff = 0.0;
        let mut scale = 0.0;
        for i in 0..n {
            let orig = model.state.params[pi].tensor.data()[i];
            model.state.params[pi].tensor.data_mut()[i] = orig + h;
            let lp = loss_of(&mut model);
            model.state.params[pi].tensor.data_mut()[i] = orig - h;
            let lm = loss_of(&mut model);
            model.state.params[pi].tensor.data_mut()[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            diff += (num - grads[pi][i]).powi(2);
            scale += num * num + grads[pi][i] * grads[pi][i];
        }
        let rel = diff.sqrt() / scale.sqrt().max(1e-12);
        assert!(
            rel < 1e-4,
            "param {pi} ({}) rel {rel}",
            model.state.params[pi].name
        );
    }
}
