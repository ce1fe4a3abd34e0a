use critlab_core::analysis::*;
use critlab_core::deficits::blur;
use critlab_core::models::{build_allcnn, build_fc, Model};
use critlab_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn generator(t: f64, tau1: f64, tau2: f64, k: f64, d: f64) -> f64 {
    (-(t - d) / tau1).exp() - k * (-(t - d) / tau2).exp()
}

fn within(x: f64, truth: f64, rel: f64) -> bool {
    (x - truth).abs() <= rel * truth.abs()
}

#[test]
fn pure_exponential_is_recovered_exactly() {
    let pts: Vec<(f64, f64)> = (0..30)
        .map(|i| {
            let t = i as f64;
            (t, generator(t, 10.0, 1.0, 0.0, 0.0))
        })
        .collect();
    let fit = fit_double_exp(&pts, &DoubleExpGrid::default()).unwrap();
    assert_ne!(fit.status, FitStatus::Failed);
    // with k = 0 the amplitude is carried by d alone
    assert!((fit.tau1 - 10.0).abs() < 1e-4, "{fit:?}");
    assert!(fit.k.abs() < 1e-4, "{fit:?}");
    assert!(fit.d.abs() < 1e-3, "{fit:?}");
    assert!(fit.rms < 1e-8);
}

fn noisy_double_exp(seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.01).unwrap();
    // 40 points on [0, 80]: the delay is pinned by the samples before it
    // and tau2 by the tail, which needs a span of a few tau2
    (0..40)
        .map(|i| {
            let t = 80.0 * i as f64 / 39.0;
            (
                t,
                generator(t, 8.0, 30.0, 0.9, 5.0) + noise.sample(&mut rng),
            )
        })
        .collect()
}

#[test]
fn double_exp_recovers_noisy_synthetic_parameters() {
    for seed in 0..3 {
        let fit = fit_double_exp(&noisy_double_exp(seed), &DoubleExpGrid::default()).unwrap();
        assert_eq!(fit.status, FitStatus::Converged);
        assert!(within(fit.tau1, 8.0, 0.1), "{fit:?}");
        assert!(within(fit.tau2, 30.0, 0.1), "{fit:?}");
        assert!(within(fit.k, 0.9, 0.1), "{fit:?}");
        assert!(within(fit.d, 5.0, 0.1), "{fit:?}");
        assert!(!fit.non_physical);
        assert!(fit.rms < 0.015);
    }
}

#[test]
fn constant_data_never_yields_nan() {
    let pts: Vec<(f64, f64)> = (0..12).map(|i| (i as f64, 0.4)).collect();
    let fit = fit_double_exp(&pts, &DoubleExpGrid::default()).unwrap();
    let values = [fit.tau1, fit.tau2, fit.k, fit.d, fit.rms];
    assert!(values.iter().all(|v| !v.is_nan()), "{fit:?}");
    assert!(
        fit.status == FitStatus::Failed || fit.degenerate,
        "unidentifiable data must be flagged: {fit:?}"
    );
}

#[test]
fn double_exp_rejects_short_input() {
    let pts = vec![(0.0, 1.0); 4];
    assert!(fit_double_exp(&pts, &DoubleExpGrid::default()).is_err());
}

#[test]
fn fits_do_not_depend_on_point_order() {
    let pts = noisy_double_exp(7);
    let mut shuffled = pts.clone();
    shuffled.reverse();
    shuffled.swap(3, 17);
    let a = fit_double_exp(&pts, &DoubleExpGrid::default()).unwrap();
    let b = fit_double_exp(&shuffled, &DoubleExpGrid::default()).unwrap();
    assert_eq!(
        (a.tau1, a.tau2, a.k, a.d, a.rms),
        (b.tau1, b.tau2, b.k, b.d, b.rms)
    );

    let s: Vec<f64> = (0..10).map(|i| i as f64 * 0.4).collect();
    let f: Vec<f64> = s.iter().map(|x| 2.0 * (0.5 * x).exp() + 1.0).collect();
    let (mut s2, mut f2) = (s.clone(), f.clone());
    s2.reverse();
    f2.reverse();
    assert_eq!(
        fit_exp_link(&s, &f).unwrap(),
        fit_exp_link(&s2, &f2).unwrap()
    );
}

#[test]
fn accepted_steps_never_increase_the_residual() {
    let pts = noisy_double_exp(1);
    let run = levenberg_marquardt(
        &pts,
        &[3.0, 50.0, 2.0, 0.0],
        &|t: f64, p: &[f64], g: &mut [f64]| {
            let s = t - p[3];
            let (u1, u2) = ((-s / p[0]).exp(), (-s / p[1]).exp());
            g[0] = u1 * s / (p[0] * p[0]);
            g[1] = -p[2] * u2 * s / (p[1] * p[1]);
            g[2] = -u2;
            g[3] = u1 / p[0] - p[2] * u2 / p[1];
            u1 - p[2] * u2
        },
        &LmOptions::default(),
    );
    assert!(run.accepted.len() > 1);
    assert!(run.accepted.windows(2).all(|w| w[1] <= w[0]));
    assert!(run.iterations <= 500);
}

#[test]
fn lm_solves_a_linear_problem_in_one_pass() {
    // y = 3x - 2: Gauss-Newton is exact, damping only slows it
    let pts: Vec<(f64, f64)> = (0..8).map(|i| (i as f64, 3.0 * i as f64 - 2.0)).collect();
    let run = levenberg_marquardt(
        &pts,
        &[0.0, 0.0],
        &|x: f64, p: &[f64], g: &mut [f64]| {
            g[0] = x;
            g[1] = 1.0;
            p[0] * x + p[1]
        },
        &LmOptions::default(),
    );
    assert_eq!(run.status, FitStatus::Converged);
    assert!((run.params[0] - 3.0).abs() < 1e-9 && (run.params[1] + 2.0).abs() < 1e-9);
}

#[test]
fn exp_link_exact_recovery() {
    let s: Vec<f64> = (0..15).map(|i| i as f64 * 0.3).collect();
    let f: Vec<f64> = s.iter().map(|x| 2.0 * (0.5 * x).exp() + 1.0).collect();
    let fit = fit_exp_link(&s, &f).unwrap();
    assert_eq!(fit.status, FitStatus::Converged);
    assert!((fit.a - 2.0).abs() < 1e-6, "{fit:?}");
    assert!((fit.b - 1.0).abs() < 1e-6, "{fit:?}");
    assert!((fit.c - 0.5).abs() < 1e-6, "{fit:?}");
    assert!(!fit.degenerate);
}

#[test]
fn exp_link_noisy_recovery() {
    let noise = Normal::new(0.0, 0.01).unwrap();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..20).map(|i| i as f64 * 0.2).collect();
        let f: Vec<f64> = s
            .iter()
            .map(|x| 2.0 * (0.5 * x).exp() + 1.0 + noise.sample(&mut rng))
            .collect();
        let fit = fit_exp_link(&s, &f).unwrap();
        assert!(within(fit.a, 2.0, 0.1), "{fit:?}");
        assert!(within(fit.b, 1.0, 0.1), "{fit:?}");
        assert!(within(fit.c, 0.5, 0.1), "{fit:?}");
    }
}

#[test]
fn exp_link_degenerate_inputs_are_flagged() {
    let zero = vec![0.0; 6];
    let f = vec![1.0, 2.0, 1.5, 3.0, 2.5, 2.0];
    let fit = fit_exp_link(&zero, &f).unwrap();
    assert!(fit.degenerate);
    assert_eq!(fit.c, 0.0);
    assert!((fit.a + fit.b - 2.0).abs() < 1e-12);

    let s: Vec<f64> = (0..6).map(|i| i as f64).collect();
    let flat = fit_exp_link(&s, &[4.0; 6]).unwrap();
    assert!(flat.degenerate, "{flat:?}");
    assert!((flat.eval(2.5) - 4.0).abs() < 1e-9);
    assert!(fit_exp_link(&s, &f[..5]).is_err());
}

#[test]
fn spearman_examples() {
    assert_eq!(
        spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]).unwrap(),
        1.0
    );
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    // ties: ranks (1.5, 1.5, 3) vs (1, 2, 3)
    let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
    assert!((r - 3f64.sqrt() / 2.0).abs() < 1e-12);
    assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn constant_kernel_is_perfectly_smooth() {
    assert_eq!(smoothness_index(&[0.7; 9], [1, 3, 3]).unwrap(), 0.0);
}

#[test]
fn checkerboard_is_roughest_sign_pattern() {
    let mut best = (f64::MIN, Vec::new());
    let mut all = Vec::new();
    for bits in 0u32..512 {
        let k: Vec<f64> = (0..9)
            .map(|i| if bits >> i & 1 == 1 { 1.0 } else { -1.0 })
            .collect();
        let s = smoothness_index(&k, [1, 3, 3]).unwrap();
        all.push(s);
        if s > best.0 {
            best = (s, k);
        }
    }
    let checker: Vec<f64> = (0..9)
        .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let c = smoothness_index(&checker, [1, 3, 3]).unwrap();
    // every difference is +-2 and the variance is 80/81
    assert!((c - 4.0 * 81.0 / 80.0).abs() < 1e-12);
    assert!(all.iter().all(|&s| s <= c + 1e-12));
    // only the checkerboard and its negation reach the maximum
    assert_eq!(all.iter().filter(|&&s| s > c - 1e-12).count(), 2);
}

#[test]
fn blurring_a_kernel_makes_it_smoother() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let k: Vec<f64> = (0..64).map(|_| rng.random::<f64>() - 0.5).collect();
        let before = smoothness_index(&k, [1, 8, 8]).unwrap();
        let after = smoothness_index(&blur(&k, [1, 8, 8]).unwrap(), [1, 8, 8]).unwrap();
        assert!(after < before, "{after} !< {before}");
    }
}

#[test]
fn constant_kernels_render_mid_gray() {
    let w = Tensor::full(&[2, 1, 3, 3], -0.3);
    let g = render_filters(&w).unwrap();
    assert_eq!((g.width, g.height, g.channels), (7, 3, 1));
    for y in 0..3 {
        for x in 0..7 {
            let v = g.pixels[y * 7 + x];
            assert_eq!(v, if x == 3 { 0 } else { 128 });
        }
    }
}

#[test]
fn grid_layout_for_96_colour_kernels() {
    let w = Tensor::from_fn(&[96, 3, 3, 3], |i| (i as f64 * 0.37).sin());
    let g = render_filters(&w).unwrap();
    assert_eq!(g.channels, 3);
    assert_eq!(g.tiles, 96);
    assert_eq!(g.columns, 10);
    // 10 rows (last has 6 tiles), 3-pixel tiles, 1-pixel separators
    assert_eq!(g.width, 10 * 3 + 9);
    assert_eq!(g.height, 10 * 3 + 9);
    // tile 95 is row 9, column 5; tile slot 96 stays blank
    let at = |x: usize, y: usize| &g.pixels[(y * g.width + x) * 3..(y * g.width + x) * 3 + 3];
    let last_row_y = 9 * 4;
    assert!(at(5 * 4 + 1, last_row_y + 1).iter().any(|&v| v != 0));
    assert!(at(6 * 4 + 1, last_row_y + 1).iter().all(|&v| v == 0));
    // each kernel spans the full byte range
    let k0: Vec<u8> = (0..3)
        .flat_map(|y| (0..3).flat_map(move |x| [y, x]))
        .collect::<Vec<_>>()
        .chunks(2)
        .flat_map(|c| at(c[1], c[0]).to_vec())
        .collect();
    assert_eq!(k0.iter().min(), Some(&0));
    assert_eq!(k0.iter().max(), Some(&255));
}

#[test]
fn exported_grid_round_trips_and_rejects_linear_layers() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(build_allcnn(0.125, 10).unwrap(), 1).unwrap();
    let out = dir.path().join("conv0.ppm");
    let grid = export_filters(&model.state, 0, &out).unwrap();
    let (w, h, c, px) = read_pnm(&out).unwrap();
    assert_eq!((w, h, c), (grid.width, grid.height, 3));
    assert_eq!(px, grid.pixels);
    assert_eq!(export_filters(&model.state, 0, &out).unwrap(), grid);

    let fc = Model::new(build_fc(&[8], [1, 4, 4], 3).unwrap(), 0).unwrap();
    assert!(matches!(
        export_filters(&fc.state, 0, &dir.path().join("x.pgm")),
        Err(Error::NotConv(0))
    ));
}

proptest! {
    #[test]
    fn smoothness_is_scale_and_shift_invariant(
        k in proptest::collection::vec(-1.0f64..1.0, 9),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let a = smoothness_index(&k, [1, 3, 3]).unwrap();
        let moved: Vec<f64> = k.iter().map(|v| v * scale + shift).collect();
        let b = smoothness_index(&moved, [1, 3, 3]).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-6 * (1.0 + a));
    }
}

#[test]
fn non_finite_rms_survives_json() {
    let fit = critlab_core::analysis::ExpLinkFit {
        a: 0.0,
        b: 1.0,
        c: 0.0,
        rms: f64::INFINITY,
        status: critlab_core::analysis::FitStatus::Failed,
        degenerate: true,
    };
    let text = serde_json::to_string(&fit).unwrap();
    let back: critlab_core::analysis::ExpLinkFit = serde_json::from_str(&text).unwrap();
    assert!(back.rms.is_nan());
    assert_eq!(back.status, fit.status);
}
