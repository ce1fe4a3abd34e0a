//! Curve fitting, filter export and result post-processing.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    /// Relative step fell below the tolerance, or no further descent was
    /// possible.
    Converged,
    /// Hit the iteration cap; parameters are the best found.
    MaxIterations,
    /// No start produced a finite residual.
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    pub max_iter: usize,
    pub rel_step: f64,
    pub lambda0: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iter: 500,
            rel_step: 1e-8,
            lambda0: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmRun {
    pub params: Vec<f64>,
    /// Sum of squared residuals.
    pub sse: f64,
    pub iterations: usize,
    pub status: FitStatus,
    /// SSE after every accepted step, starting with the initial value.
    pub accepted: Vec<f64>,
}

/// `model(x, params, grad)` returns the prediction and writes its gradient
/// with respect to the parameters.
pub type ModelFn<'a> = dyn Fn(f64, &[f64], &mut [f64]) -> f64 + Sync + 'a;

fn residuals(
    points: &[(f64, f64)],
    p: &[f64],
    model: &ModelFn<'_>,
) -> (f64, DMatrix<f64>, DVector<f64>) {
    let n = points.len();
    let mut jac = DMatrix::zeros(n, p.len());
    let mut r = DVector::zeros(n);
    let mut grad = vec![0.0; p.len()];
    for (i, &(x, y)) in points.iter().enumerate() {
        let f = model(x, p, &mut grad);
        r[i] = f - y;
        for (j, g) in grad.iter().enumerate() {
            jac[(i, j)] = *g;
        }
    }
    let sse = r.norm_squared();
    let ok = sse.is_finite() && jac.iter().all(|v| v.is_finite());
    (if ok { sse } else { f64::INFINITY }, jac, r)
}

/// Damped least squares: solves `(J'J + lambda diag(J'J)) step = -J'r`,
/// shrinking lambda by 3 after an accepted step and doubling it after a
/// rejected one. Steps are accepted only if they reduce the residual.
pub fn levenberg_marquardt(
    points: &[(f64, f64)],
    p0: &[f64],
    model: &ModelFn<'_>,
    opts: &LmOptions,
) -> LmRun {
    let mut p = p0.to_vec();
    let (mut sse, mut jac, mut r) = residuals(points, &p, model);
    let mut run = LmRun {
        params: p.clone(),
        sse,
        iterations: 0,
        status: FitStatus::Failed,
        accepted: vec![sse],
    };
    if !sse.is_finite() {
        return run;
    }
    let mut lambda = opts.lambda0;
    let mut status = FitStatus::MaxIterations;
    for it in 0..opts.max_iter {
        run.iterations = it + 1;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let mut a = jtj.clone();
        for j in 0..p.len() {
            a[(j, j)] += lambda * jtj[(j, j)].max(1e-12);
        }
        let step = match a.cholesky() {
            Some(ch) => ch.solve(&(-&g)),
            None => {
                lambda *= 2.0;
                continue;
            }
        };
        let pnorm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = step.norm() / (pnorm + 1e-12);
        let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let (t_sse, t_jac, t_r) = residuals(points, &trial, model);
        if t_sse < sse {
            p = trial;
            sse = t_sse;
            jac = t_jac;
            r = t_r;
            run.accepted.push(sse);
            lambda /= 3.0;
            if rel < opts.rel_step {
                status = FitStatus::Converged;
                break;
            }
        } else {
            lambda *= 2.0;
            if rel < opts.rel_step || lambda > 1e30 || sse == 0.0 {
                status = FitStatus::Converged;
                break;
            }
        }
    }
    run.params = p;
    run.sse = sse;
    run.status = status;
    run
}

fn sorted_points(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts
}

fn rms(sse: f64, n: usize) -> f64 {
    (sse / n as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartDiagnostic {
    pub init: Vec<f64>,
    pub status: FitStatus,
    #[serde(deserialize_with = "crate::f64_or_nan")]
    pub rms: f64,
    pub iterations: usize,
}

/// `f(t) = exp(-(t - d) / tau1) - k exp(-(t - d) / tau2)`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoubleExpFit {
    pub tau1: f64,
    pub tau2: f64,
    pub k: f64,
    pub d: f64,
    #[serde(deserialize_with = "crate::f64_or_nan")]
    pub rms: f64,
    pub status: FitStatus,
    /// A time constant is not positive.
    pub non_physical: bool,
    /// The curvature at the solution is (numerically) singular, so some
    /// parameters are not identifiable.
    pub degenerate: bool,
    pub starts: Vec<StartDiagnostic>,
}

impl DoubleExpFit {
    pub fn eval(&self, t: f64) -> f64 {
        double_exp(t, &[self.tau1, self.tau2, self.k, self.d], &mut [0.0; 4])
    }
}

fn double_exp(t: f64, p: &[f64], grad: &mut [f64]) -> f64 {
    let [tau1, tau2, k, d] = [p[0], p[1], p[2], p[3]];
    let s = t - d;
    let u1 = (-s / tau1).exp();
    let u2 = (-s / tau2).exp();
    grad[0] = u1 * s / (tau1 * tau1);
    grad[1] = -k * u2 * s / (tau2 * tau2);
    grad[2] = -u2;
    grad[3] = u1 / tau1 - k * u2 / tau2;
    u1 - k * u2
}

/// Initial values for the double-exponential fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoubleExpGrid {
    /// Fractions of the time span used for both time constants.
    pub tau_fractions: Vec<f64>,
    pub k: Vec<f64>,
    /// Include `d = 0` and `d = min t`.
    pub delays_at_zero_and_min: bool,
}

impl Default for DoubleExpGrid {
    fn default() -> Self {
        DoubleExpGrid {
            tau_fractions: vec![0.1, 1.0 / 3.0, 1.0],
            k: vec![0.5, 1.0, 2.0],
            delays_at_zero_and_min: true,
        }
    }
}

fn singular(jac: &DMatrix<f64>) -> bool {
    let sv = jac.clone().singular_values();
    let max = sv.max();
    !(max > 0.0) || sv.min() / max < 1e-7
}

pub fn fit_double_exp(points: &[(f64, f64)], grid: &DoubleExpGrid) -> Result<DoubleExpFit> {
    if points.len() < 5 {
        return Err(Error::invalid(format!(
            "double-exponential fit needs at least 5 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(t, y)| !t.is_finite() || !y.is_finite()) {
        return Err(Error::invalid("non-finite sample"));
    }
    let pts = sorted_points(points);
    let t_min = pts[0].0;
    let span = (pts[pts.len() - 1].0 - t_min).max(1e-12);
    let mut delays = vec![0.0];
    if grid.delays_at_zero_and_min && t_min != 0.0 {
        delays.push(t_min);
    }
    let mut inits = Vec::new();
    for &f1 in &grid.tau_fractions {
        for &f2 in &grid.tau_fractions {
            for &k in &grid.k {
                for &d in &delays {
                    inits.push(vec![f1 * span, f2 * span, k, d]);
                }
            }
        }
    }
    let opts = LmOptions::default();
    let runs: Vec<LmRun> = inits
        .par_iter()
        .map(|p0| levenberg_marquardt(&pts, p0, &double_exp, &opts))
        .collect();
    let starts: Vec<StartDiagnostic> = inits
        .iter()
        .zip(&runs)
        .map(|(init, run)| StartDiagnostic {
            init: init.clone(),
            status: run.status,
            rms: rms(run.sse, pts.len()),
            iterations: run.iterations,
        })
        .collect();
    let best = pick_best(&runs, |p| p[0]);
    let Some(best) = best else {
        return Ok(DoubleExpFit {
            tau1: 0.0,
            tau2: 0.0,
            k: 0.0,
            d: 0.0,
            rms: f64::INFINITY,
            status: FitStatus::Failed,
            non_physical: false,
            degenerate: true,
            starts,
        });
    };
    let p = &best.params;
    let (_, jac, _) = residuals(&pts, p, &double_exp);
    Ok(DoubleExpFit {
        tau1: p[0],
        tau2: p[1],
        k: p[2],
        d: p[3],
        rms: rms(best.sse, pts.len()),
        status: best.status,
        non_physical: p[0] <= 0.0 || p[1] <= 0.0,
        degenerate: singular(&jac),
        starts,
    })
}

/// Lowest residual wins; near-ties go to the smallest tie-break key.
fn pick_best(runs: &[LmRun], key: impl Fn(&[f64]) -> f64) -> Option<&LmRun> {
    let finite: Vec<&LmRun> = runs
        .iter()
        .filter(|r| {
            r.status != FitStatus::Failed
                && r.sse.is_finite()
                && r.params.iter().all(|v| v.is_finite())
        })
        .collect();
    let min = finite.iter().map(|r| r.sse).fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * min.max(1e-300);
    finite
        .into_iter()
        .filter(|r| r.sse <= min + tol)
        .min_by(|a, b| key(&a.params).total_cmp(&key(&b.params)))
}

/// `F = a exp(c S) + b`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpLinkFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    #[serde(deserialize_with = "crate::f64_or_nan")]
    pub rms: f64,
    pub status: FitStatus,
    /// `c` is not identifiable: `S` is constant or the fitted variation is
    /// negligible, so only `a + b` (the level) is determined.
    pub degenerate: bool,
}

impl ExpLinkFit {
    pub fn eval(&self, s: f64) -> f64 {
        self.a * (self.c * s).exp() + self.b
    }
}

fn exp_link(s: f64, p: &[f64], grad: &mut [f64]) -> f64 {
    let e = (p[2] * s).exp();
    grad[0] = e;
    grad[1] = 1.0;
    grad[2] = p[0] * s * e;
    p[0] * e + p[1]
}

pub fn fit_exp_link(s_values: &[f64], f_values: &[f64]) -> Result<ExpLinkFit> {
    if s_values.len() != f_values.len() {
        return Err(Error::invalid("S and F must be paired"));
    }
    if s_values.len() < 3 {
        return Err(Error::invalid(
            "exponential link fit needs at least 3 points",
        ));
    }
    let points: Vec<(f64, f64)> = s_values
        .iter()
        .copied()
        .zip(f_values.iter().copied())
        .collect();
    if points.iter().any(|(s, f)| !s.is_finite() || !f.is_finite()) {
        return Err(Error::invalid("non-finite sample"));
    }
    let pts = sorted_points(&points);
    let (f_min, f_max) = min_max(f_values);
    let (s_min, s_max) = min_max(s_values);
    let (f_range, s_range) = (f_max - f_min, s_max - s_min);
    let n = pts.len();
    let mean_f = f_values.iter().sum::<f64>() / n as f64;
    if s_range == 0.0 {
        let sse = f_values.iter().map(|f| (f - mean_f).powi(2)).sum();
        return Ok(ExpLinkFit {
            a: 0.0,
            b: mean_f,
            c: 0.0,
            rms: rms(sse, n),
            status: FitStatus::Converged,
            degenerate: true,
        });
    }
    // the stated initialization first, then its mirror images
    let c0 = 1.0 / s_range;
    let inits = [
        vec![f_range, f_min, c0],
        vec![-f_range, f_max, c0],
        vec![f_range, f_min, -c0],
        vec![-f_range, f_max, -c0],
    ];
    let opts = LmOptions::default();
    let runs: Vec<LmRun> = inits
        .iter()
        .map(|p0| levenberg_marquardt(&pts, p0, &exp_link, &opts))
        .collect();
    let Some(best) = pick_best(&runs, |_| 0.0) else {
        return Ok(ExpLinkFit {
            a: 0.0,
            b: mean_f,
            c: 0.0,
            rms: f64::INFINITY,
            status: FitStatus::Failed,
            degenerate: true,
        });
    };
    let p = &best.params;
    // fitted variation across the observed S range
    let swing = (p[0] * ((p[2] * s_max).exp() - (p[2] * s_min).exp())).abs();
    Ok(ExpLinkFit {
        a: p[0],
        b: p[1],
        c: p[2],
        rms: rms(best.sse, n),
        status: best.status,
        degenerate: f_range == 0.0 || swing <= 1e-9 * (mean_f.abs() + 1.0),
    })
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(*x), hi.max(*x))
        })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(
            "spearman needs two equal-length series of 2+ values",
        ));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate(
            "constant series has no rank correlation".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Mean squared first difference (horizontal and vertical, per channel)
/// divided by the variance of all kernel values. Constant kernels give 0.
pub fn smoothness_index(kernel: &[f64], shape: [usize; 3]) -> Result<f64> {
    let [c, h, w] = shape;
    if kernel.len() != c * h * w || kernel.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("kernel has {} values", kernel.len()),
        });
    }
    let n = kernel.len() as f64;
    let mean = kernel.iter().sum::<f64>() / n;
    let var = kernel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return Ok(0.0);
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for ch in 0..c {
        let plane = &kernel[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    sum += (plane[y * w + x + 1] - plane[y * w + x]).powi(2);
                    count += 1;
                }
                if y + 1 < h {
                    sum += (plane[(y + 1) * w + x] - plane[y * w + x]).powi(2);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64 / var)
}

/// One index per output kernel of a `[K, C, kh, kw]` weight.
pub fn smoothness_indices(weights: &Tensor) -> Result<Vec<f64>> {
    let s = weights.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected [K, C, kh, kw]".into(),
        });
    }
    let per = s[1] * s[2] * s[3];
    weights
        .data()
        .chunks(per)
        .map(|k| smoothness_index(k, [s[1], s[2], s[3]]))
        .collect()
}

pub const GRID_COLUMNS: usize = 10;

/// A tiled image of conv kernels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilterGrid {
    pub width: usize,
    pub height: usize,
    /// 3 for colour kernels, 1 otherwise.
    pub channels: usize,
    pub tiles: usize,
    pub columns: usize,
    /// Row-major, interleaved when `channels == 3`.
    pub pixels: Vec<u8>,
}

fn to_byte(v: f64, lo: f64, hi: f64) -> u8 {
    if hi == lo {
        128
    } else {
        ((v - lo) / (hi - lo) * 255.0).round() as u8
    }
}

/// Tiles `[K, C, kh, kw]` kernels, each min-max normalized on its own,
/// `GRID_COLUMNS` per row with 1-pixel black separators. Three-channel
/// kernels become colour tiles; otherwise each channel gets its own tile.
pub fn render_filters(weights: &Tensor) -> Result<FilterGrid> {
    let s = weights.shape();
    if s.len() != 4 || s.contains(&0) {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected non-empty [K, C, kh, kw]".into(),
        });
    }
    let [k, c, kh, kw] = [s[0], s[1], s[2], s[3]];
    let colour = c == 3;
    let channels = if colour { 3 } else { 1 };
    let tiles = if colour { k } else { k * c };
    let columns = tiles.min(GRID_COLUMNS);
    let rows = tiles.div_ceil(columns);
    let width = columns * kw + columns - 1;
    let height = rows * kh + rows - 1;
    let mut pixels = vec![0u8; width * height * channels];
    let plane = kh * kw;
    for kernel in 0..k {
        let vals = &weights.data()[kernel * c * plane..(kernel + 1) * c * plane];
        let (lo, hi) = min_max(vals);
        let tile_planes: Vec<(usize, Vec<usize>)> = if colour {
            vec![(kernel, vec![0, 1, 2])]
        } else {
            (0..c).map(|ch| (kernel * c + ch, vec![ch])).collect()
        };
        for (tile, chans) in tile_planes {
            let (tr, tc) = (tile / columns, tile % columns);
            for y in 0..kh {
                for x in 0..kw {
                    let py = tr * (kh + 1) + y;
                    let px = tc * (kw + 1) + x;
                    for (slot, &ch) in chans.iter().enumerate() {
                        let v = vals[ch * plane + y * kw + x];
                        pixels[(py * width + px) * channels + slot] = to_byte(v, lo, hi);
                    }
                }
            }
        }
    }
    Ok(FilterGrid {
        width,
        height,
        channels,
        tiles,
        columns,
        pixels,
    })
}

impl FilterGrid {
    /// Binary PGM (`P5`) or PPM (`P6`).
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Reads a binary PGM/PPM with maxval 255: `(width, height, channels, pixels)`.
pub fn read_pnm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |offset: usize, reason: &str| Error::Format {
        path: path.display().to_string(),
        offset: offset as u64,
        reason: reason.into(),
    };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad(0, "not a binary PGM/PPM")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(start, "bad header field"))?;
    }
    pos += 1;
    let [w, h, max] = fields;
    if max != 255 {
        return Err(bad(pos, "only maxval 255 is supported"));
    }
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(bad(bytes.len(), "truncated pixel data"));
    }
    Ok((w, h, channels, bytes[pos..pos + need].to_vec()))
}

/// Renders the conv group `layer_id` of a model and writes it to `out`.
pub fn export_filters(state: &ModelState, layer_id: usize, out: &Path) -> Result<FilterGrid> {
    let grid = render_filters(state.conv_weight(layer_id)?)?;
    let mut f = std::fs::File::create(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    f.write_all(&grid.to_pnm())
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    Ok(grid)
}
