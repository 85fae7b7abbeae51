//! Desk-scale classifiers with analytic per-sample gradients.
//!
//! Two fixed architectures share one parameter layout: multinomial logistic
//! regression (`hidden == 0`) and a one-hidden-layer tanh network. Loss is
//! softmax cross-entropy. Parameters live in a single flat vector laid out
//! layer by layer as `[W (out × in, row-major), b (out)]`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub d_in: usize,
    /// Hidden width; zero selects logistic regression.
    pub hidden: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn new(d_in: usize, hidden: usize, classes: usize) -> Result<Self> {
        if d_in == 0 || classes < 2 {
            return Err(Error::domain(format!(
                "architecture needs d_in >= 1 and classes >= 2, got {d_in} and {classes}"
            )));
        }
        Ok(Self { d_in, hidden, classes })
    }

    /// `(fan_in, fan_out)` of each dense layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        if self.hidden == 0 {
            vec![(self.d_in, self.classes)]
        } else {
            vec![(self.d_in, self.hidden), (self.hidden, self.classes)]
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

/// Per-sample gradients, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl GradientMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("gradient rows have unequal lengths".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; an empty-width matrix has no data anyway.
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Column sums.
    pub fn sum_rows(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (s, g) in sum.iter_mut().zip(r) {
                *s += g;
            }
        }
        sum
    }

    pub fn mean_row(&self) -> Vec<f64> {
        let n = self.rows as f64;
        self.sum_rows().into_iter().map(|s| s / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    arch: Architecture,
    flat: Vec<f64>,
}

/// Borrowed weights and bias of one dense layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

impl MlpParams {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            flat: vec![0.0; arch.num_params()],
        }
    }

    pub fn from_flat(arch: Architecture, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != arch.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, architecture needs {}",
                flat.len(),
                arch.num_params()
            )));
        }
        Ok(Self { arch, flat })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.flat.clone()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn layers(&self) -> Vec<LayerView<'_>> {
        let mut offset = 0;
        self.arch
            .layers()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let w = &self.flat[offset..offset + fan_in * fan_out];
                offset += fan_in * fan_out;
                let b = &self.flat[offset..offset + fan_out];
                offset += fan_out;
                LayerView {
                    fan_in,
                    fan_out,
                    weights: w,
                    bias: b,
                }
            })
            .collect()
    }

    /// Flat index ranges `(weights, bias)` of each layer.
    pub fn layer_ranges(&self) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let mut offset = 0;
        self.arch
            .layers()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let w = offset..offset + fan_in * fan_out;
                let b = w.end..w.end + fan_out;
                offset = b.end;
                (w, b)
            })
            .collect()
    }
}

/// Weights uniform in ±1/√fan_in from a seeded ChaCha8 stream, biases zero.
pub fn init_params(arch: Architecture, seed: u64) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MlpParams::zeros(arch);
    for ((fan_in, _), (w, _)) in arch.layers().into_iter().zip(params.layer_ranges()) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut params.flat[w] {
            *v = rng.random_range(-bound..=bound);
        }
    }
    params
}

fn dense(layer: &LayerView<'_>, x: &[f64], out: &mut [f64]) {
    for (o, (w_row, b)) in out.iter_mut().zip(layer.weights.chunks_exact(layer.fan_in).zip(layer.bias)) {
        *o = b + w_row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
    }
}

/// Softmax in place; returns `ln Σ exp(logits)`.
fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
    max + total.ln()
}

struct Activations {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn forward_one(layers: &[LayerView<'_>], x: &[f64]) -> Activations {
    match layers {
        [out] => {
            let mut logits = vec![0.0; out.fan_out];
            dense(out, x, &mut logits);
            Activations {
                hidden: Vec::new(),
                logits,
            }
        }
        [first, out] => {
            let mut hidden = vec![0.0; first.fan_out];
            dense(first, x, &mut hidden);
            hidden.iter_mut().for_each(|h| *h = h.tanh());
            let mut logits = vec![0.0; out.fan_out];
            dense(out, &hidden, &mut logits);
            Activations { hidden, logits }
        }
        _ => unreachable!("architectures have one or two layers"),
    }
}

fn check_batch(params: &MlpParams, batch: &Samples<'_>) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Shape("batch is empty".into()));
    }
    if batch.d_in != params.arch.d_in || batch.features.len() != batch.len() * batch.d_in {
        return Err(Error::Shape(format!(
            "batch rows of width {} do not match model input {}",
            batch.d_in, params.arch.d_in
        )));
    }
    if let Some(l) = batch.labels.iter().find(|l| **l >= params.arch.classes) {
        return Err(Error::Shape(format!("label {l} outside the model's {} classes", params.arch.classes)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub mean_loss: f64,
    pub losses: Vec<f64>,
    /// Argmax class per sample.
    pub predictions: Vec<usize>,
}

pub fn forward_loss(params: &MlpParams, batch: &Samples<'_>) -> Result<ForwardOutput> {
    check_batch(params, batch)?;
    let layers = params.layers();
    let mut losses = Vec::with_capacity(batch.len());
    let mut predictions = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let Activations { logits, .. } = forward_one(&layers, batch.row(i));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        losses.push(lse - logits[batch.labels[i]]);
        predictions.push(argmax(&logits));
    }
    let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(ForwardOutput {
        mean_loss,
        losses,
        predictions,
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(params: &MlpParams, batch: &Samples<'_>) -> Result<f64> {
    let out = forward_loss(params, batch)?;
    let hits = out.predictions.iter().zip(batch.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Scratch buffers for one sample's backward pass.
struct Workspace {
    delta_hidden: Vec<f64>,
}

/// Writes the gradient of one sample's loss into `out` (length `d`).
fn sample_gradient(
    layers: &[LayerView<'_>],
    ranges: &[(std::ops::Range<usize>, std::ops::Range<usize>)],
    x: &[f64],
    label: usize,
    out: &mut [f64],
    ws: &mut Workspace,
) {
    let Activations { hidden, mut logits } = forward_one(layers, x);
    softmax_in_place(&mut logits);
    // Output error signal: softmax − onehot.
    let mut delta_out = logits;
    delta_out[label] -= 1.0;

    let (out_w, out_b) = ranges.last().cloned().expect("at least one layer");
    let out_input: &[f64] = if hidden.is_empty() { x } else { &hidden };
    outer_into(&mut out[out_w], &delta_out, out_input);
    out[out_b].copy_from_slice(&delta_out);

    if let [first, last] = layers {
        let delta_hidden = &mut ws.delta_hidden;
        delta_hidden.clear();
        delta_hidden.resize(first.fan_out, 0.0);
        for (k, d) in delta_out.iter().enumerate() {
            let w_row = &last.weights[k * last.fan_in..(k + 1) * last.fan_in];
            for (dh, w) in delta_hidden.iter_mut().zip(w_row) {
                *dh += w * d;
            }
        }
        for (dh, h) in delta_hidden.iter_mut().zip(&hidden) {
            *dh *= 1.0 - h * h;
        }
        let (w, b) = ranges[0].clone();
        outer_into(&mut out[w], delta_hidden, x);
        out[b].copy_from_slice(delta_hidden);
    }
}

/// Row `i` is the gradient of sample `i`'s loss with respect to the flat parameters.
pub fn per_sample_gradients(params: &MlpParams, batch: &Samples<'_>) -> Result<GradientMatrix> {
    check_batch(params, batch)?;
    let layers = params.layers();
    let ranges = params.layer_ranges();
    let mut ws = Workspace { delta_hidden: Vec::new() };
    let mut grads = GradientMatrix::zeros(batch.len(), params.len());
    for i in 0..batch.len() {
        sample_gradient(&layers, &ranges, batch.row(i), batch.labels[i], grads.row_mut(i), &mut ws);
    }
    Ok(grads)
}

/// Adds the gradients of the samples at `indices` into `sum`, each first
/// scaled by `min(1, C/‖g‖₂)` when `clip` is `Some(C)`.
///
/// Rows are produced and added one at a time in index order, so the result
/// is bit-identical to clipping [`per_sample_gradients`] and summing its rows.
pub fn accumulate_gradients(
    params: &MlpParams,
    data: &Samples<'_>,
    indices: &[usize],
    clip: Option<f64>,
    sum: &mut [f64],
) -> Result<()> {
    check_batch(params, data)?;
    if sum.len() != params.len() {
        return Err(Error::Shape(format!("accumulator of length {} for {} parameters", sum.len(), params.len())));
    }
    if let Some(i) = indices.iter().find(|i| **i >= data.len()) {
        return Err(Error::Shape(format!("sample index {i} outside {} rows", data.len())));
    }
    let layers = params.layers();
    let ranges = params.layer_ranges();
    let mut ws = Workspace { delta_hidden: Vec::new() };
    let mut row = vec![0.0; params.len()];
    for &i in indices {
        sample_gradient(&layers, &ranges, data.row(i), data.labels[i], &mut row, &mut ws);
        if let Some(c) = clip {
            let norm = row.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > c {
                let scale = c / norm;
                row.iter_mut().for_each(|g| *g *= scale);
            }
        }
        for (s, g) in sum.iter_mut().zip(&row) {
            *s += g;
        }
    }
    Ok(())
}

fn outer_into(out: &mut [f64], left: &[f64], right: &[f64]) {
    for (chunk, l) in out.chunks_exact_mut(right.len()).zip(left) {
        for (o, r) in chunk.iter_mut().zip(right) {
            *o = l * r;
        }
    }
}

/// Mean-loss gradient by central differences at one coordinate, with step
/// `1e-5·(1 + |θ_j|)`.
pub fn central_difference(params: &MlpParams, batch: &Samples<'_>, coord: usize) -> Result<f64> {
    let mut probe = params.clone();
    let theta = params.flat[coord];
    let h = 1e-5 * (1.0 + theta.abs());
    probe.flat[coord] = theta + h;
    let up = forward_loss(&probe, batch)?.mean_loss;
    probe.flat[coord] = theta - h;
    let down = forward_loss(&probe, batch)?.mean_loss;
    Ok((up - down) / (2.0 * h))
}

/// Relative error with a floor on the denominator so that coordinates
/// whose gradient is essentially zero are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Max relative error of the analytic mean gradient against central
/// differences over `probes` distinct random coordinates (all of them when
/// `probes >= d`).
pub fn finite_diff_check(params: &MlpParams, batch: &Samples<'_>, probes: usize, seed: u64) -> Result<f64> {
    finite_diff_check_with(params, batch, probes, seed, per_sample_gradients)
}

/// As [`finite_diff_check`], with the gradient routine under test supplied by the caller.
pub fn finite_diff_check_with<F>(
    params: &MlpParams,
    batch: &Samples<'_>,
    probes: usize,
    seed: u64,
    gradients: F,
) -> Result<f64>
where
    F: Fn(&MlpParams, &Samples<'_>) -> Result<GradientMatrix>,
{
    if probes == 0 {
        return Err(Error::domain("finite-difference check needs at least one probe"));
    }
    let analytic = gradients(params, batch)?.mean_row();
    let coords = probe_coordinates(params.len(), probes, seed);
    let mut worst = 0.0f64;
    for j in coords {
        let numeric = central_difference(params, batch, j)?;
        worst = worst.max(relative_error(analytic[j], numeric));
    }
    Ok(worst)
}

/// The coordinates a finite-difference check with this `(d, probes, seed)` visits.
pub fn probe_coordinates(d: usize, probes: usize, seed: u64) -> Vec<usize> {
    if probes >= d {
        return (0..d).collect();
    }
    let mut picked = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), d, probes).into_vec();
    picked.sort_unstable();
    picked
}
