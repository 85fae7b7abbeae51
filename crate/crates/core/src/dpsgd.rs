//! Training engine for GD, SGD, DP-SGD and DP-GD.
//!
//! Every regime runs the same loop: select a batch, take per-sample
//! gradients, optionally clip and noise them, and step
//! `θ ← θ − η·ĝ`. Privacy is tracked by re-running the accountant at each
//! logged step with the run's `(q, σ, t, δ)`.
//!
//! Gaussian noise uses `rand_distr::StandardNormal` (ziggurat) on a
//! `ChaCha8Rng` stream seeded from the run seed, so a run is reproducible on
//! a given build.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::{eps_for, steps_from_epochs, Horizon};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{
    accumulate_gradients, accuracy, forward_loss, init_params, per_sample_gradients, Architecture, GradientMatrix,
    MlpParams,
};
use crate::noise_meter::{self, Batching, NoiseReport};

/// Stream id separating the training RNG from the initialization RNG.
const TRAIN_STREAM: u64 = 1;

/// Per-sample ℓ² clipping bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipConfig {
    Bounded(f64),
    Unbounded,
}

impl ClipConfig {
    pub fn bounded(c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::domain(format!("clip bound {c} must be positive and finite")));
        }
        Ok(ClipConfig::Bounded(c))
    }

    pub fn bound(&self) -> Option<f64> {
        match *self {
            ClipConfig::Bounded(c) => Some(c),
            ClipConfig::Unbounded => None,
        }
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales each row by `min(1, C/‖g‖₂)`. Rows already inside the ball are
/// copied untouched.
pub fn clip_per_sample(grads: &GradientMatrix, clip: ClipConfig) -> GradientMatrix {
    let mut out = grads.clone();
    if let ClipConfig::Bounded(c) = clip {
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let norm = l2_norm(row);
            if norm > c {
                let scale = c / norm;
                row.iter_mut().for_each(|g| *g *= scale);
            }
        }
    }
    out
}

/// `(1/B)·(Σ g̃_i + z)` with `z ~ N(0, (C·σ)²·I)` and `B` the row count.
pub fn privatize_batch<R: Rng + ?Sized>(
    clipped: &GradientMatrix,
    clip: ClipConfig,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if clipped.rows() == 0 {
        return Err(Error::domain("cannot privatize an empty batch"));
    }
    privatize_sum(clipped, clip, sigma, clipped.rows() as f64, rng)
}

/// As [`privatize_batch`] but normalizing by `denominator` instead of the
/// row count (the expected batch size under Poisson sampling).
pub fn privatize_sum<R: Rng + ?Sized>(
    clipped: &GradientMatrix,
    clip: ClipConfig,
    sigma: f64,
    denominator: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut sum = clipped.sum_rows();
    noise_and_normalize(&mut sum, clip, sigma, denominator, rng)?;
    Ok(sum)
}

/// Adds `N(0, (C·σ)²)` to every coordinate of a clipped-gradient sum, then
/// divides by `denominator`. No random numbers are drawn when `σ = 0`.
pub fn noise_and_normalize<R: Rng + ?Sized>(
    sum: &mut [f64],
    clip: ClipConfig,
    sigma: f64,
    denominator: f64,
    rng: &mut R,
) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::domain(format!("noise multiplier {sigma} must be >= 0")));
    }
    if !(denominator > 0.0) {
        return Err(Error::domain(format!("normalizer {denominator} must be positive")));
    }
    if sigma > 0.0 {
        let c = clip
            .bound()
            .ok_or_else(|| Error::Config("sigma > 0 needs a finite clip bound to scale the noise".into()))?;
        let std = c * sigma;
        for s in sum.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *s += std * z;
        }
    }
    sum.iter_mut().for_each(|s| *s /= denominator);
    Ok(())
}

/// Each index in `0..n` independently with probability `q`.
pub fn poisson_sample<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    /// Whole training set every step.
    Full,
    /// Shuffled, consecutive batches of this size; the last batch of an
    /// epoch may be short.
    Fixed(usize),
    /// Poisson sampling at this rate.
    Poisson(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub horizon: Horizon,
    pub batch: BatchMode,
    pub clip: ClipConfig,
    pub sigma: f64,
    pub delta: f64,
    pub seed: u64,
    /// Metrics are logged at step 0, every `eval_every` steps and at the end.
    pub eval_every: u64,
}

impl TrainConfig {
    /// Non-private full-batch gradient descent.
    pub fn gd(hidden: usize, learning_rate: f64, horizon: Horizon, seed: u64) -> Self {
        Self {
            hidden,
            learning_rate,
            horizon,
            batch: BatchMode::Full,
            clip: ClipConfig::Unbounded,
            sigma: 0.0,
            delta: 1e-5,
            seed,
            eval_every: u64::MAX,
        }
    }

    /// True when gradients go through clip-and-noise rather than a plain mean.
    pub fn is_private_path(&self) -> bool {
        self.sigma > 0.0 || matches!(self.clip, ClipConfig::Bounded(_))
    }

    /// Sampling rate the accountant sees, if the run is accounted at all.
    pub fn accounted_rate(&self) -> Option<f64> {
        if self.sigma == 0.0 {
            return None;
        }
        match self.batch {
            BatchMode::Full => Some(1.0),
            BatchMode::Poisson(q) => Some(q),
            BatchMode::Fixed(_) => None,
        }
    }

    pub fn validate(&self, train: &Dataset, test: &Dataset) -> Result<()> {
        let n = train.len();
        if n == 0 || test.is_empty() {
            return Err(Error::Config("train and test splits must be non-empty".into()));
        }
        if train.d_in != test.d_in {
            return Err(Error::Config(format!(
                "train rows have {} features, test rows {}",
                train.d_in, test.d_in
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma {} must be >= 0", self.sigma)));
        }
        if let ClipConfig::Bounded(c) = self.clip {
            ClipConfig::bounded(c).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.sigma > 0.0 && self.clip == ClipConfig::Unbounded {
            return Err(Error::Config("sigma > 0 requires a finite clip bound".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        match self.batch {
            BatchMode::Full => {}
            BatchMode::Fixed(b) => {
                if b == 0 || b > n {
                    return Err(Error::Config(format!("batch size {b} outside [1, {n}]")));
                }
                if self.sigma > 0.0 {
                    return Err(Error::Config(
                        "privacy accounting is only defined for poisson batching; fixed-size batches with sigma > 0 are rejected".into(),
                    ));
                }
            }
            BatchMode::Poisson(q) => {
                if !(q > 0.0 && q <= 1.0) {
                    return Err(Error::Config(format!("sampling rate {q} outside (0, 1]")));
                }
            }
        }
        if self.sigma > 0.0 && !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta {} outside (0, 1)", self.delta)));
        }
        self.total_steps(n).map(|_| ())
    }

    fn steps_per_epoch(&self, n: usize) -> f64 {
        match self.batch {
            BatchMode::Full => 1.0,
            BatchMode::Fixed(b) => n.div_ceil(b) as f64,
            BatchMode::Poisson(q) => 1.0 / q,
        }
    }

    pub fn total_steps(&self, n: usize) -> Result<u64> {
        match (self.horizon, self.batch) {
            (Horizon::Steps(s), _) => Ok(s),
            (Horizon::Epochs(e), BatchMode::Poisson(q)) => steps_from_epochs(e, q),
            (Horizon::Epochs(e), BatchMode::Full) => Ok(e),
            (Horizon::Epochs(e), BatchMode::Fixed(b)) => Ok(e * n.div_ceil(b.max(1)) as u64),
        }
    }

    /// Batch size entering the noise scales.
    fn effective_batch(&self, n: usize) -> Batching {
        match self.batch {
            BatchMode::Full => Batching::Size(n),
            BatchMode::Fixed(b) => Batching::Size(b),
            BatchMode::Poisson(q) => Batching::Rate(q),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: f64,
    pub eps_spent: f64,
    pub train_loss: f64,
    pub test_acc: f64,
    pub inherent_noise: f64,
    pub additive_noise: f64,
    pub accounted_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub rows: Vec<MetricsRow>,
    pub params: MlpParams,
    pub steps: u64,
}

impl TrainMetrics {
    pub fn last(&self) -> &MetricsRow {
        self.rows.last().expect("step 0 is always logged")
    }
}

/// Deterministic batch schedule for one run.
struct Sampler {
    rng: ChaCha8Rng,
    mode: BatchMode,
    n: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(seed: u64, mode: BatchMode, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(TRAIN_STREAM);
        Self {
            rng,
            mode,
            n,
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        match self.mode {
            BatchMode::Full => (0..self.n).collect(),
            BatchMode::Poisson(q) => poisson_sample(self.n, q, &mut self.rng),
            BatchMode::Fixed(b) => {
                if self.cursor >= self.n {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let end = (self.cursor + b).min(self.n);
                let batch = self.order[self.cursor..end].to_vec();
                self.cursor = end;
                batch
            }
        }
    }
}

/// ε after `step` updates of this run, or 0 for a noiseless run.
pub fn eps_spent(config: &TrainConfig, step: u64) -> Result<f64> {
    match config.accounted_rate() {
        Some(q) => Ok(eps_for(q, config.sigma, step, config.delta)?.eps),
        None => Ok(0.0),
    }
}

/// Noise decomposition for `params` under `config`'s batching and noise.
pub fn noise_report_at(params: &MlpParams, config: &TrainConfig, train: &Dataset, step: Option<u64>) -> Result<NoiseReport> {
    let grads = per_sample_gradients(params, &train.samples())?;
    noise_meter::report(&grads, config.effective_batch(train.len()), config.clip, config.sigma, step)
}

fn log_row(config: &TrainConfig, params: &MlpParams, train: &Dataset, test: &Dataset, step: u64) -> Result<MetricsRow> {
    let report = noise_report_at(params, config, train, Some(step))?;
    Ok(MetricsRow {
        step,
        epoch: step as f64 / config.steps_per_epoch(train.len()),
        eps_spent: eps_spent(config, step)?,
        train_loss: forward_loss(params, &train.samples())?.mean_loss,
        test_acc: accuracy(params, &test.samples())?,
        inherent_noise: report.inherent_scale,
        additive_noise: report.additive_scale,
        accounted_fraction: report.accounted_fraction,
    })
}

/// One update direction from a batch of sample indices, `None` for an empty batch.
fn update_direction(
    config: &TrainConfig,
    params: &MlpParams,
    train: &Dataset,
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<f64>>> {
    if batch.is_empty() {
        return Ok(None);
    }
    let mut sum = vec![0.0; params.len()];
    if !config.is_private_path() {
        accumulate_gradients(params, &train.samples(), batch, None, &mut sum)?;
        let b = batch.len() as f64;
        sum.iter_mut().for_each(|s| *s /= b);
        return Ok(Some(sum));
    }
    accumulate_gradients(params, &train.samples(), batch, config.clip.bound(), &mut sum)?;
    let denominator = match config.batch {
        BatchMode::Poisson(q) => q * train.len() as f64,
        _ => batch.len() as f64,
    };
    noise_and_normalize(&mut sum, config.clip, config.sigma, denominator, rng)?;
    Ok(Some(sum))
}

/// Runs one training job from a fresh initialization.
pub fn train(config: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<TrainMetrics> {
    config.validate(train, test)?;
    let classes = train.num_classes.max(test.num_classes);
    let arch = Architecture::new(train.d_in, config.hidden, classes).map_err(|e| Error::Config(e.to_string()))?;
    train_from(config, init_params(arch, config.seed), train, test)
}

/// Runs one training job starting from `params`.
pub fn train_from(config: &TrainConfig, mut params: MlpParams, train: &Dataset, test: &Dataset) -> Result<TrainMetrics> {
    config.validate(train, test)?;
    let total = config.total_steps(train.len())?;
    let mut sampler = Sampler::new(config.seed, config.batch, train.len());
    let mut rows = vec![log_row(config, &params, train, test, 0)?];

    for step in 1..=total {
        let batch = sampler.next_batch();
        if let Some(direction) = update_direction(config, &params, train, &batch, &mut sampler.rng)? {
            for (p, g) in params.as_flat_mut().iter_mut().zip(&direction) {
                *p -= config.learning_rate * g;
            }
        }
        if step % config.eval_every == 0 || step == total {
            rows.push(log_row(config, &params, train, test, step)?);
        }
    }
    Ok(TrainMetrics { rows, params, steps: total })
}

/// Training regimes compared in the gap experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Gd,
    Sgd { batch_size: usize },
    DpGd { sigma: f64, clip: ClipConfig },
    DpSgd { q: f64, sigma: f64, clip: ClipConfig },
}

impl Regime {
    pub fn label(&self) -> String {
        match *self {
            Regime::Gd => "gd".into(),
            Regime::Sgd { batch_size } => format!("sgd_b{batch_size}"),
            Regime::DpGd { sigma, .. } => format!("dpgd_s{sigma}"),
            Regime::DpSgd { q, sigma, .. } => format!("dpsgd_q{q}_s{sigma}"),
        }
    }

    fn apply(&self, config: &mut TrainConfig) {
        let (batch, clip, sigma) = match *self {
            Regime::Gd => (BatchMode::Full, ClipConfig::Unbounded, 0.0),
            Regime::Sgd { batch_size } => (BatchMode::Fixed(batch_size), ClipConfig::Unbounded, 0.0),
            Regime::DpGd { sigma, clip } => (BatchMode::Full, clip, sigma),
            Regime::DpSgd { q, sigma, clip } => (BatchMode::Poisson(q), clip, sigma),
        };
        config.batch = batch;
        config.clip = clip;
        config.sigma = sigma;
    }
}

/// Shared settings for every run of a gap experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapSettings {
    pub hidden: usize,
    pub learning_rate: f64,
    /// Number of updates each run takes, whatever its batch size.
    pub steps: u64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub regime: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime: String,
    pub mean: f64,
    /// Sample standard deviation over seeds.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
    pub summary: Vec<RegimeSummary>,
}

impl GapReport {
    pub fn mean(&self, regime: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.regime == regime).map(|s| s.mean)
    }
}

/// Final test accuracy of each regime for each seed on the same split.
/// A seed fixes both the initialization and the run's sampling/noise
/// stream, so regimes are compared from identical starting points.
pub fn gap_experiment(
    train_set: &Dataset,
    test: &Dataset,
    seeds: &[u64],
    regimes: &[Regime],
    settings: &GapSettings,
) -> Result<GapReport> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!("gap experiment needs >= 3 seeds, got {}", seeds.len())));
    }
    if regimes.is_empty() {
        return Err(Error::Config("no regimes given".into()));
    }
    use rayon::prelude::*;
    let jobs: Vec<(Regime, u64)> = regimes
        .iter()
        .flat_map(|r| seeds.iter().map(move |s| (*r, *s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(regime, seed)| {
            let mut config = TrainConfig::gd(settings.hidden, settings.learning_rate, Horizon::Steps(settings.steps), seed);
            config.delta = settings.delta;
            regime.apply(&mut config);
            let metrics = train(&config, train_set, test)?;
            Ok(GapRow {
                regime: regime.label(),
                seed,
                accuracy: metrics.last().test_acc,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = regimes
        .iter()
        .map(|r| {
            let label = r.label();
            let accs: Vec<f64> = rows.iter().filter(|row| row.regime == label).map(|row| row.accuracy).collect();
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
            RegimeSummary {
                regime: label,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(GapReport { rows, summary })
}

/// Picks the DP-GD noise multiplier with the best mean held-out accuracy
/// over `seeds`; ties go to the smaller σ.
pub fn tune_dp_gd_sigma(
    train_set: &Dataset,
    validation: &Dataset,
    seeds: &[u64],
    candidates: &[f64],
    clip: ClipConfig,
    settings: &GapSettings,
) -> Result<f64> {
    if candidates.is_empty() || candidates.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config("sigma candidates must be non-empty and positive".into()));
    }
    let regimes: Vec<Regime> = candidates.iter().map(|&sigma| Regime::DpGd { sigma, clip }).collect();
    let report = gap_experiment(train_set, validation, seeds, &regimes, settings)?;
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for (regime, summary) in regimes.iter().zip(&report.summary) {
        let Regime::DpGd { sigma, .. } = *regime else { unreachable!() };
        if summary.mean > best.0 || (summary.mean == best.0 && sigma < best.1) {
            best = (summary.mean, sigma);
        }
    }
    Ok(best.1)
}
