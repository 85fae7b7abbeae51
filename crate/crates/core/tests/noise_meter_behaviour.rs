use dp_noise_ledger::calibration::Horizon;
use dp_noise_ledger::data::{subset_split, synthetic_blobs};
use dp_noise_ledger::dpsgd::{privatize_batch, train, ClipConfig, TrainConfig};
use dp_noise_ledger::models::{per_sample_gradients, GradientMatrix};
use dp_noise_ledger::noise_meter::{additive_noise_scale, report, Batching, NoiseReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-sample gradients of a briefly trained MLP over its 1000-row train split.
fn trained_gradients() -> GradientMatrix {
    let pool = synthetic_blobs(2000, 10, 4, 1.5, 7).unwrap();
    let (train_set, test) = subset_split(&pool, 1000, 1000, 7).unwrap();
    let cfg = TrainConfig::gd(16, 0.5, Horizon::Steps(50), 0);
    let params = train(&cfg, &train_set, &test).unwrap().params;
    per_sample_gradients(&params, &train_set.samples()).unwrap()
}

fn at(grads: &GradientMatrix, q: f64, sigma: f64) -> NoiseReport {
    report(grads, Batching::Rate(q), ClipConfig::bounded(1.0).unwrap(), sigma, None).unwrap()
}

#[test]
fn fraction_rises_with_sigma_toward_one() {
    let grads = trained_gradients();
    assert_eq!(at(&grads, 0.05, 0.0).accounted_fraction, 0.0);
    let mut last = 0.0;
    for sigma in [0.1, 0.3, 1.0, 3.0, 10.0, 100.0, 1000.0] {
        let f = at(&grads, 0.05, sigma).accounted_fraction;
        assert!(f > last, "sigma={sigma}: {f} <= {last}");
        last = f;
    }
    assert!(last > 0.99);
}

#[test]
fn total_noise_matched_shift_raises_fraction() {
    let grads = trained_gradients();
    let low = at(&grads, 0.04, 2.6);
    let total = low.inherent_scale + low.additive_scale;

    // Raise q fourfold, then pick sigma so the total noise stays put.
    let q = 0.16;
    let b = q * grads.rows() as f64;
    let inherent = at(&grads, q, 0.0).inherent_scale;
    let per_unit = additive_noise_scale(1.0, 1.0, b, grads.cols()).unwrap();
    let sigma = ((total - inherent) / per_unit).sqrt();
    let high = at(&grads, q, sigma);

    let high_total = high.inherent_scale + high.additive_scale;
    assert!((high_total / total - 1.0).abs() <= 0.10);
    assert!(sigma > 2.6, "sigma {sigma}");
    assert!(high.accounted_fraction > low.accounted_fraction);
}

#[test]
fn additive_scale_matches_sampled_noise() {
    let (b, d, draws) = (3usize, 5usize, 100_000);
    let zeros = GradientMatrix::zeros(b, d);
    let clip = ClipConfig::bounded(0.7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut total = 0.0;
    for _ in 0..draws {
        total += privatize_batch(&zeros, clip, 2.0, &mut rng).unwrap().iter().map(|x| x * x).sum::<f64>();
    }
    let empirical = total / draws as f64;
    let want = additive_noise_scale(0.7, 2.0, b as f64, d).unwrap();
    assert!((empirical / want - 1.0).abs() <= 0.05, "{empirical} vs {want}");
}

#[test]
fn full_batch_inherent_scale_is_documented_value() {
    let grads = trained_gradients();
    let n = grads.rows();
    let r = report(&grads, Batching::Size(n), ClipConfig::Unbounded, 0.0, None).unwrap();
    let mean = grads.mean_row();
    let tr_cov: f64 = grads
        .iter_rows()
        .map(|g| g.iter().zip(&mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    assert!((r.inherent_scale - tr_cov / n as f64).abs() <= 1e-12 * tr_cov);
    assert!(r.inherent_scale > 0.0);
}
