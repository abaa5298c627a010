use rovae::autodiff::Tensor;
use rovae::data::{sample_pairs, split_ids, Dataset, DatasetKind, NoiseSpec};
use rovae::experiment::{run_cell, CellSpec, DatasetSpec, Prepared};
use rovae::model::VariantKind;
use rovae::train::{train, Optimizer, OptimizerKind, TrainConfig, TrainData, TrainLog};

const SMOKE_SEEDS: [u64; 3] = [0, 1, 2];
const WINDOW: usize = 100;
const TREND_SLACK: f64 = 0.005;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let lr = 0.01;
    let mut opt = Optimizer::new(OptimizerKind::default(), lr);
    let mut p = Tensor::new(vec![2], vec![1.0, -3.0]).unwrap();
    let g = Tensor::new(vec![2], vec![1.0, -250.0]).unwrap();
    opt.step(&mut [&mut p], &[g]).unwrap();
    // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε).
    assert!((p.data()[0] - (1.0 - lr / (1.0 + 1e-8))).abs() < 1e-15);
    assert!((p.data()[1] - (-3.0 + lr * 250.0 / (250.0 + 1e-8))).abs() < 1e-15);
}

fn smoke_logs() -> Vec<TrainLog> {
    let dataset = Dataset::generate(DatasetKind::Linear, 500, 16, 4).unwrap();
    let ids: Vec<usize> = (0..dataset.len()).collect();
    SMOKE_SEEDS
        .iter()
        .map(|&seed| {
            let config = TrainConfig {
                variant: VariantKind::BetaVae,
                latent_dim: 2,
                hidden: 32,
                steps: 2000,
                batch_x: 32,
                seed,
                log_every: 1,
                ..TrainConfig::default()
            };
            let data = TrainData {
                dataset: &dataset,
                train_ids: &ids,
                pairs: &[],
            };
            train(&config, data).unwrap().1
        })
        .collect()
}

/// Trailing moving average of the per-step totals (record 0 is the step-0
/// snapshot, records 1.. are single steps).
fn moving_average(log: &TrainLog) -> Vec<f64> {
    let totals: Vec<f64> = log.records[1..].iter().map(|r| r.total).collect();
    totals
        .windows(WINDOW)
        .map(|w| w.iter().sum::<f64>() / WINDOW as f64)
        .collect()
}

/// First moving-average index whose window starts in the final half.
fn final_half_start(ma_len: usize) -> usize {
    let steps = ma_len + WINDOW - 1;
    steps - steps / 2
}

/// Least-squares slope of the moving average over windows that lie entirely
/// in the final half of training.
fn final_half_slope(ma: &[f64]) -> f64 {
    let tail = &ma[final_half_start(ma.len())..];
    let n = tail.len() as f64;
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = tail.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (k, y) in tail.iter().enumerate() {
        num += (k as f64 - x_mean) * (y - y_mean);
        den += (k as f64 - x_mean).powi(2);
    }
    num / den
}

#[test]
fn smoke_training_reduces_reconstruction_and_settles() {
    let logs = smoke_logs();
    let first = median(logs.iter().map(|l| l.records[0].recon).collect());
    let last = median(
        logs.iter()
            .map(|l| {
                let tail = &l.records[l.records.len() - WINDOW..];
                tail.iter().map(|r| r.recon).sum::<f64>() / WINDOW as f64
            })
            .collect(),
    );
    assert!(last < first, "recon {first} -> {last}");

    // Once converged, the moving average only fluctuates. The fitted trend
    // across the final half may rise by at most TREND_SLACK of the loss level.
    let rises: Vec<f64> = logs
        .iter()
        .map(|l| {
            let ma = moving_average(l);
            let span = (ma.len() - final_half_start(ma.len())) as f64;
            final_half_slope(&ma) * span / ma[ma.len() - 1].abs()
        })
        .collect();
    let rise = median(rises.clone());
    assert!(
        rise <= TREND_SLACK,
        "relative trend rise {rise} (per seed {rises:?})"
    );
}

#[test]
fn zero_alpha_rovae_matches_beta_vae_after_one_step() {
    let dataset = Dataset::generate(DatasetKind::Linear, 120, 10, 2).unwrap();
    let ids: Vec<usize> = (0..dataset.len()).collect();
    let pairs = sample_pairs(&dataset.instances, 50, 3).unwrap().pairs;
    let base = TrainConfig {
        alpha: 0.0,
        latent_dim: 2,
        hidden: 12,
        pair_hidden: 6,
        steps: 1,
        batch_x: 16,
        batch_pairs: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let (rovae, _) = train(
        &TrainConfig {
            variant: VariantKind::Rovae,
            ..base.clone()
        },
        TrainData {
            dataset: &dataset,
            train_ids: &ids,
            pairs: &pairs,
        },
    )
    .unwrap();
    let (beta_vae, _) = train(
        &TrainConfig {
            variant: VariantKind::BetaVae,
            ..base
        },
        TrainData {
            dataset: &dataset,
            train_ids: &ids,
            pairs: &[],
        },
    )
    .unwrap();
    assert_eq!(rovae.trunk, beta_vae.trunk);
    assert_eq!(rovae.u_head, beta_vae.u_head);
    assert_eq!(rovae.v_head, beta_vae.v_head);
    assert_eq!(rovae.decoder, beta_vae.decoder);
    assert!(rovae.pair.is_some());
}

#[test]
fn cell_outcome_is_complete_and_histogram_conserves_draws() {
    let spec = DatasetSpec {
        kind: DatasetKind::Linear,
        n: 600,
        x_dim: 12,
        seed: 1,
        held_out_fraction: 0.4,
    };
    let prep = Prepared::new(&spec).unwrap();
    assert_eq!(prep.split, split_ids(600, 0.4, 1).unwrap());
    let cell = |variant| CellSpec {
        dataset: spec.clone(),
        pair_budget: 150,
        noise: NoiseSpec::flip(0.25),
        train: TrainConfig {
            variant,
            alpha: 10.0,
            latent_dim: 2,
            hidden: 16,
            pair_hidden: 8,
            steps: 40,
            batch_x: 16,
            batch_pairs: 16,
            ..TrainConfig::default()
        },
        trust_samples_per_pair: 4,
        kappa: true,
    };
    let ro = run_cell(&prep, &cell(VariantKind::Rovae)).unwrap();
    let hist = ro.histogram.unwrap();
    assert_eq!(hist.total, 150 * 4);
    assert_eq!(hist.counts.iter().sum::<u64>(), hist.total);
    assert_eq!(ro.report.p_s_below_1, Some(hist.fraction_below_1));
    assert!(ro.report.kappa.is_some());
    assert!(ro
        .pairs
        .iter()
        .all(|p| prep.split.train.contains(&p.i) && prep.split.train.contains(&p.j)));

    let beta = run_cell(&prep, &cell(VariantKind::BetaVae)).unwrap();
    assert!(beta.pairs.is_empty());
    assert!(beta.flips.is_none() && beta.report.p_s_below_1.is_none());
    assert!(beta.report.u_dim < 3);
}
