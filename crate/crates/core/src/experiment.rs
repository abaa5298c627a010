//! One experiment cell end to end: data, labels, noise, training and
//! held-out evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{sample_pairs, split_ids, Dataset, DatasetKind, NoiseSpec, PairLabel, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate, mean_trust, trust_posterior_histogram, Codes, MetricsReport, TrustHistogram,
};
use crate::model::VariantKind;
use crate::nets::ModelParams;
use crate::rng::derive_seed;
use crate::train::{train, TrainConfig, TrainData, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    #[serde(default = "default_x_dim")]
    pub x_dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_held_out")]
    pub held_out_fraction: f64,
}

fn default_x_dim() -> usize {
    256
}

fn default_held_out() -> f64 {
    0.2
}

/// Everything that determines one trained model and its scores.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSpec {
    pub dataset: DatasetSpec,
    pub pair_budget: usize,
    pub noise: NoiseSpec,
    /// `train.seed` also drives pair sampling and label noise.
    pub train: TrainConfig,
    /// Draws per pair for the aggregated trust histogram.
    pub trust_samples_per_pair: usize,
    /// Also report κ on 5 equal-count classes of the factor.
    pub kappa: bool,
}

/// Data shared by all cells with the same dataset spec.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: Split,
}

impl Prepared {
    pub fn new(spec: &DatasetSpec) -> Result<Self> {
        let dataset = Dataset::generate(spec.kind, spec.n, spec.x_dim, spec.seed)?;
        let split = split_ids(spec.n, spec.held_out_fraction, spec.seed)?;
        if split.train.len() < 2 || split.held_out.is_empty() {
            return Err(Error::config(format!(
                "n = {} leaves too few instances for a train/held-out split",
                spec.n
            )));
        }
        Ok(Prepared { dataset, split })
    }

    /// Clean pairs among training instances, then the noise protocol.
    pub fn labels(&self, budget: usize, noise: &NoiseSpec, seed: u64) -> Result<Vec<PairLabel>> {
        let train: Vec<_> = self
            .split
            .train
            .iter()
            .map(|&id| self.dataset.instances[id].clone())
            .collect();
        let sample = sample_pairs(&train, budget, derive_seed(seed, "pairs"))?;
        if sample.exhausted {
            log::warn!(
                "only {} distinct pairs available, requested {budget}",
                sample.pairs.len()
            );
        }
        noise.apply(&train, &sample.pairs, derive_seed(seed, "label_noise"))
    }
}

/// Precision/recall of "mean s < 1 ⇒ flipped".
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlipDetection {
    /// `None` when no pair is flagged.
    pub precision: Option<f64>,
    /// `None` when no pair is flipped.
    pub recall: Option<f64>,
    pub fraction_below_1: f64,
    pub flagged: usize,
    pub flipped: usize,
}

pub fn flip_detection(mean_s: &[f64], pairs: &[PairLabel]) -> FlipDetection {
    let flagged: Vec<bool> = mean_s.iter().map(|&s| s < 1.0).collect();
    let n_flagged = flagged.iter().filter(|&&f| f).count();
    let n_flipped = pairs.iter().filter(|p| p.flipped).count();
    let hits = flagged
        .iter()
        .zip(pairs)
        .filter(|(&f, p)| f && p.flipped)
        .count();
    FlipDetection {
        precision: (n_flagged > 0).then(|| hits as f64 / n_flagged as f64),
        recall: (n_flipped > 0).then(|| hits as f64 / n_flipped as f64),
        fraction_below_1: if pairs.is_empty() {
            0.0
        } else {
            n_flagged as f64 / pairs.len() as f64
        },
        flagged: n_flagged,
        flipped: n_flipped,
    }
}

pub struct CellOutcome {
    pub report: MetricsReport,
    pub flips: Option<FlipDetection>,
    pub histogram: Option<TrustHistogram>,
    pub params: ModelParams,
    pub log: TrainLog,
    pub pairs: Vec<PairLabel>,
}

/// Trains and evaluates one cell on prepared data.
pub fn run_cell(prep: &Prepared, cell: &CellSpec) -> Result<CellOutcome> {
    let seed = cell.train.seed;
    let pairs = if cell.train.variant.uses_pairs() {
        prep.labels(cell.pair_budget, &cell.noise, seed)?
    } else {
        Vec::new()
    };
    let data = TrainData {
        dataset: &prep.dataset,
        train_ids: &prep.split.train,
        pairs: &pairs,
    };
    let (params, log) = train(&cell.train, data)?;

    let train_codes = Codes::from_model(&params, &prep.dataset.matrix(&prep.split.train))?;
    let test_codes = Codes::from_model(&params, &prep.dataset.matrix(&prep.split.held_out))?;
    let mut report = evaluate(
        &train_codes,
        &prep.dataset.factors(&prep.split.train),
        &test_codes,
        &prep.dataset.factors(&prep.split.held_out),
        cell.train.variant == VariantKind::BetaVae,
        cell.kappa,
    )?;

    let (flips, histogram) = if cell.train.variant == VariantKind::Rovae {
        let mean_s = mean_trust(&params, &prep.dataset, &pairs)?;
        let hist = trust_posterior_histogram(
            &params,
            &prep.dataset,
            &pairs,
            cell.trust_samples_per_pair,
            derive_seed(seed, "trust_samples"),
        )?;
        report.p_s_below_1 = Some(hist.fraction_below_1);
        (Some(flip_detection(&mean_s, &pairs)), Some(hist))
    } else {
        (None, None)
    };
    Ok(CellOutcome {
        report,
        flips,
        histogram,
        params,
        log,
        pairs,
    })
}
