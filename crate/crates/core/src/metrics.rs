//! Evaluation: histogram mutual information, the supervised MIG variant,
//! k-NN probes with r² and Cohen's κ, and trust-posterior summaries.

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::data::{Dataset, PairLabel};
use crate::error::{Error, Result};
use crate::nets::ModelParams;
use crate::rng::rng_for;

pub const MI_BINS: usize = 20;
pub const KNN_K: usize = 5;
pub const KAPPA_CLASSES: usize = 5;

/// Equal-count bin index for every sample. Tied values share the bin of their
/// lowest rank, so the assignment depends only on the order of the values.
pub fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0; n];
    let mut rank = 0;
    while rank < n {
        let mut end = rank + 1;
        while end < n && values[order[end]] == values[order[rank]] {
            end += 1;
        }
        let bin = rank * bins / n;
        for &idx in &order[rank..end] {
            out[idx] = bin;
        }
        rank = end;
    }
    out
}

fn is_constant(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] == w[1])
}

fn check_samples(a: &[f64], b: &[f64], bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::Usage(format!("need at least 2 bins, got {bins}")));
    }
    if a.len() != b.len() {
        return Err(Error::Usage(format!(
            "sample counts differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 10 * bins {
        return Err(Error::Usage(format!(
            "{} samples is too few for {bins} bins (need {})",
            a.len(),
            10 * bins
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MutualInformation {
    /// Estimate in nats, clamped at 0.
    pub nats: f64,
    /// Set when either input is constant; `nats` is then 0.
    pub degenerate: bool,
}

/// Plug-in mutual information between the quantile-binned variables.
pub fn mutual_information(a: &[f64], b: &[f64], bins: usize) -> Result<MutualInformation> {
    check_samples(a, b, bins)?;
    if is_constant(a) || is_constant(b) {
        return Ok(MutualInformation {
            nats: 0.0,
            degenerate: true,
        });
    }
    let n = a.len() as f64;
    let (ba, bb) = (quantile_bins(a, bins), quantile_bins(b, bins));
    let mut joint = vec![0usize; bins * bins];
    let (mut ma, mut mb) = (vec![0usize; bins], vec![0usize; bins]);
    for (&x, &y) in ba.iter().zip(&bb) {
        joint[x * bins + y] += 1;
        ma[x] += 1;
        mb[y] += 1;
    }
    let mut terms = Vec::new();
    for x in 0..bins {
        for y in 0..bins {
            let c = joint[x * bins + y];
            if c == 0 {
                continue;
            }
            let p = c as f64 / n;
            let (pa, pb) = (ma[x] as f64 / n, mb[y] as f64 / n);
            terms.push(p * (p / (pa * pb)).ln());
        }
    }
    // Summation in sorted order makes the estimate independent of argument order.
    terms.sort_by(f64::total_cmp);
    Ok(MutualInformation {
        nats: terms.iter().sum::<f64>().max(0.0),
        degenerate: false,
    })
}

/// Entropy (nats) of the quantile-binned variable.
pub fn binned_entropy(values: &[f64], bins: usize) -> f64 {
    let n = values.len() as f64;
    let mut counts = vec![0usize; bins];
    for b in quantile_bins(values, bins) {
        counts[b] += 1;
    }
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MigScores {
    pub mig: f64,
    pub i_u_t: f64,
    pub max_i_v_t: f64,
    pub h_t: f64,
}

/// `(I(u;t) − max_d I(v_d;t)) / H(t)`. Negative when some nuisance
/// dimension carries more information about `t` than `u`.
pub fn mig(u: &[f64], v: &[Vec<f64>], t: &[f64], bins: usize) -> Result<MigScores> {
    if v.is_empty() {
        return Err(Error::Usage(
            "MIG needs at least one nuisance dimension".into(),
        ));
    }
    check_samples(u, t, bins)?;
    let h_t = binned_entropy(t, bins);
    if !(h_t > 0.0) {
        return Err(Error::Degenerate("factor has zero entropy".into()));
    }
    let i_u_t = mutual_information(u, t, bins)?.nats;
    let mut max_i_v_t = 0.0f64;
    for col in v {
        max_i_v_t = max_i_v_t.max(mutual_information(col, t, bins)?.nats);
    }
    Ok(MigScores {
        mig: (i_u_t - max_i_v_t) / h_t,
        i_u_t,
        max_i_v_t,
        h_t,
    })
}

/// Dimension with the highest mutual information with `t`; lowest index wins ties.
pub fn select_u_dimension(z: &[Vec<f64>], t: &[f64], bins: usize) -> Result<usize> {
    if z.is_empty() {
        return Err(Error::Usage("no latent dimensions to choose from".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (d, col) in z.iter().enumerate() {
        let mi = mutual_information(col, t, bins)?.nats;
        if mi > best.1 {
            best = (d, mi);
        }
    }
    Ok(best.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KnnMode {
    Regress,
    Classify,
}

/// k-NN on a scalar feature. Neighbors are ordered by `(|u_a − u_b|, train
/// index)`; regression averages their targets in that order, classification
/// takes the majority label with ties going to the smallest label.
pub fn knn_predict(
    u_train: &[f64],
    t_train: &[f64],
    u_test: &[f64],
    k: usize,
    mode: KnnMode,
) -> Result<Vec<f64>> {
    if u_train.is_empty() {
        return Err(Error::Usage("k-NN needs a non-empty training set".into()));
    }
    if u_train.len() != t_train.len() {
        return Err(Error::Usage(format!(
            "{} training features but {} targets",
            u_train.len(),
            t_train.len()
        )));
    }
    if k == 0 || k > u_train.len() {
        return Err(Error::Usage(format!(
            "k = {k} must be in 1..={}",
            u_train.len()
        )));
    }
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(u_train.len());
    Ok(u_test
        .iter()
        .map(|&q| {
            keyed.clear();
            keyed.extend(u_train.iter().enumerate().map(|(i, &u)| ((u - q).abs(), i)));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < keyed.len() {
                keyed.select_nth_unstable_by(k - 1, cmp);
            }
            let nearest = &mut keyed[..k];
            nearest.sort_by(cmp);
            match mode {
                KnnMode::Regress => {
                    nearest.iter().map(|&(_, i)| t_train[i]).sum::<f64>() / k as f64
                }
                KnnMode::Classify => {
                    let mut labels: Vec<f64> = nearest.iter().map(|&(_, i)| t_train[i]).collect();
                    labels.sort_by(f64::total_cmp);
                    let mut best = (labels[0], 0);
                    let mut run = (labels[0], 0);
                    for &l in &labels {
                        if l == run.0 {
                            run.1 += 1;
                        } else {
                            run = (l, 1);
                        }
                        if run.1 > best.1 {
                            best = run;
                        }
                    }
                    best.0
                }
            }
        })
        .collect())
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || truth.len() < 2 {
        return Err(Error::Usage(format!(
            "r² needs aligned samples (>= 2); got {} predictions, {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate(
            "r² is undefined for a constant target".into(),
        ));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Cohen's κ between two labelings.
pub fn cohens_kappa(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Usage(format!(
            "κ needs aligned non-empty labelings; got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let classes = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    let n = pred.len() as f64;
    let (mut rows, mut cols) = (vec![0usize; classes], vec![0usize; classes]);
    let mut agree = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        rows[p] += 1;
        cols[t] += 1;
        agree += (p == t) as usize;
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = rows
        .iter()
        .zip(&cols)
        .map(|(&r, &c)| (r as f64 / n) * (c as f64 / n))
        .sum();
    if p_e == 1.0 {
        return if p_o == 1.0 {
            Ok(1.0)
        } else {
            Err(Error::Degenerate(
                "κ is undefined when chance agreement is 1".into(),
            ))
        };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Equal-count class labels for a continuous factor.
pub fn quantize_classes(t: &[f64], classes: usize) -> Vec<usize> {
    quantile_bins(t, classes)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mig: f64,
    pub r2: f64,
    pub kappa: Option<f64>,
    pub i_u_t: f64,
    pub max_i_v_t: f64,
    pub h_t: f64,
    pub p_s_below_1: Option<f64>,
    /// Latent dimension used as `u` (always 0 for supervised variants).
    pub u_dim: usize,
}

/// Latent codes split into the scalar `u` and the nuisance columns.
pub struct Codes {
    pub u: Vec<f64>,
    pub v: Vec<Vec<f64>>,
}

impl Codes {
    pub fn from_model(model: &ModelParams, x: &Tensor) -> Result<Self> {
        let (u, v) = model.encode_means(x)?;
        let d = v.cols();
        let v = (0..d)
            .map(|c| (0..v.rows()).map(|r| v.data()[r * d + c]).collect())
            .collect();
        Ok(Codes { u, v })
    }

    /// All dimensions, `u` first.
    pub fn columns(&self) -> Vec<Vec<f64>> {
        std::iter::once(self.u.clone())
            .chain(self.v.iter().cloned())
            .collect()
    }

    /// Re-splits the columns so that `dim` plays the role of `u`.
    pub fn with_u(&self, dim: usize) -> Codes {
        let mut cols = self.columns();
        let u = cols.remove(dim);
        Codes { u, v: cols }
    }
}

/// Held-out evaluation: MIG and the 5-NN probe, where the probe is fit on the
/// training codes. When `pick_u` is set, `u` is the latent dimension with the
/// most information about `t` on the training set.
pub fn evaluate(
    train: &Codes,
    t_train: &[f64],
    test: &Codes,
    t_test: &[f64],
    pick_u: bool,
    with_kappa: bool,
) -> Result<MetricsReport> {
    let u_dim = if pick_u {
        select_u_dimension(&train.columns(), t_train, MI_BINS)?
    } else {
        0
    };
    let (train, test) = (train.with_u(u_dim), test.with_u(u_dim));
    let scores = mig(&test.u, &test.v, t_test, MI_BINS)?;
    let pred = knn_predict(&train.u, t_train, &test.u, KNN_K, KnnMode::Regress)?;
    let r2 = r_squared(&pred, t_test)?;
    let kappa = if with_kappa {
        // Class boundaries come from the training factor distribution.
        let classes_train = quantize_classes(t_train, KAPPA_CLASSES);
        let labels_train: Vec<f64> = classes_train.iter().map(|&c| c as f64).collect();
        let mut sorted = t_train.to_vec();
        sorted.sort_by(f64::total_cmp);
        let class_of = |t: f64| {
            let rank = sorted.partition_point(|&s| s < t);
            (rank * KAPPA_CLASSES / sorted.len()).min(KAPPA_CLASSES - 1)
        };
        let truth: Vec<usize> = t_test.iter().map(|&t| class_of(t)).collect();
        let pred = knn_predict(&train.u, &labels_train, &test.u, KNN_K, KnnMode::Classify)?;
        let pred: Vec<usize> = pred.iter().map(|&p| p as usize).collect();
        Some(cohens_kappa(&pred, &truth)?)
    } else {
        None
    };
    Ok(MetricsReport {
        mig: scores.mig,
        r2,
        kappa,
        i_u_t: scores.i_u_t,
        max_i_v_t: scores.max_i_v_t,
        h_t: scores.h_t,
        p_s_below_1: None,
        u_dim,
    })
}

/// Lower and upper edges of the trust histogram and bins per decade.
pub const TRUST_HIST_RANGE: (f64, f64) = (1e-4, 1e4);
pub const TRUST_BINS_PER_DECADE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrustHistogram {
    /// `counts.len() + 1` log-spaced edges.
    pub edges: Vec<f64>,
    /// Samples outside the edge range are counted in the end bins.
    pub counts: Vec<u64>,
    pub total: u64,
    pub fraction_below_1: f64,
}

impl TrustHistogram {
    pub fn from_samples(samples: &[f64]) -> Self {
        let (lo, hi) = TRUST_HIST_RANGE;
        let decades = (hi / lo).log10().round() as usize;
        let bins = decades * TRUST_BINS_PER_DECADE;
        let edges: Vec<f64> = (0..=bins)
            .map(|k| lo * 10f64.powf(k as f64 / TRUST_BINS_PER_DECADE as f64))
            .collect();
        let mut counts = vec![0u64; bins];
        let mut below = 0u64;
        for &s in samples {
            if s < 1.0 {
                below += 1;
            }
            let pos = if s > 0.0 {
                ((s / lo).log10() * TRUST_BINS_PER_DECADE as f64).floor()
            } else {
                f64::NEG_INFINITY
            };
            let k = pos.clamp(0.0, (bins - 1) as f64) as usize;
            counts[k] += 1;
        }
        let total = samples.len() as u64;
        TrustHistogram {
            edges,
            counts,
            total,
            fraction_below_1: if total == 0 {
                0.0
            } else {
                below as f64 / total as f64
            },
        }
    }

    /// `(bin_left, bin_right, count)` rows.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, u64)> + '_ {
        self.edges
            .windows(2)
            .zip(&self.counts)
            .map(|(e, &c)| (e[0], e[1], c))
    }
}

/// Trust posterior `(mean, log_var)` for every pair, encoded in claimed order
/// (the instance asserted larger first).
pub fn trust_posteriors(
    model: &ModelParams,
    dataset: &Dataset,
    pairs: &[PairLabel],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Usage(
            "trust posterior needs at least one pair".into(),
        ));
    }
    let check = |id: usize| {
        if id < dataset.len() {
            Ok(id)
        } else {
            Err(Error::Batching(format!(
                "pair references unknown instance {id}"
            )))
        }
    };
    let mut first = Vec::with_capacity(pairs.len());
    let mut second = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (a, b) = if p.y { (p.i, p.j) } else { (p.j, p.i) };
        first.push(check(a)?);
        second.push(check(b)?);
    }
    model.trust_posterior(&dataset.matrix(&first), &dataset.matrix(&second))
}

/// Posterior mean of `s = w²` per pair: `μ² + σ²`.
pub fn mean_trust(model: &ModelParams, dataset: &Dataset, pairs: &[PairLabel]) -> Result<Vec<f64>> {
    let (mean, log_var) = trust_posteriors(model, dataset, pairs)?;
    Ok(mean
        .iter()
        .zip(&log_var)
        .map(|(m, lv)| m * m + lv.exp())
        .collect())
}

/// Aggregated posterior of `s`: `samples_per_pair` draws of `w` per pair.
pub fn trust_posterior_histogram(
    model: &ModelParams,
    dataset: &Dataset,
    pairs: &[PairLabel],
    samples_per_pair: usize,
    seed: u64,
) -> Result<TrustHistogram> {
    let (mean, log_var) = trust_posteriors(model, dataset, pairs)?;
    let mut rng = rng_for(seed, "trust_histogram");
    let mut samples = Vec::with_capacity(pairs.len() * samples_per_pair);
    for (m, lv) in mean.iter().zip(&log_var) {
        let sd = (0.5 * lv).exp();
        for _ in 0..samples_per_pair {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let w = m + sd * eps;
            samples.push(w * w);
        }
    }
    Ok(TrustHistogram::from_samples(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_bins_equal_counts() {
        let v: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64).collect();
        let b = quantile_bins(&v, 20);
        for k in 0..20 {
            assert_eq!(b.iter().filter(|&&x| x == k).count(), 5);
        }
        let ties = quantile_bins(&[1.0, 1.0, 1.0, 2.0], 4);
        assert_eq!(ties, vec![0, 0, 0, 3]);
    }

    #[test]
    fn mi_guards() {
        let a: Vec<f64> = (0..200).map(|i| i as f64).collect();
        assert!(mutual_information(&a[..199], &a[..199], 20).is_err());
        assert!(mutual_information(&a, &a[..100], 10).is_err());
        let c = vec![3.0; 200];
        let mi = mutual_information(&a, &c, 20).unwrap();
        assert!(mi.degenerate);
        assert_eq!(mi.nats, 0.0);
    }

    #[test]
    fn knn_zero_distance_neighbor() {
        let u = [0.0, 1.0, 2.0, 3.0];
        let t = [10.0, 11.0, 12.0, 13.0];
        let p = knn_predict(&u, &t, &[2.0], 1, KnnMode::Regress).unwrap();
        assert_eq!(p, vec![12.0]);
        assert!(knn_predict(&[], &[], &[1.0], 1, KnnMode::Regress).is_err());
        assert!(knn_predict(&u, &t, &[1.0], 5, KnnMode::Regress).is_err());
    }

    #[test]
    fn knn_ties() {
        // Equidistant neighbors at indices 0 and 2: the lower index wins.
        let p = knn_predict(
            &[-1.0, 5.0, 1.0],
            &[7.0, 0.0, 9.0],
            &[0.0],
            1,
            KnnMode::Regress,
        )
        .unwrap();
        assert_eq!(p, vec![7.0]);
        // Vote tie between labels 2 and 1: the smaller label wins.
        let p = knn_predict(
            &[0.0, 0.1, 0.2, 0.3],
            &[2.0, 1.0, 2.0, 1.0],
            &[0.0],
            4,
            KnnMode::Classify,
        )
        .unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn r2_examples() {
        let t = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(r_squared(&t, &t).unwrap(), 1.0);
        assert_eq!(r_squared(&[2.5; 4], &t).unwrap(), 0.0);
        assert!(r_squared(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohens_kappa(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(cohens_kappa(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(cohens_kappa(&[1, 1], &[1, 1]).unwrap(), 1.0);
        assert!(cohens_kappa(&[], &[]).is_err());
    }

    #[test]
    fn select_u_ties_pick_first() {
        let t: Vec<f64> = (0..400).map(|i| (i as f64 * 0.731).sin()).collect();
        let z = vec![t.clone(), t.clone(), t.clone()];
        assert_eq!(select_u_dimension(&z, &t, 20).unwrap(), 0);
    }

    #[test]
    fn histogram_conserves_counts() {
        let s = [0.0, 1e-9, 0.5, 1.0, 3.0, 1e9];
        let h = TrustHistogram::from_samples(&s);
        assert_eq!(h.counts.iter().sum::<u64>(), 6);
        assert_eq!(h.total, 6);
        assert_eq!(h.fraction_below_1, 0.5);
        assert_eq!(h.edges.len(), h.counts.len() + 1);
        assert!((h.edges[0] - 1e-4).abs() < 1e-18);
        assert!((h.edges.last().unwrap() - 1e4).abs() < 1e-8);
    }
}
