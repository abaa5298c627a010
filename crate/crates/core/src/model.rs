//! Loss terms and the variant-dependent objective.
//!
//! The objective minimized for every variant is
//!
//! ```text
//! total = recon + alpha * ordinal + beta * kl_z + kl_w
//! ```
//!
//! where `ordinal` is the mean over the pair minibatch of
//! `-log ψ(s (u_i - u_j))` for `y = 1` (and `-log ψ(s (u_j - u_i))` for
//! `y = 0`), with trust score `s = w²`, `w ~ q(w | x_i, x_j)`.
//! VOVAE fixes `s = 1` and has no `w`; β-VAE drops the pair pathway.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{self, BoundParams, InstanceEncoding, ModelParams};
use crate::rng::standard_normal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantKind {
    #[serde(rename = "rovae")]
    Rovae,
    #[serde(rename = "vovae")]
    Vovae,
    #[serde(rename = "beta_vae")]
    BetaVae,
}

impl VariantKind {
    pub const ALL: [VariantKind; 3] =
        [VariantKind::Rovae, VariantKind::Vovae, VariantKind::BetaVae];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Rovae => "rovae",
            VariantKind::Vovae => "vovae",
            VariantKind::BetaVae => "beta_vae",
        }
    }

    /// Checkpoint tag.
    pub fn tag(self) -> u8 {
        match self {
            VariantKind::Rovae => 1,
            VariantKind::Vovae => 2,
            VariantKind::BetaVae => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        VariantKind::ALL.into_iter().find(|v| v.tag() == tag)
    }

    pub fn uses_pairs(self) -> bool {
        self != VariantKind::BetaVae
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "rovae" => Ok(VariantKind::Rovae),
            "vovae" => Ok(VariantKind::Vovae),
            "beta_vae" | "betavae" => Ok(VariantKind::BetaVae),
            other => Err(Error::config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantSpec {
    pub kind: VariantKind,
    pub alpha: f64,
    pub beta: f64,
    pub mu_w: f64,
    pub sigma2_w: f64,
    pub latent_dim: usize,
    /// Use `s = (w_ij² + w_ji²) / 2` instead of `s = w_ij²`.
    pub symmetric_trust: bool,
}

impl VariantSpec {
    pub fn new(kind: VariantKind, latent_dim: usize) -> Self {
        VariantSpec {
            kind,
            alpha: 1.0,
            beta: 1.0,
            mu_w: 10.0,
            sigma2_w: 1.0,
            latent_dim,
            symmetric_trust: false,
        }
    }

    pub fn rovae(latent_dim: usize) -> Self {
        Self::new(VariantKind::Rovae, latent_dim)
    }

    pub fn vovae(latent_dim: usize) -> Self {
        Self::new(VariantKind::Vovae, latent_dim)
    }

    pub fn beta_vae(latent_dim: usize) -> Self {
        Self::new(VariantKind::BetaVae, latent_dim)
    }

    /// Weight actually applied to the ordinal term (β-VAE forces 0).
    pub fn effective_alpha(&self) -> f64 {
        match self.kind {
            VariantKind::BetaVae => 0.0,
            _ => self.alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.sigma2_w > 0.0 && self.sigma2_w.is_finite()) {
            return Err(Error::config(format!(
                "sigma2_w must be > 0, got {}",
                self.sigma2_w
            )));
        }
        if !self.mu_w.is_finite() {
            return Err(Error::config("mu_w must be finite"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent dimension D must be positive"));
        }
        Ok(())
    }
}

/// Per-instance posterior parameters and reparameterized draws.
#[derive(Clone, Copy, Debug)]
pub struct LatentCode {
    pub u_mean: Var,
    pub u_log_var: Var,
    pub v_mean: Var,
    pub v_log_var: Var,
    pub u_sample: Var,
    pub v_sample: Var,
}

/// Trust posterior of a pair minibatch; `s = w_sample²`.
#[derive(Clone, Copy, Debug)]
pub struct TrustScore {
    pub w_mean: Var,
    pub w_log_var: Var,
    pub w_sample: Var,
    pub s: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveTerms {
    pub recon: f64,
    pub ordinal: f64,
    pub kl_z: f64,
    pub kl_w: f64,
    pub total: f64,
}

impl ObjectiveTerms {
    /// `recon + alpha*ordinal + beta*kl_z + kl_w`, evaluated in that order.
    pub fn compose(recon: f64, ordinal: f64, kl_z: f64, kl_w: f64, alpha: f64, beta: f64) -> Self {
        ObjectiveTerms {
            recon,
            ordinal,
            kl_z,
            kl_w,
            total: recon + alpha * ordinal + beta * kl_z + kl_w,
        }
    }

    pub fn all_finite(&self) -> bool {
        [self.recon, self.ordinal, self.kl_z, self.kl_w, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean over rows of the per-row summed binary cross-entropy, from logits.
///
/// Uses `softplus(l) - l*x`, which equals `max(l,0) - l*x + log(1+e^{-|l|})`.
pub fn recon_loss(tape: &mut Tape, logits: Var, x: Var) -> Result<Var> {
    if tape.shape(logits) != tape.shape(x) {
        return Err(Error::shape(
            "recon_loss",
            tape.shape(logits),
            tape.shape(x),
        ));
    }
    if let Some(bad) = tape
        .value(x)
        .data()
        .iter()
        .find(|v| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::InputValidation(format!(
            "reconstruction targets must lie in [0, 1], found {bad}"
        )));
    }
    let rows = tape.value(x).rows().max(1);
    let sp = tape.softplus(logits);
    let lx = tape.mul(logits, x)?;
    let per = tape.sub(sp, lx)?;
    let total = tape.sum(per);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// Mean negative log-likelihood of the observed comparisons.
///
/// `u_i`, `u_j` and `s` are `[P, 1]` (or `s` a scalar constant); `y[k]` is the
/// label of pair `k`.
pub fn ordinal_nll(tape: &mut Tape, u_i: Var, u_j: Var, s: Var, y: &[bool]) -> Result<Var> {
    let diff = tape.sub(u_i, u_j)?;
    let n = tape.value(diff).numel();
    if y.len() != n {
        return Err(Error::shape("ordinal_nll", &[n], &[y.len()]));
    }
    let signs = Tensor::new(
        tape.shape(diff).to_vec(),
        y.iter().map(|&yk| if yk { 1.0 } else { -1.0 }).collect(),
    )?;
    let signs = tape.constant(signs);
    let scaled = tape.mul(s, diff)?;
    let oriented = tape.mul(scaled, signs)?;
    let ll = tape.log_sigmoid(oriented);
    let m = tape.mean(ll);
    Ok(tape.neg(m))
}

/// `mean_rows ½ Σ_dim (μ² + σ² − 1 − log σ²)`: KL to `N(0, I)`.
pub fn kl_std_normal(tape: &mut Tape, mean: Var, log_var: Var) -> Result<Var> {
    if tape.shape(mean) != tape.shape(log_var) {
        return Err(Error::shape(
            "kl_std_normal",
            tape.shape(mean),
            tape.shape(log_var),
        ));
    }
    let rows = tape.value(mean).rows().max(1);
    let m2 = tape.square(mean);
    let var = tape.exp(log_var);
    let a = tape.add(m2, var)?;
    let b = tape.sub(a, log_var)?;
    let c = tape.add_scalar(b, -1.0);
    let total = tape.sum(c);
    Ok(tape.scale(total, 0.5 / rows as f64))
}

/// Mean over pairs of `KL(N(μ_q, σ_q²) || N(mu_w, sigma2_w))`.
pub fn kl_gaussian(
    tape: &mut Tape,
    mean: Var,
    log_var: Var,
    mu_w: f64,
    sigma2_w: f64,
) -> Result<Var> {
    if !(sigma2_w > 0.0) {
        return Err(Error::config(format!(
            "prior variance must be > 0, got {sigma2_w}"
        )));
    }
    if tape.shape(mean) != tape.shape(log_var) {
        return Err(Error::shape(
            "kl_gaussian",
            tape.shape(mean),
            tape.shape(log_var),
        ));
    }
    // ½ (ln σ_w² − ln σ_q²) + (σ_q² + (μ_q − μ_w)²) / (2 σ_w²) − ½
    let centered = tape.add_scalar(mean, -mu_w);
    let sq = tape.square(centered);
    let var = tape.exp(log_var);
    let num = tape.add(var, sq)?;
    let ratio = tape.scale(num, 0.5 / sigma2_w);
    let half_lv = tape.scale(log_var, -0.5);
    let a = tape.add(ratio, half_lv)?;
    let per = tape.add_scalar(a, 0.5 * sigma2_w.ln() - 0.5);
    Ok(tape.mean(per))
}

/// Direction in which the ordinal loss pushes the trust score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrustPush {
    Up,
    Down,
    Neutral,
}

/// Sign of `-∂(ordinal_nll)/∂s` at `(u_i, u_j, y)`: labels consistent with the
/// current embedding raise their trust, inconsistent ones lower it.
pub fn trust_gradient_sign(u_i: f64, u_j: f64, y: bool) -> TrustPush {
    let oriented = if y { u_i - u_j } else { u_j - u_i };
    if oriented > 0.0 {
        TrustPush::Up
    } else if oriented < 0.0 {
        TrustPush::Down
    } else {
        TrustPush::Neutral
    }
}

/// One pair of a minibatch: rows of [`Minibatch::endpoints`] and the label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPair {
    pub i: usize,
    pub j: usize,
    pub y: bool,
}

/// Instance batch for the reconstruction/KL terms plus an independent pair batch.
#[derive(Clone, Debug)]
pub struct Minibatch {
    /// `[B, x_dim]`
    pub x: Tensor,
    /// `[E, x_dim]`; rows referenced by `pairs`.
    pub endpoints: Tensor,
    pub pairs: Vec<BatchPair>,
}

/// Graph handles produced by [`objective_on_tape`].
#[derive(Clone, Debug)]
pub struct ObjectiveGraph {
    pub total: Var,
    pub terms: ObjectiveTerms,
    pub latent: LatentCode,
    pub trust: Option<TrustScore>,
}

/// Builds the objective on `tape`. Noise is drawn from `rng` in a fixed order:
/// instance `u`, instance `v`, endpoint `u`, then `w`.
pub fn objective_on_tape(
    tape: &mut Tape,
    params: &BoundParams,
    batch: &Minibatch,
    variant: &VariantSpec,
    rng: &mut ChaCha8Rng,
) -> Result<ObjectiveGraph> {
    variant.validate()?;
    if variant.kind == VariantKind::Rovae && params.pair.is_none() {
        return Err(Error::UnsupportedVariant {
            found: "parameters without pair encoder".into(),
            reason: "ROVAE objective needs q(w|x_i,x_j)".into(),
        });
    }
    let alpha = variant.effective_alpha();
    let beta = variant.beta;

    // Instance pathway: reconstruction and KL(q(z|x) || N(0, I)).
    let x = tape.constant(batch.x.clone());
    let enc = nets::encode_instance(tape, params, x)?;
    let u_sample = nets::sample_like(tape, enc.u_mean, enc.u_log_var, rng)?;
    let v_sample = nets::sample_like(tape, enc.v_mean, enc.v_log_var, rng)?;
    let logits = nets::decode(tape, params, u_sample, v_sample)?;
    let recon = recon_loss(tape, logits, x)?;
    let kl_u = kl_std_normal(tape, enc.u_mean, enc.u_log_var)?;
    let kl_v = kl_std_normal(tape, enc.v_mean, enc.v_log_var)?;
    let kl_z = tape.add(kl_u, kl_v)?;
    let latent = LatentCode {
        u_mean: enc.u_mean,
        u_log_var: enc.u_log_var,
        v_mean: enc.v_mean,
        v_log_var: enc.v_log_var,
        u_sample,
        v_sample,
    };

    let mut ordinal = None;
    let mut kl_w = None;
    let mut trust = None;
    if variant.kind.uses_pairs() && !batch.pairs.is_empty() {
        let rows = batch.endpoints.rows();
        if let Some(p) = batch
            .pairs
            .iter()
            .find(|p| p.i >= rows || p.j >= rows || p.i == p.j)
        {
            return Err(Error::Batching(format!(
                "pair ({}, {}) does not reference two distinct endpoints among {rows}",
                p.i, p.j
            )));
        }
        let ends = tape.constant(batch.endpoints.clone());
        let end_enc = nets::encode_instance(tape, params, ends)?;
        let end_u = nets::sample_like(tape, end_enc.u_mean, end_enc.u_log_var, rng)?;
        let is: Vec<usize> = batch.pairs.iter().map(|p| p.i).collect();
        let js: Vec<usize> = batch.pairs.iter().map(|p| p.j).collect();
        let ys: Vec<bool> = batch.pairs.iter().map(|p| p.y).collect();
        let u_i = tape.gather_rows(end_u, &is)?;
        let u_j = tape.gather_rows(end_u, &js)?;

        let s = match variant.kind {
            VariantKind::Rovae => {
                let (score, klw) = trust_scores(tape, params, &end_enc, batch, variant, rng)?;
                kl_w = Some(klw);
                trust = Some(score);
                score.s
            }
            _ => tape.constant(Tensor::scalar(1.0)),
        };
        ordinal = Some(ordinal_nll(tape, u_i, u_j, s, &ys)?);
    }

    // total = recon + α·ordinal + β·kl_z + kl_w, accumulated left to right.
    let mut total = recon;
    if let Some(o) = ordinal {
        let weighted = tape.scale(o, alpha);
        total = tape.add(total, weighted)?;
    } else {
        let zero = tape.constant(Tensor::scalar(0.0));
        total = tape.add(total, zero)?;
    }
    let weighted_kl = tape.scale(kl_z, beta);
    total = tape.add(total, weighted_kl)?;
    if let Some(k) = kl_w {
        total = tape.add(total, k)?;
    } else {
        let zero = tape.constant(Tensor::scalar(0.0));
        total = tape.add(total, zero)?;
    }

    let scalar = |v: Option<Var>| v.map(|v| tape.value(v).data()[0]).unwrap_or(0.0);
    let terms = ObjectiveTerms {
        recon: tape.value(recon).data()[0],
        ordinal: scalar(ordinal),
        kl_z: tape.value(kl_z).data()[0],
        kl_w: scalar(kl_w),
        total: tape.value(total).data()[0],
    };
    Ok(ObjectiveGraph {
        total,
        terms,
        latent,
        trust,
    })
}

/// Trust scores for the pair minibatch. The pair encoder sees the endpoints in
/// claimed order (the instance asserted to be larger comes first), so the same
/// ordered pair with opposite labels yields different posteriors.
fn trust_scores(
    tape: &mut Tape,
    params: &BoundParams,
    end_enc: &InstanceEncoding,
    batch: &Minibatch,
    variant: &VariantSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(TrustScore, Var)> {
    let (first, second): (Vec<usize>, Vec<usize>) = batch
        .pairs
        .iter()
        .map(|p| if p.y { (p.i, p.j) } else { (p.j, p.i) })
        .unzip();
    let h_first = tape.gather_rows(end_enc.features, &first)?;
    let h_second = tape.gather_rows(end_enc.features, &second)?;
    let (w_mean, w_log_var) = nets::encode_pair_features(tape, params, h_first, h_second)?;
    let w_sample = nets::sample_like(tape, w_mean, w_log_var, rng)?;
    let w_sq = tape.square(w_sample);
    let mut kl = kl_gaussian(tape, w_mean, w_log_var, variant.mu_w, variant.sigma2_w)?;
    let s = if variant.symmetric_trust {
        let (rev_mean, rev_log_var) = nets::encode_pair_features(tape, params, h_second, h_first)?;
        let rev_sample = nets::sample_like(tape, rev_mean, rev_log_var, rng)?;
        let rev_sq = tape.square(rev_sample);
        let both = tape.add(w_sq, rev_sq)?;
        let kl_rev = kl_gaussian(tape, rev_mean, rev_log_var, variant.mu_w, variant.sigma2_w)?;
        kl = tape.add(kl, kl_rev)?;
        tape.scale(both, 0.5)
    } else {
        w_sq
    };
    Ok((
        TrustScore {
            w_mean,
            w_log_var,
            w_sample,
            s,
        },
        kl,
    ))
}

/// Evaluates the objective on a fresh tape without computing gradients.
pub fn objective(
    batch: &Minibatch,
    params: &ModelParams,
    variant: &VariantSpec,
    rng: &mut ChaCha8Rng,
) -> Result<ObjectiveTerms> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    Ok(objective_on_tape(&mut tape, &bound, batch, variant, rng)?.terms)
}

/// Standard-normal noise helper shared with evaluation code.
pub fn noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    standard_normal(rng, vec![rows, cols])
}
