//! Minibatch optimization of the objective, loss logging and checkpoints.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{Dataset, PairLabel};
use crate::error::{Error, Result};
use crate::model::{
    objective_on_tape, BatchPair, Minibatch, ObjectiveTerms, VariantKind, VariantSpec,
};
use crate::nets::{Activation, ModelParams, NetSpec};
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: VariantKind,
    pub alpha: f64,
    pub beta: f64,
    pub mu_w: f64,
    pub sigma2_w: f64,
    pub latent_dim: usize,
    pub symmetric_trust: bool,
    pub hidden: usize,
    pub pair_hidden: usize,
    pub activation: Activation,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub steps: usize,
    pub batch_x: usize,
    pub batch_pairs: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetSpec::default();
        TrainConfig {
            variant: VariantKind::Rovae,
            alpha: 1.0,
            beta: 1.0,
            mu_w: 10.0,
            sigma2_w: 1.0,
            latent_dim: net.latent_dim,
            symmetric_trust: false,
            hidden: net.hidden,
            pair_hidden: net.pair_hidden,
            activation: net.activation,
            lr: 1e-3,
            optimizer: OptimizerKind::default(),
            steps: 20_000,
            batch_x: 64,
            batch_pairs: 64,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn variant_spec(&self) -> VariantSpec {
        VariantSpec {
            kind: self.variant,
            alpha: self.alpha,
            beta: self.beta,
            mu_w: self.mu_w,
            sigma2_w: self.sigma2_w,
            latent_dim: self.latent_dim,
            symmetric_trust: self.symmetric_trust,
        }
    }

    pub fn net_spec(&self, x_dim: usize) -> NetSpec {
        NetSpec {
            x_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            pair_hidden: self.pair_hidden,
            activation: self.activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.variant_spec().validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_x == 0 {
            return Err(Error::config("batch_x must be at least 1"));
        }
        if self.variant.uses_pairs() && self.batch_pairs == 0 {
            return Err(Error::config("batch_pairs must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be at least 1"));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::config(format!(
                    "adam needs beta1, beta2 in [0, 1) and eps > 0; got {beta1}, {beta2}, {eps}"
                )));
            }
        }
        Ok(())
    }
}

/// First-order optimizer with per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates `params` in place. Rejects non-finite gradients before touching
    /// anything.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Usage(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    step: self.t as usize,
                    detail: format!("gradient of parameter {k} is not finite"),
                });
            }
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
                    self.v = self.m.clone();
                }
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (idx, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[idx] = beta1 * m[idx] + (1.0 - beta1) * gv;
                        v[idx] = beta2 * v[idx] + (1.0 - beta2) * gv * gv;
                        let m_hat = m[idx] / c1;
                        let v_hat = v[idx] / c2;
                        *pv -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Averages of the objective terms over one logging interval.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    /// Number of completed updates; 0 is the initial evaluation.
    pub step: usize,
    pub recon: f64,
    pub ordinal: f64,
    pub kl_z: f64,
    pub kl_w: f64,
    pub total: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "step,recon,ordinal,kl_z,kl_w,total,seconds")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{:.3}",
                r.step, r.recon, r.ordinal, r.kl_z, r.kl_w, r.total, r.seconds
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Interval {
    sum: [f64; 5],
    count: usize,
}

impl Interval {
    fn new() -> Self {
        Interval {
            sum: [0.0; 5],
            count: 0,
        }
    }

    fn add(&mut self, t: &ObjectiveTerms) {
        for (s, v) in self
            .sum
            .iter_mut()
            .zip([t.recon, t.ordinal, t.kl_z, t.kl_w, t.total])
        {
            *s += v;
        }
        self.count += 1;
    }

    fn record(&self, step: usize, seconds: f64) -> LogRecord {
        let n = self.count.max(1) as f64;
        LogRecord {
            step,
            recon: self.sum[0] / n,
            ordinal: self.sum[1] / n,
            kl_z: self.sum[2] / n,
            kl_w: self.sum[3] / n,
            total: self.sum[4] / n,
            seconds,
        }
    }
}

/// Training inputs: the dataset, the ids instances are drawn from, and the
/// labelled pairs (by dataset id).
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub train_ids: &'a [usize],
    pub pairs: &'a [PairLabel],
}

impl TrainData<'_> {
    fn validate(&self, variant: VariantKind) -> Result<()> {
        if self.train_ids.is_empty() {
            return Err(Error::config("no training instances"));
        }
        let n = self.dataset.len();
        if let Some(id) = self.train_ids.iter().find(|&&id| id >= n) {
            return Err(Error::Batching(format!(
                "training id {id} out of range for {n} instances"
            )));
        }
        if variant.uses_pairs() {
            if self.pairs.is_empty() {
                return Err(Error::config(format!(
                    "{variant} needs at least one labelled pair"
                )));
            }
            if let Some(p) = self
                .pairs
                .iter()
                .find(|p| p.i >= n || p.j >= n || p.i == p.j)
            {
                return Err(Error::Batching(format!(
                    "pair ({}, {}) is not a pair of distinct instances among {n}",
                    p.i, p.j
                )));
            }
        }
        Ok(())
    }

    /// Instance batch first, then (for pair-supervised variants) the pair
    /// batch; endpoints are laid out as rows `2k, 2k + 1` for pair `k`.
    fn sample(&self, config: &TrainConfig, rng: &mut impl Rng) -> Minibatch {
        let ids: Vec<usize> = (0..config.batch_x)
            .map(|_| self.train_ids[rng.random_range(0..self.train_ids.len())])
            .collect();
        let x = self.dataset.matrix(&ids);
        if !config.variant.uses_pairs() {
            return Minibatch {
                x,
                endpoints: Tensor::zeros(vec![0, self.dataset.x_dim]),
                pairs: Vec::new(),
            };
        }
        let mut ends = Vec::with_capacity(2 * config.batch_pairs);
        let mut pairs = Vec::with_capacity(config.batch_pairs);
        for k in 0..config.batch_pairs {
            let p = self.pairs[rng.random_range(0..self.pairs.len())];
            ends.push(p.i);
            ends.push(p.j);
            pairs.push(BatchPair {
                i: 2 * k,
                j: 2 * k + 1,
                y: p.y,
            });
        }
        Minibatch {
            x,
            endpoints: self.dataset.matrix(&ends),
            pairs,
        }
    }
}

/// Runs `config.steps` optimizer updates from a fresh initialization.
pub fn train(config: &TrainConfig, data: TrainData<'_>) -> Result<(ModelParams, TrainLog)> {
    let params = ModelParams::init(
        &config.net_spec(data.dataset.x_dim),
        &config.variant_spec(),
        config.seed,
    )?;
    train_from(config, data, params)
}

/// Like [`train`] but starting from the given parameters.
pub fn train_from(
    config: &TrainConfig,
    data: TrainData<'_>,
    mut params: ModelParams,
) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    data.validate(config.variant)?;
    if params.variant != config.variant {
        return Err(Error::UnsupportedVariant {
            found: params.variant.to_string(),
            reason: format!("parameters do not match the configured {}", config.variant),
        });
    }
    let variant = config.variant_spec();
    let mut batch_rng = rng_for(config.seed, "batches");
    let mut noise_rng = rng_for(config.seed, "reparam_noise");
    let mut optimizer = Optimizer::new(config.optimizer, config.lr);
    let mut log = TrainLog::default();
    let mut interval = Interval::new();
    let mut tape = Tape::new();
    let start = Instant::now();

    for step in 0..config.steps {
        let batch = data.sample(config, &mut batch_rng);
        tape.reset();
        let bound = params.bind(&mut tape, true);
        let graph = objective_on_tape(&mut tape, &bound, &batch, &variant, &mut noise_rng)?;
        let terms = graph.terms;
        if !terms.all_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "recon={} ordinal={} kl_z={} kl_w={} total={}",
                    terms.recon, terms.ordinal, terms.kl_z, terms.kl_w, terms.total
                ),
            });
        }
        if step == 0 {
            let mut first = Interval::new();
            first.add(&terms);
            log.records.push(first.record(0, 0.0));
        }
        tape.backward(graph.total)?;
        let grads = bound.grads(&tape);
        optimizer
            .step(&mut params.tensors_mut(), &grads)
            .map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
                other => other,
            })?;
        interval.add(&terms);
        let done = step + 1;
        if done % config.log_every == 0 || done == config.steps {
            let rec = interval.record(done, start.elapsed().as_secs_f64());
            log::debug!(
                "step {done}: total {:.4} recon {:.4} ordinal {:.4} kl_z {:.4} kl_w {:.4}",
                rec.total,
                rec.recon,
                rec.ordinal,
                rec.kl_z,
                rec.kl_w
            );
            log.records.push(rec);
            interval = Interval::new();
        }
    }
    Ok((params, log))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ROVAECKP";
const CHECKPOINT_VERSION: u32 = 1;

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Tanh => 0,
        Activation::Relu => 1,
    }
}

/// Binary checkpoint: magic, version, variant tag, network widths, then a
/// tensor table of `(name, shape, little-endian f64 values)`. The file is
/// written to a temporary sibling and renamed into place.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * params.num_params() + 4096);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(params.variant.tag());
    let s = &params.spec;
    for w in [s.x_dim, s.latent_dim, s.hidden, s.pair_hidden] {
        buf.extend_from_slice(&(w as u64).to_le_bytes());
    }
    buf.push(activation_tag(s.activation));
    let tensors = params.named_tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Reads a checkpoint. With `expected` set, a checkpoint of another variant is
/// rejected.
pub fn load_checkpoint(path: &Path, expected: Option<VariantKind>) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let tag = r.u8()?;
    let variant = VariantKind::from_tag(tag)
        .ok_or_else(|| Error::Checkpoint(format!("unknown variant tag {tag}")))?;
    if let Some(want) = expected {
        if want != variant {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {variant} model, expected {want}"
            )));
        }
    }
    let mut widths = [0usize; 4];
    for w in &mut widths {
        *w = r.u64()? as usize;
    }
    let activation = match r.u8()? {
        0 => Activation::Tanh,
        1 => Activation::Relu,
        other => return Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
    };
    let spec = NetSpec {
        x_dim: widths[0],
        latent_dim: widths[1],
        hidden: widths[2],
        pair_hidden: widths[3],
        activation,
    };
    let mut params = ModelParams::init(&spec, &VariantSpec::new(variant, spec.latent_dim), 0)
        .map_err(|e| Error::Checkpoint(format!("bad network header: {e}")))?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let count = r.u32()? as usize;
    if count != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            names.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for expected_name in &names {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != expected_name {
            return Err(Error::Checkpoint(format!(
                "expected tensor {expected_name}, found {name}"
            )));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        loaded.push(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the tensor table",
            bytes.len() - r.pos
        )));
    }
    for ((slot, t), name) in params.tensors_mut().into_iter().zip(loaded).zip(&names) {
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(params)
}
