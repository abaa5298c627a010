//! MLP encoder/decoder networks and Gaussian heads.
//!
//! Layout (widths are configurable through [`NetSpec`]):
//!
//! * instance trunk `x_dim -> hidden -> hidden`, shared by every encoder head;
//! * `u` head (1-d) and `v` head (`D`-d), each an affine `(mean, log_var)` pair;
//! * pair trunk `2*hidden -> pair_hidden` over the ordered concatenation of
//!   the two instance features, followed by the `w` head (ROVAE only);
//! * decoder `1+D -> hidden -> hidden -> x_dim` producing Bernoulli logits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{VariantKind, VariantSpec};
use crate::rng::{rng_for, standard_normal};

/// Lower/upper bound applied to every predicted `log σ²`.
pub const LOG_VAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::config(format!(
                "MLP widths must be positive: {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }
}

/// Widths of the networks, independent of the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSpec {
    pub x_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub pair_hidden: usize,
    pub activation: Activation,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            x_dim: 256,
            latent_dim: 4,
            hidden: 128,
            pair_hidden: 64,
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut weight = Tensor::zeros(vec![fan_in, fan_out]);
        for w in weight.data_mut() {
            *w = rng.random_range(-limit..limit);
        }
        Linear {
            weight,
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    fn constant(fan_in: usize, fan_out: usize, bias: f64) -> Self {
        Linear {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: Tensor::full(vec![fan_out], bias),
        }
    }

    fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    /// Whether the last layer is followed by the activation.
    pub activate_output: bool,
}

impl Mlp {
    pub fn new(spec: &MlpSpec, activate_output: bool) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(spec.seed, "mlp");
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Linear::glorot(w[0], w[1], &mut rng))
            .collect();
        Ok(Mlp {
            layers,
            activation: spec.activation,
            activate_output,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }
}

/// Affine maps producing `(μ, log σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub mean: Linear,
    pub log_var: Linear,
}

impl GaussianHead {
    fn glorot(fan_in: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        GaussianHead {
            mean: Linear::glorot(fan_in, dim, rng),
            log_var: Linear::glorot(fan_in, dim, rng),
        }
    }

    /// Zero weights with biases set to a fixed Gaussian, so the head initially
    /// outputs exactly `N(mean, var)` for every input.
    fn at_prior(fan_in: usize, dim: usize, mean: f64, var: f64) -> Self {
        GaussianHead {
            mean: Linear::constant(fan_in, dim, mean),
            log_var: Linear::constant(fan_in, dim, var.ln()),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.fan_out()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairEncoder {
    pub trunk: Mlp,
    pub head: GaussianHead,
}

/// Decoder parameters θ and encoder parameters φ.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub variant: VariantKind,
    pub spec: NetSpec,
    pub trunk: Mlp,
    pub u_head: GaussianHead,
    pub v_head: GaussianHead,
    pub pair: Option<PairEncoder>,
    pub decoder: Mlp,
}

impl ModelParams {
    /// Deterministic initialization: each sub-network draws from its own
    /// labelled stream of `seed`, so variants share identical trunk, heads and
    /// decoder for equal seeds.
    pub fn init(spec: &NetSpec, variant: &VariantSpec, seed: u64) -> Result<Self> {
        if spec.x_dim == 0 || spec.latent_dim == 0 || spec.hidden == 0 || spec.pair_hidden == 0 {
            return Err(Error::config(format!(
                "network widths must be positive: {spec:?}"
            )));
        }
        if variant.latent_dim != spec.latent_dim {
            return Err(Error::config(format!(
                "variant latent_dim {} differs from network latent_dim {}",
                variant.latent_dim, spec.latent_dim
            )));
        }
        let h = spec.hidden;
        let trunk = Mlp::new(
            &MlpSpec {
                layer_widths: vec![spec.x_dim, h, h],
                activation: spec.activation,
                seed: crate::rng::derive_seed(seed, "trunk"),
            },
            true,
        )?;
        let mut head_rng = rng_for(seed, "u_head");
        let u_head = GaussianHead::glorot(h, 1, &mut head_rng);
        let mut head_rng = rng_for(seed, "v_head");
        let v_head = GaussianHead::glorot(h, spec.latent_dim, &mut head_rng);
        let decoder = Mlp::new(
            &MlpSpec {
                layer_widths: vec![1 + spec.latent_dim, h, h, spec.x_dim],
                activation: spec.activation,
                seed: crate::rng::derive_seed(seed, "decoder"),
            },
            false,
        )?;
        let pair = if variant.kind == VariantKind::Rovae {
            let pair_trunk = Mlp::new(
                &MlpSpec {
                    layer_widths: vec![2 * h, spec.pair_hidden],
                    activation: spec.activation,
                    seed: crate::rng::derive_seed(seed, "pair_trunk"),
                },
                true,
            )?;
            Some(PairEncoder {
                trunk: pair_trunk,
                head: GaussianHead::at_prior(spec.pair_hidden, 1, variant.mu_w, variant.sigma2_w),
            })
        } else {
            None
        };
        Ok(ModelParams {
            variant: variant.kind,
            spec: spec.clone(),
            trunk,
            u_head,
            v_head,
            pair,
            decoder,
        })
    }

    /// Visits every parameter tensor in a fixed order with a stable name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        visit_mlp("trunk", &self.trunk, f);
        visit_head("u_head", &self.u_head, f);
        visit_head("v_head", &self.v_head, f);
        if let Some(pair) = &self.pair {
            visit_mlp("pair_trunk", &pair.trunk, f);
            visit_head("w_head", &pair.head, f);
        }
        visit_mlp("decoder", &self.decoder, f);
    }

    /// Mutable counterpart of [`ModelParams::visit`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        fn mlp<'a>(m: &'a mut Mlp, out: &mut Vec<&'a mut Tensor>) {
            for l in &mut m.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        fn head<'a>(h: &'a mut GaussianHead, out: &mut Vec<&'a mut Tensor>) {
            out.push(&mut h.mean.weight);
            out.push(&mut h.mean.bias);
            out.push(&mut h.log_var.weight);
            out.push(&mut h.log_var.bias);
        }
        mlp(&mut self.trunk, &mut out);
        head(&mut self.u_head, &mut out);
        head(&mut self.v_head, &mut out);
        if let Some(pair) = &mut self.pair {
            mlp(&mut pair.trunk, &mut out);
            head(&mut pair.head, &mut out);
        }
        mlp(&mut self.decoder, &mut out);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Records the parameters on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut all = Vec::new();
        let mut put = |t: &Tensor| {
            let v = if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            all.push(v);
            v
        };
        let mut bind_linear = |l: &Linear| BoundLinear {
            weight: put(&l.weight),
            bias: put(&l.bias),
        };
        let trunk = bind_mlp(&self.trunk, &mut bind_linear);
        let u_head = bind_head(&self.u_head, &mut bind_linear);
        let v_head = bind_head(&self.v_head, &mut bind_linear);
        let pair = self.pair.as_ref().map(|p| BoundPair {
            trunk: bind_mlp(&p.trunk, &mut bind_linear),
            head: bind_head(&p.head, &mut bind_linear),
        });
        let decoder = bind_mlp(&self.decoder, &mut bind_linear);
        BoundParams {
            x_dim: self.spec.x_dim,
            latent_dim: self.spec.latent_dim,
            trunk,
            u_head,
            v_head,
            pair,
            decoder,
            all,
        }
    }

    /// Posterior means of `u` and `v` for every row of `x`, without a gradient graph.
    pub fn encode_means(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        const CHUNK: usize = 512;
        let d = self.spec.latent_dim;
        let mut u = Vec::with_capacity(x.rows());
        let mut v = Vec::with_capacity(x.rows() * d);
        for start in (0..x.rows()).step_by(CHUNK) {
            let end = (start + CHUNK).min(x.rows());
            let chunk = Tensor::new(
                vec![end - start, x.cols()],
                x.data()[start * x.cols()..end * x.cols()].to_vec(),
            )?;
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let xv = tape.constant(chunk);
            let enc = encode_instance(&mut tape, &bound, xv)?;
            u.extend_from_slice(tape.value(enc.u_mean).data());
            v.extend_from_slice(tape.value(enc.v_mean).data());
        }
        Ok((u, Tensor::new(vec![x.rows(), d], v)?))
    }

    /// `(μ, log σ²)` of `q(w | first, second)` for row-aligned pairs.
    pub fn trust_posterior(&self, first: &Tensor, second: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.pair.is_none() {
            return Err(Error::UnsupportedVariant {
                found: self.variant.to_string(),
                reason: "only ROVAE has a trust posterior".into(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let a = tape.constant(first.clone());
        let b = tape.constant(second.clone());
        let (mean, log_var) = encode_pair(&mut tape, &bound, a, b)?;
        Ok((
            tape.value(mean).data().to_vec(),
            tape.value(log_var).data().to_vec(),
        ))
    }
}

fn visit_mlp<'a>(prefix: &str, m: &'a Mlp, f: &mut dyn FnMut(String, &'a Tensor)) {
    for (i, l) in m.layers.iter().enumerate() {
        f(format!("{prefix}.{i}.weight"), &l.weight);
        f(format!("{prefix}.{i}.bias"), &l.bias);
    }
}

fn visit_head<'a>(prefix: &str, h: &'a GaussianHead, f: &mut dyn FnMut(String, &'a Tensor)) {
    f(format!("{prefix}.mean.weight"), &h.mean.weight);
    f(format!("{prefix}.mean.bias"), &h.mean.bias);
    f(format!("{prefix}.log_var.weight"), &h.log_var.weight);
    f(format!("{prefix}.log_var.bias"), &h.log_var.bias);
}

fn bind_mlp(m: &Mlp, bind_linear: &mut impl FnMut(&Linear) -> BoundLinear) -> BoundMlp {
    BoundMlp {
        layers: m.layers.iter().map(bind_linear).collect(),
        activation: m.activation,
        activate_output: m.activate_output,
    }
}

fn bind_head(h: &GaussianHead, bind_linear: &mut impl FnMut(&Linear) -> BoundLinear) -> BoundHead {
    BoundHead {
        mean: bind_linear(&h.mean),
        log_var: bind_linear(&h.log_var),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.weight)?;
        tape.add(h, self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
    pub activation: Activation,
    pub activate_output: bool,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i < last || self.activate_output {
                x = match self.activation {
                    Activation::Tanh => tape.tanh(x),
                    Activation::Relu => tape.relu(x),
                };
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub mean: BoundLinear,
    pub log_var: BoundLinear,
}

impl BoundHead {
    /// `(μ, clamp(log σ², ±10))`.
    pub fn forward(&self, tape: &mut Tape, h: Var) -> Result<(Var, Var)> {
        let mean = self.mean.forward(tape, h)?;
        let raw = self.log_var.forward(tape, h)?;
        let log_var = tape.clamp(raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        Ok((mean, log_var))
    }
}

#[derive(Clone, Debug)]
pub struct BoundPair {
    pub trunk: BoundMlp,
    pub head: BoundHead,
}

/// Parameters recorded on a tape; `all` lists the leaves in
/// [`ModelParams::visit`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub x_dim: usize,
    pub latent_dim: usize,
    pub trunk: BoundMlp,
    pub u_head: BoundHead,
    pub v_head: BoundHead,
    pub pair: Option<BoundPair>,
    pub decoder: BoundMlp,
    pub all: Vec<Var>,
}

impl BoundParams {
    /// Gradients of every parameter in visit order (zeros where none arrived).
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.all
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()))
            })
            .collect()
    }
}

/// Output of the instance encoder.
#[derive(Clone, Copy, Debug)]
pub struct InstanceEncoding {
    pub features: Var,
    pub u_mean: Var,
    pub u_log_var: Var,
    pub v_mean: Var,
    pub v_log_var: Var,
}

fn check_cols(tape: &Tape, x: Var, want: usize, what: &'static str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != want {
        return Err(Error::shape(what, s, &[want]));
    }
    Ok(())
}

/// `q(u|x)` and `q(v|x)` parameters for a `[batch, x_dim]` input.
pub fn encode_instance(tape: &mut Tape, params: &BoundParams, x: Var) -> Result<InstanceEncoding> {
    check_cols(tape, x, params.x_dim, "encode_instance")?;
    let features = params.trunk.forward(tape, x)?;
    encode_from_features(tape, params, features)
}

/// Heads applied to precomputed trunk features.
pub fn encode_from_features(
    tape: &mut Tape,
    params: &BoundParams,
    features: Var,
) -> Result<InstanceEncoding> {
    let (u_mean, u_log_var) = params.u_head.forward(tape, features)?;
    let (v_mean, v_log_var) = params.v_head.forward(tape, features)?;
    Ok(InstanceEncoding {
        features,
        u_mean,
        u_log_var,
        v_mean,
        v_log_var,
    })
}

/// `q(w | x_i, x_j)`; the trunk features enter in the given order.
pub fn encode_pair(
    tape: &mut Tape,
    params: &BoundParams,
    x_i: Var,
    x_j: Var,
) -> Result<(Var, Var)> {
    if tape.shape(x_i) != tape.shape(x_j) {
        return Err(Error::shape(
            "encode_pair",
            tape.shape(x_i),
            tape.shape(x_j),
        ));
    }
    check_cols(tape, x_i, params.x_dim, "encode_pair")?;
    let h_i = params.trunk.forward(tape, x_i)?;
    let h_j = params.trunk.forward(tape, x_j)?;
    encode_pair_features(tape, params, h_i, h_j)
}

/// Pair head over already computed trunk features of both endpoints.
pub fn encode_pair_features(
    tape: &mut Tape,
    params: &BoundParams,
    h_i: Var,
    h_j: Var,
) -> Result<(Var, Var)> {
    let pair = params
        .pair
        .as_ref()
        .ok_or_else(|| Error::UnsupportedVariant {
            found: "model without pair encoder".into(),
            reason: "q(w|x_i,x_j) exists only for ROVAE".into(),
        })?;
    let joined = tape.concat(&[h_i, h_j])?;
    let h = pair.trunk.forward(tape, joined)?;
    pair.head.forward(tape, h)
}

/// Bernoulli logits of `p(x | u, v)`.
pub fn decode(tape: &mut Tape, params: &BoundParams, u: Var, v: Var) -> Result<Var> {
    let (su, sv) = (tape.shape(u), tape.shape(v));
    if su.len() != 2 || sv.len() != 2 || su[0] != sv[0] || su[1] != 1 || sv[1] != params.latent_dim
    {
        return Err(Error::shape("decode", su, sv));
    }
    let z = tape.concat(&[u, v])?;
    params.decoder.forward(tape, z)
}

/// `mean + exp(log_var / 2) * noise`.
pub fn reparam_sample(tape: &mut Tape, mean: Var, log_var: Var, noise: Tensor) -> Result<Var> {
    if tape.shape(mean) != tape.shape(log_var) || tape.shape(mean) != noise.shape() {
        return Err(Error::shape(
            "reparam_sample",
            tape.shape(mean),
            noise.shape(),
        ));
    }
    let half = tape.scale(log_var, 0.5);
    let std = tape.exp(half);
    let eps = tape.constant(noise);
    let scaled = tape.mul(std, eps)?;
    tape.add(mean, scaled)
}

/// Draws standard-normal noise shaped like `v` and reparameterizes.
pub fn sample_like(tape: &mut Tape, mean: Var, log_var: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let noise = standard_normal(rng, tape.shape(mean).to_vec());
    reparam_sample(tape, mean, log_var, noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VariantSpec;

    fn small_spec() -> NetSpec {
        NetSpec {
            x_dim: 6,
            latent_dim: 4,
            hidden: 5,
            pair_hidden: 3,
            activation: Activation::Tanh,
        }
    }

    fn input(rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|i| ((i * 37 % 11) as f64) / 11.0)
            .collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn init_is_pure_function_of_seed() {
        let spec = small_spec();
        let v = VariantSpec::rovae(4);
        let a = ModelParams::init(&spec, &v, 11).unwrap();
        let b = ModelParams::init(&spec, &v, 11).unwrap();
        let c = ModelParams::init(&spec, &v, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.num_params(), c.num_params());
    }

    #[test]
    fn variants_share_instance_networks() {
        let spec = small_spec();
        let ro = ModelParams::init(&spec, &VariantSpec::rovae(4), 3).unwrap();
        let beta = ModelParams::init(&spec, &VariantSpec::beta_vae(4), 3).unwrap();
        assert_eq!(ro.trunk, beta.trunk);
        assert_eq!(ro.u_head, beta.u_head);
        assert_eq!(ro.decoder, beta.decoder);
        assert!(beta.pair.is_none());
        assert!(ro.num_params() > beta.num_params());
    }

    #[test]
    fn zero_heads_give_standard_normal() {
        let spec = small_spec();
        let mut p = ModelParams::init(&spec, &VariantSpec::rovae(4), 1).unwrap();
        p.u_head = GaussianHead::at_prior(spec.hidden, 1, 0.0, 1.0);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, true);
        let x = tape.constant(input(8, spec.x_dim));
        let enc = encode_instance(&mut tape, &bound, x).unwrap();
        assert!(tape.value(enc.u_mean).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(enc.u_log_var).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(enc.u_mean), &[8, 1]);
        assert_eq!(tape.shape(enc.u_log_var), &[8, 1]);
        assert_eq!(tape.shape(enc.v_mean), &[8, 4]);
        assert_eq!(tape.shape(enc.v_log_var), &[8, 4]);
    }

    #[test]
    fn encoding_is_deterministic() {
        let spec = small_spec();
        let p = ModelParams::init(&spec, &VariantSpec::rovae(4), 1).unwrap();
        let x = input(5, spec.x_dim);
        assert_eq!(p.encode_means(&x).unwrap(), p.encode_means(&x).unwrap());
    }

    #[test]
    fn wrong_input_width_is_config_error() {
        let spec = small_spec();
        let p = ModelParams::init(&spec, &VariantSpec::rovae(4), 1).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, true);
        let x = tape.constant(input(2, spec.x_dim + 1));
        assert!(matches!(
            encode_instance(&mut tape, &bound, x),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn pair_head_starts_at_prior_and_is_order_sensitive() {
        let spec = small_spec();
        let mut p = ModelParams::init(&spec, &VariantSpec::rovae(4), 1).unwrap();
        let (a, b) = (input(16, spec.x_dim), input(16, spec.x_dim));
        let b = Tensor::new(b.shape().to_vec(), b.data().iter().rev().copied().collect()).unwrap();
        let (m, lv) = p.trust_posterior(&a, &b).unwrap();
        assert_eq!(m.len(), 16);
        assert!(m.iter().all(|&v| v == 10.0));
        assert!(lv.iter().all(|&v| v == 0.0));

        // Once the head has non-zero weights, swapping the endpoints matters.
        let head = &mut p.pair.as_mut().unwrap().head;
        for (k, w) in head.mean.weight.data_mut().iter_mut().enumerate() {
            *w = 0.3 * (k as f64 + 1.0);
        }
        let (ab, _) = p.trust_posterior(&a, &b).unwrap();
        let (ba, _) = p.trust_posterior(&b, &a).unwrap();
        assert_ne!(ab, ba);
    }

    #[test]
    fn pair_encoder_rejects_mismatched_shapes() {
        let spec = small_spec();
        let p = ModelParams::init(&spec, &VariantSpec::rovae(4), 1).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, true);
        let a = tape.constant(input(3, spec.x_dim));
        let b = tape.constant(input(4, spec.x_dim));
        assert!(encode_pair(&mut tape, &bound, a, b).is_err());
    }

    #[test]
    fn decode_shapes_and_zero_logits() {
        let spec = small_spec();
        let mut p = ModelParams::init(&spec, &VariantSpec::beta_vae(4), 1).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let u = tape.constant(Tensor::zeros(vec![8, 1]));
        let v = tape.constant(Tensor::zeros(vec![8, 4]));
        let logits = decode(&mut tape, &bound, u, v).unwrap();
        assert_eq!(tape.shape(logits), &[8, spec.x_dim]);
        let bad_v = tape.constant(Tensor::zeros(vec![7, 4]));
        assert!(decode(&mut tape, &bound, u, bad_v).is_err());

        for t in p
            .decoder
            .layers
            .last_mut()
            .map(|l| [&mut l.weight, &mut l.bias])
            .unwrap()
        {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let u = tape.constant(Tensor::zeros(vec![2, 1]));
        let v = tape.constant(Tensor::zeros(vec![2, 4]));
        let logits = decode(&mut tape, &bound, u, v).unwrap();
        let probs = tape.sigmoid(logits);
        assert!(tape.value(probs).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn reparam_with_zero_noise_is_mean() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap());
        let lv = tape.leaf(Tensor::new(vec![3, 1], vec![0.3, -1.0, 2.0]).unwrap());
        let z = reparam_sample(&mut tape, m, lv, Tensor::zeros(vec![3, 1])).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(m).data());
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(m).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn clamp_bounds_head_variance() {
        let spec = small_spec();
        let mut p = ModelParams::init(&spec, &VariantSpec::rovae(4), 1).unwrap();
        p.v_head.log_var.bias = Tensor::full(vec![4], 50.0);
        p.u_head.log_var.bias = Tensor::full(vec![1], -50.0);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let x = tape.constant(input(4, spec.x_dim));
        let enc = encode_instance(&mut tape, &bound, x).unwrap();
        for &lv in tape
            .value(enc.v_log_var)
            .data()
            .iter()
            .chain(tape.value(enc.u_log_var).data())
        {
            let sigma = (lv / 2.0).exp();
            assert!(sigma >= (-5.0f64).exp() && sigma <= 5.0f64.exp());
        }
    }
}
