//! Procedural datasets with a known factor of interest `t`, pairwise label
//! sampling and the two label-noise protocols (random flips and Gaussian
//! perturbation of the normalized factor).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::rng::{indexed_rng, rng_for};

/// Side length of the rot-bars images.
pub const ROTBARS_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Rotbars,
    Linear,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Rotbars => "rotbars",
            DatasetKind::Linear => "linear",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotbars" => Ok(DatasetKind::Rotbars),
            "linear" => Ok(DatasetKind::Linear),
            other => Err(Error::config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: usize,
    /// Factor of interest.
    pub t: f64,
    /// Distractor factors.
    pub nuisance: Vec<f64>,
    /// Pixel/feature values in `[0, 1]`.
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub seed: u64,
    pub x_dim: usize,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn generate(kind: DatasetKind, n: usize, x_dim: usize, seed: u64) -> Result<Self> {
        let instances = match kind {
            DatasetKind::Rotbars => {
                if x_dim != ROTBARS_SIDE * ROTBARS_SIDE {
                    return Err(Error::config(format!(
                        "rotbars images are {ROTBARS_SIDE}x{ROTBARS_SIDE}; x_dim must be {}",
                        ROTBARS_SIDE * ROTBARS_SIDE
                    )));
                }
                gen_rotbars(n, seed)
            }
            DatasetKind::Linear => gen_linear(n, x_dim, seed)?,
        };
        Ok(Dataset {
            kind,
            seed,
            x_dim,
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// `[ids.len(), x_dim]` matrix of the selected instances.
    pub fn matrix(&self, ids: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(ids.len() * self.x_dim);
        for &id in ids {
            data.extend_from_slice(&self.instances[id].x);
        }
        Tensor::new(vec![ids.len(), self.x_dim], data).expect("instance widths are uniform")
    }

    pub fn factors(&self, ids: &[usize]) -> Vec<f64> {
        ids.iter().map(|&id| self.instances[id].t).collect()
    }

    /// Writes the dataset as a text file: a header line followed by one line
    /// per instance `id t nuisance... x...`. Values use shortest round-trip
    /// formatting, so a reload is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let nuisance_dim = self.instances.first().map_or(0, |i| i.nuisance.len());
        writeln!(
            w,
            "# rovae-dataset v1 kind={} n={} x_dim={} seed={} nuisance_dim={}",
            self.kind,
            self.instances.len(),
            self.x_dim,
            self.seed,
            nuisance_dim
        )?;
        for inst in &self.instances {
            write!(w, "{} {}", inst.id, inst.t)?;
            for v in inst.nuisance.iter().chain(&inst.x) {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err("empty dataset file".into()))??;
        let fields: HashMap<&str, &str> = header
            .strip_prefix("# rovae-dataset v1 ")
            .ok_or_else(|| parse_err(format!("bad header {header:?}")))?
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| parse_err(format!("header lacks {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|e| parse_err(format!("header field {k}: {e}")))
        };
        let kind: DatasetKind = get("kind")?.parse()?;
        let n = num("n")? as usize;
        let x_dim = num("x_dim")? as usize;
        let seed = num("seed")?;
        let nuisance_dim = num("nuisance_dim")? as usize;
        let mut instances = Vec::with_capacity(n);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != 2 + nuisance_dim + x_dim {
                return Err(parse_err(format!(
                    "line {}: expected {} fields, found {}",
                    lineno + 2,
                    2 + nuisance_dim + x_dim,
                    vals.len()
                )));
            }
            let f = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|e| parse_err(format!("line {}: {e}", lineno + 2)))
            };
            let id = vals[0]
                .parse()
                .map_err(|e| parse_err(format!("line {}: {e}", lineno + 2)))?;
            let t = f(vals[1])?;
            let nuisance = vals[2..2 + nuisance_dim]
                .iter()
                .map(|s| f(s))
                .collect::<Result<_>>()?;
            let x = vals[2 + nuisance_dim..]
                .iter()
                .map(|s| f(s))
                .collect::<Result<_>>()?;
            instances.push(Instance { id, t, nuisance, x });
        }
        if instances.len() != n {
            return Err(parse_err(format!(
                "header says {n} instances, found {}",
                instances.len()
            )));
        }
        Ok(Dataset {
            kind,
            seed,
            x_dim,
            instances,
        })
    }
}

/// Renders a ray ("half bar") leaving the point `(8 + dx, 8 + dy)` at angle
/// `angle` (radians, counter-clockwise from the +column axis towards +row).
/// Pixel value is `clamp(thickness/2 + 0.5 - distance, 0, 1)`.
pub fn render_rotbar(angle: f64, dx: i32, dy: i32, thickness: f64) -> Vec<f64> {
    let side = ROTBARS_SIDE;
    let (cx, cy) = ((side / 2) as f64 + dx as f64, (side / 2) as f64 + dy as f64);
    let (dc, dr) = (angle.cos(), angle.sin());
    let mut img = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let (pc, pr) = (c as f64 - cx, r as f64 - cy);
            let along = pc * dc + pr * dr;
            let dist = if along >= 0.0 {
                (pc * dr - pr * dc).abs()
            } else {
                (pc * pc + pr * pr).sqrt()
            };
            img.push((thickness / 2.0 + 0.5 - dist).clamp(0.0, 1.0));
        }
    }
    img
}

/// 16x16 rot-bars: `t ~ U[0, π)` is the bar angle; the nuisance factors are
/// the center offsets `dx, dy ∈ {-2..2}` and thickness `τ ∈ {1, 2}`.
pub fn gen_rotbars(n: usize, seed: u64) -> Vec<Instance> {
    (0..n)
        .map(|id| {
            let mut rng = indexed_rng(seed, "rotbars", id as u64);
            let t = rng.random_range(0.0..std::f64::consts::PI);
            let dx = rng.random_range(-2..=2);
            let dy = rng.random_range(-2..=2);
            let thickness = rng.random_range(1..=2) as f64;
            Instance {
                id,
                t,
                nuisance: vec![dx as f64, dy as f64, thickness],
                x: render_rotbar(t, dx, dy, thickness),
            }
        })
        .collect()
}

/// `x = sigmoid(A [t, v1, v2] + b)` with `t, v1, v2 ~ U(0, 1)` and a fixed
/// seeded affine map.
pub fn gen_linear(n: usize, x_dim: usize, seed: u64) -> Result<Vec<Instance>> {
    if x_dim < 3 {
        return Err(Error::config(format!(
            "linear dataset needs x_dim >= 3, got {x_dim}"
        )));
    }
    let mut map_rng = rng_for(seed, "linear_map");
    let a: Vec<f64> = (0..x_dim * 3)
        .map(|_| StandardNormal.sample(&mut map_rng))
        .collect();
    let b: Vec<f64> = (0..x_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut map_rng);
            0.5 * z
        })
        .collect();
    Ok((0..n)
        .map(|id| {
            let mut rng = indexed_rng(seed, "linear", id as u64);
            let f = [
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            ];
            let x = (0..x_dim)
                .map(|d| {
                    let pre = b[d] + (0..3).map(|k| a[d * 3 + k] * f[k]).sum::<f64>();
                    sigmoid(pre)
                })
                .collect();
            Instance {
                id,
                t: f[0],
                nuisance: vec![f[1], f[2]],
                x,
            }
        })
        .collect())
}

/// Disjoint train/held-out ids. Stable for a given `(n, seed, fraction)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

pub fn split_ids(n: usize, held_out_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&held_out_fraction) {
        return Err(Error::config(format!(
            "held-out fraction must be in [0, 1), got {held_out_fraction}"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng_for(seed, "split"));
    let n_held = (n as f64 * held_out_fraction).round() as usize;
    let mut held_out = ids[..n_held].to_vec();
    let mut train = ids[n_held..].to_vec();
    held_out.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, held_out })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Flip,
    Gaussian,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::Flip => "flip",
            NoiseKind::Gaussian => "gaussian",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseKind::None),
            "flip" => Ok(NoiseKind::Flip),
            "gaussian" => Ok(NoiseKind::Gaussian),
            other => Err(Error::config(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// Label-noise protocol: `eta` is the flip probability, `sigma2` the variance
/// of the Gaussian perturbation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub eta: f64,
    pub sigma2: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            kind: NoiseKind::None,
            eta: 0.0,
            sigma2: 0.0,
        }
    }

    pub fn flip(eta: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Flip,
            eta,
            sigma2: 0.0,
        }
    }

    pub fn gaussian(sigma2: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Gaussian,
            eta: 0.0,
            sigma2,
        }
    }

    /// The single swept parameter of this protocol.
    pub fn level(&self) -> f64 {
        match self.kind {
            NoiseKind::None => 0.0,
            NoiseKind::Flip => self.eta,
            NoiseKind::Gaussian => self.sigma2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            NoiseKind::None => Ok(()),
            NoiseKind::Flip if (0.0..=0.5).contains(&self.eta) => Ok(()),
            NoiseKind::Flip => Err(Error::config(format!(
                "flip probability must be in [0, 0.5], got {}",
                self.eta
            ))),
            NoiseKind::Gaussian if self.sigma2 >= 0.0 && self.sigma2.is_finite() => Ok(()),
            NoiseKind::Gaussian => Err(Error::config(format!(
                "noise variance must be >= 0, got {}",
                self.sigma2
            ))),
        }
    }

    /// Corrupts `pairs` according to this protocol.
    pub fn apply(
        &self,
        instances: &[Instance],
        pairs: &[PairLabel],
        seed: u64,
    ) -> Result<Vec<PairLabel>> {
        self.validate()?;
        match self.kind {
            NoiseKind::None => Ok(pairs.to_vec()),
            NoiseKind::Flip => apply_flip_noise(pairs, self.eta, seed),
            NoiseKind::Gaussian => apply_gaussian_noise(instances, pairs, self.sigma2, seed),
        }
    }
}

/// Ordered comparison `(i, j)`; `y = 1` asserts `t_i > t_j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairLabel {
    pub i: usize,
    pub j: usize,
    pub y: bool,
    pub clean_y: bool,
    pub flipped: bool,
    pub noise_kind: NoiseKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub pairs: Vec<PairLabel>,
    /// Set when fewer than the requested number of distinct pairs exist.
    pub exhausted: bool,
}

/// Samples `m` distinct ordered pairs `(i, j)`, `i ≠ j`, uniformly among the
/// given instances, labelled by `y = [t_i > t_j]`. Pairs with tied factors are
/// rejected.
pub fn sample_pairs(instances: &[Instance], m: usize, seed: u64) -> Result<PairSample> {
    if instances.len() < 2 {
        return Err(Error::config("pair sampling needs at least two instances"));
    }
    if m == 0 {
        return Err(Error::config("pair budget must be at least 1"));
    }
    let n = instances.len();
    let label = |a: usize, b: usize| PairLabel {
        i: instances[a].id,
        j: instances[b].id,
        y: instances[a].t > instances[b].t,
        clean_y: instances[a].t > instances[b].t,
        flipped: false,
        noise_kind: NoiseKind::None,
    };
    let total = n * (n - 1);
    if m >= total / 2 {
        // Enumerate the (small) pair space directly to decide exhaustion.
        let all: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (0..n).map(move |b| (a, b)))
            .filter(|&(a, b)| a != b && instances[a].t != instances[b].t)
            .collect();
        if all.len() <= m {
            let exhausted = all.len() < m;
            return Ok(PairSample {
                pairs: all.into_iter().map(|(a, b)| label(a, b)).collect(),
                exhausted,
            });
        }
        let mut all = all;
        all.shuffle(&mut rng_for(seed, "pairs"));
        all.truncate(m);
        return Ok(PairSample {
            pairs: all.into_iter().map(|(a, b)| label(a, b)).collect(),
            exhausted: false,
        });
    }
    let mut rng = rng_for(seed, "pairs");
    let mut seen = HashSet::with_capacity(m);
    let mut pairs = Vec::with_capacity(m);
    while pairs.len() < m {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b || instances[a].t == instances[b].t || !seen.insert((a, b)) {
            continue;
        }
        pairs.push(label(a, b));
    }
    Ok(PairSample {
        pairs,
        exhausted: false,
    })
}

/// Complements each label independently with probability `eta ∈ [0, 0.5]`.
pub fn apply_flip_noise(pairs: &[PairLabel], eta: f64, seed: u64) -> Result<Vec<PairLabel>> {
    if !(0.0..=0.5).contains(&eta) {
        return Err(Error::config(format!(
            "flip probability must be in [0, 0.5], got {eta}"
        )));
    }
    if eta == 0.0 {
        return Ok(pairs.to_vec());
    }
    let mut rng = rng_for(seed, "flip");
    Ok(pairs
        .iter()
        .map(|p| {
            let mut q = *p;
            if rng.random::<f64>() < eta {
                q.y = !q.y;
            }
            q.flipped = q.y != q.clean_y;
            q.noise_kind = NoiseKind::Flip;
            q
        })
        .collect())
}

/// Relabels each pair by `[t̃_i + ε₁ > t̃_j + ε₂]` with `ε ~ N(0, sigma2)` and
/// `t̃` the factor standardized over `instances`.
pub fn apply_gaussian_noise(
    instances: &[Instance],
    pairs: &[PairLabel],
    sigma2: f64,
    seed: u64,
) -> Result<Vec<PairLabel>> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::config(format!(
            "noise variance must be >= 0, got {sigma2}"
        )));
    }
    let n = instances.len() as f64;
    let mean = instances.iter().map(|i| i.t).sum::<f64>() / n;
    let var = instances.iter().map(|i| (i.t - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Degenerate(
            "cannot standardize a factor with zero variance".into(),
        ));
    }
    let std = var.sqrt();
    let by_id: HashMap<usize, f64> = instances
        .iter()
        .map(|i| (i.id, (i.t - mean) / std))
        .collect();
    let lookup = |id: usize| {
        by_id
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Batching(format!("pair references unknown instance {id}")))
    };
    let normal = Normal::new(0.0, sigma2.sqrt()).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = rng_for(seed, "gaussian_noise");
    pairs
        .iter()
        .map(|p| {
            let (ti, tj) = (lookup(p.i)?, lookup(p.j)?);
            let e1: f64 = normal.sample(&mut rng);
            let e2: f64 = normal.sample(&mut rng);
            let y = ti + e1 > tj + e2;
            Ok(PairLabel {
                y,
                flipped: y != p.clean_y,
                noise_kind: NoiseKind::Gaussian,
                ..*p
            })
        })
        .collect()
}

pub fn save_pairs(pairs: &[PairLabel], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "i,j,y,clean_y,flipped,noise_kind")?;
    for p in pairs {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.i, p.j, p.y as u8, p.clean_y as u8, p.flipped as u8, p.noise_kind
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairLabel>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if k == 0 {
            if line.trim() != "i,j,y,clean_y,flipped,noise_kind" {
                return Err(parse_err(1, format!("unexpected header {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(parse_err(
                k + 1,
                format!("expected 6 fields, found {}", f.len()),
            ));
        }
        let idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| parse_err(k + 1, e.to_string()))
        };
        let bit = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(parse_err(k + 1, format!("expected 0/1, found {other:?}"))),
        };
        out.push(PairLabel {
            i: idx(f[0])?,
            j: idx(f[1])?,
            y: bit(f[2])?,
            clean_y: bit(f[3])?,
            flipped: bit(f[4])?,
            noise_kind: f[5].parse()?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn horizontal_bar_geometry() {
        let img = render_rotbar(0.0, 0, 0, 1.0);
        let px = |r: usize, c: usize| img[r * ROTBARS_SIDE + c];
        for c in 8..ROTBARS_SIDE {
            assert!(px(8, c) >= 0.5, "row 8 col {c} = {}", px(8, c));
        }
        for c in 0..ROTBARS_SIDE {
            assert_eq!(px(0, c), 0.0);
            assert_eq!(px(15, c), 0.0);
        }
    }

    #[test]
    fn quarter_turn_is_transpose() {
        for tau in [1.0, 2.0] {
            let a = render_rotbar(0.0, 0, 0, tau);
            let b = render_rotbar(PI / 2.0, 0, 0, tau);
            for r in 0..ROTBARS_SIDE {
                for c in 0..ROTBARS_SIDE {
                    let (x, y) = (a[r * ROTBARS_SIDE + c], b[c * ROTBARS_SIDE + r]);
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn angles_near_both_ends_differ() {
        // The ray is not 180°-symmetric, so t→0 and t→π give different images.
        let a = render_rotbar(0.01, 0, 0, 1.0);
        let b = render_rotbar(PI - 0.01, 0, 0, 1.0);
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 5.0);
    }

    #[test]
    fn rotbars_deterministic_and_bounded() {
        let a = gen_rotbars(20, 4);
        assert_eq!(a, gen_rotbars(20, 4));
        assert_ne!(a, gen_rotbars(20, 5));
        for inst in &a {
            assert!((0.0..PI).contains(&inst.t));
            assert!(inst.x.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(inst.x.len(), 256);
        }
        // Prefix-stable: instance k does not depend on n.
        assert_eq!(gen_rotbars(5, 4)[..], a[..5]);
    }

    #[test]
    fn linear_dataset_edges() {
        assert!(gen_linear(0, 8, 1).unwrap().is_empty());
        assert!(gen_linear(5, 2, 1).is_err());
        let d = gen_linear(50, 8, 1).unwrap();
        assert!(d.iter().flat_map(|i| &i.x).all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn exhausted_pair_space() {
        let inst = gen_linear(2, 4, 3).unwrap();
        let s = sample_pairs(&inst, 10, 1).unwrap();
        assert_eq!(s.pairs.len(), 2);
        assert!(s.exhausted);
        assert!(sample_pairs(&inst[..1], 1, 1).is_err());
    }

    #[test]
    fn pairs_are_distinct_and_labelled() {
        let inst = gen_rotbars(100, 2);
        let s = sample_pairs(&inst, 500, 9).unwrap();
        assert_eq!(s.pairs.len(), 500);
        assert!(!s.exhausted);
        let uniq: HashSet<(usize, usize)> = s.pairs.iter().map(|p| (p.i, p.j)).collect();
        assert_eq!(uniq.len(), 500);
        for p in &s.pairs {
            assert_ne!(p.i, p.j);
            assert_eq!(p.y, inst[p.i].t > inst[p.j].t);
            assert_eq!(p.y, p.clean_y);
        }
    }

    #[test]
    fn ties_are_never_sampled() {
        let mut inst = gen_linear(6, 4, 3).unwrap();
        for i in &mut inst[..3] {
            i.t = 0.5;
        }
        let s = sample_pairs(&inst, 100, 2).unwrap();
        assert!(s.exhausted);
        assert_eq!(s.pairs.len(), 6 * 5 - 3 * 2);
        assert!(s.pairs.iter().all(|p| inst[p.i].t != inst[p.j].t));
    }

    #[test]
    fn flip_noise_bookkeeping() {
        let inst = gen_rotbars(200, 1);
        let clean = sample_pairs(&inst, 1000, 1).unwrap().pairs;
        assert_eq!(apply_flip_noise(&clean, 0.0, 5).unwrap(), clean);
        let noisy = apply_flip_noise(&clean, 0.3, 5).unwrap();
        for (a, b) in clean.iter().zip(&noisy) {
            assert_eq!(a.clean_y, b.clean_y);
            assert_eq!(b.flipped, b.y != b.clean_y);
        }
        assert_eq!(apply_flip_noise(&noisy, 0.0, 6).unwrap(), noisy);
        assert!(apply_flip_noise(&clean, 0.6, 5).is_err());
        assert!(apply_flip_noise(&clean, -0.1, 5).is_err());
    }

    #[test]
    fn gaussian_noise_zero_variance_is_clean() {
        let inst = gen_rotbars(100, 1);
        let clean = sample_pairs(&inst, 300, 1).unwrap().pairs;
        let noisy = apply_gaussian_noise(&inst, &clean, 0.0, 3).unwrap();
        assert!(noisy.iter().all(|p| p.y == p.clean_y && !p.flipped));
        let mut flat = inst.clone();
        flat.iter_mut().for_each(|i| i.t = 1.0);
        assert!(matches!(
            apply_gaussian_noise(&flat, &clean, 1.0, 3),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn split_is_disjoint_and_stable() {
        let s = split_ids(1000, 0.2, 3).unwrap();
        assert_eq!(s, split_ids(1000, 0.2, 3).unwrap());
        assert_eq!(s.held_out.len(), 200);
        let train: HashSet<_> = s.train.iter().collect();
        assert!(s.held_out.iter().all(|id| !train.contains(id)));
        assert_eq!(train.len() + s.held_out.len(), 1000);
    }

    #[test]
    fn dataset_and_pairs_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(DatasetKind::Linear, 30, 5, 8).unwrap();
        let path = dir.path().join("data.txt");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);

        let pairs =
            apply_flip_noise(&sample_pairs(&ds.instances, 40, 1).unwrap().pairs, 0.4, 2).unwrap();
        let ppath = dir.path().join("pairs.csv");
        save_pairs(&pairs, &ppath).unwrap();
        assert_eq!(load_pairs(&ppath).unwrap(), pairs);
    }
}
